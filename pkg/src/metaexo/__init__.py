"""metaexo: meta-imitation learning toolkit for a single-joint elbow exoskeleton.

Subpackages
-----------
kinematics  skeleton trees, rotation transfer, forward/inverse kinematics
dataset     elbow trajectories, temporal windows, synthetic task families
autodiff    reverse-mode automatic differentiation (second order capable)
tasknet     task encoder + dilated-convolution next-step predictor
meta        MAML training and deployment-time adaptation
simcontrol  1-DOF plant, PD + gravity compensation, stability checks
cli         command-line workflow (``metaexo`` entry point)
"""

__version__ = "0.1.0"
