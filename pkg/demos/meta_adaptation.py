"""
Learning to adapt from one demonstration
========================================

A predictor is meta-trained on a family of synthetic elbow tasks so that a
handful of gradient steps on a single new demonstration are enough to fit an
unseen task. A briefly trained model is compared with a random initialization
that receives the same adaptation budget.
"""

import time

import numpy as np

from metaexo import meta as mt
from metaexo import tasknet as tn
from metaexo.dataset import synth_meta_dataset

cfg = tn.MetaConfig()
train = synth_meta_dataset(8, 8, seed=0)
held = synth_meta_dataset(4, 8, seed=99, split="held", prefix="held")
print("training tasks:", [t.task_id for t in train.tasks])

# A short run; the acceptance suite and the demo config use 1000 iterations.
iterations = 150
t0 = time.perf_counter()
state = mt.meta_train(cfg, train, iterations, seed=0, max_windows=128)
print("meta-trained %d iterations in %.1f s" % (iterations, time.perf_counter() - t0))
curve = mt.smoothed(state.history, 25)
print("smoothed query loss: %.4f -> %.4f" % (curve[0], curve[-1]))

# Deployment: 5 first-order steps on the first trajectory of each held task,
# scored on that task's remaining trajectories.
baseline = tn.init_params(cfg, 12345)
for task in held.tasks:
    demo, query = task.trajectories[0], task.trajectories[1:]
    ours = mt.online_adapt(state.params, demo, cfg, query=query)
    rand = mt.online_adapt(baseline, demo, cfg, query=query)
    print("%-18s meta %.5f  random %.5f  (demo loss %.4f -> %.4f)"
          % (task.task_id, ours.query_post, rand.query_post, ours.pre_loss, ours.losses[-1]))

# The adapted model also yields a reference for the exoskeleton: the first
# window of the target followed by the network's own rollout.
task = held.tasks[0]
adapted = mt.online_adapt(state.params, task.trajectories[0], cfg).params
ref = tn.task_reference(adapted, task.trajectories[0], task.trajectories[1], cfg)
err = ref.angles - task.trajectories[1].angles
print("rollout vs. recorded target: max |err| %.3f rad over %.1f s" % (np.abs(err).max(), (len(ref) - 1) * ref.dt))
