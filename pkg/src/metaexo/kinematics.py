"""Skeleton trees, rotation transfer between skeletons, and hinge-chain IK.

Positions are in meters, angles in radians. Rotations are plain 3x3 numpy
arrays; skeleton frames store one row per tree node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateBone, InvalidSkeleton, NonConvergence, TooShort, TopologyMismatch

EPS_LEN = 1e-9
UNIT_TOL = 1e-9


# ---------------------------------------------------------------------------
# rotations


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rotation matrix for ``angle`` radians about the unit vector ``axis``."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = _skew(k)
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _skew(k: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=np.float64)
    return (R.shape == (3, 3)
            and np.max(np.abs(R.T @ R - np.eye(3))) <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol)


def bone_vector(parent_pos, child_pos, eps: float = EPS_LEN) -> np.ndarray:
    """Unit vector pointing from ``parent_pos`` to ``child_pos``."""
    d = np.asarray(child_pos, dtype=np.float64) - np.asarray(parent_pos, dtype=np.float64)
    n = np.linalg.norm(d)
    if not n > eps:
        raise DegenerateBone(f"bone endpoints coincide (|child - parent| = {n:.3g} m)")
    return d / n


def _orthogonal_unit(v: np.ndarray) -> np.ndarray:
    # cross with the basis axis along v's smallest component
    e = np.zeros(3)
    e[int(np.argmin(np.abs(v)))] = 1.0
    u = np.cross(v, e)
    return u / np.linalg.norm(u)


def rodrigues_align(v, b) -> np.ndarray:
    """Minimal rotation taking unit vector ``v`` onto unit vector ``b``.

    The axis is ``v x b``; for antiparallel inputs a deterministic axis
    orthogonal to ``v`` is used and the rotation is by pi.
    """
    v = np.asarray(v, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = np.cross(v, b)
    c = float(np.dot(v, b))
    s = np.linalg.norm(w)
    if c > -0.5:
        # R = I + [w]x + [w]x^2 / (1 + c), stable away from the antipode
        wx = _skew(w)
        return np.eye(3) + wx + (wx @ wx) / (1.0 + c)
    if s < 1e-12:
        k = _orthogonal_unit(v)
        return 2.0 * np.outer(k, k) - np.eye(3)
    # obtuse case: a pi flip about the (re-orthogonalized) axis, then the
    # remaining acute alignment about the same axis
    k = w / s
    k = k - np.dot(k, v) * v
    k = k / np.linalg.norm(k)
    flip = 2.0 * np.outer(k, k) - np.eye(3)
    return rodrigues_align(flip @ v, b) @ flip


def frame_transform(R_s, Q) -> np.ndarray:
    """Express a source-frame rotation in the target frame: ``Q R_s Q^T``."""
    Q = np.asarray(Q, dtype=np.float64)
    return Q @ np.asarray(R_s, dtype=np.float64) @ Q.T


# ---------------------------------------------------------------------------
# skeleton trees


@dataclass(frozen=True)
class KinematicTree:
    """Rest-pose skeleton. ``rest_dirs``/``lengths`` are indexed by node;
    the root row of each is unused (NaN / 0)."""

    names: tuple[str, ...]
    parents: tuple[int, ...]
    rest_dirs: np.ndarray
    lengths: np.ndarray
    order: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.parents)
        if len(self.names) != n:
            raise InvalidSkeleton(f"names has {len(self.names)} entries for {n} nodes")
        roots = [i for i, p in enumerate(self.parents) if p < 0]
        if len(roots) != 1:
            raise InvalidSkeleton(f"tree needs exactly one root, found {len(roots)}")
        if any(p >= n for p in self.parents):
            raise InvalidSkeleton("parent index out of range")
        order, placed = [roots[0]], {roots[0]}
        children = {i: [] for i in range(n)}
        for i, p in enumerate(self.parents):
            if p >= 0:
                children[p].append(i)
        frontier = [roots[0]]
        while frontier:
            node = frontier.pop(0)
            for c in children[node]:
                order.append(c)
                placed.add(c)
                frontier.append(c)
        if len(placed) != n:
            raise InvalidSkeleton("parent indices contain a cycle")
        dirs = np.asarray(self.rest_dirs, dtype=np.float64)
        lengths = np.asarray(self.lengths, dtype=np.float64)
        if dirs.shape != (n, 3) or lengths.shape != (n,):
            raise InvalidSkeleton(f"rest_dirs/lengths shapes {dirs.shape}/{lengths.shape} for {n} nodes")
        for i in self.bones:
            if abs(np.linalg.norm(dirs[i]) - 1.0) > UNIT_TOL:
                raise InvalidSkeleton(f"rest direction of {self.names[i]!r} is not unit length")
            if not lengths[i] > 0:
                raise InvalidSkeleton(f"bone length of {self.names[i]!r} must be positive")
        dirs.setflags(write=False)
        lengths.setflags(write=False)
        object.__setattr__(self, "rest_dirs", dirs)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "order", tuple(order))

    @classmethod
    def from_bones(cls, names, parents, bone_dirs, bone_lengths) -> "KinematicTree":
        """Build from per-bone arrays listed for non-root nodes in node order."""
        parents = tuple(int(p) for p in parents)
        n = len(parents)
        bone_dirs = np.asarray(bone_dirs, dtype=np.float64).reshape(-1, 3)
        bone_lengths = np.asarray(bone_lengths, dtype=np.float64).reshape(-1)
        bones = [i for i, p in enumerate(parents) if p >= 0]
        if len(bone_dirs) != len(bones) or len(bone_lengths) != len(bones):
            raise InvalidSkeleton(f"expected {len(bones)} rest_dirs/lengths, got "
                                  f"{len(bone_dirs)}/{len(bone_lengths)}")
        dirs = np.full((n, 3), np.nan)
        lengths = np.zeros(n)
        dirs[bones] = bone_dirs
        lengths[bones] = bone_lengths
        return cls(tuple(names), parents, dirs, lengths)

    @property
    def n_nodes(self) -> int:
        return len(self.parents)

    @property
    def root(self) -> int:
        return self.parents.index(-1) if -1 in self.parents else \
            next(i for i, p in enumerate(self.parents) if p < 0)

    @property
    def bones(self) -> list[int]:
        """Non-root node indices in node order."""
        return [i for i, p in enumerate(self.parents) if p >= 0]

    def rest_positions(self, root_pos=(0.0, 0.0, 0.0)) -> np.ndarray:
        return forward_kinematics(self, [np.eye(3)] * len(self.bones), root_pos).positions

    def scaled(self, factor: float) -> "KinematicTree":
        return KinematicTree(self.names, self.parents, self.rest_dirs.copy(), self.lengths * factor)


@dataclass(frozen=True)
class SkeletonFrame:
    positions: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise InvalidSkeleton(f"positions must be (N, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise InvalidSkeleton("positions must be finite")
        object.__setattr__(self, "positions", pos)


def _check_frame(frame: SkeletonFrame, tree: KinematicTree):
    if frame.positions.shape[0] != tree.n_nodes:
        raise InvalidSkeleton(f"frame has {frame.positions.shape[0]} positions, tree has {tree.n_nodes} nodes")


def source_rotations(frame: SkeletonFrame, tree: KinematicTree) -> list[np.ndarray]:
    """Per-bone rotation carrying the rest direction onto the observed bone."""
    _check_frame(frame, tree)
    P = frame.positions
    return [rodrigues_align(tree.rest_dirs[i], bone_vector(P[tree.parents[i]], P[i]))
            for i in tree.bones]


def forward_kinematics(tree: KinematicTree, rotations: Sequence, root_pos) -> SkeletonFrame:
    """Place each node at parent + R_i * l_i * v_i, root to leaves."""
    bones = tree.bones
    if len(rotations) != len(bones):
        raise InvalidSkeleton(f"need {len(bones)} rotations, got {len(rotations)}")
    R = dict(zip(bones, rotations))
    P = np.zeros((tree.n_nodes, 3))
    P[tree.root] = np.asarray(root_pos, dtype=np.float64)
    for i in tree.order[1:]:
        P[i] = P[tree.parents[i]] + np.asarray(R[i]) @ (tree.lengths[i] * tree.rest_dirs[i])
    return SkeletonFrame(P)


def retarget(source_frame: SkeletonFrame, source_tree: KinematicTree, target_tree: KinematicTree,
             Q=None, target_root=(0.0, 0.0, 0.0)) -> SkeletonFrame:
    """Transfer a source pose onto the target skeleton's proportions."""
    if tuple(source_tree.parents) != tuple(target_tree.parents):
        raise TopologyMismatch("source and target skeletons have different parent arrays")
    Q = np.eye(3) if Q is None else np.asarray(Q, dtype=np.float64)
    rots = [frame_transform(R, Q) for R in source_rotations(source_frame, source_tree)]
    out = forward_kinematics(target_tree, rots, target_root)
    return SkeletonFrame(out.positions, source_frame.timestamp)


# ---------------------------------------------------------------------------
# human hinge model and inverse kinematics

ARM_DOFS = ("shoulder_flex", "shoulder_abd", "shoulder_rot", "elbow_flex")


@dataclass(frozen=True)
class ArmSpec:
    side: str
    shoulder_offset: tuple[float, float, float]
    upper_arm: float = 0.30
    forearm: float = 0.25
    limits: tuple[tuple[float, float], ...] = (
        (-1.0, 3.1), (-1.6, 1.6), (-1.6, 1.6), (0.0, 2.6))


@dataclass(frozen=True)
class HumanModel:
    """Upper-body chain: fixed torso root, per arm three shoulder hinges about
    x, y, z (applied in that order) and one elbow flexion hinge about the
    upper-arm x axis. The arm hangs along -z at q = 0."""

    arms: tuple[ArmSpec, ...] = (
        ArmSpec("r", (-0.18, 0.0, 0.0)),
        ArmSpec("l", (0.18, 0.0, 0.0)),
    )
    root_pos: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for arm in self.arms:
            if len(arm.limits) != len(ARM_DOFS):
                raise InvalidSkeleton(f"arm {arm.side!r} declares {len(arm.limits)} limits")
            for lo, hi in arm.limits:
                if not lo < hi:
                    raise InvalidSkeleton(f"arm {arm.side!r} has unordered limits ({lo}, {hi})")

    @property
    def n_dof(self) -> int:
        return len(ARM_DOFS) * len(self.arms)

    @property
    def dof_names(self) -> list[str]:
        return [f"{a.side}_{d}" for a in self.arms for d in ARM_DOFS]

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for a in self.arms for lo, _ in a.limits])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for a in self.arms for _, hi in a.limits])

    def elbow_index(self, side: str = "r") -> int:
        for k, arm in enumerate(self.arms):
            if arm.side == side:
                return k * len(ARM_DOFS) + 3
        raise KeyError(f"no arm {side!r}")

    @property
    def names(self) -> tuple[str, ...]:
        out = ["torso"]
        for a in self.arms:
            out += [f"{a.side}_shoulder", f"{a.side}_elbow", f"{a.side}_wrist"]
        return tuple(out)

    def tree(self) -> KinematicTree:
        """Rest-pose tree matching this model's geometry."""
        parents, dirs, lengths = [-1], [], []
        for a in self.arms:
            base = len(parents)
            off = np.asarray(a.shoulder_offset, dtype=np.float64)
            parents += [0, base, base + 1]
            dirs += [off / np.linalg.norm(off), (0.0, 0.0, -1.0), (0.0, 0.0, -1.0)]
            lengths += [np.linalg.norm(off), a.upper_arm, a.forearm]
        return KinematicTree.from_bones(self.names, parents, dirs, lengths)

    def _arm_kinematics(self, arm: ArmSpec, q: np.ndarray):
        s = np.asarray(self.root_pos, dtype=np.float64) + np.asarray(arm.shoulder_offset)
        R1 = rot_x(q[0])
        R2 = R1 @ rot_y(q[1])
        R3 = R2 @ rot_z(q[2])
        elbow = s + R3 @ np.array([0.0, 0.0, -arm.upper_arm])
        wrist = elbow + R3 @ rot_x(q[3]) @ np.array([0.0, 0.0, -arm.forearm])
        axes = (np.array([1.0, 0.0, 0.0]), R1[:, 1], R2[:, 2], R3[:, 0])
        return s, elbow, wrist, axes

    def fk(self, q) -> np.ndarray:
        """Keypoint positions (one row per ``names`` entry) for joint vector ``q``."""
        q = np.asarray(q, dtype=np.float64)
        rows = [np.asarray(self.root_pos, dtype=np.float64)]
        for k, arm in enumerate(self.arms):
            s, e, w, _ = self._arm_kinematics(arm, q[4 * k:4 * k + 4])
            rows += [s, e, w]
        return np.array(rows)

    def jacobian(self, q) -> np.ndarray:
        """d(stacked keypoints)/dq, shape (3N, H)."""
        q = np.asarray(q, dtype=np.float64)
        J = np.zeros((3 * len(self.names), self.n_dof))
        for k, arm in enumerate(self.arms):
            s, e, w, axes = self._arm_kinematics(arm, q[4 * k:4 * k + 4])
            row_e, row_w = 3 * (1 + 3 * k + 1), 3 * (1 + 3 * k + 2)
            for j in range(3):
                J[row_e:row_e + 3, 4 * k + j] = np.cross(axes[j], e - s)
                J[row_w:row_w + 3, 4 * k + j] = np.cross(axes[j], w - s)
            J[row_w:row_w + 3, 4 * k + 3] = np.cross(axes[3], w - e)
        return J


class IKResult(NamedTuple):
    q: np.ndarray
    residual: float
    converged: bool
    iterations: int
    grad_norm: float


def _projected_gradient(g, q, lo, hi):
    g = g.copy()
    g[(q <= lo) & (g > 0)] = 0.0
    g[(q >= hi) & (g < 0)] = 0.0
    return g


def inverse_kinematics(model: HumanModel, targets: SkeletonFrame, q_init=None, *,
                       damping: float = 1e-6, max_iter: int = 200, tol: float = 1e-10,
                       strict: bool = False) -> IKResult:
    """Damped Gauss-Newton fit of joint angles to keypoint targets.

    Minimizes the summed squared keypoint distance with iterates clamped to
    the joint limits. A non-converged solve returns the best iterate with
    ``converged=False``; ``strict=True`` raises ``NonConvergence`` instead.
    """
    P = np.asarray(targets.positions if isinstance(targets, SkeletonFrame) else targets, dtype=np.float64)
    if P.shape != (len(model.names), 3):
        raise InvalidSkeleton(f"targets must be {(len(model.names), 3)}, got {P.shape}")
    lo, hi = model.lower, model.upper
    q = np.zeros(model.n_dof) if q_init is None else np.clip(np.asarray(q_init, dtype=np.float64), lo, hi)
    target = P.ravel()

    def objective(qv):
        r = model.fk(qv).ravel() - target
        return r, float(r @ r)

    r, f = objective(q)
    it, gnorm = 0, np.inf
    for it in range(max_iter + 1):
        J = model.jacobian(q)
        gnorm = float(np.linalg.norm(_projected_gradient(2.0 * J.T @ r, q, lo, hi)))
        if gnorm <= tol or it == max_iter:
            break
        A = J.T @ J + damping * np.eye(model.n_dof)
        step = np.linalg.solve(A, -J.T @ r)
        t = 1.0
        for _ in range(30):
            q_new = np.clip(q + t * step, lo, hi)
            r_new, f_new = objective(q_new)
            if f_new <= f:
                break
            t *= 0.5
        else:
            break
        if f_new == f and np.array_equal(q_new, q):
            break
        q, r, f = q_new, r_new, f_new
    result = IKResult(q, f, gnorm <= tol, it, gnorm)
    if strict and not result.converged:
        raise NonConvergence(f"IK stopped after {it} iterations with gradient norm {gnorm:.3g}", result)
    return result


def solve_sequence(model: HumanModel, frames: Sequence[SkeletonFrame], q_init=None, **kwargs):
    """Per-frame IK, each solve warm-started from the previous solution."""
    if len(frames) == 0:
        raise TooShort("no frames to solve")
    q = q_init
    results = []
    for frame in frames:
        res = inverse_kinematics(model, frame, q, **kwargs)
        results.append(res)
        q = res.q
    return results


# ---------------------------------------------------------------------------
# keypoint motion files


@dataclass(frozen=True)
class Motion:
    tree: KinematicTree
    frames: tuple[SkeletonFrame, ...]
    fps: float


def _field(doc, key, path):
    if key not in doc:
        raise InvalidSkeleton(f"{path}: missing field {key!r}")
    return doc[key]


def load_motion(path) -> Motion:
    """Parse and validate a keypoint motion JSON file."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidSkeleton(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON ({exc.msg})") from exc
    if not isinstance(doc, dict):
        raise InvalidSkeleton(f"{path}: top level must be an object")
    fps = _field(doc, "fps", path)
    if not isinstance(fps, (int, float)) or not fps > 0:
        raise InvalidSkeleton(f"{path}: field 'fps' must be a positive number")
    try:
        tree = KinematicTree.from_bones(_field(doc, "names", path), _field(doc, "parents", path),
                                        _field(doc, "rest_dirs", path), _field(doc, "lengths", path))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InvalidSkeleton):
            raise InvalidSkeleton(f"{path}: {exc}") from exc
        raise InvalidSkeleton(f"{path}: field 'rest_dirs'/'lengths' malformed: {exc}") from exc
    raw = _field(doc, "frames", path)
    if not isinstance(raw, list) or len(raw) == 0:
        raise TooShort(f"{path}: field 'frames' is empty")
    try:
        arr = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InvalidSkeleton(f"{path}: field 'frames' is not a numeric T x N x 3 array") from exc
    if arr.ndim != 3 or arr.shape[1:] != (tree.n_nodes, 3):
        raise InvalidSkeleton(f"{path}: field 'frames' has shape {arr.shape}, expected (T, {tree.n_nodes}, 3)")
    if not np.all(np.isfinite(arr)):
        raise InvalidSkeleton(f"{path}: field 'frames' contains non-finite values")
    frames = tuple(SkeletonFrame(p, k / fps) for k, p in enumerate(arr))
    return Motion(tree, frames, float(fps))


def save_motion(path, tree: KinematicTree, frames, fps: float):
    doc = {
        "fps": fps,
        "names": list(tree.names),
        "parents": list(tree.parents),
        "rest_dirs": tree.rest_dirs[tree.bones].tolist(),
        "lengths": tree.lengths[tree.bones].tolist(),
        "frames": [np.asarray(f.positions if isinstance(f, SkeletonFrame) else f).tolist() for f in frames],
    }
    Path(path).write_text(json.dumps(doc))
