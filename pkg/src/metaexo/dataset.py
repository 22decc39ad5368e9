"""Elbow-flexion trajectories, temporal windows, support/query splits and
synthetic task families."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadParams, TooFewTrajectories, TooShort, ZeroScale

ELBOW_LIMITS = (0.0, 2.6)
DEFAULT_DT = 0.01
DEFAULT_DELTA_T = 9


def wrap_angle(a):
    return (np.asarray(a, dtype=np.float64) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class Trajectory:
    angles: np.ndarray
    velocities: np.ndarray
    dt: float
    task_id: str = ""
    subject_id: str = ""

    def __post_init__(self):
        q = np.asarray(self.angles, dtype=np.float64).reshape(-1)
        v = np.asarray(self.velocities, dtype=np.float64).reshape(-1)
        if q.size < 2:
            raise TooShort(f"trajectory needs at least 2 samples, got {q.size}")
        if v.shape != q.shape:
            raise ValueError(f"angles {q.shape} and velocities {v.shape} differ in length")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v))):
            raise ValueError("trajectory values must be finite")
        if np.any(np.abs(q) > np.pi + 1e-12):
            raise ValueError("angles must lie in [-pi, pi]")
        q.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "angles", q)
        object.__setattr__(self, "velocities", v)
        object.__setattr__(self, "dt", float(self.dt))

    def __len__(self):
        return self.angles.size

    @property
    def samples(self) -> np.ndarray:
        """(L, 2) array of (angle, velocity) rows."""
        return np.stack([self.angles, self.velocities], axis=1)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt


def extract_trajectory(angles, dt: float, task_id: str = "", subject_id: str = "") -> Trajectory:
    """Trajectory from an angle series; velocities by central differences
    (one-sided at the ends), angles wrapped to [-pi, pi]."""
    q = np.asarray(angles, dtype=np.float64).reshape(-1)
    if q.size < 2:
        raise TooShort(f"need at least 2 angle samples, got {q.size}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    q = np.unwrap(q)
    v = np.gradient(q, dt)
    return Trajectory(wrap_angle(q), v, dt, task_id, subject_id)


@dataclass(frozen=True)
class TemporalWindow:
    history: np.ndarray  # (delta_t + 1, 2), oldest row first
    target: float


def window_arrays(traj: Trajectory, delta_t: int = DEFAULT_DELTA_T, stride: int = 1):
    """Vectorized windows: histories ``(n, delta_t+1, 2)`` and next-step targets ``(n,)``."""
    if delta_t < 0:
        raise ValueError("delta_t must be >= 0")
    L = len(traj)
    if L < delta_t + 2:
        raise TooShort(f"trajectory of length {L} yields no window for delta_t={delta_t}")
    ends = np.arange(delta_t, L - 1, stride)
    idx = ends[:, None] + np.arange(-delta_t, 1)[None, :]
    samples = traj.samples
    return samples[idx], traj.angles[ends + 1]


def make_windows(traj: Trajectory, delta_t: int = DEFAULT_DELTA_T) -> list[TemporalWindow]:
    hist, tgt = window_arrays(traj, delta_t)
    return [TemporalWindow(h, float(t)) for h, t in zip(hist, tgt)]


@dataclass(frozen=True)
class TaskDataset:
    task_id: str
    trajectories: tuple[Trajectory, ...]
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        if len(trajs) < 2:
            raise TooFewTrajectories(f"task {self.task_id!r} has {len(trajs)} trajectories; need >= 2")
        if len({t.dt for t in trajs}) != 1:
            raise ValueError(f"task {self.task_id!r} mixes sampling intervals")
        object.__setattr__(self, "trajectories", trajs)

    @property
    def dt(self) -> float:
        return self.trajectories[0].dt

    def __len__(self):
        return len(self.trajectories)


@dataclass(frozen=True)
class MetaDataset:
    tasks: tuple[TaskDataset, ...]

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ValueError("meta-dataset needs at least one task")
        ids = [t.task_id for t in tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("task ids must be unique")
        object.__setattr__(self, "tasks", tasks)

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, task_id: str) -> TaskDataset:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    def select(self, split: str) -> "MetaDataset":
        return MetaDataset(tuple(t for t in self.tasks if t.info.get("split") == split))


def split_support_query(task: TaskDataset, support_fraction: float = 0.5, seed=0):
    """Disjoint trajectory-level split; support size is floor(f*N) kept in [1, N-1]."""
    if not 0.0 < support_fraction < 1.0:
        raise ValueError(f"support_fraction must be in (0, 1), got {support_fraction}")
    n = len(task.trajectories)
    if n < 2:
        raise TooFewTrajectories(f"cannot split {n} trajectories")
    n_support = min(max(1, math.floor(support_fraction * n)), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    support = tuple(task.trajectories[i] for i in sorted(perm[:n_support]))
    query = tuple(task.trajectories[i] for i in sorted(perm[n_support:]))
    return support, query


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class Stats:
    mean: np.ndarray  # per channel (angle, velocity)
    scale: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        scale = np.asarray(self.scale, dtype=np.float64)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(scale))):
            raise ValueError("stats must be finite")
        if np.any(scale <= 0):
            raise ZeroScale(f"scale must be positive, got {scale}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)


def compute_stats(trajectories: Sequence[Trajectory]) -> Stats:
    """Per-channel mean and standard deviation; a zero deviation maps to 1."""
    samples = np.concatenate([t.samples for t in trajectories])
    std = samples.std(axis=0)
    return Stats(samples.mean(axis=0), np.where(std > 1e-12, std, 1.0))


def normalize(samples, stats: Stats) -> np.ndarray:
    """Affine map ``(x - mean) / scale`` per channel on (L, 2) samples or a Trajectory."""
    x = samples.samples if isinstance(samples, Trajectory) else np.asarray(samples, dtype=np.float64)
    return (x - stats.mean) / stats.scale


def denormalize(samples, stats: Stats) -> np.ndarray:
    return np.asarray(samples, dtype=np.float64) * stats.scale + stats.mean


# ---------------------------------------------------------------------------
# synthetic task families


def minimum_jerk(tau):
    tau = np.clip(tau, 0.0, 1.0)
    return tau ** 3 * (10.0 - 15.0 * tau + 6.0 * tau ** 2)


FAMILIES = ("reach", "lift_cycle", "gesture")


@dataclass(frozen=True)
class TaskSpec:
    """Nominal motion of one synthetic task.

    ``reach``: minimum-jerk flexion from ``base`` to ``base + amplitude``.
    ``lift_cycle``: ``cycles`` rectified-sine lifts of height ``amplitude``.
    ``gesture``: minimum-jerk moves through ``keyframes`` (fractions of
    ``amplitude`` above ``base``) with holds of ``hold`` seconds between them.
    """

    family: str
    amplitude: float = 1.0
    duration: float = 2.0
    base: float = 0.0
    cycles: int = 2
    keyframes: tuple[float, ...] = (0.6, 0.2, 1.0, 0.4)
    hold: float = 0.3
    task_id: str = ""


@dataclass(frozen=True)
class SubjectProfile:
    """Systematic per-user variation applied before random jitter."""

    subject_id: str
    amplitude_scale: float = 1.0
    speed_scale: float = 1.0


def default_subjects(n: int = 5, seed=0) -> list[SubjectProfile]:
    rng = np.random.default_rng(seed)
    return [SubjectProfile(f"s{k}", float(rng.uniform(0.92, 1.08)), float(rng.uniform(0.88, 1.12)))
            for k in range(n)]


def _check_spec(spec: TaskSpec):
    lo, hi = ELBOW_LIMITS
    if spec.family not in FAMILIES:
        raise BadParams(f"unknown family {spec.family!r}; expected one of {FAMILIES}")
    if not spec.amplitude > 0 or spec.base < lo or spec.base + spec.amplitude > hi:
        raise BadParams(f"amplitude {spec.amplitude} from base {spec.base} leaves the elbow range {ELBOW_LIMITS}")
    if not spec.duration > 0:
        raise BadParams("duration must be positive")
    if spec.family == "lift_cycle" and spec.cycles < 1:
        raise BadParams("lift_cycle needs at least one cycle")
    if spec.family == "gesture" and (not spec.keyframes or min(spec.keyframes) < 0 or max(spec.keyframes) > 1):
        raise BadParams("gesture keyframes must be fractions in [0, 1]")


def _profile(spec: TaskSpec, t: np.ndarray, amplitude: float, duration: float, phase: float) -> np.ndarray:
    if spec.family == "reach":
        return spec.base + amplitude * minimum_jerk((t - phase * duration) / duration)
    if spec.family == "lift_cycle":
        return spec.base + amplitude * np.abs(np.sin(np.pi * spec.cycles * t / duration + phase * np.pi))
    # gesture: hold at each keyframe, minimum-jerk moves in between
    levels = (0.0,) + tuple(spec.keyframes)
    n_moves = len(levels) - 1
    move = max(duration - spec.hold * n_moves, 0.2 * duration) / n_moves
    q = np.full_like(t, levels[0])
    start = phase * duration
    for a, b in zip(levels[:-1], levels[1:]):
        q = np.where(t >= start, a + (b - a) * minimum_jerk((t - start) / move), q)
        start += move + spec.hold
    return spec.base + amplitude * q


def synth_trajectory(spec: TaskSpec, rng: np.random.Generator, *, subject: SubjectProfile | None = None,
                     noise: float = 0.005, jitter: float = 1.0, dt: float = DEFAULT_DT) -> Trajectory:
    subject = subject or SubjectProfile("s0")
    amplitude = spec.amplitude * subject.amplitude_scale * (1.0 + jitter * rng.uniform(-0.10, 0.10))
    duration = spec.duration / subject.speed_scale * (1.0 + jitter * rng.uniform(-0.15, 0.15))
    phase = jitter * rng.uniform(0.0, 0.05)
    total = duration * (1.0 + (phase if spec.family != "lift_cycle" else 0.0))
    n = int(round(total / dt)) + 1
    t = np.arange(n) * dt
    q = _profile(spec, t, amplitude, duration, phase)
    if noise > 0:
        q = q + rng.normal(0.0, noise, size=n)
    q = np.clip(q, *ELBOW_LIMITS)
    return extract_trajectory(q, dt, spec.task_id, subject.subject_id)


def synth_task_family(family, params: dict | TaskSpec | None = None, n_traj: int = 10, seed=0, *,
                      noise: float = 0.005, jitter: float = 1.0, dt: float = DEFAULT_DT,
                      subjects: Sequence[SubjectProfile] | None = None) -> TaskDataset:
    """Generate ``n_traj`` jittered executions of one synthetic task.

    Trajectory ``j`` is drawn from its own generator seeded with ``(seed, j)``
    and performed by subject ``j mod len(subjects)``.
    """
    if isinstance(params, TaskSpec):
        spec = replace(params, family=family)
    else:
        spec = TaskSpec(family=family, **(params or {}))
    if not spec.task_id:
        spec = replace(spec, task_id=family)
    _check_spec(spec)
    if n_traj < 2:
        raise TooFewTrajectories(f"n_traj must be >= 2, got {n_traj}")
    subjects = list(subjects) if subjects else [SubjectProfile("s0")]
    trajs = []
    for j in range(n_traj):
        rng = np.random.default_rng([int(seed), j])
        trajs.append(synth_trajectory(spec, rng, subject=subjects[j % len(subjects)],
                                      noise=noise, jitter=jitter, dt=dt))
    info = {"family": spec.family, "amplitude": spec.amplitude, "duration": spec.duration,
            "base": spec.base}
    return TaskDataset(spec.task_id, tuple(trajs), info)


def random_task_spec(rng: np.random.Generator, family: str, task_id: str) -> TaskSpec:
    """A random nominal task of ``family`` inside the elbow range."""
    base = float(rng.uniform(0.05, 0.5))
    amplitude = float(rng.uniform(0.6, min(1.6, ELBOW_LIMITS[1] - base - 0.3)))
    if family == "reach":
        return TaskSpec("reach", amplitude, float(rng.uniform(1.2, 2.4)), base, task_id=task_id)
    if family == "lift_cycle":
        cycles = int(rng.integers(1, 4))
        return TaskSpec("lift_cycle", amplitude, float(rng.uniform(1.0, 1.4)) * cycles, base,
                        cycles=cycles, task_id=task_id)
    keys = tuple(float(x) for x in np.round(rng.uniform(0.0, 1.0, size=int(rng.integers(3, 5))), 3))
    return TaskSpec("gesture", amplitude, float(rng.uniform(2.0, 3.0)), base, keyframes=keys,
                    hold=float(rng.uniform(0.1, 0.3)), task_id=task_id)


def synth_meta_dataset(n_tasks: int, n_traj: int = 8, seed=0, *, split: str = "train",
                       prefix: str = "task", noise: float = 0.005,
                       subjects: Sequence[SubjectProfile] | None = None,
                       dt: float = DEFAULT_DT) -> MetaDataset:
    """``n_tasks`` random tasks cycling through the three families."""
    rng = np.random.default_rng([int(seed), 7919])
    tasks = []
    for m in range(n_tasks):
        family = FAMILIES[m % len(FAMILIES)]
        spec = random_task_spec(rng, family, f"{prefix}{m:02d}_{family}")
        task = synth_task_family(family, spec, n_traj, seed=int(seed) * 1000 + m,
                                 noise=noise, subjects=subjects, dt=dt)
        tasks.append(TaskDataset(task.task_id, task.trajectories, {**task.info, "split": split}))
    return MetaDataset(tuple(tasks))


# ---------------------------------------------------------------------------
# files: tasks/<task_id>/<idx>.csv + tasks/<task_id>/manifest.json + dataset.json


def write_trajectory_csv(path, traj: Trajectory):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "angle", "velocity"])
        for t, q, v in zip(traj.times, traj.angles, traj.velocities):
            w.writerow([repr(float(t)), repr(float(q)), repr(float(v))])


def read_trajectory_csv(path, task_id: str = "", subject_id: str = "", dt: float | None = None) -> Trajectory:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t", "angle", "velocity"]:
            raise ValueError(f"{path}:1: expected header t,angle,velocity, got {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(x) for x in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
    if len(rows) < 2:
        raise TooShort(f"{path}: trajectory needs at least 2 rows, got {len(rows)}")
    arr = np.array(rows)
    if dt is None:
        dt = float(np.round(arr[1, 0] - arr[0, 0], 12))
    return Trajectory(arr[:, 1], arr[:, 2], dt, task_id, subject_id)


def write_meta_dataset(root, meta: MetaDataset):
    root = Path(root)
    index = []
    for task in meta.tasks:
        tdir = root / "tasks" / task.task_id
        tdir.mkdir(parents=True, exist_ok=True)
        files = []
        for j, traj in enumerate(task.trajectories):
            name = f"{j}.csv"
            write_trajectory_csv(tdir / name, traj)
            files.append(name)
        manifest = {
            "task_id": task.task_id,
            "dt": task.dt,
            "files": files,
            "lengths": [len(t) for t in task.trajectories],
            "subjects": [t.subject_id for t in task.trajectories],
            "info": task.info,
        }
        (tdir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        index.append({"task_id": task.task_id, "split": task.info.get("split", "train")})
    (root / "dataset.json").write_text(json.dumps({"tasks": index}, indent=1) + "\n")


def read_task(task_dir) -> TaskDataset:
    task_dir = Path(task_dir)
    manifest = json.loads((task_dir / "manifest.json").read_text())
    subjects = manifest.get("subjects") or [""] * len(manifest["files"])
    trajs = tuple(read_trajectory_csv(task_dir / f, manifest["task_id"], s, dt=manifest["dt"])
                  for f, s in zip(manifest["files"], subjects))
    return TaskDataset(manifest["task_id"], trajs, dict(manifest.get("info", {})))


def read_meta_dataset(root, split: str | None = None) -> MetaDataset:
    root = Path(root)
    index = json.loads((root / "dataset.json").read_text())
    tasks = []
    for entry in index["tasks"]:
        if split is not None and entry.get("split") != split:
            continue
        task = read_task(root / "tasks" / entry["task_id"])
        tasks.append(TaskDataset(task.task_id, task.trajectories, {**task.info, "split": entry.get("split")}))
    return MetaDataset(tuple(tasks))
