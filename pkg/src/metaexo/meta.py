"""MAML over task families and deployment-time few-step adaptation."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ParamSet
from .dataset import MetaDataset, Trajectory, split_support_query
from .errors import NaNDetected
from .tasknet import MetaConfig, TrajectoryBatch, batch_losses, init_params, make_batch

log = logging.getLogger(__name__)

LossFn = Callable[[ParamSet], "ad.Tensor"]


def inner_adapt(params: ParamSet, support_loss: LossFn, alpha: float, steps: int,
                second_order: bool = True) -> ParamSet:
    """``steps`` gradient steps ``theta <- theta - alpha * grad L_support(theta)``.

    With ``second_order`` the result stays linked to ``params`` through the
    gradients; otherwise gradients are treated as constants (first-order MAML).
    """
    return _adapt(params, support_loss, alpha, steps, second_order)[0]


def _adapt(params, support_loss, alpha, steps, second_order):
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    theta, first = params, None
    for step in range(steps):
        try:
            value = support_loss(theta)
            grads = ad.backward(value, theta, create_graph=second_order)
        except NaNDetected as exc:
            raise NaNDetected(f"inner adaptation step {step}: {exc}") from exc
        if first is None:
            first = value.item()
        theta = ad.sgd_step(theta, grads, alpha)
    return theta, first


@dataclass
class TaskLoss:
    """Support and query objectives of one task in a meta-batch."""

    support: LossFn
    query: LossFn


def meta_gradient(params: ParamSet, tasks: Sequence[TaskLoss], alpha: float, steps: int = 1,
                  second_order: bool = True, workers: int = 1):
    """Gradient of the summed post-adaptation query losses w.r.t. ``params``.

    Returns ``(grads, query_losses, support_losses)``. Per-task work may run
    on a thread pool; the reduction is always in task order.
    """
    def one(task: TaskLoss):
        adapted, support_value = _adapt(params, task.support, alpha, steps, second_order)
        q = task.query(adapted)
        g = ad.backward(q, params)
        return g, q.item(), support_value

    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, tasks))
    else:
        results = [one(t) for t in tasks]
    total = None
    for g, _, _ in results:
        total = g.map(lambda t: t.data.copy()) if total is None else total.zip_map(g, lambda a, b: a.data + b.data)
    return total, [r[1] for r in results], [r[2] for r in results]


@dataclass
class MetaState:
    params: ParamSet
    opt: AdamState = field(default_factory=AdamState)
    iteration: int = 0
    seed: int = 0
    history: list[float] = field(default_factory=list)
    support_history: list[float] = field(default_factory=list)


def meta_step(state: MetaState, tasks: Sequence[TaskLoss], alpha: float, gamma: float,
              second_order: bool = True, steps: int = 1, workers: int = 1) -> MetaState:
    """One outer Adam update of the initialization with rate ``gamma``."""
    if not tasks:
        raise ValueError("meta-batch is empty")
    grads, q_losses, s_losses = meta_gradient(state.params, tasks, alpha, steps, second_order, workers)
    opt, params = ad.adam_step(state.opt, state.params, grads, gamma)
    return MetaState(params, opt, state.iteration + 1, state.seed,
                     state.history + [float(np.mean(q_losses))],
                     state.support_history + [float(np.mean(s_losses))])


def batch_loss_fn(batch: TrajectoryBatch, cfg: MetaConfig, mode: str = "stochastic", seed=None) -> LossFn:
    def fn(params):
        return batch_losses(params, batch, cfg, mode=mode, seed=seed)[0]
    return fn


def sample_task_losses(meta: MetaDataset, cfg: MetaConfig, rng: np.random.Generator,
                       max_windows: int = 128) -> list[TaskLoss]:
    """Draw ``cfg.task_batch`` tasks (with replacement) and fresh support/query
    splits, with ``cfg.history_noise`` injected into the window histories."""
    picks = rng.integers(0, len(meta.tasks), size=cfg.task_batch)
    out = []
    for m in picks:
        task = meta.tasks[int(m)]
        support, query = split_support_query(task, cfg.support_fraction, seed=int(rng.integers(2**31)))
        sb = make_batch(support, cfg).subsample(max_windows, rng).perturbed(cfg.history_noise, rng)
        qb = make_batch(query, cfg).subsample(max_windows, rng).perturbed(cfg.history_noise, rng)
        s_seed, q_seed = (int(x) for x in rng.integers(2**31, size=2))
        out.append(TaskLoss(batch_loss_fn(sb, cfg, "stochastic", s_seed),
                            batch_loss_fn(qb, cfg, "stochastic", q_seed)))
    return out


def meta_train(cfg: MetaConfig, meta: MetaDataset, iterations: int, seed: int = 0, *,
               max_windows: int = 128, workers: int = 1, state: MetaState | None = None,
               callback: Callable[[MetaState], None] | None = None) -> MetaState:
    """Alternate inner adaptation and outer updates for ``iterations`` steps.

    Deterministic for a given seed; iteration ``i`` draws from a generator
    seeded with ``(seed, i)``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if len(meta.tasks) < 2:
        raise ValueError("meta-training needs at least two tasks")
    if state is None:
        state = MetaState(init_params(cfg, seed), seed=seed)
    for _ in range(iterations):
        rng = np.random.default_rng([seed, state.iteration])
        tasks = sample_task_losses(meta, cfg, rng, max_windows)
        state = meta_step(state, tasks, cfg.alpha, cfg.gamma, cfg.second_order,
                          cfg.inner_steps_train, workers)
        if callback is not None:
            callback(state)
    return state


def smoothed(history: Sequence[float], window: int = 50) -> np.ndarray:
    h = np.asarray(history, dtype=np.float64)
    window = max(1, min(window, h.size))
    return np.convolve(h, np.ones(window) / window, mode="valid")


def write_training_log(path, state: MetaState):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "mean_query_loss", "mean_support_loss"])
        for i, (q, s) in enumerate(zip(state.history, state.support_history), start=1):
            w.writerow([i, repr(q), repr(s)])


# ---------------------------------------------------------------------------
# deployment


@dataclass
class AdaptationReport:
    pre_loss: float
    losses: list[float]
    steps: int
    params: ParamSet
    query_pre: float | None = None
    query_post: float | None = None

    def to_dict(self, config: dict | None = None) -> dict:
        out = {"pre_loss": self.pre_loss, "losses": list(self.losses), "steps": self.steps}
        if self.query_pre is not None:
            out["query_pre"] = self.query_pre
            out["query_post"] = self.query_post
        if config is not None:
            out["config"] = config
        return out

    def write_json(self, path, config: dict | None = None):
        Path(path).write_text(json.dumps(self.to_dict(config), indent=1, sort_keys=True) + "\n")


def query_mse(params: ParamSet, trajs: Sequence[Trajectory], cfg: MetaConfig) -> float:
    """Deterministic-latent reconstruction MSE over trajectories."""
    with ad.no_grad():
        return batch_losses(params, make_batch(trajs, cfg, stride=1), cfg)[1].item()


def online_adapt(params: ParamSet, demo: Trajectory, cfg: MetaConfig, steps: int | None = None,
                 alpha: float | None = None, query: Sequence[Trajectory] | None = None) -> AdaptationReport:
    """First-order, full-batch gradient steps on the demonstration's total loss.

    ``losses[k]`` is the demo loss after step ``k+1``. When ``query`` is given,
    the reconstruction MSE on it before and after adaptation is also reported.
    """
    steps = cfg.inner_steps_deploy if steps is None else steps
    alpha = cfg.alpha if alpha is None else alpha
    batch = make_batch([demo], cfg, stride=1)
    loss = batch_loss_fn(batch, cfg, mode="deterministic")
    theta = params.detach()
    pre = loss(theta).item()
    losses = []
    for step in range(steps):
        try:
            grads = ad.backward(loss(theta), theta)
        except NaNDetected as exc:
            raise NaNDetected(f"adaptation step {step}: {exc}") from exc
        theta = ad.sgd_step(theta, grads, alpha).detach()
        losses.append(loss(theta).item())
    report = AdaptationReport(pre, losses, steps, theta)
    if query:
        report.query_pre = query_mse(params, query, cfg)
        report.query_post = query_mse(theta, query, cfg)
    return report
