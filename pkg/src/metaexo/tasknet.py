"""Task-conditioned next-step elbow-angle predictor.

A trajectory encoder maps a whole demonstration to a Gaussian latent; a
two-layer dilated causal convolution stack with residual connections turns
the recent (angle, velocity) history into a feature vector, which is joined
with the latent and passed through a feed-forward head.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .dataset import ELBOW_LIMITS, TemporalWindow, Trajectory, window_arrays
from .errors import ShapeMismatch, TooShort

SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class MetaConfig:
    delta_t: int = 9
    latent_dim: int = 128
    channels: tuple[int, int] = (32, 32)
    kernel_size: int = 3
    dilations: tuple[int, int] = (1, 2)
    encoder_hidden: int = 128
    head_hidden: int = 64
    encoder_resample_len: int = 64
    beta: float = 1e-3
    alpha: float = 0.01
    gamma: float = 1e-3
    inner_steps_train: int = 1
    inner_steps_deploy: int = 5
    task_batch: int = 4
    support_fraction: float = 0.5
    second_order: bool = True
    window_stride: int = 1
    velocity_scale: float = 0.1
    residual_output: bool = True
    history_noise: tuple[float, float] = (0.02, 1.0)

    def __post_init__(self):
        ints = ("delta_t", "latent_dim", "kernel_size", "encoder_hidden", "head_hidden",
                "encoder_resample_len", "inner_steps_train", "task_batch", "window_stride")
        for name in ints:
            if int(getattr(self, name)) < 1 and not (name == "delta_t" and self.delta_t == 0):
                raise ValueError(f"{name} must be positive")
        if self.inner_steps_deploy < 0:
            raise ValueError("inner_steps_deploy must be >= 0")
        if len(self.channels) != 2 or len(self.dilations) != 2:
            raise ValueError("the predictor has exactly two convolution layers")
        if min(self.dilations) < 1 or min(self.channels) < 1:
            raise ValueError("channels and dilations must be positive")
        if self.channels[0] != self.channels[1]:
            raise ValueError("the second residual connection needs equal channel widths")
        if len(self.history_noise) != 2 or min(self.history_noise) < 0:
            raise ValueError("history_noise is a pair of non-negative (angle, velocity) std devs")
        if not self.velocity_scale > 0:
            raise ValueError("velocity_scale must be positive")
        for name in ("beta", "alpha", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def window_len(self) -> int:
        return self.delta_t + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["dilations"] = list(self.dilations)
        d["history_noise"] = list(self.history_noise)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetaConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        for k in ("channels", "dilations", "history_noise"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


@dataclass(frozen=True)
class LatentDistribution:
    mu: Tensor      # (D,) or (n, D)
    sigma: Tensor


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: MetaConfig) -> dict[str, tuple[int, ...]]:
    c1, c2 = cfg.channels
    enc_in = 2 * cfg.encoder_resample_len
    head_in = c2 * cfg.window_len + cfg.latent_dim
    return {
        "enc.w1": (enc_in, cfg.encoder_hidden),
        "enc.b1": (cfg.encoder_hidden,),
        "enc.w_mu": (cfg.encoder_hidden, cfg.latent_dim),
        "enc.b_mu": (cfg.latent_dim,),
        "enc.w_sigma": (cfg.encoder_hidden, cfg.latent_dim),
        "enc.b_sigma": (cfg.latent_dim,),
        "conv1.w": (c1, 2, cfg.kernel_size),
        "conv1.b": (c1,),
        "conv1.proj": (c1, 2, 1),
        "conv2.w": (c2, c1, cfg.kernel_size),
        "conv2.b": (c2,),
        "head.w1": (head_in, cfg.head_hidden),
        "head.b1": (cfg.head_hidden,),
        "head.w2": (cfg.head_hidden, 1),
        "head.b2": (1,),
    }


def init_params(cfg: MetaConfig, seed=0) -> ParamSet:
    """Fan-in scaled Gaussian weights, zero biases."""
    rng = np.random.default_rng(seed)
    out = []
    for name, shape in param_shapes(cfg).items():
        if ".b" in name:
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            value = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        out.append((name, Tensor(value, requires_grad=True)))
    return ParamSet(out)


def zero_params(cfg: MetaConfig) -> ParamSet:
    return ParamSet((k, Tensor(np.zeros(s), requires_grad=True)) for k, s in param_shapes(cfg).items())


# ---------------------------------------------------------------------------
# encoder


def resample(traj: Trajectory, n: int) -> np.ndarray:
    """Linear resampling of the (angle, velocity) series to ``n`` rows."""
    src = np.linspace(0.0, 1.0, len(traj))
    dst = np.linspace(0.0, 1.0, n)
    return np.stack([np.interp(dst, src, traj.angles), np.interp(dst, src, traj.velocities)], axis=1)


def _bias(b: Tensor, rows: int) -> Tensor:
    return ad.broadcast_to(ad.reshape(b, (1, b.shape[0])), (rows, b.shape[0]))


def encode_inputs(trajs: Sequence[Trajectory], cfg: MetaConfig) -> np.ndarray:
    return np.stack([resample(t, cfg.encoder_resample_len).ravel() for t in trajs])


def encode_batch(params: ParamSet, enc_in: np.ndarray) -> LatentDistribution:
    n = enc_in.shape[0]
    h = ad.tanh(ad.matmul(Tensor(enc_in), params["enc.w1"]) + _bias(params["enc.b1"], n))
    mu = ad.matmul(h, params["enc.w_mu"]) + _bias(params["enc.b_mu"], n)
    raw = ad.matmul(h, params["enc.w_sigma"]) + _bias(params["enc.b_sigma"], n)
    return LatentDistribution(mu, ad.softplus(raw) + SIGMA_FLOOR)


def encode(params: ParamSet, traj: Trajectory, cfg: MetaConfig) -> LatentDistribution:
    """Latent distribution of a whole trajectory; ``mu``/``sigma`` have shape (D,)."""
    if len(traj) < 2:
        raise TooShort("cannot encode a trajectory shorter than 2 samples")
    dist = encode_batch(params, encode_inputs([traj], cfg))
    d = cfg.latent_dim
    return LatentDistribution(ad.reshape(dist.mu, (d,)), ad.reshape(dist.sigma, (d,)))


def sample_latent(dist: LatentDistribution, mode: str = "deterministic", seed=None) -> Tensor:
    """``mu`` (deterministic) or the reparameterized draw ``mu + sigma * eps``."""
    if mode == "deterministic":
        return dist.mu
    if mode != "stochastic":
        raise ValueError(f"unknown sampling mode {mode!r}")
    eps = np.random.default_rng(seed).standard_normal(dist.mu.shape)
    return dist.mu + dist.sigma * Tensor(eps)


def loss_kl(dist: LatentDistribution) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over latent dims; averaged over rows if batched."""
    mu, sigma = dist.mu, dist.sigma
    per = (mu * mu + sigma * sigma - 1.0 - 2.0 * ad.log(sigma)) * 0.5
    total = ad.sum_(per)
    rows = mu.shape[0] if mu.ndim == 2 else 1
    return total * (1.0 / rows)


# ---------------------------------------------------------------------------
# predictor


def features(params: ParamSet, histories: np.ndarray, cfg: MetaConfig) -> Tensor:
    """Dilated conv stack over ``(B, delta_t+1, 2)`` histories -> ``(B, C2*(delta_t+1))``."""
    histories = np.asarray(histories, dtype=np.float64)
    if histories.ndim != 3 or histories.shape[1:] != (cfg.window_len, 2):
        raise ShapeMismatch(f"histories must be (B, {cfg.window_len}, 2), got {histories.shape}")
    b, t = histories.shape[0], cfg.window_len
    # velocities are an order of magnitude larger than angles
    x = Tensor(histories.transpose(0, 2, 1) * np.array([1.0, cfg.velocity_scale])[:, None])
    c1, c2 = cfg.channels
    d1, d2 = cfg.dilations

    def conv(inp, w, bias, dilation):
        out = ad.conv1d_dilated(inp, w, dilation, "causal")
        c = w.shape[0]
        return out + ad.broadcast_to(ad.reshape(bias, (1, c, 1)), (b, c, t))

    h1 = ad.tanh(conv(x, params["conv1.w"], params["conv1.b"], d1)) \
        + ad.conv1d_dilated(x, params["conv1.proj"], 1, "valid")
    h2 = ad.tanh(conv(h1, params["conv2.w"], params["conv2.b"], d2)) + h1
    return ad.reshape(h2, (b, c2 * t))


def predict(params: ParamSet, histories: np.ndarray, z_rows: Tensor, cfg: MetaConfig) -> Tensor:
    """Batched next-angle predictions ``(B,)``; ``z_rows`` is ``(B, D)``.

    With ``cfg.residual_output`` the head outputs the increment over the
    window's last angle.
    """
    f = features(params, histories, cfg)
    if z_rows.shape != (f.shape[0], cfg.latent_dim):
        raise ShapeMismatch(f"latent rows {z_rows.shape} do not match {f.shape[0]} windows")
    x = ad.concat([f, z_rows], axis=1)
    n = x.shape[0]
    h = ad.tanh(ad.matmul(x, params["head.w1"]) + _bias(params["head.b1"], n))
    out = ad.reshape(ad.matmul(h, params["head.w2"]) + _bias(params["head.b2"], n), (n,))
    if cfg.residual_output:
        out = out + Tensor(np.asarray(histories, dtype=np.float64)[:, -1, 0])
    return out


def predict_next(params: ParamSet, window, z, cfg: MetaConfig) -> Tensor:
    """Scalar next-angle prediction for one window and latent vector."""
    history = window.history if isinstance(window, TemporalWindow) else np.asarray(window, dtype=np.float64)
    if history.shape != (cfg.window_len, 2):
        raise ShapeMismatch(f"window history must be ({cfg.window_len}, 2), got {history.shape}")
    z = ad.as_tensor(z)
    if z.shape != (cfg.latent_dim,):
        raise ShapeMismatch(f"latent must be ({cfg.latent_dim},), got {z.shape}")
    out = predict(params, history[None], ad.reshape(z, (1, cfg.latent_dim)), cfg)
    return ad.reshape(out, ())


# ---------------------------------------------------------------------------
# losses over trajectory sets


@dataclass(frozen=True)
class TrajectoryBatch:
    """Windows of several trajectories, precomputed once per data set.

    ``weights`` average windows within a trajectory, then trajectories.
    """

    enc_in: np.ndarray      # (n, 2 * resample_len)
    histories: np.ndarray   # (B, delta_t + 1, 2)
    targets: np.ndarray     # (B,)
    owner: np.ndarray       # (B,) trajectory index of each window
    weights: np.ndarray     # (B,)

    @property
    def n_traj(self) -> int:
        return self.enc_in.shape[0]

    def subsample(self, max_windows: int, rng: np.random.Generator) -> "TrajectoryBatch":
        """Stratified random subset of about ``max_windows`` windows, reweighted
        so each trajectory still contributes equally."""
        if max_windows <= 0 or len(self.targets) <= max_windows:
            return self
        per = max(1, max_windows // self.n_traj)
        keep = []
        for j in range(self.n_traj):
            idx = np.flatnonzero(self.owner == j)
            keep.append(np.sort(rng.choice(idx, size=min(per, idx.size), replace=False)))
        keep = np.concatenate(keep)
        owner = self.owner[keep]
        counts = np.bincount(owner, minlength=self.n_traj)
        weights = 1.0 / (counts[owner] * self.n_traj)
        return TrajectoryBatch(self.enc_in, self.histories[keep], self.targets[keep], owner, weights)

    def perturbed(self, sigma: tuple[float, float], rng: np.random.Generator) -> "TrajectoryBatch":
        """Copy with Gaussian noise on the history channels; targets stay clean
        so the predictor learns to steer back after its own rollout errors."""
        if not any(sigma):
            return self
        noise = rng.normal(size=self.histories.shape) * np.asarray(sigma, dtype=np.float64)
        return TrajectoryBatch(self.enc_in, self.histories + noise, self.targets, self.owner, self.weights)


def make_batch(trajs: Sequence[Trajectory], cfg: MetaConfig, stride: int | None = None) -> TrajectoryBatch:
    if not trajs:
        raise TooShort("empty trajectory set")
    stride = cfg.window_stride if stride is None else stride
    hist, tgt, owner, weights = [], [], [], []
    for j, traj in enumerate(trajs):
        h, t = window_arrays(traj, cfg.delta_t, stride)
        hist.append(h)
        tgt.append(t)
        owner.append(np.full(len(t), j))
        weights.append(np.full(len(t), 1.0 / (len(t) * len(trajs))))
    return TrajectoryBatch(encode_inputs(trajs, cfg), np.concatenate(hist), np.concatenate(tgt),
                           np.concatenate(owner), np.concatenate(weights))


def batch_losses(params: ParamSet, batch: TrajectoryBatch, cfg: MetaConfig, beta: float | None = None,
                 mode: str = "deterministic", seed=None):
    """``(total, rec, kl)`` with each trajectory's windows conditioned on its own latent."""
    beta = cfg.beta if beta is None else beta
    dist = encode_batch(params, batch.enc_in)
    z = sample_latent(dist, mode, seed)
    z_rows = ad.getitem(z, batch.owner)
    err = predict(params, batch.histories, z_rows, cfg) - Tensor(batch.targets)
    rec = ad.sum_(err * err * Tensor(batch.weights))
    kl = loss_kl(dist)
    return rec + kl * beta, rec, kl


def loss_rec(params: ParamSet, traj, z, cfg: MetaConfig) -> Tensor:
    """Mean squared next-angle error over all windows of ``traj``.

    ``traj`` may also be a sequence of TemporalWindow objects.
    """
    z = ad.as_tensor(z)
    if isinstance(traj, Trajectory):
        hist, tgt = window_arrays(traj, cfg.delta_t)
    else:
        if len(traj) == 0:
            raise TooShort("no windows")
        hist = np.stack([w.history for w in traj])
        tgt = np.array([w.target for w in traj])
    n = len(tgt)
    z_rows = ad.broadcast_to(ad.reshape(z, (1, cfg.latent_dim)), (n, cfg.latent_dim))
    err = predict(params, hist, z_rows, cfg) - Tensor(tgt)
    return ad.mean(err * err)


def loss_total(params: ParamSet, traj: Trajectory, cfg: MetaConfig, beta: float | None = None,
               mode: str = "deterministic", seed=None) -> Tensor:
    """Reconstruction loss plus ``beta`` times the KL term, latent drawn per ``mode``."""
    beta = cfg.beta if beta is None else beta
    dist = encode(params, traj, cfg)
    z = sample_latent(dist, mode, seed)
    return loss_rec(params, traj, z, cfg) + loss_kl(dist) * beta


# ---------------------------------------------------------------------------
# rollout and latent export


def rollout(params: ParamSet, seed_history, z, n_steps: int, dt: float, cfg: MetaConfig,
            limits=ELBOW_LIMITS) -> Trajectory:
    """Autoregressive reference generation from a ``(delta_t+1, 2)`` seed history.

    Each predicted angle is clamped to ``limits``; its velocity is the finite
    difference to the previous angle.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    hist = np.array(seed_history, dtype=np.float64)
    if hist.shape != (cfg.window_len, 2):
        raise ShapeMismatch(f"seed history must be ({cfg.window_len}, 2), got {hist.shape}")
    z = ad.as_tensor(z).detach()
    z_row = ad.reshape(z, (1, cfg.latent_dim))
    angles = np.empty(n_steps)
    vels = np.empty(n_steps)
    with ad.no_grad():
        for k in range(n_steps):
            q = float(predict(params, hist[None], z_row, cfg).data[0])
            q = float(np.clip(q, *limits)) if np.isfinite(q) else float(hist[-1, 0])
            v = (q - hist[-1, 0]) / dt
            angles[k], vels[k] = q, v
            hist = np.concatenate([hist[1:], [[q, v]]])
    return Trajectory(angles, vels, dt) if n_steps >= 2 else _single(angles, vels, dt)


def _single(angles, vels, dt):
    # Trajectory needs two samples; repeat the only one as a hold
    return Trajectory(np.repeat(angles, 2), np.array([vels[0], 0.0]), dt)


def seed_history(traj: Trajectory, cfg: MetaConfig) -> np.ndarray:
    """First ``delta_t+1`` samples of a trajectory as a rollout seed."""
    if len(traj) < cfg.window_len:
        raise TooShort(f"trajectory shorter than the {cfg.window_len}-sample history")
    return traj.samples[:cfg.window_len]


def task_reference(params: ParamSet, demo: Trajectory, target: Trajectory, cfg: MetaConfig) -> Trajectory:
    """Reference command for ``target``: its first ``delta_t+1`` samples, then a
    rollout conditioned on the demonstration's latent mean."""
    z = encode(params, demo, cfg).mu
    n = len(target) - cfg.window_len
    if n < 1:
        return target
    gen = rollout(params, seed_history(target, cfg), z, n, target.dt, cfg)
    seed = target.samples[:cfg.window_len]
    return Trajectory(np.concatenate([seed[:, 0], gen.angles[:n]]),
                      np.concatenate([seed[:, 1], gen.velocities[:n]]), target.dt,
                      target.task_id, target.subject_id)


def export_latents(path, params: ParamSet, trajs: Sequence[Trajectory], cfg: MetaConfig):
    """CSV rows ``task_id, subject_id, z_0 .. z_{D-1}`` (latent means)."""
    with ad.no_grad():
        mu = encode_batch(params, encode_inputs(trajs, cfg)).mu.data
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_id", "subject_id"] + [f"z{d}" for d in range(cfg.latent_dim)])
        for traj, row in zip(trajs, mu):
            w.writerow([traj.task_id, traj.subject_id] + [repr(float(x)) for x in row])
    return mu
