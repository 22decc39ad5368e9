"""Named parameter collections, gradient entry point and checkpoint I/O."""

from __future__ import annotations

import base64
import json
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from ..errors import CheckpointError, ShapeMismatch
from .tensor import Tensor, grad

CHECKPOINT_FORMAT = "metaexo-checkpoint"
CHECKPOINT_VERSION = 1


class ParamSet(Mapping):
    """Ordered, immutable name -> Tensor mapping.

    Updates build new ParamSets; the tensors themselves may be graph nodes
    (e.g. adapted parameters inside a second-order MAML step). Plain arrays
    become trainable leaf tensors.
    """

    def __init__(self, items=()):
        pairs = list(items.items()) if isinstance(items, Mapping) else list(items)
        self._items: dict[str, Tensor] = {}
        for name, value in pairs:
            if name in self._items:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._items[name] = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)
        self.disconnected: tuple[str, ...] = ()

    def __getitem__(self, name):
        return self._items[name]

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __repr__(self):
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._items.items())
        return f"ParamSet({shapes})"

    @property
    def names(self) -> list[str]:
        return list(self._items)

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._items.items()}

    @property
    def size(self) -> int:
        return sum(v.size for v in self._items.values())

    def tensors(self) -> list[Tensor]:
        return list(self._items.values())

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._items.items()}

    def map(self, fn) -> "ParamSet":
        return ParamSet((k, fn(v)) for k, v in self._items.items())

    def zip_map(self, other: "ParamSet", fn) -> "ParamSet":
        self.check_compatible(other)
        return ParamSet((k, fn(v, other[k])) for k, v in self._items.items())

    def detach(self, requires_grad: bool = True) -> "ParamSet":
        """Fresh leaf tensors holding copies of the current values."""
        return self.map(lambda t: Tensor(t.data.copy(), requires_grad=requires_grad))

    def flatten(self) -> np.ndarray:
        if not self._items:
            return np.zeros(0)
        return np.concatenate([v.data.ravel() for v in self._items.values()])

    def unflatten(self, vector, requires_grad: bool = True) -> "ParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ShapeMismatch(f"unflatten: expected vector of length {self.size}, got {vector.shape}")
        out, offset = [], 0
        for k, v in self._items.items():
            out.append((k, Tensor(vector[offset:offset + v.size].reshape(v.shape).copy(),
                                  requires_grad=requires_grad)))
            offset += v.size
        return ParamSet(out)

    def check_compatible(self, other: "ParamSet"):
        if self.shapes != dict(other.shapes) or self.names != list(other.names):
            raise ShapeMismatch("parameter sets have different names or shapes")


def backward(loss: Tensor, params: ParamSet, create_graph: bool = False) -> ParamSet:
    """Gradient of scalar ``loss`` for every tensor in ``params``.

    Names the loss does not depend on receive zero gradients and are listed
    in the result's ``disconnected`` attribute.
    """
    names = params.names
    grads, missing = grad(loss, params.tensors(), create_graph=create_graph)
    out = ParamSet(zip(names, grads))
    out.disconnected = tuple(names[i] for i in missing)
    return out


def save_checkpoint(path, params: ParamSet, config: dict | None = None, extra: dict | None = None):
    """Write params as a versioned JSON container (float64 payloads base64-encoded)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config or {},
        "extra": extra or {},
        "params": {
            name: {
                "shape": list(t.shape),
                "data": base64.b64encode(np.ascontiguousarray(t.data, dtype="<f8").tobytes()).decode("ascii"),
            }
            for name, t in params.items()
        },
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path, expected_shapes: dict | None = None):
    """Read a checkpoint; returns ``(params, config, extra)``.

    Rejects unknown formats, other versions and, when ``expected_shapes`` is
    given, any mismatch in parameter names or shapes.
    """
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a metaexo checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {payload.get('version')} "
                              f"!= supported {CHECKPOINT_VERSION}")
    items = []
    for name, entry in payload["params"].items():
        shape = tuple(entry["shape"])
        raw = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8")
        if raw.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: parameter {name!r} has {raw.size} values for shape {shape}")
        items.append((name, Tensor(raw.reshape(shape).astype(np.float64), requires_grad=True)))
    params = ParamSet(items)
    if expected_shapes is not None:
        expected = {k: tuple(v) for k, v in expected_shapes.items()}
        if expected != params.shapes:
            diff = sorted(set(expected.items()) ^ set(params.shapes.items()))
            raise CheckpointError(f"{path}: parameter shapes do not match the configuration: {diff[:4]}")
    return params, payload.get("config", {}), payload.get("extra", {})
