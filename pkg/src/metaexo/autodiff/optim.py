"""Gradient-descent updates on ParamSets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet
from .tensor import Tensor


def sgd_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    """``p - lr * g`` for every parameter.

    Built from graph operations, so when ``params``/``grads`` are graph nodes
    the result stays differentiable (the MAML inner update relies on this).
    """
    return params.zip_map(grads, lambda p, g: p - g * lr)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: AdamState, params: ParamSet, grads: ParamSet, lr: float):
    """One bias-corrected Adam update; returns ``(new_state, new_params)``.

    Operates on raw values: the outer loop never differentiates through it.
    """
    params.check_compatible(grads)
    t = state.step + 1
    m, v, new = {}, {}, []
    for name, p in params.items():
        g = grads[name].data
        m_prev = state.m.get(name, np.zeros_like(g))
        v_prev = state.v.get(name, np.zeros_like(g))
        m[name] = state.beta1 * m_prev + (1.0 - state.beta1) * g
        v[name] = state.beta2 * v_prev + (1.0 - state.beta2) * g * g
        m_hat = m[name] / (1.0 - state.beta1 ** t)
        v_hat = v[name] / (1.0 - state.beta2 ** t)
        new.append((name, Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps), requires_grad=True)))
    return AdamState(t, m, v, state.beta1, state.beta2, state.eps), ParamSet(new)
