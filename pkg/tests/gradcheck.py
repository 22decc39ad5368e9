"""Finite-difference oracles and a random expression-graph generator."""

import numpy as np

from metaexo import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


UNARY = ["tanh", "sigmoid", "exp_small", "softplus", "square", "log_pos", "neg"]
BINARY = ["add", "sub", "mul", "div_pos", "matmul"]


def random_graph(rng: np.random.Generator, depth: int = 6):
    """A random scalar-valued function of a (3, 3) input built from mixed primitives.

    Returns ``build(x_tensor) -> scalar Tensor``; constants are drawn once so
    the function is deterministic.
    """
    ops = []
    for _ in range(depth):
        if rng.random() < 0.5:
            ops.append(("u", UNARY[rng.integers(len(UNARY))], None))
        else:
            ops.append(("b", BINARY[rng.integers(len(BINARY))], rng.normal(size=(3, 3))))
    reducer = ["sum", "mean", "slice", "concat"][rng.integers(4)]

    def build(x):
        h = x
        for kind, name, const in ops:
            c = ad.Tensor(const) if const is not None else None
            if name == "tanh":
                h = ad.tanh(h)
            elif name == "sigmoid":
                h = ad.sigmoid(h)
            elif name == "exp_small":
                h = ad.exp(ad.tanh(h))
            elif name == "softplus":
                h = ad.softplus(h)
            elif name == "square":
                h = ad.square(ad.tanh(h))
            elif name == "log_pos":
                h = ad.log(ad.softplus(h) + 0.5)
            elif name == "neg":
                h = ad.neg(h)
            elif name == "add":
                h = h + c
            elif name == "sub":
                h = c - h
            elif name == "mul":
                h = h * c
            elif name == "div_pos":
                h = h / (ad.square(c) + 1.0)
            elif name == "matmul":
                h = ad.matmul(h, c) * 0.5
            # mix the original input back in so no op can disconnect x
            h = h + x * 0.1
        if reducer == "sum":
            return ad.sum_(h)
        if reducer == "mean":
            return ad.mean(ad.square(h))
        if reducer == "slice":
            return ad.sum_(ad.getitem(h, (slice(0, 2), slice(1, 3)))) + ad.sum_(h * 0.01)
        return ad.sum_(ad.square(ad.concat([h, ad.transpose(h)], axis=0)))

    return build


def scalar_fn(build):
    def f(xv):
        with ad.no_grad():
            return build(ad.Tensor(xv)).item()
    return f
