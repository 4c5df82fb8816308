"""Tape-based reverse-mode differentiation over float64 numpy arrays, plus AdamW.

The tape is a Wengert list: every node stores the primitive that produced it,
the indices of its inputs and any static attributes, so the forward pass can
be replayed and the backward pass walks the list in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum without BLAS keeps each output row bit-identical regardless of
    # how many rows are batched together (BLAS gemm does not guarantee this).
    return np.einsum("ij,jk->ik", a, b, optimize=False)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) without overflow for large |x|
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _gather_fwd(x, rows, cols):
    if x.ndim == 1:
        return x[cols]
    return x[rows, cols]


def _gather_bwd(g, x, rows, cols):
    gx = np.zeros_like(x)
    if x.ndim == 1:
        np.add.at(gx, cols, g)
    else:
        np.add.at(gx, (rows, cols), g)
    return gx


def _segment_sum(x, segments, n):
    out = np.zeros(n)
    # sequential accumulation in index order, reproducible across runs
    np.add.at(out, segments, x)
    return out


# name -> (forward(values, attrs), backward(grad_out, values, out, attrs))
PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (
        lambda v, a: _matmul(v[0], v[1]),
        lambda g, v, y, a: [g @ v[1].T, v[0].T @ g],
    ),
    "add_bias": (
        lambda v, a: v[0] + v[1],
        lambda g, v, y, a: [g, g.sum(axis=0) if g.ndim == 2 else g],
    ),
    "add": (lambda v, a: v[0] + v[1], lambda g, v, y, a: [g, g]),
    "sub": (lambda v, a: v[0] - v[1], lambda g, v, y, a: [g, -g]),
    "scale": (lambda v, a: a["c"] * v[0], lambda g, v, y, a: [a["c"] * g]),
    "square": (lambda v, a: v[0] * v[0], lambda g, v, y, a: [2.0 * v[0] * g]),
    "tanh": (lambda v, a: np.tanh(v[0]), lambda g, v, y, a: [g * (1.0 - y * y)]),
    "log_softmax": (
        lambda v, a: _log_softmax(v[0]),
        lambda g, v, y, a: [g - np.exp(y) * np.sum(g, axis=-1, keepdims=True)],
    ),
    "gather": (
        lambda v, a: _gather_fwd(v[0], a["rows"], a["cols"]),
        lambda g, v, y, a: [_gather_bwd(g, v[0], a["rows"], a["cols"])],
    ),
    "segment_sum": (
        lambda v, a: _segment_sum(v[0], a["segments"], a["n"]),
        lambda g, v, y, a: [g[a["segments"]]],
    ),
    "softplus": (lambda v, a: _softplus(v[0]), lambda g, v, y, a: [g * _sigmoid(v[0])]),
    "clip": (
        lambda v, a: np.clip(v[0], a["lo"], a["hi"]),
        lambda g, v, y, a: [g * ((v[0] >= a["lo"]) & (v[0] <= a["hi"]))],
    ),
    "sum": (lambda v, a: np.sum(v[0]), lambda g, v, y, a: [np.full_like(v[0], g)]),
    "mean": (
        lambda v, a: np.mean(v[0]),
        lambda g, v, y, a: [np.full_like(v[0], g / v[0].size)],
    ),
}


@dataclass
class _Node:
    op: str | None
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    name: str | None = None


class Tape:
    """Records primitive applications; node ids are positions in the list."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def param(self, name: str, value) -> int:
        self.nodes.append(_Node(None, (), {}, np.asarray(value, dtype=np.float64), name))
        return len(self.nodes) - 1

    def const(self, value) -> int:
        self.nodes.append(_Node(None, (), {}, np.asarray(value, dtype=np.float64)))
        return len(self.nodes) - 1

    def apply(self, op: str, *inputs: int, **attrs) -> int:
        if op not in PRIMITIVES:
            raise ValueError(f"unknown primitive {op!r}")
        fwd, _ = PRIMITIVES[op]
        value = fwd([self.nodes[i].value for i in inputs], attrs)
        self.nodes.append(_Node(op, tuple(inputs), attrs, np.asarray(value, dtype=np.float64)))
        return len(self.nodes) - 1

    def value(self, node: int) -> np.ndarray:
        return self.nodes[node].value

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves in recorded order."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op is None:
                values.append(node.value)
            else:
                fwd, _ = PRIMITIVES[node.op]
                values.append(np.asarray(fwd([values[i] for i in node.inputs], node.attrs), dtype=np.float64))
        return values


def grad_scalar(tape: Tape, output: int) -> dict[str, np.ndarray]:
    """Gradient of a scalar node with respect to every named parameter leaf."""
    out_val = tape.nodes[output].value
    if out_val.size != 1 or out_val.ndim > 1:
        raise ValueError(f"grad_scalar needs a scalar output, node {output} has shape {out_val.shape}")
    grads: dict[int, np.ndarray] = {output: np.ones_like(out_val)}
    for idx in range(output, -1, -1):
        node = tape.nodes[idx]
        if node.op is None or idx not in grads:
            continue
        _, bwd = PRIMITIVES[node.op]
        in_grads = bwd(grads.pop(idx), [tape.nodes[i].value for i in node.inputs], node.value, node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            grads[i] = grads[i] + gi if i in grads else gi
    return {
        node.name: np.asarray(grads.get(idx, np.zeros_like(node.value)), dtype=np.float64)
        for idx, node in enumerate(tape.nodes[: output + 1])
        if node.op is None and node.name is not None
    }


@dataclass
class OptState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "OptState":
        return cls(
            **hyper,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adamw_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptState
) -> tuple[dict[str, np.ndarray], OptState]:
    """One bias-corrected Adam step with decoupled weight decay.

    Returns fresh arrays; neither ``params`` nor ``state`` is mutated.
    """
    if set(grads) != set(params) or set(state.m) != set(params):
        raise ValueError("gradient / optimizer state keys do not match parameters")
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k!r}")
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        decayed = p * (1.0 - state.lr * state.weight_decay)
        new_params[k] = decayed - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[k], new_v[k] = m, v
    new_state = OptState(
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        weight_decay=state.weight_decay,
        step=t,
        m=new_m,
        v=new_v,
    )
    return new_params, new_state
