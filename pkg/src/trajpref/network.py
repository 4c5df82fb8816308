"""Feedforward policy network: parameters, forward pass, model file IO."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numgrad import Tape, _matmul

FORMAT_VERSION = 1


class ConfigurationError(ValueError):
    pass


@dataclass
class PolicyParams:
    """Weights of an input -> tanh hidden -> action-logit network.

    ``hidden == 0`` gives a purely linear (tabular-capable) head with weights
    ``W``/``b``; otherwise ``W1, b1, W2, b2``.
    """

    input_dim: int
    hidden: int
    actions: int
    weights: dict[str, np.ndarray]
    seed: int | None = None
    tag: str = "init"

    def param_names(self) -> list[str]:
        return ["W", "b"] if self.hidden == 0 else ["W1", "b1", "W2", "b2"]

    def with_weights(self, weights: dict[str, np.ndarray], tag: str | None = None) -> "PolicyParams":
        return replace(self, weights=dict(weights), tag=self.tag if tag is None else tag)

    def copy(self) -> "PolicyParams":
        return replace(self, weights={k: v.copy() for k, v in self.weights.items()})

    def digest(self) -> str:
        return hashlib.sha256(dumps_model(self).encode()).hexdigest()


def init_params(input_dim: int, hidden: int, actions: int, seed: int, scale: float = 1.0) -> PolicyParams:
    rng = np.random.default_rng(seed)
    if hidden == 0:
        weights = {
            "W": rng.normal(0.0, scale / np.sqrt(input_dim), (input_dim, actions)),
            "b": np.zeros(actions),
        }
    else:
        weights = {
            "W1": rng.normal(0.0, scale / np.sqrt(input_dim), (input_dim, hidden)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0.0, scale / np.sqrt(hidden), (hidden, actions)),
            "b2": np.zeros(actions),
        }
    return PolicyParams(input_dim, hidden, actions, weights, seed=seed)


def zero_params(input_dim: int, hidden: int, actions: int) -> PolicyParams:
    p = init_params(input_dim, hidden, actions, seed=0)
    return p.with_weights({k: np.zeros_like(v) for k, v in p.weights.items()})


def _as_batch(params: PolicyParams, obs) -> tuple[np.ndarray, bool]:
    x = np.asarray(obs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ConfigurationError(
            f"observation has {x.shape[-1]} features, network expects {params.input_dim}"
        )
    return x, single


def record_forward(tape: Tape, params: PolicyParams, x: np.ndarray) -> int:
    """Record the forward pass of a (rows x input) batch; returns the logits node."""
    nodes = {k: tape.param(k, params.weights[k]) for k in params.param_names()}
    xin = tape.const(x)
    if params.hidden == 0:
        return tape.apply("add_bias", tape.apply("matmul", xin, nodes["W"]), nodes["b"])
    pre = tape.apply("add_bias", tape.apply("matmul", xin, nodes["W1"]), nodes["b1"])
    h = tape.apply("tanh", pre)
    return tape.apply("add_bias", tape.apply("matmul", h, nodes["W2"]), nodes["b2"])


def forward_logits(params: PolicyParams, obs) -> tuple[np.ndarray, Tape]:
    x, single = _as_batch(params, obs)
    tape = Tape()
    out = record_forward(tape, params, x)
    logits = tape.value(out)
    return (logits[0] if single else logits), tape


def logits(params: PolicyParams, obs) -> np.ndarray:
    """Tape-free forward pass; bit-identical to ``forward_logits``."""
    x, single = _as_batch(params, obs)
    w = params.weights
    if params.hidden == 0:
        out = _matmul(x, w["W"]) + w["b"]
    else:
        out = _matmul(np.tanh(_matmul(x, w["W1"]) + w["b1"]), w["W2"]) + w["b2"]
    return out[0] if single else out


def action_probs(params: PolicyParams, obs) -> np.ndarray:
    lg = logits(params, obs)
    lg = lg - np.max(lg, axis=-1, keepdims=True)
    p = np.exp(lg)
    return p / np.sum(p, axis=-1, keepdims=True)


def model_to_dict(params: PolicyParams) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "arch": {"input": params.input_dim, "hidden": params.hidden, "actions": params.actions},
        "weights": {k: params.weights[k].tolist() for k in params.param_names()},
        "seed": params.seed,
        "tag": params.tag,
    }


def model_from_dict(doc: dict) -> PolicyParams:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported model format_version {doc.get('format_version')!r}")
    arch = doc["arch"]
    params = PolicyParams(
        input_dim=int(arch["input"]),
        hidden=int(arch["hidden"]),
        actions=int(arch["actions"]),
        weights={k: np.asarray(v, dtype=np.float64) for k, v in doc["weights"].items()},
        seed=doc.get("seed"),
        tag=doc.get("tag", "init"),
    )
    expected = zero_params(params.input_dim, params.hidden, params.actions).weights
    for k, v in expected.items():
        if k not in params.weights or params.weights[k].shape != v.shape:
            raise ConfigurationError(f"model weight {k!r} missing or has the wrong shape")
    return params


def dumps_model(params: PolicyParams) -> str:
    # float repr is the shortest decimal that round-trips a float64 exactly
    return json.dumps(model_to_dict(params), separators=(",", ":"))


def save_model(params: PolicyParams, path) -> None:
    Path(path).write_text(dumps_model(params) + "\n")


def load_model(path) -> PolicyParams:
    return model_from_dict(json.loads(Path(path).read_text()))
