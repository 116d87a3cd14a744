"""SGD and Adam parameter updates.

Both rules are pure: they return fresh parameters (and, for Adam, a fresh
state) and leave their inputs untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .model import Gradients, ModelParams


def _check_congruent(params: ModelParams, grads: Gradients) -> None:
    if list(grads) != list(params.tensors):
        raise DimensionError(f"gradient names {list(grads)} do not match params {list(params.tensors)}")
    for k, v in params.tensors.items():
        if grads[k].shape != v.shape:
            raise DimensionError(f"{k}: gradient shape {grads[k].shape} vs param shape {v.shape}")


def sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    _check_congruent(params, grads)
    return ModelParams(params.config, {k: v - lr * grads[k] for k, v in params.tensors.items()})


@dataclass(frozen=True)
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams, lr: float = 1e-4, **kwargs) -> "AdamState":
        zeros = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        return cls(m=zeros, v={k: z.copy() for k, z in zeros.items()}, lr=lr, **kwargs)


def adam_step(params: ModelParams, grads: Gradients, state: AdamState) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update."""
    _check_congruent(params, grads)
    if list(state.m) != list(params.tensors):
        raise DimensionError("Adam moments do not match the parameter set")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new, m, v = {}, {}, {}
    for k, theta in params.tensors.items():
        g = grads[k]
        m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m[k] / corr1
        v_hat = v[k] / corr2
        new[k] = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ModelParams(params.config, new), replace(state, m=m, v=v, t=t)


OPTIMIZERS = ("sgd", "adam")
MOMENT_MODES = ("shared", "split")


@dataclass(frozen=True)
class OptimizerState:
    """Optimizer choice plus its state, threaded through a training run.

    With ``moments="shared"`` strong and weak updates advance one Adam state
    (two ticks per joint iteration); ``"split"`` keeps one state per data
    stream.
    """

    kind: str
    lr: float
    moments: str = "shared"
    adam: dict[str, AdamState] = field(default_factory=dict)

    def key(self, stream: str) -> str:
        return "shared" if self.moments == "shared" else stream


def init_optimizer(params: ModelParams, kind: str = "adam", lr: float = 1e-4, moments: str = "shared") -> OptimizerState:
    if kind not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {kind!r}; expected one of {OPTIMIZERS}", "scheme.optimizer")
    if moments not in MOMENT_MODES:
        raise ConfigError(f"unknown moment mode {moments!r}; expected one of {MOMENT_MODES}", "scheme.moments")
    if lr <= 0:
        raise ConfigError("must be > 0", "scheme.learning_rate")
    adam = {}
    if kind == "adam":
        keys = ["shared"] if moments == "shared" else ["strong", "weak"]
        adam = {k: AdamState.zeros_like(params, lr=lr) for k in keys}
    return OptimizerState(kind=kind, lr=lr, moments=moments, adam=adam)


def apply_update(
    params: ModelParams, grads: Gradients, state: OptimizerState, stream: str = "strong"
) -> tuple[ModelParams, OptimizerState]:
    if state.kind == "sgd":
        return sgd_step(params, grads, state.lr), state
    key = state.key(stream)
    new_params, adam = adam_step(params, grads, state.adam[key])
    return new_params, replace(state, adam={**state.adam, key: adam})
