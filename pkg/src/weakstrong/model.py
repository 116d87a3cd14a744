"""Small ReLU MLP classifier with hand-written backprop.

Parameters live in an ordered ``dict`` of named arrays so optimizers,
gradient checks and checkpoints can all walk them generically::

    hidden.0.weight  (input_dim, h0)     hidden.0.bias  (h0,)
    ...
    head.weight      (h_last, K)         head.bias      (K,)
    domain.weight    (h_last, 2)         domain.bias    (2,)   # optional

Weights act on row-vector batches: ``z = x @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, ParameterError
from .numerics import Rng, check_finite, safe_log, softmax

CHECKPOINT_FORMAT = "weakstrong-checkpoint"
CHECKPOINT_VERSION = 1

Gradients = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (32, 16)
    num_classes: int = 2
    domain_head: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ConfigError("must be >= 1", "model.input_dim")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError("every hidden dim must be >= 1", "model.hidden_dims")
        if self.num_classes < 2:
            raise ConfigError("must be >= 2", "model.num_classes")

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "domain_head": self.domain_head,
        }


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(expected) != list(self.tensors):
            raise DimensionError(
                f"parameter names {list(self.tensors)} do not match config {list(expected)}"
            )
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise DimensionError(
                    f"{name}: expected shape {shape}, got {self.tensors[name].shape}"
                )

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every tensor."""
        return self.config == other.config and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    fan_in = config.input_dim
    for i, h in enumerate(config.hidden_dims):
        shapes[f"hidden.{i}.weight"] = (fan_in, h)
        shapes[f"hidden.{i}.bias"] = (h,)
        fan_in = h
    shapes["head.weight"] = (fan_in, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    if config.domain_head:
        shapes["domain.weight"] = (fan_in, 2)
        shapes["domain.bias"] = (2,)
    return shapes


def init_params(config: ModelConfig, rng: Rng) -> ModelParams:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            tensors[name] = np.sqrt(2.0 / shape[0]) * rng.standard_normal(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(config, tensors)


def zero_grads(params: ModelParams) -> Gradients:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


@dataclass
class ForwardTrace:
    x: np.ndarray
    pre: list[np.ndarray]  # hidden pre-activations
    acts: list[np.ndarray]  # acts[0] is x, acts[i+1] = relu(pre[i])
    logits: np.ndarray
    probs: np.ndarray

    @property
    def features(self) -> np.ndarray:
        return self.acts[-1]

    def take(self, rows) -> "ForwardTrace":
        """Trace restricted to a subset of batch rows."""
        rows = np.asarray(rows)
        return ForwardTrace(
            x=self.x[rows],
            pre=[p[rows] for p in self.pre],
            acts=[a[rows] for a in self.acts],
            logits=self.logits[rows],
            probs=self.probs[rows],
        )


def forward(params: ModelParams, x: np.ndarray) -> ForwardTrace:
    cfg = params.config
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise DimensionError(f"forward: expected (batch, {cfg.input_dim}) input, got {x.shape}")
    pre, acts = [], [x]
    h = x
    # overflow surfaces as a NumericError from check_finite, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(len(cfg.hidden_dims)):
            z = h @ params[f"hidden.{i}.weight"] + params[f"hidden.{i}.bias"]
            h = np.maximum(z, 0.0)
            pre.append(z)
            acts.append(h)
        logits = h @ params["head.weight"] + params["head.bias"]
    logits = check_finite(logits, "logits")
    return ForwardTrace(x=x, pre=pre, acts=acts, logits=logits, probs=softmax(logits))


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(forward(params, x).probs, axis=1)


def cross_entropy(probs: np.ndarray, labels, weights=None) -> tuple[float, np.ndarray]:
    """Weighted mean cross-entropy and its gradient w.r.t. the logits.

    ``loss = (1/n) sum_i w_i * -log p_i[y_i]``; the gradient rows are
    ``(w_i / n) * (p_i - onehot(y_i))``. Weights are constants here: nothing
    flows back through them.
    """
    n, k = probs.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for batch of {n}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ParameterError(f"cross_entropy: labels must lie in [0, {k})")
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise DimensionError(f"cross_entropy: {weights.shape} weights for batch of {n}")
    if np.any(weights < 0) or np.any(weights > 1):
        raise ParameterError("cross_entropy: weights must lie in [0, 1]")
    rows = np.arange(n)
    nll = -safe_log(probs[rows, labels])
    loss = float(np.sum(weights * nll) / n)
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits *= (weights / n)[:, None]
    return loss, dlogits


def backward(
    trace: ForwardTrace,
    params: ModelParams,
    dlogits: np.ndarray,
    dfeatures: np.ndarray | None = None,
) -> Gradients:
    """Reverse-mode gradients given the upstream gradient on the logits.

    ``dfeatures`` is an optional extra gradient on the last hidden layer's
    activations (from a domain penalty); it is added before the ReLU stack
    is unwound.
    """
    cfg = params.config
    n = trace.x.shape[0]
    if dlogits.shape != (n, cfg.num_classes):
        raise DimensionError(f"backward: dlogits shape {dlogits.shape}, expected {(n, cfg.num_classes)}")
    if len(trace.pre) != len(cfg.hidden_dims):
        raise DimensionError("backward: trace depth does not match params")
    grads = zero_grads(params)
    feats = trace.features
    grads["head.weight"] = feats.T @ dlogits
    grads["head.bias"] = dlogits.sum(axis=0)
    dh = dlogits @ params["head.weight"].T
    if dfeatures is not None:
        if dfeatures.shape != feats.shape:
            raise DimensionError(f"backward: dfeatures shape {dfeatures.shape} vs {feats.shape}")
        dh = dh + dfeatures
    for i in reversed(range(len(cfg.hidden_dims))):
        dz = dh * (trace.pre[i] > 0)
        grads[f"hidden.{i}.weight"] = trace.acts[i].T @ dz
        grads[f"hidden.{i}.bias"] = dz.sum(axis=0)
        if i:
            dh = dz @ params[f"hidden.{i}.weight"].T
    return grads


def add_grads(a: Gradients, b: Gradients) -> Gradients:
    return {k: a[k] + b[k] for k in a}


# -- gradient verification ---------------------------------------------------

BackwardFn = Callable[[ForwardTrace, ModelParams, np.ndarray], Gradients]


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    skipped_kinks: int = 0

    @property
    def worst_tensor(self) -> str:
        return max(self.per_tensor, key=self.per_tensor.get)


def grad_check_report(
    config: ModelConfig,
    seed: int,
    batch_size: int = 6,
    h: float = 1e-4,
    x: np.ndarray | None = None,
    backward_fn: BackwardFn = backward,
) -> GradCheckReport:
    """Compare ``backward_fn`` with central finite differences, coordinate by coordinate.

    The numeric side is the central difference at step ``h`` refined with
    one Richardson step against step ``h/2`` (cancels the h^2 truncation
    term), evaluated in extended precision (``np.longdouble``). Both matter
    for coordinates whose gradient nearly cancels to ~1e-9: plain float64
    differences at h=1e-4 carry ~1e-12 of roundoff and ~1e-12 of truncation.
    Coordinates whose perturbation flips a ReLU are skipped, since the loss
    has a kink there and the difference quotient is meaningless.
    """
    rng = Rng(seed)
    params = init_params(config, rng.spawn(0))
    data_rng = rng.spawn(1)
    if x is None:
        x = data_rng.standard_normal((batch_size, config.input_dim))
    n = x.shape[0]
    labels = data_rng.integers(0, config.num_classes, size=n)
    weights = data_rng.uniform(n)

    trace = forward(params, x)
    _, dlogits = cross_entropy(trace.probs, labels, weights)
    analytic = backward_fn(trace, params, dlogits)

    x_ext = x.astype(np.longdouble)
    probe = ModelParams(config, {k: v.astype(np.longdouble) for k, v in params.tensors.items()})

    def evaluate() -> tuple[np.longdouble, list[np.ndarray]]:
        tr = forward(probe, x_ext)
        nll = -np.log(tr.probs[np.arange(n), labels])
        return np.sum(weights * nll) / n, [z > 0 for z in tr.pre]

    _, base_pattern = evaluate()
    report = GradCheckReport(max_relative_error=0.0)
    for name in params.tensors:
        worst = 0.0
        flat = probe.tensors[name].reshape(-1)
        grad = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            diffs, flipped = [], False
            for step in (np.longdouble(h), np.longdouble(h) / 2):
                flat[j] = orig + step
                plus, pattern_plus = evaluate()
                flat[j] = orig - step
                minus, pattern_minus = evaluate()
                flat[j] = orig
                flipped = flipped or any(
                    not (np.array_equal(a, b) and np.array_equal(a, c))
                    for a, b, c in zip(base_pattern, pattern_plus, pattern_minus)
                )
                diffs.append((plus - minus) / (2 * step))
            if flipped:
                report.skipped_kinks += 1
                continue
            numeric = float((4 * diffs[1] - diffs[0]) / 3)
            err = abs(grad[j] - numeric) / max(1e-12, abs(grad[j]) + abs(numeric))
            worst = max(worst, err)
        report.per_tensor[name] = worst
        report.max_relative_error = max(report.max_relative_error, worst)
    return report


def grad_check(config: ModelConfig, seed: int, **kwargs) -> float:
    return grad_check_report(config, seed, **kwargs).max_relative_error


# -- checkpoints ---------------------------------------------------------------


def params_to_dict(params: ModelParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "params": {
            name: {"shape": list(t.shape), "data": [float(v) for v in t.reshape(-1)]}
            for name, t in params.tensors.items()
        },
    }


def params_from_dict(payload: dict) -> ModelParams:
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not a checkpoint (format={payload.get('format')!r})", "format")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}", "version")
    cfg = payload["config"]
    config = ModelConfig(
        input_dim=cfg["input_dim"],
        hidden_dims=tuple(cfg["hidden_dims"]),
        num_classes=cfg["num_classes"],
        domain_head=cfg["domain_head"],
    )
    tensors = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    return ModelParams(config, tensors)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    # JSON floats are written with repr(), which round-trips float64 exactly.
    Path(path).write_text(json.dumps(params_to_dict(params), indent=1) + "\n")


def load_checkpoint(path: str | Path) -> ModelParams:
    return params_from_dict(json.loads(Path(path).read_text()))
