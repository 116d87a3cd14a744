"""Supervision schemes for mixing weakly- and strongly-labelled data.

One training iteration consumes (at most) one strong batch and one weak
batch and performs up to two optimizer steps:

* ``plain``  - unweighted cross-entropy on the weak labels,
* ``mil_ws`` - cross-entropy on the top-k most confident weak examples only,
* ``sw_ws``  - cross-entropy weighted per example by the model's own
  probability for the weak label, computed *after* the strong update,
* ``none``   - no weak supervision; weak data only serves as the unlabelled
  target domain (the source-only rows of the covariate-shift benchmark).

``use_strong`` toggles the strong step, giving W-only vs W+S variants.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, ParameterError
from .model import (
    ForwardTrace,
    ModelConfig,
    ModelParams,
    add_grads,
    backward,
    cross_entropy,
    forward,
    init_params,
)
from .numerics import Rng
from .optim import OptimizerState, apply_update, init_optimizer
from .shift import ShiftConfig, jitter_features, penalty_terms, transfer_feature_stats
from .synthdata import InstanceArrays

STRONG, WEAK = "strong", "weak"
WEAK_MODES = ("none", "plain", "mil_ws", "sw_ws")
MIL_CONFIDENCE = ("weak_label", "max_class")

ConfidenceHook = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SchemeConfig:
    use_strong: bool = True
    weak_mode: str = "plain"
    strong_batch: int = 32
    weak_batch: int = 128
    mil_fraction: float = 0.25
    mil_confidence: str = "weak_label"
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    moments: str = "shared"

    def __post_init__(self):
        if self.weak_mode not in WEAK_MODES:
            raise ConfigError(f"unknown weak_mode {self.weak_mode!r}; expected one of {WEAK_MODES}", "scheme.weak_mode")
        if self.weak_mode == "none" and not self.use_strong:
            raise ConfigError("weak_mode 'none' needs use_strong = true", "scheme.weak_mode")
        if self.strong_batch < 1:
            raise ConfigError("must be >= 1", "scheme.strong_batch")
        if self.weak_batch < 1:
            raise ConfigError("must be >= 1", "scheme.weak_batch")
        if not 0 < self.mil_fraction <= 1:
            raise ConfigError("must lie in (0, 1]", "scheme.mil_fraction")
        if self.mil_confidence not in MIL_CONFIDENCE:
            raise ConfigError(f"expected one of {MIL_CONFIDENCE}", "scheme.mil_confidence")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("expected 'sgd' or 'adam'", "scheme.optimizer")
        if self.learning_rate <= 0:
            raise ConfigError("must be > 0", "scheme.learning_rate")
        if self.moments not in ("shared", "split"):
            raise ConfigError("expected 'shared' or 'split'", "scheme.moments")

    @property
    def label(self) -> str:
        if self.weak_mode == "none":
            return "S-only"
        base = "W+S" if self.use_strong else "W-only"
        suffix = {"plain": "", "mil_ws": " (MIL-WS)", "sw_ws": " (SW-WS)"}[self.weak_mode]
        return base + suffix


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    source: str
    bag_ids: np.ndarray | None = None

    def __post_init__(self):
        if self.source not in (STRONG, WEAK):
            raise ParameterError(f"batch source must be 'strong' or 'weak', got {self.source!r}")
        n = self.x.shape[0]
        if self.y.shape != (n,) or (self.bag_ids is not None and self.bag_ids.shape != (n,)):
            raise DimensionError("batch fields disagree on the number of rows")

    def __len__(self) -> int:
        return self.x.shape[0]


def confidence_scores(probs: np.ndarray, y_w) -> np.ndarray:
    """Predicted probability of each example's weak label."""
    y_w = np.asarray(y_w)
    if y_w.shape != (probs.shape[0],):
        raise DimensionError(f"{y_w.shape[0]} labels for {probs.shape[0]} rows")
    if y_w.size and (y_w.min() < 0 or y_w.max() >= probs.shape[1]):
        raise ParameterError(f"weak labels must lie in [0, {probs.shape[1]})")
    return probs[np.arange(probs.shape[0]), y_w]


def _require_source(batch: Batch, source: str) -> None:
    if batch.source != source:
        raise ParameterError(f"expected a {source} batch, got {batch.source}")


def _descend(
    params: ModelParams,
    opt: OptimizerState,
    trace: ForwardTrace,
    labels: np.ndarray,
    weights: np.ndarray | None,
    stream: str,
) -> tuple[ModelParams, OptimizerState, float]:
    loss, dlogits = cross_entropy(trace.probs, labels, weights)
    grads = backward(trace, params, dlogits)
    params, opt = apply_update(params, grads, opt, stream)
    return params, opt, loss


def strong_step(
    params: ModelParams,
    opt: OptimizerState,
    b_s: Batch,
    shift: ShiftConfig | None = None,
    target_x: np.ndarray | None = None,
) -> tuple[ModelParams, OptimizerState, float]:
    """One update on the mean cross-entropy of a strong batch.

    With a penalty-mode ``shift`` and target inputs, adds the weighted
    alignment penalty between source and target features.
    """
    _require_source(b_s, STRONG)
    trace = forward(params, b_s.x)
    if shift is None or shift.penalty is None:
        return _descend(params, opt, trace, b_s.y, None, STRONG)
    if target_x is None:
        raise ConfigError(f"shift mode {shift.mode!r} needs target-domain inputs", "shift.mode")
    trace_t = forward(params, target_x)
    value, d_s, d_t, head = penalty_terms(params, trace, trace_t, shift)
    loss, dlogits = cross_entropy(trace.probs, b_s.y)
    grads = add_grads(
        backward(trace, params, dlogits, d_s),
        backward(trace_t, params, np.zeros_like(trace_t.logits), d_t),
    )
    for k, g in head.items():
        grads[k] = grads[k] + g
    params, opt = apply_update(params, grads, opt, STRONG)
    return params, opt, loss + value


def weak_step_plain(params: ModelParams, opt: OptimizerState, b_w: Batch) -> tuple[ModelParams, OptimizerState, float]:
    _require_source(b_w, WEAK)
    return _descend(params, opt, forward(params, b_w.x), b_w.y, None, WEAK)


def mil_k(batch_size: int, mil_fraction: float) -> int:
    return max(1, math.floor(mil_fraction * batch_size))


def top_k_indices(conf: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, ties broken by ascending index."""
    return np.argsort(-conf, kind="stable")[:k]


def weak_step_mil(
    params: ModelParams,
    opt: OptimizerState,
    b_w: Batch,
    mil_fraction: float = 0.25,
    confidence: str = "weak_label",
) -> tuple[ModelParams, OptimizerState, float, np.ndarray]:
    """Update on the mean loss of the k most confident weak examples only.

    ``confidence="weak_label"`` ranks by the probability of the weak label;
    ``"max_class"`` by the largest class probability.
    """
    _require_source(b_w, WEAK)
    if len(b_w) < 1:
        raise DimensionError("weak_step_mil: empty batch")
    trace = forward(params, b_w.x)
    if confidence == "weak_label":
        conf = confidence_scores(trace.probs, b_w.y)
    else:
        conf = trace.probs.max(axis=1)
    selected = top_k_indices(conf, mil_k(len(b_w), mil_fraction))
    params, opt, loss = _descend(params, opt, trace.take(selected), b_w.y[selected], None, WEAK)
    return params, opt, loss, selected


def weak_step_weighted(
    params: ModelParams,
    opt: OptimizerState,
    b_w: Batch,
    confidence_hook: ConfidenceHook | None = None,
) -> tuple[ModelParams, OptimizerState, float, np.ndarray]:
    """Self-weighted weak update: each example's loss scaled by its own confidence."""
    _require_source(b_w, WEAK)
    trace = forward(params, b_w.x)
    conf = confidence_scores(trace.probs, b_w.y)
    if confidence_hook is not None:
        conf = np.asarray(confidence_hook(conf), dtype=np.float64)
    params, opt, loss = _descend(params, opt, trace, b_w.y, conf, WEAK)
    return params, opt, loss, conf


def sw_ws_iteration(
    params: ModelParams,
    opt: OptimizerState,
    b_s: Batch | None,
    b_w: Batch,
    use_strong: bool = True,
    confidence_hook: ConfidenceHook | None = None,
    shift: ShiftConfig | None = None,
) -> tuple[ModelParams, OptimizerState, float, float, np.ndarray]:
    """Strong update, then a weak update weighted by post-strong-update confidences."""
    if use_strong and b_s is None:
        raise ConfigError("use_strong is set but no strong batch was given", "scheme.use_strong")
    if not use_strong and b_s is not None:
        raise ConfigError("a strong batch was given but use_strong is false", "scheme.use_strong")
    strong_loss = float("nan")
    if b_s is not None:
        params, opt, strong_loss = strong_step(params, opt, b_s, shift, b_w.x)
    params, opt, weak_loss, conf = weak_step_weighted(params, opt, b_w, confidence_hook)
    return params, opt, strong_loss, weak_loss, conf


# -- training loop ---------------------------------------------------------------------


MONITORS = ("val_loss", "val_auc")


@dataclass(frozen=True)
class EarlyStopping:
    """Stop when the holdout metric has not improved for ``patience`` epochs.

    ``monitor="val_loss"`` tracks holdout cross-entropy against the weak
    labels; ``"val_auc"`` tracks slide-level AUC of the holdout bags, which
    does not penalise schemes that deliberately ignore discordant weak labels.
    """

    max_epochs: int = 30
    patience: int = 5
    monitor: str = "val_loss"

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ConfigError("must be >= 0", "train.max_epochs")
        if self.patience < 1:
            raise ConfigError("must be >= 1", "train.patience")
        if self.monitor not in MONITORS:
            raise ConfigError(f"expected one of {MONITORS}", "train.monitor")


@dataclass
class TrainData:
    weak: InstanceArrays
    strong: InstanceArrays | None = None
    holdout: InstanceArrays | None = None


@dataclass
class EpochRecord:
    epoch: int
    strong_loss: float
    weak_loss: float
    val_loss: float
    mean_confidence: float
    val_auc: float = float("nan")


HISTORY_COLUMNS = ("epoch", "strong_loss", "weak_loss", "val_loss", "mean_confidence", "val_auc")


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = float("inf")  # monitored quantity, oriented so lower is better

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for r in self.records:
            writer.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[1:]])
        return buf.getvalue()


class _Cycler:
    """Endless stream of shuffled fixed-size batches over ``n`` rows."""

    def __init__(self, n: int, batch: int, rng: Rng):
        self.n, self.batch, self.rng = n, min(batch, n), rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        rows = self.order[self.pos : self.pos + self.batch]
        self.pos += self.batch
        return rows


def _epoch_batches(n: int, batch: int, rng: Rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch] for i in range(0, n, batch)]


def validation_loss(params: ModelParams, holdout: InstanceArrays) -> float:
    return cross_entropy(forward(params, holdout.x).probs, holdout.labels)[0]


def validation_auc(params: ModelParams, holdout: InstanceArrays) -> float:
    """Slide-level AUC of the holdout bags (fraction of patches predicted high)."""
    pred = np.argmax(forward(params, holdout.x).probs, axis=1)
    ids, inverse = np.unique(holdout.bag_ids, return_inverse=True)
    frac = np.bincount(inverse, weights=pred, minlength=ids.size) / np.bincount(inverse, minlength=ids.size)
    labels = np.zeros(ids.size)
    labels[inverse] = holdout.labels
    pos, neg = frac[labels == 1], frac[labels == 0]
    if pos.size == 0 or neg.size == 0:
        return float("nan")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def train_run(
    data: TrainData,
    scheme: SchemeConfig,
    stop: EarlyStopping,
    seed: int,
    model_config: ModelConfig | None = None,
    shift: ShiftConfig | None = None,
    confidence_hook: ConfidenceHook | None = None,
) -> tuple[ModelParams, History]:
    """Train one model and return the parameters with the best holdout loss.

    An epoch is one pass over the primary stream: the weak data, or the
    strong data when ``weak_mode == "none"``. The other stream cycles
    independently. Without a holdout set the final parameters are returned.
    """
    shift = shift or ShiftConfig()
    if len(data.weak) == 0:
        raise ConfigError("weak dataset is empty", "data.weak")
    has_strong = data.strong is not None and len(data.strong) > 0
    if scheme.use_strong and not has_strong:
        raise ConfigError("scheme uses strong data but the strong dataset is empty", "data.strong")
    if not scheme.use_strong and has_strong:
        raise ConfigError("strong data supplied to a weak-only scheme", "data.strong")
    if shift.mode != "none" and not scheme.use_strong:
        raise ConfigError("shift strategies act on the strong source; scheme has none", "shift.mode")
    model_config = model_config or ModelConfig(input_dim=data.weak.x.shape[1])

    rng = Rng(seed)
    params = init_params(model_config, rng.spawn(0))
    opt = init_optimizer(params, scheme.optimizer, scheme.learning_rate, scheme.moments)
    primary_rng, strong_rng, aug_rng, target_rng = (rng.spawn(i) for i in (1, 2, 3, 4))

    s_only = scheme.weak_mode == "none"
    strong_cycle = _Cycler(len(data.strong), scheme.strong_batch, strong_rng) if has_strong else None
    # target-domain draws: for stain-transfer statistics and for S-only penalties
    target_cycle = _Cycler(len(data.weak), scheme.weak_batch, target_rng)

    has_holdout = data.holdout is not None and len(data.holdout) > 0

    def evaluate(p: ModelParams) -> tuple[float, float]:
        if not has_holdout:
            return float("nan"), float("nan")
        return validation_loss(p, data.holdout), validation_auc(p, data.holdout)

    def monitored(val_loss: float, val_auc: float) -> float:
        return val_loss if stop.monitor == "val_loss" else -val_auc

    history = History()
    best = params
    if has_holdout:
        history.best_score = monitored(*evaluate(params))
    wait = 0

    def strong_batch(rows: np.ndarray) -> Batch:
        x = data.strong.x[rows]
        if shift.uses_stain_transfer:
            x = transfer_feature_stats(x, data.weak.x[target_cycle.next()])
        if shift.uses_jitter:
            x = jitter_features(x, aug_rng, shift.jitter_strength)
        return Batch(x, data.strong.labels[rows], STRONG)

    for epoch in range(1, stop.max_epochs + 1):
        strong_losses, weak_losses, confs = [], [], []
        n_primary = len(data.strong) if s_only else len(data.weak)
        batch_size = scheme.strong_batch if s_only else scheme.weak_batch
        for it, rows in enumerate(_epoch_batches(n_primary, batch_size, primary_rng)):
            if s_only:
                b_s = strong_batch(rows)
                target_x = data.weak.x[target_cycle.next()] if shift.penalty else None
                params, opt, loss = strong_step(params, opt, b_s, shift, target_x)
                strong_losses.append(loss)
                continue
            b_w = Batch(data.weak.x[rows], data.weak.labels[rows], WEAK, data.weak.bag_ids[rows])
            b_s = strong_batch(strong_cycle.next()) if scheme.use_strong else None
            if scheme.weak_mode == "sw_ws":
                params, opt, s_loss, w_loss, conf = sw_ws_iteration(
                    params, opt, b_s, b_w, scheme.use_strong, confidence_hook, shift
                )
                if b_s is not None:
                    strong_losses.append(s_loss)
            else:
                if b_s is not None:
                    params, opt, s_loss = strong_step(params, opt, b_s, shift, b_w.x)
                    strong_losses.append(s_loss)
                if scheme.weak_mode == "mil_ws":
                    params_before = params
                    params, opt, w_loss, selected = weak_step_mil(
                        params, opt, b_w, scheme.mil_fraction, scheme.mil_confidence
                    )
                    if selected.size != mil_k(len(b_w), scheme.mil_fraction):
                        raise AssertionError(f"MIL selected {selected.size} of {len(b_w)} examples")
                    conf = confidence_scores(forward(params_before, b_w.x).probs, b_w.y)
                else:
                    trace = forward(params, b_w.x)
                    conf = confidence_scores(trace.probs, b_w.y)
                    params, opt, w_loss = _descend(params, opt, trace, b_w.y, None, WEAK)
            weak_losses.append(w_loss)
            confs.append(conf)
            if not math.isfinite(w_loss):
                raise NumericError(f"non-finite weak loss at epoch {epoch}, iteration {it}")
        if any(not math.isfinite(v) for v in strong_losses):
            raise NumericError(f"non-finite strong loss in epoch {epoch}")

        val_loss, val_auc = evaluate(params)
        mean_conf = float(np.mean(np.concatenate(confs))) if confs else float("nan")
        history.records.append(
            EpochRecord(epoch, _mean(strong_losses), _mean(weak_losses), val_loss, mean_conf, val_auc)
        )
        score = monitored(val_loss, val_auc)
        if math.isnan(score):
            best = params
            history.best_epoch = epoch
            continue
        if score < history.best_score:
            history.best_score, history.best_epoch, best, wait = score, epoch, params, 0
        else:
            wait += 1
            if wait >= stop.patience:
                break
    return best, history
