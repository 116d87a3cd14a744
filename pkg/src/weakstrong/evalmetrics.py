"""Slide-level evaluation: scores, AUC, accuracy, Kendall's tau-b, k-fold CV."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, StratificationError, UndefinedMetricError
from .model import ModelConfig, forward, predict
from .numerics import Rng
from .schemes import EarlyStopping, SchemeConfig, TrainData, train_run
from .shift import ShiftConfig
from .synthdata import HIGH, Bag, Instance, pattern_label, strong_arrays, weak_arrays

Predictor = Callable[[Bag], np.ndarray]


@dataclass
class SlideScore:
    bag_id: int
    score: float
    true_label: int
    gleason_group: int


def slide_score(patch_predictions) -> float:
    """Fraction of patches predicted high-grade."""
    preds = np.asarray(patch_predictions)
    if preds.size == 0:
        raise ValueError("slide_score: empty slide")
    return float(np.count_nonzero(preds == HIGH) / preds.size)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC via mid-ranks; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise ValueError("accuracy: empty input")
    return float(np.mean((scores >= threshold) == (labels == HIGH)))


def kendall_tau(scores, groups) -> float:
    """Kendall's tau-b between predicted scores and ordinal groups.

    ``(C - D) / sqrt((n0 - n1) (n0 - n2))`` where ``n1``/``n2`` count the
    pairs tied in scores/groups respectively.
    """
    x = np.asarray(scores, dtype=np.float64)
    y = np.asarray(groups, dtype=np.float64)
    n = x.size
    if n < 2 or y.size != n:
        raise UndefinedMetricError("kendall_tau needs >= 2 paired items")
    if np.unique(y).size < 2:
        raise UndefinedMetricError("kendall_tau: all items are in one group")
    iu = np.triu_indices(n, k=1)
    sx = np.sign(x[:, None] - x[None, :])[iu]
    sy = np.sign(y[:, None] - y[None, :])[iu]
    n0 = sx.size
    n1 = int(np.count_nonzero(sx == 0))
    n2 = int(np.count_nonzero(sy == 0))
    denom = np.sqrt(float(n0 - n1) * float(n0 - n2))
    if denom == 0:
        raise UndefinedMetricError("kendall_tau: all scores tied")
    return float(np.sum(sx * sy) / denom)


# -- cross-validation --------------------------------------------------------------------


def stratified_folds(bags: list[Bag], n_folds: int, rng: Rng, by: str = "label") -> list[np.ndarray]:
    """Partition bag positions into folds, stratified on label (or Gleason group)."""
    if n_folds < 2:
        raise ConfigError("need at least 2 folds", "cv.folds")
    key = np.array([b.weak_label if by == "label" else b.gleason_group for b in bags])
    assignment = np.empty(len(bags), dtype=int)
    offset = 0
    for value in np.unique(key):
        members = np.flatnonzero(key == value)
        members = members[rng.permutation(members.size)]
        assignment[members] = (np.arange(members.size) + offset) % n_folds
        offset += members.size
    folds = [np.flatnonzero(assignment == f) for f in range(n_folds)]
    for f, idx in enumerate(folds):
        labels = {bags[i].weak_label for i in idx}
        if len(labels) < 2:
            raise StratificationError(
                f"fold {f} has {idx.size} bags, all with label {labels}; need more bags per class"
            )
    return folds


def holdout_split(bags: list[Bag], positions: np.ndarray, fraction: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (train, holdout) split of the given bag positions."""
    labels = np.array([bags[i].weak_label for i in positions])
    held = []
    for value in np.unique(labels):
        members = positions[labels == value]
        members = members[rng.permutation(members.size)]
        held.extend(members[: int(round(fraction * members.size))].tolist())
    held_arr = np.array(sorted(held), dtype=int)
    return np.setdiff1d(positions, held_arr), held_arr


@dataclass
class FoldResult:
    fold: int
    auc: float
    accuracy: float
    kendall_tau: float
    n_test_bags: int
    best_epoch: int = 0
    epochs_run: int = 0


@dataclass
class CVSettings:
    folds: int = 5
    holdout_fraction: float = 0.2
    stratify: str = "label"
    threshold: float = 0.5
    workers: int = 1

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError("must be >= 2", "cv.folds")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("must lie in [0, 1)", "cv.holdout_fraction")
        if self.stratify not in ("label", "group"):
            raise ConfigError("expected 'label' or 'group'", "cv.stratify")
        if self.workers < 1:
            raise ConfigError("must be >= 1", "cv.workers")


def _check_leakage(test_bags, train_bags, holdout_bags) -> None:
    test = {b.bag_id for b in test_bags}
    train = {b.bag_id for b in train_bags}
    held = {b.bag_id for b in holdout_bags}
    if test & train or test & held or train & held:
        raise AssertionError(f"bag leakage between splits: {sorted((test & train) | (test & held) | (train & held))}")


def score_slides(bags: list[Bag], predictor: Predictor) -> list[SlideScore]:
    return [SlideScore(b.bag_id, slide_score(predictor(b)), b.weak_label, b.gleason_group) for b in bags]


def fold_metrics(scores: list[SlideScore], threshold: float = 0.5) -> tuple[float, float, float]:
    s = np.array([x.score for x in scores])
    y = np.array([x.true_label for x in scores])
    g = np.array([x.gleason_group for x in scores])
    try:
        tau = kendall_tau(s, g)
    except UndefinedMetricError:
        tau = 0.0  # every test slide scored identically: no ranking information
    return roc_auc(s, y), accuracy(s, y, threshold), tau


@dataclass(frozen=True)
class ConcordanceConfidence:
    concordant: float
    discordant: float
    n_concordant: int
    n_discordant: int

    @property
    def gap(self) -> float:
        return self.concordant - self.discordant


def confidence_by_concordance(params, bags: list[Bag]) -> ConcordanceConfidence:
    """Mean model probability of the weak label, split by instance concordance.

    An instance is discordant when its true pattern's class differs from the
    bag label, e.g. a pattern-4 patch in a 3+4 slide or benign tissue in a
    high-grade slide.
    """
    arrays = weak_arrays(bags)
    probs = forward(params, arrays.x).probs
    conf = probs[np.arange(len(arrays)), arrays.labels]
    truth = np.array([pattern_label(int(p)) for p in arrays.true_patterns])
    disc = truth != arrays.labels
    if disc.all() or not disc.any():
        raise UndefinedMetricError("need both concordant and discordant instances")
    return ConcordanceConfidence(
        float(conf[~disc].mean()), float(conf[disc].mean()), int((~disc).sum()), int(disc.sum())
    )


def run_fold(
    weak_bags: list[Bag],
    strong: list[Instance],
    fold: int,
    scheme: SchemeConfig,
    shift: ShiftConfig,
    seed: int,
    model_config: ModelConfig | None = None,
    stop: EarlyStopping = EarlyStopping(),
    cv: CVSettings = CVSettings(),
    predictor: Predictor | None = None,
) -> FoldResult:
    """Train on all but one fold and evaluate on its slides.

    Fold assignment depends only on ``seed`` and the bags, so every scheme
    run with the same seed sees the same splits.
    """
    split_rng = Rng(seed).spawn(100)
    folds = stratified_folds(weak_bags, cv.folds, split_rng.spawn(0), cv.stratify)
    test_pos = folds[fold]
    rest = np.setdiff1d(np.arange(len(weak_bags)), test_pos)
    train_pos, held_pos = holdout_split(weak_bags, rest, cv.holdout_fraction, split_rng.spawn(1 + fold))
    test_bags = [weak_bags[i] for i in test_pos]
    train_bags = [weak_bags[i] for i in train_pos]
    held_bags = [weak_bags[i] for i in held_pos]
    _check_leakage(test_bags, train_bags, held_bags)

    best_epoch = epochs_run = 0
    if predictor is None:
        dim = weak_bags[0].instances[0].features.size
        data = TrainData(
            weak=weak_arrays(train_bags, dim),
            strong=strong_arrays(strong, dim) if scheme.use_strong else None,
            holdout=weak_arrays(held_bags, dim) if held_bags else None,
        )
        params, history = train_run(
            data, scheme, stop, seed ^ fold, model_config, shift
        )
        best_epoch, epochs_run = history.best_epoch, len(history.records)

        def predictor(bag: Bag) -> np.ndarray:
            return predict(params, bag.features())

    auc, acc, tau = fold_metrics(score_slides(test_bags, predictor), cv.threshold)
    return FoldResult(fold, auc, acc, tau, len(test_bags), best_epoch, epochs_run)


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


METRICS = ("auc", "accuracy", "kendall_tau")


@dataclass
class RunReport:
    label: str
    folds: list[FoldResult]
    config_hash: str
    seed: int
    mean: dict[str, float] = field(default_factory=dict)
    stdev: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.folds = sorted(self.folds, key=lambda f: f.fold)
        for m in METRICS:
            vals = np.array([getattr(f, m) for f in self.folds])
            self.mean[m] = float(vals.mean())
            self.stdev[m] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "folds": [asdict(f) for f in self.folds],
            "mean": self.mean,
            "stdev": self.stdev,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_rows(self) -> list[list]:
        return [
            [self.label, f.fold, repr(f.auc), repr(f.accuracy), repr(f.kendall_tau), f.n_test_bags, f.best_epoch, f.epochs_run]
            for f in self.folds
        ]


FOLD_CSV_COLUMNS = ("row", "fold", "auc", "accuracy", "kendall_tau", "n_test_bags", "best_epoch", "epochs_run")


def folds_csv(reports: list[RunReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FOLD_CSV_COLUMNS)
    for r in reports:
        writer.writerows(r.csv_rows())
    return buf.getvalue()


def format_table(reports: list[RunReport], title: str = "") -> str:
    """Rows of ``mean (± stdev)`` for AUC, accuracy and Kendall's tau."""
    width = max([len(r.label) for r in reports] + [6])
    head = f"{'':<{width}}  {'AUC (stdev)':<18}  {'accuracy (stdev)':<18}  {'Kendall tau (stdev)':<18}"
    lines = [title] if title else []
    lines += [head, "-" * len(head)]
    for r in reports:
        cells = [f"{r.mean[m]:.3f} (± {r.stdev[m]:.3f})" for m in METRICS]
        lines.append(f"{r.label:<{width}}  " + "  ".join(f"{c:<18}" for c in cells).rstrip())
    return "\n".join(lines) + "\n"


def _run_fold_task(args):
    return run_fold(*args)


def cv_harness(
    weak_bags: list[Bag],
    strong: list[Instance],
    scheme: SchemeConfig,
    shift: ShiftConfig,
    seed: int,
    model_config: ModelConfig | None = None,
    stop: EarlyStopping = EarlyStopping(),
    cv: CVSettings = CVSettings(),
    predictor: Predictor | None = None,
    label: str | None = None,
) -> RunReport:
    if len(weak_bags) < 2 * cv.folds:
        raise ConfigError(f"need at least {2 * cv.folds} bags for {cv.folds}-fold CV, got {len(weak_bags)}", "gen.n_bags")
    tasks = [
        (weak_bags, strong, f, scheme, shift, seed, model_config, stop, cv, predictor) for f in range(cv.folds)
    ]
    if cv.workers > 1 and predictor is None:
        with ProcessPoolExecutor(max_workers=cv.workers) as pool:
            results = list(pool.map(_run_fold_task, tasks))
    else:
        results = [_run_fold_task(t) for t in tasks]
    payload = {
        "scheme": asdict(scheme),
        "shift": asdict(shift),
        "model": None if model_config is None else model_config.to_dict(),
        "stop": asdict(stop),
        "cv": {k: v for k, v in asdict(cv).items() if k != "workers"},  # parallelism never changes results
        "seed": seed,
    }
    return RunReport(label or scheme.label, results, config_hash(payload), seed)
