"""Self-verification suite behind ``weakstrong verify``.

Each check compares a production routine against an independent, slower
oracle (pair enumeration, finite differences, a scalar reference loop) and
returns a ``CheckResult``. The brute-force oracles are public so the test
suite can reuse them.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import ConfigError
from .evalmetrics import kendall_tau, roc_auc
from .model import (
    BackwardFn,
    ModelConfig,
    ModelParams,
    backward,
    forward,
    grad_check_report,
    init_params,
    param_shapes,
)
from .numerics import Rng
from .optim import AdamState, adam_step, init_optimizer
from .schemes import (
    WEAK,
    Batch,
    EarlyStopping,
    SchemeConfig,
    TrainData,
    confidence_scores,
    mil_k,
    train_run,
    weak_step_mil,
)
from .shift import coral, median_bandwidth, mmd2, stain_transfer
from .synthdata import (
    GenConfig,
    blue_ratio,
    generate_strong_dataset,
    generate_weak_dataset,
    render_synthetic_patch,
    strong_arrays,
    weak_arrays,
)

GRAD_TOL = 1e-5

# linear model, then {1, 2, 3} hidden layers x {2, 5} classes, then a domain head
ARCHITECTURES = (
    ModelConfig(input_dim=4, hidden_dims=()),
    ModelConfig(input_dim=4, hidden_dims=(8,)),
    ModelConfig(input_dim=4, hidden_dims=(8,), num_classes=5),
    ModelConfig(input_dim=8, hidden_dims=(32, 16)),
    ModelConfig(input_dim=5, hidden_dims=(12, 6), num_classes=5),
    ModelConfig(input_dim=5, hidden_dims=(16, 8, 4)),
    ModelConfig(input_dim=5, hidden_dims=(16, 8, 4), num_classes=5),
    ModelConfig(input_dim=6, hidden_dims=(12, 6), domain_head=True),
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<24s} {self.detail}  ({self.seconds:.2f}s)"


# -- brute-force oracles ------------------------------------------------------------------


def brute_auc(scores, labels) -> float:
    """AUC by enumerating every positive/negative pair."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y != 1]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def brute_tau_b(x, y) -> float:
    """Kendall's tau-b by enumerating every pair."""
    conc = disc = tie_x = tie_y = total = 0
    for i, j in itertools.combinations(range(len(x)), 2):
        dx = (x[i] > x[j]) - (x[i] < x[j])
        dy = (y[i] > y[j]) - (y[i] < y[j])
        total += 1
        tie_x += dx == 0
        tie_y += dy == 0
        if dx * dy > 0:
            conc += 1
        elif dx * dy < 0:
            disc += 1
    return (conc - disc) / math.sqrt((total - tie_x) * (total - tie_y))


def reference_adam(theta: float, grads: list[float], lr: float, b1=0.9, b2=0.999, eps=1e-8) -> list[float]:
    """Scalar Adam trajectory written out longhand."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(theta)
    return out


def numeric_gradient(fn: Callable[[], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences with one Richardson step; perturbs ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for j in range(flat.size):
        orig, diffs = flat[j], []
        for step in (h, h / 2):
            flat[j] = orig + step
            plus = fn()
            flat[j] = orig - step
            minus = fn()
            flat[j] = orig
            diffs.append((plus - minus) / (2 * step))
        gflat[j] = (4 * diffs[1] - diffs[0]) / 3
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(1e-12, np.abs(a) + np.abs(b))))


def buggy_backward(tensor: str, factor: float = 1.01) -> BackwardFn:
    """Test hook: a backward pass whose gradient for ``tensor`` is mis-scaled."""
    known = sorted({name for cfg in ARCHITECTURES for name in param_shapes(cfg)})
    if tensor not in known:
        raise ConfigError(f"unknown parameter; expected one of {known}", "inject_grad_bug")

    def fn(trace, params, dlogits, dfeatures=None):
        grads = backward(trace, params, dlogits, dfeatures)
        if tensor in grads:  # architectures without that layer are unaffected
            grads[tensor] = grads[tensor] * factor
        return grads

    return fn


# -- checks ---------------------------------------------------------------------------------


def check_gradients(backward_fn: BackwardFn = backward, seeds=(0, 1)) -> CheckResult:
    worst, where = 0.0, ""
    for cfg in ARCHITECTURES:
        for seed in seeds:
            report = grad_check_report(cfg, seed, backward_fn=backward_fn)
            if report.max_relative_error > worst:
                worst, where = report.max_relative_error, f"{report.worst_tensor} in hidden={cfg.hidden_dims}"
    passed = worst < GRAD_TOL
    detail = f"max rel err {worst:.2e}" + ("" if passed else f" at {where}")
    return CheckResult("gradcheck", passed, detail)


def check_metric_oracles(n_cases: int = 200, n_items: int = 50) -> CheckResult:
    rng = Rng(7)
    mismatches = 0
    for case in range(n_cases):
        r = rng.spawn(case)
        scores = r.integers(0, 12, size=n_items) / 4.0  # coarse grid forces ties
        labels = r.integers(0, 2, size=n_items)
        labels[:2] = (0, 1)
        groups = r.integers(0, 5, size=n_items)
        groups[:2] = (0, 4)
        if roc_auc(scores, labels) != brute_auc(scores.tolist(), labels.tolist()):
            mismatches += 1
        if kendall_tau(scores, groups) != brute_tau_b(scores.tolist(), groups.tolist()):
            mismatches += 1
    worked = roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    passed = mismatches == 0 and worked == 0.75
    return CheckResult("metric oracles", passed, f"{mismatches} mismatches in {2 * n_cases} cases; worked AUC {worked}")


def check_reduction(epochs: int = 3) -> CheckResult:
    """SW-WS with confidences forced to 1 must equal plain joint training bit for bit."""
    gen = GenConfig(n_bags=20, instances_per_bag=8, n_strong=64, seed=3)
    data = TrainData(weak_arrays(generate_weak_dataset(gen)), strong_arrays(generate_strong_dataset(gen)))
    stop = EarlyStopping(max_epochs=epochs)
    plain, _ = train_run(data, SchemeConfig(weak_mode="plain", weak_batch=32, strong_batch=16), stop, seed=5)
    sw, _ = train_run(
        data,
        SchemeConfig(weak_mode="sw_ws", weak_batch=32, strong_batch=16),
        stop,
        seed=5,
        confidence_hook=np.ones_like,
    )
    same = plain.equals(sw)
    return CheckResult("sw-ws reduction (c=1)", same, "bitwise equal" if same else "parameters differ")


def check_mil_cardinality(iterations: int = 100, batch: int = 128) -> CheckResult:
    cfg = ModelConfig(input_dim=4, hidden_dims=(8,))
    rng = Rng(11)
    params = init_params(cfg, rng.spawn(0))
    opt = init_optimizer(params, "adam", 1e-3)
    k = mil_k(batch, 0.25)
    bad = 0
    for it in range(iterations):
        r = rng.spawn(1 + it)
        b = Batch(r.standard_normal((batch, 4)), r.integers(0, 2, size=batch), WEAK)
        conf = confidence_scores(forward(params, b.x).probs, b.y)
        oracle = sorted(range(batch), key=lambda i: (-conf[i], i))[:k]
        params, opt, _, selected = weak_step_mil(params, opt, b)
        if selected.size != k or selected.tolist() != oracle:
            bad += 1
    return CheckResult("mil cardinality", bad == 0, f"k={k}, {bad}/{iterations} iterations off")


def check_stain_self_transfer(n: int = 6) -> CheckResult:
    worst = 0.0
    for i in range(n):
        img = render_synthetic_patch(Rng(20 + i), nuclei_density=(i + 1) / (n + 1))
        out = stain_transfer(img, img).image
        worst = max(worst, float(np.abs(out - img).max()))
    return CheckResult("stain self-transfer", worst <= 1.0, f"max deviation {worst:.3g} levels")


def check_penalties(n_pairs: int = 20) -> CheckResult:
    worst_zero = worst_grad = 0.0
    for i in range(n_pairs):
        r = Rng(100 + i)
        a = r.standard_normal((6, 3))
        b = r.standard_normal((5, 3)) + 0.5
        worst_zero = max(worst_zero, abs(mmd2(a, a, 1.0)[0]), abs(coral(a, a)[0]))
        sigma = median_bandwidth(a, b)
        for fn in (lambda: mmd2(a, b, sigma), lambda: coral(a, b)):
            _, d_a, d_b = fn()
            worst_grad = max(
                worst_grad,
                relative_error(d_a, numeric_gradient(lambda: fn()[0], a)),
                relative_error(d_b, numeric_gradient(lambda: fn()[0], b)),
            )
    passed = worst_zero <= 1e-12 and worst_grad < GRAD_TOL
    return CheckResult("mmd/coral", passed, f"identical-input value {worst_zero:.1e}; grad rel err {worst_grad:.2e}")


def check_adam() -> CheckResult:
    cfg = ModelConfig(input_dim=1, hidden_dims=(), num_classes=2)
    params = ModelParams(cfg, {"head.weight": np.array([[0.3, -0.2]]), "head.bias": np.zeros(2)})
    grads_seq = [0.5, -0.25, 1.5]
    state = AdamState.zeros_like(params, lr=1e-3)
    got = []
    for g in grads_seq:
        grads = {"head.weight": np.array([[g, 0.0]]), "head.bias": np.zeros(2)}
        params, state = adam_step(params, grads, state)
        got.append(float(params.tensors["head.weight"][0, 0]))
    want = reference_adam(0.3, grads_seq, 1e-3)
    err = max(abs(a - b) for a, b in zip(got, want))
    first = abs(got[0] - 0.3)
    passed = err <= 1e-12 and abs(first - 1e-3) < 1e-3 * 1e-6
    return CheckResult("adam", passed, f"trajectory err {err:.1e}; first step {first:.6e}")


def check_blue_ratio() -> CheckResult:
    px = np.array([[[0, 0, 0], [0, 0, 255], [255, 255, 255]]], dtype=float)
    br = blue_ratio(px)[0]
    passed = br[0] == 0.0 and br[1] == 25500.0 and abs(br[2] - 16.67) < 0.01
    return CheckResult("blue ratio", passed, f"values {br[0]:.2f}, {br[1]:.2f}, {br[2]:.2f}")


def run_verification(inject_grad_bug: str | None = None) -> list[CheckResult]:
    """Run every check; ``inject_grad_bug`` mis-scales one parameter's gradient."""
    backward_fn = buggy_backward(inject_grad_bug) if inject_grad_bug else backward
    checks: list[Callable[[], CheckResult]] = [
        lambda: check_gradients(backward_fn),
        check_metric_oracles,
        check_reduction,
        check_mil_cardinality,
        check_stain_self_transfer,
        check_penalties,
        check_adam,
        check_blue_ratio,
    ]
    results = []
    for check in checks:
        t0 = time.perf_counter()
        result = check()
        results.append(replace(result, seconds=time.perf_counter() - t0))
    return results
