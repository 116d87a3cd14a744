"""Covariate-shift reduction: augmentations and domain-alignment penalties.

The strategies stack incrementally::

    none < color_jitter < stain_transfer < {mmd, coral, adversarial}

so e.g. ``mode="coral"`` also jitters and stain-transfers the source batch.

Image-space operations (``color_jitter``, ``stain_transfer``) work on
``(H, W, 3)`` float arrays with values in [0, 255]. Training runs in feature
space, where ``jitter_features`` and ``transfer_feature_stats`` play the same
roles on feature vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, ParameterError
from .model import ForwardTrace, ModelParams, cross_entropy
from .numerics import Rng

SHIFT_MODES = ("none", "color_jitter", "stain_transfer", "mmd", "coral", "adversarial")
PENALTY_MODES = ("mmd", "coral", "adversarial")

SOURCE, TARGET = 0, 1


@dataclass(frozen=True)
class ShiftConfig:
    mode: str = "none"
    penalty_weight: float = 1.0
    # "median" for the per-batch median heuristic, or a fixed positive sigma
    kernel_bandwidth: float | str = "median"
    grl_lambda: float = 1.0
    jitter_strength: float = 0.1

    def __post_init__(self):
        if self.mode not in SHIFT_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {SHIFT_MODES}", "shift.mode")
        if self.penalty_weight < 0:
            raise ConfigError("must be >= 0", "shift.penalty_weight")
        if isinstance(self.kernel_bandwidth, str):
            if self.kernel_bandwidth != "median":
                raise ConfigError("must be 'median' or a positive number", "shift.kernel_bandwidth")
        elif self.kernel_bandwidth <= 0:
            raise ConfigError("must be 'median' or a positive number", "shift.kernel_bandwidth")
        if not 0 <= self.jitter_strength < 1:
            raise ConfigError("must lie in [0, 1)", "shift.jitter_strength")

    @property
    def level(self) -> int:
        return SHIFT_MODES.index(self.mode)

    @property
    def uses_jitter(self) -> bool:
        return self.level >= 1

    @property
    def uses_stain_transfer(self) -> bool:
        return self.level >= 2

    @property
    def penalty(self) -> str | None:
        return self.mode if self.mode in PENALTY_MODES else None


# -- image-space augmentation ----------------------------------------------------


def color_jitter(img: np.ndarray, rng: Rng, strength: float) -> np.ndarray:
    """Per-channel random affine colour perturbation, clamped to [0, 255].

    Channel ``c`` becomes ``alpha_c * c + beta_c`` with
    ``alpha_c ~ U[1-s, 1+s]`` and ``beta_c ~ U[-s*255/4, s*255/4]``.
    """
    if not 0 <= strength < 1:
        raise ParameterError(f"strength must lie in [0, 1), got {strength}")
    alpha = rng.uniform(3, 1.0 - strength, 1.0 + strength)
    beta = rng.uniform(3, -strength * 255 / 4, strength * 255 / 4)
    return np.clip(img * alpha + beta, 0.0, 255.0)


def rgb_to_od(img: np.ndarray) -> np.ndarray:
    return -np.log((np.asarray(img, dtype=np.float64) + 1.0) / 256.0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    return np.clip(256.0 * np.exp(-od) - 1.0, 0.0, 255.0)


@dataclass
class StainStats:
    """Stain basis and concentration spread of one image.

    ``basis`` rows are the two unit stain vectors in OD space (hematoxylin
    first) followed by their normalised cross product, which carries the
    residual OD that two stains cannot explain.
    """

    od_mean: np.ndarray  # (3,)
    basis: np.ndarray  # (3, 3)
    conc_p1: np.ndarray  # (2,)
    conc_p99: np.ndarray  # (2,)

    @property
    def stain_vectors(self) -> np.ndarray:
        return self.basis[:2]

    def concentrations(self, od: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.basis.T, od.T).T


def _orient(v: np.ndarray) -> np.ndarray:
    v = v / np.linalg.norm(v)
    return -v if v.sum() < 0 else v


def estimate_stain_stats(
    img: np.ndarray, od_threshold: float = 0.15, percentile: float = 1.0, rel_tol: float = 1e-6
) -> StainStats | None:
    """Macenko-style stain basis from the OD covariance eigenvectors.

    Returns ``None`` when the OD covariance is rank-deficient (fewer than two
    usable directions), which callers treat as the degenerate case.
    """
    od = rgb_to_od(img).reshape(-1, 3)
    tissue = od[np.linalg.norm(od, axis=1) > od_threshold]
    if tissue.shape[0] < 3:
        return None
    cov = np.cov(tissue, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    if evals[2] <= 1e-12 or evals[1] <= rel_tol * evals[2]:
        return None
    plane = evecs[:, [2, 1]]
    plane = plane * np.where(plane.sum(axis=0) < 0, -1.0, 1.0)
    proj = tissue @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [percentile, 100 - percentile])
    v_lo = _orient(plane @ np.array([np.cos(lo), np.sin(lo)]))
    v_hi = _orient(plane @ np.array([np.cos(hi), np.sin(hi)]))
    if abs(float(v_lo @ v_hi)) > 1 - 1e-9:
        return None
    # hematoxylin absorbs more red than eosin does
    h, e = (v_lo, v_hi) if v_lo[0] >= v_hi[0] else (v_hi, v_lo)
    r = np.cross(h, e)
    basis = np.stack([h, e, r / np.linalg.norm(r)])
    conc = np.linalg.solve(basis.T, od.T).T[:, :2]
    p1, p99 = np.percentile(conc, [1, 99], axis=0)
    if np.any(p99 <= 1e-9):
        return None
    return StainStats(od_mean=od.mean(axis=0), basis=basis, conc_p1=p1, conc_p99=p99)


@dataclass
class StainTransferResult:
    image: np.ndarray
    fallback: bool
    source_stats: StainStats | None = None
    target_stats: StainStats | None = None


def _od_moment_match(src: np.ndarray, target: np.ndarray) -> np.ndarray:
    od_s = rgb_to_od(src).reshape(-1, 3)
    od_t = rgb_to_od(target).reshape(-1, 3)
    mu_s, sd_s = od_s.mean(axis=0), od_s.std(axis=0)
    mu_t, sd_t = od_t.mean(axis=0), od_t.std(axis=0)
    ratio = np.divide(sd_t, sd_s, out=np.zeros(3), where=sd_s > 0)
    out = mu_t + (od_s - mu_s) * ratio
    return od_to_rgb(out).reshape(src.shape)


def stain_transfer(src: np.ndarray, target: np.ndarray) -> StainTransferResult:
    """Re-render ``src`` with the stain colours of ``target``.

    Source concentrations are rescaled so their 99th percentiles match the
    target's, then recomposed with the target basis. If either image has a
    degenerate OD covariance, falls back to per-channel OD mean/std matching
    and sets ``fallback``.
    """
    src = np.asarray(src, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if src.size == 0 or target.size == 0:
        raise DimensionError("stain_transfer: empty image")
    if src.shape[-1] != 3 or target.shape[-1] != 3:
        raise DimensionError("stain_transfer: images must have 3 channels")
    s_stats = estimate_stain_stats(src)
    t_stats = estimate_stain_stats(target)
    if s_stats is None or t_stats is None:
        return StainTransferResult(_od_moment_match(src, target), True, s_stats, t_stats)
    od = rgb_to_od(src).reshape(-1, 3)
    conc = s_stats.concentrations(od)
    conc[:, :2] *= t_stats.conc_p99 / s_stats.conc_p99
    out = od_to_rgb(conc @ t_stats.basis).reshape(src.shape)
    return StainTransferResult(out, False, s_stats, t_stats)


# -- feature-space analogues -------------------------------------------------------


def jitter_features(x: np.ndarray, rng: Rng, strength: float) -> np.ndarray:
    """Per-example, per-feature random affine perturbation (colour-jitter analogue)."""
    if not 0 <= strength < 1:
        raise ParameterError(f"strength must lie in [0, 1), got {strength}")
    alpha = rng.uniform(x.shape, 1.0 - strength, 1.0 + strength)
    beta = rng.uniform(x.shape, -strength, strength)
    return x * alpha + beta


def transfer_feature_stats(x_src: np.ndarray, x_tgt: np.ndarray) -> np.ndarray:
    """Match per-feature mean and std of a source batch to a target batch."""
    mu_s, sd_s = x_src.mean(axis=0), x_src.std(axis=0)
    mu_t, sd_t = x_tgt.mean(axis=0), x_tgt.std(axis=0)
    ratio = np.divide(sd_t, sd_s, out=np.ones_like(sd_s), where=sd_s > 0)
    return mu_t + (x_src - mu_s) * ratio


# -- alignment penalties -----------------------------------------------------------


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(f_s: np.ndarray, f_t: np.ndarray) -> float:
    """Median pairwise distance over the pooled rows (1.0 if all coincide)."""
    pooled = np.vstack([f_s, f_t])
    d = np.sqrt(_sq_dists(pooled, pooled)[np.triu_indices(pooled.shape[0], k=1)])
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


def mmd2(f_s: np.ndarray, f_t: np.ndarray, sigma: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Biased (V-statistic) squared MMD with an RBF kernel, plus gradients.

    ``sigma`` is treated as a constant, including when it came from
    ``median_bandwidth`` on the same batch.
    """
    if sigma <= 0:
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    if f_s.shape[1] != f_t.shape[1]:
        raise DimensionError(f"mmd2: feature dims differ {f_s.shape} vs {f_t.shape}")
    n, m = f_s.shape[0], f_t.shape[0]
    s2 = sigma * sigma
    k_ss = np.exp(-_sq_dists(f_s, f_s) / (2 * s2))
    k_tt = np.exp(-_sq_dists(f_t, f_t) / (2 * s2))
    k_st = np.exp(-_sq_dists(f_s, f_t) / (2 * s2))
    value = k_ss.mean() + k_tt.mean() - 2.0 * k_st.mean()
    d_fs = (-2.0 / (n * n * s2)) * (k_ss.sum(1)[:, None] * f_s - k_ss @ f_s) + (
        2.0 / (n * m * s2)
    ) * (k_st.sum(1)[:, None] * f_s - k_st @ f_t)
    d_ft = (-2.0 / (m * m * s2)) * (k_tt.sum(1)[:, None] * f_t - k_tt @ f_t) + (
        2.0 / (n * m * s2)
    ) * (k_st.sum(0)[:, None] * f_t - k_st.T @ f_s)
    return float(value), d_fs, d_ft


def _covariance(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centered = f - f.mean(axis=0)
    return centered.T @ centered / (f.shape[0] - 1), centered


def coral(f_s: np.ndarray, f_t: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """CORAL distance ``||C_s - C_t||_F^2 / (4 d^2)`` and its gradients."""
    if f_s.shape[0] < 2 or f_t.shape[0] < 2:
        raise DimensionError("coral: each batch needs at least 2 rows")
    if f_s.shape[1] != f_t.shape[1]:
        raise DimensionError(f"coral: feature dims differ {f_s.shape} vs {f_t.shape}")
    d = f_s.shape[1]
    c_s, x_s = _covariance(f_s)
    c_t, x_t = _covariance(f_t)
    diff = c_s - c_t
    value = float((diff * diff).sum() / (4 * d * d))
    g = diff / (2 * d * d)  # d value / d C_s
    # the mean-centering term drops out because centered rows sum to zero
    d_fs = 2.0 / (f_s.shape[0] - 1) * x_s @ g
    d_ft = -2.0 / (f_t.shape[0] - 1) * x_t @ g
    return value, d_fs, d_ft


def adversarial_penalty(
    features: np.ndarray,
    domain_labels,
    head_weight: np.ndarray,
    head_bias: np.ndarray,
    grl_lambda: float,
) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Domain-classifier loss behind a gradient-reversal layer.

    Returns the domain cross-entropy, the gradient w.r.t. ``features`` after
    reversal (ordinary gradient times ``-grl_lambda``), and the ordinary
    head gradients.
    """
    labels = np.asarray(domain_labels)
    if features.shape[0] != labels.shape[0]:
        raise DimensionError(f"adversarial_penalty: {features.shape[0]} rows vs {labels.shape[0]} labels")
    if features.shape[1] != head_weight.shape[0]:
        raise DimensionError(f"adversarial_penalty: features {features.shape} vs head {head_weight.shape}")
    if not np.all((labels == SOURCE) | (labels == TARGET)):
        raise ParameterError("domain labels must be 0 (source) or 1 (target)")
    logits = features @ head_weight + head_bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    loss, dlogits = cross_entropy(probs, labels)
    head_grads = {"domain.weight": features.T @ dlogits, "domain.bias": dlogits.sum(axis=0)}
    feature_grads = -grl_lambda * (dlogits @ head_weight.T)
    return loss, feature_grads, head_grads


def domain_accuracy(features: np.ndarray, domain_labels, head_weight: np.ndarray, head_bias: np.ndarray) -> float:
    pred = np.argmax(features @ head_weight + head_bias, axis=1)
    return float(np.mean(pred == np.asarray(domain_labels)))


def penalty_terms(
    params: ModelParams, trace_s: ForwardTrace, trace_t: ForwardTrace, cfg: ShiftConfig
) -> tuple[float, np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Weighted alignment penalty between source and target features.

    Returns ``(value, d_features_source, d_features_target, head_grads)``,
    all already scaled by ``cfg.penalty_weight``. ``head_grads`` is empty
    except in adversarial mode.
    """
    f_s, f_t = trace_s.features, trace_t.features
    lam = cfg.penalty_weight
    if cfg.penalty == "mmd":
        sigma = median_bandwidth(f_s, f_t) if cfg.kernel_bandwidth == "median" else float(cfg.kernel_bandwidth)
        value, d_s, d_t = mmd2(f_s, f_t, sigma)
        return lam * value, lam * d_s, lam * d_t, {}
    if cfg.penalty == "coral":
        value, d_s, d_t = coral(f_s, f_t)
        return lam * value, lam * d_s, lam * d_t, {}
    if cfg.penalty == "adversarial":
        if not params.config.domain_head:
            raise ConfigError("adversarial mode needs model.domain_head = true", "model.domain_head")
        feats = np.vstack([f_s, f_t])
        labels = np.concatenate([np.full(len(f_s), SOURCE), np.full(len(f_t), TARGET)])
        value, d_f, head = adversarial_penalty(
            feats, labels, params["domain.weight"], params["domain.bias"], cfg.grl_lambda
        )
        n = len(f_s)
        return lam * value, lam * d_f[:n], lam * d_f[n:], {k: lam * v for k, v in head.items()}
    raise ConfigError(f"mode {cfg.mode!r} has no penalty term", "shift.mode")
