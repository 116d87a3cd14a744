"""Synthetic slides (bags) and patches (instances) with Gleason label semantics.

Feature mode draws each instance from an isotropic Gaussian attached to its
true pattern (benign, 3, 4 or 5). A weak bag carries a (primary, secondary)
pattern pair, hence a Gleason score, a binary low/high label and one of the
five clinical groups; every instance inherits the bag's binary label, which
is wrong for e.g. the pattern-4 instances of a 3+4 bag. Strong instances are
labelled by their own pattern and pass through an affine covariate shift.

Image mode (``render_synthetic_patch``, ``blue_ratio``,
``select_top_patches``) exercises the patch-prioritisation pipeline.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, ParameterError
from .numerics import Rng

BENIGN = 0
PATTERNS = (BENIGN, 3, 4, 5)
LOW, HIGH = 0, 1
GROUP_NAMES = ("<=6", "7=3+4", "7=4+3", "8", "9-10")

DATASET_FORMAT = "weakstrong-dataset"
DATASET_VERSION = 1

# slide counts per group (44 / 125 / 92 / 65 / 121); score 8 is drawn as 4+4 only,
# 3+5 and 5+3 being rare in practice.
DEFAULT_PAIR_WEIGHTS = {
    (3, 3): 44.0,
    (3, 4): 125.0,
    (4, 3): 92.0,
    (4, 4): 65.0,
    (4, 5): 50.0,
    (5, 4): 50.0,
    (5, 5): 21.0,
}


def pattern_label(pattern: int) -> int:
    return HIGH if pattern in (4, 5) else LOW


def score_label(score: int) -> int:
    return LOW if score <= 7 else HIGH


def gleason_group(primary: int, secondary: int) -> int:
    score = primary + secondary
    if score <= 6:
        return 0
    if score == 7:
        return 1 if primary == 3 else 2
    return 3 if score == 8 else 4


def default_pattern_means(dim: int, separation: float = 2.0) -> dict[int, np.ndarray]:
    """Benign at the origin; each higher pattern adds one more displaced axis.

    Patterns 4 and 5 share the second axis, so the low/high boundary is
    (mostly) a single hyperplane.
    """
    if dim < 3:
        raise ConfigError("default pattern means need input_dim >= 3", "gen.input_dim")
    means = {}
    for level, pattern in enumerate(PATTERNS):
        mu = np.zeros(dim)
        mu[:level] = separation
        means[pattern] = mu
    return means


def default_shift(dim: int) -> tuple[np.ndarray, np.ndarray]:
    a = 1.25 * np.eye(dim) + 0.5 * np.roll(np.eye(dim), 1, axis=1)
    return a, np.full(dim, 0.4)


def _pair_key(pair: tuple[int, int]) -> str:
    return f"{pair[0]}+{pair[1]}"


@dataclass
class GenConfig:
    n_bags: int = 447
    instances_per_bag: int = 8
    primary_fraction: float = 0.6
    benign_fraction: float = 0.2
    input_dim: int = 8
    pattern_separation: float = 4.0
    pattern_std: float = 1.0
    pattern_means: dict[int, list[float]] | None = None
    pair_weights: dict[tuple[int, int], float] = field(default_factory=lambda: dict(DEFAULT_PAIR_WEIGHTS))
    n_strong: int = 1000
    strong_pattern_weights: dict[int, float] = field(
        default_factory=lambda: {BENIGN: 0.25, 3: 0.25, 4: 0.25, 5: 0.25}
    )
    # None selects default_shift(); use identity/zeros explicitly for no shift
    shift_matrix: list[list[float]] | None = None
    shift_offset: list[float] | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("n_bags", "instances_per_bag", "input_dim"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"gen.{name}")
        if self.n_strong < 0:
            raise ConfigError("must be >= 0", "gen.n_strong")
        for name in ("primary_fraction", "benign_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError("must lie in [0, 1]", f"gen.{name}")
        if self.primary_fraction + self.benign_fraction > 1 + 1e-12:
            raise ConfigError("primary_fraction + benign_fraction must be <= 1", "gen.primary_fraction")
        if self.pattern_std <= 0:
            raise ConfigError("must be > 0", "gen.pattern_std")
        for (p, s), w in self.pair_weights.items():
            if p not in (3, 4, 5) or s not in (3, 4, 5) or w < 0:
                raise ConfigError(f"invalid pair {p}+{s} with weight {w}", "gen.pair_weights")
        if sum(self.pair_weights.values()) <= 0:
            raise ConfigError("weights must not all be zero", "gen.pair_weights")
        for p, w in self.strong_pattern_weights.items():
            if p not in PATTERNS or w < 0:
                raise ConfigError(f"invalid pattern {p} with weight {w}", "gen.strong_pattern_weights")
        if sum(self.strong_pattern_weights.values()) <= 0:
            raise ConfigError("weights must not all be zero", "gen.strong_pattern_weights")
        means = self.means()
        if set(means) != set(PATTERNS) or any(m.shape != (self.input_dim,) for m in means.values()):
            raise ConfigError(f"need a length-{self.input_dim} mean for each pattern", "gen.pattern_means")
        a, b = self.shift()
        if a.shape != (self.input_dim, self.input_dim) or b.shape != (self.input_dim,):
            raise ConfigError("shift shapes do not match input_dim", "gen.shift_matrix")
        if abs(np.linalg.det(a)) < 1e-12:
            raise ConfigError("shift matrix must be invertible", "gen.shift_matrix")

    def means(self) -> dict[int, np.ndarray]:
        if self.pattern_means is None:
            return default_pattern_means(self.input_dim, self.pattern_separation)
        return {int(k): np.asarray(v, dtype=np.float64) for k, v in self.pattern_means.items()}

    def shift(self) -> tuple[np.ndarray, np.ndarray]:
        a_def, b_def = default_shift(self.input_dim)
        a = a_def if self.shift_matrix is None else np.asarray(self.shift_matrix, dtype=np.float64)
        b = b_def if self.shift_offset is None else np.asarray(self.shift_offset, dtype=np.float64)
        return a, b

    def fraction_counts(self) -> tuple[int, int, int]:
        """(primary, secondary, benign) instance counts per bag."""
        n = self.instances_per_bag
        n_benign = int(round(self.benign_fraction * n))
        n_primary = min(int(round(self.primary_fraction * n)), n - n_benign)
        return n_primary, n - n_primary - n_benign, n_benign

    def to_dict(self) -> dict:
        return {
            "n_bags": self.n_bags,
            "instances_per_bag": self.instances_per_bag,
            "primary_fraction": self.primary_fraction,
            "benign_fraction": self.benign_fraction,
            "input_dim": self.input_dim,
            "pattern_separation": self.pattern_separation,
            "pattern_std": self.pattern_std,
            "pattern_means": None
            if self.pattern_means is None
            else {str(k): [float(x) for x in v] for k, v in self.pattern_means.items()},
            "pair_weights": {_pair_key(k): float(v) for k, v in self.pair_weights.items()},
            "n_strong": self.n_strong,
            "strong_pattern_weights": {str(k): float(v) for k, v in self.strong_pattern_weights.items()},
            "shift_matrix": self.shift_matrix,
            "shift_offset": self.shift_offset,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = set(cls.__dataclass_fields__)
        for key in d:
            if key not in known:
                raise ConfigError("unknown key", f"gen.{key}")
        d = dict(d)
        if d.get("pair_weights") is not None:
            pairs = {}
            for key, w in d["pair_weights"].items():
                try:
                    p, s = (int(t) for t in str(key).split("+"))
                except ValueError:
                    raise ConfigError(f"bad pair key {key!r}, expected e.g. '3+4'", "gen.pair_weights") from None
                pairs[(p, s)] = float(w)
            d["pair_weights"] = pairs
        for name in ("strong_pattern_weights", "pattern_means"):
            if d.get(name) is not None:
                d[name] = {int(k): v for k, v in d[name].items()}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc), "gen") from None


@dataclass
class Instance:
    features: np.ndarray
    true_pattern: int
    strong_label: int | None = None
    weak_label: int | None = None
    bag_id: int | None = None


@dataclass
class Bag:
    bag_id: int
    primary_pattern: int
    secondary_pattern: int
    instances: list[Instance]

    @property
    def gleason_score(self) -> int:
        return self.primary_pattern + self.secondary_pattern

    @property
    def weak_label(self) -> int:
        return score_label(self.gleason_score)

    @property
    def gleason_group(self) -> int:
        return gleason_group(self.primary_pattern, self.secondary_pattern)

    def features(self) -> np.ndarray:
        return np.stack([inst.features for inst in self.instances])

    def true_patterns(self) -> np.ndarray:
        return np.array([inst.true_pattern for inst in self.instances])


def _sample_pattern(rng: Rng, pattern: int, count: int, cfg: GenConfig, means) -> np.ndarray:
    return means[pattern] + cfg.pattern_std * rng.standard_normal((count, cfg.input_dim))


def generate_weak_dataset(cfg: GenConfig) -> list[Bag]:
    pairs = list(cfg.pair_weights)
    weights = np.array([cfg.pair_weights[p] for p in pairs], dtype=np.float64)
    root = Rng(cfg.seed).spawn(1)
    pair_idx = root.spawn(0).choice(len(pairs), size=cfg.n_bags, p=weights / weights.sum())
    means = cfg.means()
    n_primary, n_secondary, n_benign = cfg.fraction_counts()
    bags = []
    for bag_id in range(cfg.n_bags):
        primary, secondary = pairs[pair_idx[bag_id]]
        rng = root.spawn(1 + bag_id)
        patterns = np.array([primary] * n_primary + [secondary] * n_secondary + [BENIGN] * n_benign)
        patterns = patterns[rng.permutation(patterns.size)]
        x = np.empty((patterns.size, cfg.input_dim))
        for p in np.unique(patterns):
            rows = patterns == p
            x[rows] = _sample_pattern(rng, int(p), int(rows.sum()), cfg, means)
        label = score_label(primary + secondary)
        instances = [
            Instance(features=x[i], true_pattern=int(patterns[i]), weak_label=label, bag_id=bag_id)
            for i in range(patterns.size)
        ]
        bags.append(Bag(bag_id, int(primary), int(secondary), instances))
    return bags


def generate_strong_dataset(cfg: GenConfig) -> list[Instance]:
    rng = Rng(cfg.seed).spawn(2)
    keys = sorted(cfg.strong_pattern_weights)
    w = np.array([cfg.strong_pattern_weights[k] for k in keys], dtype=np.float64)
    patterns = np.array(keys)[rng.choice(len(keys), size=cfg.n_strong, p=w / w.sum())]
    means = cfg.means()
    x = np.stack([means[int(p)] for p in patterns]) if cfg.n_strong else np.empty((0, cfg.input_dim))
    x = x + cfg.pattern_std * rng.standard_normal((cfg.n_strong, cfg.input_dim))
    a, b = cfg.shift()
    x = x @ a.T + b
    return [
        Instance(features=x[i], true_pattern=int(patterns[i]), strong_label=pattern_label(int(patterns[i])))
        for i in range(cfg.n_strong)
    ]


@dataclass
class InstanceArrays:
    x: np.ndarray
    true_patterns: np.ndarray
    labels: np.ndarray  # the supervision label for this source
    bag_ids: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, rows) -> "InstanceArrays":
        return InstanceArrays(self.x[rows], self.true_patterns[rows], self.labels[rows], self.bag_ids[rows])


def weak_arrays(bags: list[Bag], input_dim: int | None = None) -> InstanceArrays:
    if not bags:
        dim = input_dim or 0
        return InstanceArrays(np.empty((0, dim)), np.empty(0, int), np.empty(0, int), np.empty(0, int))
    x = np.vstack([b.features() for b in bags])
    patterns = np.concatenate([b.true_patterns() for b in bags])
    labels = np.concatenate([np.full(len(b.instances), b.weak_label) for b in bags])
    ids = np.concatenate([np.full(len(b.instances), b.bag_id) for b in bags])
    return InstanceArrays(x, patterns, labels, ids)


def strong_arrays(instances: list[Instance], input_dim: int | None = None) -> InstanceArrays:
    if not instances:
        dim = input_dim or 0
        return InstanceArrays(np.empty((0, dim)), np.empty(0, int), np.empty(0, int), np.empty(0, int))
    x = np.stack([i.features for i in instances])
    patterns = np.array([i.true_pattern for i in instances])
    labels = np.array([i.strong_label for i in instances])
    return InstanceArrays(x, patterns, labels, np.full(len(instances), -1))


# -- persistence -----------------------------------------------------------------


def _instance_record(inst: Instance) -> dict:
    return {"features": [float(v) for v in inst.features], "true_pattern": inst.true_pattern}


def dataset_to_dict(cfg: GenConfig, bags: list[Bag], strong: list[Instance]) -> dict:
    return {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": cfg.seed,
        "gen_config": cfg.to_dict(),
        "bags": [
            {
                "bag_id": b.bag_id,
                "primary": b.primary_pattern,
                "secondary": b.secondary_pattern,
                "instances": [_instance_record(i) for i in b.instances],
            }
            for b in bags
        ],
        "strong": [_instance_record(i) for i in strong],
    }


def dataset_from_dict(payload: dict) -> tuple[GenConfig, list[Bag], list[Instance]]:
    if payload.get("format") != DATASET_FORMAT:
        raise ConfigError(f"not a dataset file (format={payload.get('format')!r})", "format")
    if payload.get("version") != DATASET_VERSION:
        raise ConfigError(f"unsupported dataset version {payload.get('version')}", "version")
    cfg = GenConfig.from_dict(payload["gen_config"])
    bags = []
    for rec in payload["bags"]:
        label = score_label(rec["primary"] + rec["secondary"])
        instances = [
            Instance(np.array(i["features"], dtype=np.float64), i["true_pattern"], weak_label=label, bag_id=rec["bag_id"])
            for i in rec["instances"]
        ]
        bags.append(Bag(rec["bag_id"], rec["primary"], rec["secondary"], instances))
    strong = [
        Instance(np.array(i["features"], dtype=np.float64), i["true_pattern"], strong_label=pattern_label(i["true_pattern"]))
        for i in payload["strong"]
    ]
    return cfg, bags, strong


def save_dataset(path: str | Path, cfg: GenConfig, bags: list[Bag], strong: list[Instance]) -> None:
    Path(path).write_text(json.dumps(dataset_to_dict(cfg, bags, strong), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> tuple[GenConfig, list[Bag], list[Instance]]:
    return dataset_from_dict(json.loads(Path(path).read_text()))


def export_csv(path: str | Path, bags: list[Bag], strong: list[Instance]) -> None:
    """One row per instance; empty cells where a label does not apply."""
    dim = (bags[0].instances[0].features.size if bags else strong[0].features.size) if (bags or strong) else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "bag_id", "true_pattern", "strong_label", "weak_label"] + [f"f{j}" for j in range(dim)])
        for b in bags:
            for inst in b.instances:
                writer.writerow(["weak", b.bag_id, inst.true_pattern, "", inst.weak_label] + [repr(float(v)) for v in inst.features])
        for inst in strong:
            writer.writerow(["strong", "", inst.true_pattern, inst.strong_label, ""] + [repr(float(v)) for v in inst.features])


# -- image-mode patch pipeline ---------------------------------------------------------


def blue_ratio(img: np.ndarray) -> np.ndarray:
    """Per-pixel Blue Ratio: ``100*B/(1+R+G) * 256/(1+R+G+B)``."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-1] != 3:
        raise DimensionError(f"blue_ratio expects RGB input, got shape {img.shape}")
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return (100.0 * b / (1.0 + r + g)) * (256.0 / (1.0 + r + g + b))


def patch_score(img: np.ndarray) -> float:
    return float(blue_ratio(img).mean())


def select_top_patches(patches: list[np.ndarray], n: int = 16) -> list[int]:
    """Indices of the ``n`` highest mean-BR patches; ties go to the lower index."""
    if not patches:
        raise ParameterError("select_top_patches: empty patch list")
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    scores = np.array([patch_score(p) for p in patches])
    return [int(i) for i in np.argsort(-scores, kind="stable")[:n]]


@dataclass(frozen=True)
class StainParams:
    hematoxylin: tuple[float, float, float] = (0.65, 0.70, 0.29)
    eosin: tuple[float, float, float] = (0.07, 0.99, 0.11)
    background_h: float = 0.05
    background_e: float = 0.35
    nucleus_h: float = 1.2
    nucleus_radius: float = 2.0
    max_nuclei: int = 40
    noise: float = 0.02


def render_synthetic_patch(
    rng: Rng, nuclei_density: float, stain_params: StainParams | None = None, size: int = 32
) -> np.ndarray:
    """Tissue-like RGB patch: eosin background plus Gaussian hematoxylin nuclei.

    Noise and all ``max_nuclei`` candidate centres are drawn before the
    density is applied, so for a fixed seed a denser patch contains every
    nucleus of a sparser one.
    """
    if not 0 <= nuclei_density <= 1:
        raise ParameterError(f"nuclei_density must lie in [0, 1], got {nuclei_density}")
    sp = stain_params or StainParams()
    noise = sp.noise * rng.standard_normal((size, size, 2))
    centres = rng.uniform((sp.max_nuclei, 2), 0.0, float(size))
    count = int(round(nuclei_density * sp.max_nuclei))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    absent = np.ones((size, size))
    for cy, cx in centres[:count]:
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sp.nucleus_radius**2))
        absent *= 1.0 - blob
    c_h = np.maximum(sp.background_h + sp.nucleus_h * (1.0 - absent) + noise[..., 0], 0.0)
    c_e = np.maximum(sp.background_e + noise[..., 1], 0.0)
    od = c_h[..., None] * np.asarray(sp.hematoxylin) + c_e[..., None] * np.asarray(sp.eosin)
    return np.clip(256.0 * np.exp(-od) - 1.0, 0.0, 255.0)


def render_candidate_patches(rng: Rng, n: int = 64, size: int = 32) -> tuple[list[np.ndarray], np.ndarray]:
    """Candidate patches of one synthetic slide with random nuclei densities."""
    densities = rng.uniform(n)
    return [render_synthetic_patch(rng.spawn(i), float(d), size=size) for i, d in enumerate(densities)], densities


def project_patches(patches: list[np.ndarray], out_dim: int, seed: int = 0) -> np.ndarray:
    """Flatten patches and map them through a fixed random projection.

    Links image mode to the feature-space classifier. Pixels are scaled to
    [0, 1] first; the projection is Gaussian with variance 1/n_pixels.
    """
    flat = np.stack([np.asarray(p, dtype=np.float64).reshape(-1) / 255.0 for p in patches])
    proj = Rng(seed).standard_normal((flat.shape[1], out_dim)) / np.sqrt(flat.shape[1])
    return flat @ proj


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Binary PPM (P6) dump of an RGB image, rounded to 8 bits."""
    img8 = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w, _ = img8.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img8.tobytes())
