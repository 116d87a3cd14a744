"""Dense 2-D tensor helpers and a deterministic counter-based RNG.

Tensors are plain ``numpy.float64`` arrays of ndim 2. The helpers here add
the shape and finiteness checks that the rest of the package relies on;
numpy supplies the arithmetic itself.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

Tensor2D = np.ndarray

_MASK64 = (1 << 64) - 1


def as_tensor(a, name: str = "tensor") -> Tensor2D:
    """Return ``a`` as a fresh float64 2-D array, rejecting other ranks."""
    t = np.array(a, dtype=np.float64, copy=True)
    if t.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {t.shape}")
    return check_finite(t, name)


def check_finite(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        bad = int(np.size(t) - np.count_nonzero(np.isfinite(t)))
        raise NumericError(f"{name} has {bad} non-finite entries")
    return t


def _require_same_shape(a: Tensor2D, b: Tensor2D, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul result")


def add(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _require_same_shape(a, b, "add")
    return check_finite(a + b, "add result")


def sub(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _require_same_shape(a, b, "sub")
    return check_finite(a - b, "sub result")


def mul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _require_same_shape(a, b, "mul")
    return check_finite(a * b, "mul result")


def scale(a: Tensor2D, s: float) -> Tensor2D:
    return check_finite(a * float(s), "scale result")


def transpose(a: Tensor2D) -> Tensor2D:
    return np.ascontiguousarray(a.T)


def row_sum(a: Tensor2D) -> Tensor2D:
    return a.sum(axis=1, keepdims=True)


def col_mean(a: Tensor2D) -> Tensor2D:
    if a.shape[0] == 0:
        raise DimensionError("col_mean of a tensor with zero rows")
    return a.mean(axis=0, keepdims=True)


def row_max(a: Tensor2D) -> Tensor2D:
    return a.max(axis=1, keepdims=True)


def log_softmax(logits: Tensor2D) -> Tensor2D:
    """Row-wise log-softmax with max-shift, safe for logits of any magnitude."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: Tensor2D) -> Tensor2D:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def safe_log(a: np.ndarray) -> np.ndarray:
    """Natural log clamped at the smallest normal float (never -inf)."""
    return np.log(np.maximum(a, np.finfo(np.float64).tiny))


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class Rng:
    """Deterministic random stream keyed by ``(seed, stream)``.

    Backed by the Philox counter-based bit generator, so the state transition
    is pure integer arithmetic and identical on every platform. ``spawn``
    derives an independent child stream (one per fold, per data source, ...).
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0:
            raise ParameterError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = self.seed | (_splitmix64(self.stream) << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, index: int) -> "Rng":
        return Rng(self.seed, _splitmix64(self.stream ^ _splitmix64(int(index))))

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, p=None, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, p=p, replace=replace)

    def standard_normal(self, size) -> np.ndarray:
        """Box-Muller transform over the uniform stream."""
        count = int(np.prod(size))
        pairs = (count + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return z[:count].reshape(size)


def rng_normal(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> Tensor2D:
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.full((rows, cols), float(mean))
    return mean + std * rng.standard_normal((rows, cols))
