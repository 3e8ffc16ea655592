"""Low-rank adapter gradient containers and the matrix ops built on them.

A transmitted gradient for one adapted weight is the factor pair (A, B)
with A of shape (n, r) and B of shape (r, n), r <= n. The implied dense
update is the product A @ B, shape (n, n).
"""

import dataclasses

import numpy as np


def as_matrix(x, name: str = "array") -> np.ndarray:
    """Coerce to a finite 2-D float64 array; reject anything else."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def frobenius_norm(x) -> float:
    """Frobenius norm of a matrix, validated finite."""
    return float(np.linalg.norm(as_matrix(x, "norm input")))


def lowrank_product(a, b=None) -> np.ndarray:
    """Dense update A @ B implied by a factor pair.

    Args:
      a: left factor, shape (n, r), or a LoraGrad carrying both factors.
      b: right factor, shape (r, n); omit when a is a LoraGrad.

    Returns:
      The (n, n) product.
    """
    if isinstance(a, LoraGrad):
        if b is not None:
            raise ValueError("pass either a LoraGrad or two factors, not both")
        a, b = a.a, a.b
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dims disagree: {a.shape} @ {b.shape}")
    if b.shape[1] != a.shape[0]:
        raise ValueError(f"product must be square, got {a.shape} @ {b.shape}")
    return a @ b


def clip_factor(x, c: float) -> np.ndarray:
    """Scale a tensor down to Frobenius norm at most c.

    Returns x * min(1, c / ||x||_F). The zero matrix passes through
    unchanged, and c = inf disables clipping.
    """
    if not c > 0.0:
        raise ValueError(f"clip bound must be positive, got {c}")
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("clip input contains non-finite entries")
    norm = float(np.linalg.norm(arr))
    if norm <= c:
        return arr.copy()
    return arr * (c / norm)


@dataclasses.dataclass(frozen=True, eq=False)
class LoraGrad:
    """One client's gradient for one adapted weight at one epoch.

    Attributes:
      a: left factor, shape (n, r).
      b: right factor, shape (r, n).
      layer: layer index, >= 0.
      module_tag: which projection inside the layer this adapts.
      epoch: training epoch the observation belongs to, >= 0.
    """

    a: np.ndarray
    b: np.ndarray
    layer: int
    module_tag: str
    epoch: int

    def __post_init__(self):
        a = as_matrix(self.a, "a")
        b = as_matrix(self.b, "b")
        n, r = a.shape
        if b.shape != (r, n):
            raise ValueError(f"b must have shape {(r, n)}, got {b.shape}")
        if r < 1 or r > n:
            raise ValueError(f"need 1 <= r <= n, got n={n}, r={r}")
        if self.layer < 0 or self.epoch < 0:
            raise ValueError("layer and epoch must be nonnegative")
        if not isinstance(self.module_tag, str) or not self.module_tag:
            raise ValueError("module_tag must be a nonempty string")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def r(self) -> int:
        return self.a.shape[1]

    def product(self) -> np.ndarray:
        return lowrank_product(self.a, self.b)
