"""Dense float64 matrix helpers, a splittable deterministic RNG, and a
finite-difference gradient oracle.

All functions are pure; matrices are plain 2-D ``numpy.ndarray`` values in
row-major float64.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import InvalidInputError, OracleError


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 array, rejecting other ranks."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


class Rng:
    """Splittable deterministic random source.

    A child obtained through :meth:`child` is keyed by ``(seed, label path)``
    only, so its stream never depends on how many draws happened on the
    parent or on sibling generators. The backing bit generator is Philox
    (counter based), keyed by a SHA-256 hash of the path.
    """

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(_path)
        self._gen: np.random.Generator | None = None

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, self.path + tuple(str(l) for l in labels))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            tag = "/".join([str(self.seed), *self.path]).encode()
            key = int.from_bytes(hashlib.sha256(tag).digest()[:16], "little")
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path)!r})"


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for overflow safety."""
    m = as_matrix(m)
    if m.shape[1] < 1:
        raise InvalidInputError("softmax_rows needs at least one column")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("softmax_rows input contains non-finite entries")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def gram(m) -> np.ndarray:
    """Return ``m @ m.T`` (pairwise row inner products)."""
    m = as_matrix(m)
    return m @ m.T


def frobenius_sq_dist(a, b) -> float:
    """Squared Frobenius distance ``sum((a - b) ** 2)``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sum(d * d))


def sample_dirichlet(rng: Rng, alpha: float, k: int) -> np.ndarray:
    """Draw one Dirichlet(alpha * 1_k) vector via normalized Gamma draws."""
    if not np.isfinite(alpha) or alpha <= 0:
        raise InvalidInputError(f"alpha must be positive, got {alpha}")
    if k < 2:
        raise InvalidInputError(f"k must be >= 2, got {k}")
    gen = rng.generator
    # Gamma draws can underflow to exact zero for very small alpha; redraw.
    for _ in range(64):
        draws = gen.standard_gamma(alpha, size=k)
        total = draws.sum()
        if total > 0 and np.all(draws > 0):
            return draws / total
    raise InvalidInputError(f"could not draw a positive Dirichlet sample for alpha={alpha}")


def finite_diff_grad(f, at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix.

    Evaluates ``(f(x + h e_ij) - f(x - h e_ij)) / (2 h)`` for every entry.
    The result is the reference oracle used to validate analytic gradients;
    it never shares code with them.
    """
    if h <= 0:
        raise InvalidInputError(f"h must be positive, got {h}")
    at = as_matrix(at, "at")
    out = np.empty_like(at)
    for idx in np.ndindex(*at.shape):
        bumped = at.copy()
        bumped[idx] += h
        fp = float(f(bumped))
        bumped[idx] = at[idx] - h
        fm = float(f(bumped))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite evaluation at entry {idx}: f+={fp}, f-={fm}")
        out[idx] = (fp - fm) / (2.0 * h)
    return out
