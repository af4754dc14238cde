"""Measures and test functions on the discrete hypercube {-1, 1}^n.

Points are stored by their bit index: bit ``i`` of the index is ``(x_{i+1} + 1) / 2``,
so index 0 is ``(-1, ..., -1)`` and index ``2**n - 1`` is ``(1, ..., 1)``.
Every measure is a dense table of ``2**n`` weights, normalized at construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "DEFAULT_DIMENSION_CAP",
    "HARD_DIMENSION_CAP",
    "MeasureSpecError",
    "DiscreteMeasure",
    "TestFunction",
    "spins",
    "encode",
    "decode",
    "build_measure",
    "uniform",
    "dirac",
    "product",
    "two_point",
    "ising",
    "slice_measure",
    "hadamard_rows",
    "explicit",
    "sylvester_hadamard",
    "mean",
    "covariance",
    "variance",
    "marginal",
    "entropy",
    "marginal_entropy_sum",
    "hamming_distance_to_set",
    "hamming_distance_to_set_bits",
    "is_lipschitz",
    "is_lipschitz_all_pairs",
]

DEFAULT_DIMENSION_CAP = 20
HARD_DIMENSION_CAP = 24


class MeasureSpecError(ValueError):
    """Raised for malformed or unsupported measure specifications."""


@lru_cache(maxsize=32)
def _spins_cached(n: int) -> np.ndarray:
    idx = np.arange(2**n, dtype=np.int64)
    table = ((idx[:, None] >> np.arange(n)) & 1).astype(np.float64) * 2.0 - 1.0
    table.flags.writeable = False
    return table


def spins(n: int) -> np.ndarray:
    """Return the ``(2**n, n)`` table of all cube points as floats in {-1, +1}."""
    return _spins_cached(int(n))


def encode(x: Sequence[float]) -> int:
    """Bit index of a point ``x`` in {-1, 1}^n."""
    idx = 0
    for i, xi in enumerate(x):
        if xi == 1:
            idx |= 1 << i
        elif xi != -1:
            raise ValueError(f"coordinate {i} is {xi!r}, expected -1 or +1")
    return idx


def decode(idx: int, n: int) -> np.ndarray:
    """Point in {-1, 1}^n with bit index ``idx``."""
    if not 0 <= idx < 2**n:
        raise ValueError(f"index {idx} out of range for n={n}")
    return np.array([1.0 if (idx >> i) & 1 else -1.0 for i in range(n)])


def _check_dimension(n: int, cap: int) -> None:
    if cap > HARD_DIMENSION_CAP:
        raise MeasureSpecError(f"dimension cap {cap} exceeds hard cap {HARD_DIMENSION_CAP}")
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise MeasureSpecError(f"n must be a positive integer, got {n!r}")
    if n > cap:
        raise MeasureSpecError(f"n={n} exceeds dimension cap {cap}")


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """A probability measure on {-1, 1}^n stored as a dense weight table.

    Parameters
    ----------
    n : int
        Dimension.
    weights : array_like
        ``2**n`` nonnegative weights indexed by the bit encoding. They are
        normalized to sum to one.
    label : str, optional
        Human-readable description carried into reports.
    """

    n: int
    weights: np.ndarray
    label: str = ""
    normalized: bool = field(default=True, init=False)

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64).ravel()
        if w.shape != (2**self.n,):
            raise MeasureSpecError(f"expected {2**self.n} weights for n={self.n}, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise MeasureSpecError("weights must be finite")
        if np.any(w < 0):
            raise MeasureSpecError("weights must be nonnegative")
        total = math.fsum(w)
        if total <= 0:
            raise MeasureSpecError("weight table has no positive mass")
        w = w / total
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return 2**self.n

    @property
    def support(self) -> np.ndarray:
        """Bit indices of atoms with positive mass."""
        return np.flatnonzero(self.weights > 0)

    @property
    def points(self) -> np.ndarray:
        return spins(self.n)

    def log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    def prob(self, event: Iterable[int] | np.ndarray) -> float:
        """Mass of a set of points given as bit indices or a boolean mask."""
        event = np.asarray(event)
        if event.dtype == bool:
            return float(self.weights[event].sum())
        return float(self.weights[np.unique(event.astype(np.int64))].sum())

    def describe(self) -> str:
        return self.label or f"explicit(n={self.n})"


@dataclass(frozen=True, eq=False)
class TestFunction:
    """A real function on {-1, 1}^n given by its table of values."""

    __test__ = False  # keep pytest from collecting this class

    n: int
    values: np.ndarray
    declared_lipschitz_constant: float | None = None

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64).ravel()
        if v.shape != (2**self.n,):
            raise ValueError(f"expected {2**self.n} values for n={self.n}, got {v.size}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        c = self.declared_lipschitz_constant
        if c is not None and not is_lipschitz(v, self.n, c):
            raise ValueError(f"values are not {c}-Hamming-Lipschitz")

    @classmethod
    def from_callable(cls, n: int, func, lipschitz: float | None = None) -> "TestFunction":
        pts = spins(n)
        return cls(n, np.array([func(x) for x in pts]), lipschitz)

    @classmethod
    def coordinate_sum(cls, n: int) -> "TestFunction":
        return cls(n, spins(n).sum(axis=1), 1.0)


def is_lipschitz(values: np.ndarray, n: int, constant: float = 1.0, atol: float = 1e-12) -> bool:
    """Edge scan: ``|f(x) - f(y)| <= 2 * constant`` for Hamming-adjacent ``x, y``.

    Adjacent points are at l1 distance 2, and the triangle inequality along
    a shortest path makes the edge condition equivalent to the all-pairs one.
    """
    values = np.asarray(values, dtype=np.float64)
    idx = np.arange(2**n)
    for i in range(n):
        diff = np.abs(values - values[idx ^ (1 << i)])
        if np.any(diff > 2.0 * constant + atol):
            return False
    return True


def is_lipschitz_all_pairs(values: np.ndarray, n: int, constant: float = 1.0, atol: float = 1e-12) -> bool:
    """Definitional check over all pairs; quadratic in ``2**n``."""
    values = np.asarray(values, dtype=np.float64)
    pts = spins(n)
    dist = np.abs(pts[:, None, :] - pts[None, :, :]).sum(axis=2)
    return bool(np.all(np.abs(values[:, None] - values[None, :]) <= constant * dist + atol))


# ---------------------------------------------------------------------------
# Families


def uniform(n: int, cap: int = DEFAULT_DIMENSION_CAP) -> DiscreteMeasure:
    _check_dimension(n, cap)
    return DiscreteMeasure(n, np.ones(2**n), label=f"uniform(n={n})")


def dirac(n: int, point: Sequence[float] | int, cap: int = DEFAULT_DIMENSION_CAP) -> DiscreteMeasure:
    _check_dimension(n, cap)
    if isinstance(point, (int, np.integer)):
        idx = int(point)
        if not 0 <= idx < 2**n:
            raise MeasureSpecError(f"point index {idx} out of range")
    else:
        if len(point) != n:
            raise MeasureSpecError(f"point has {len(point)} coordinates, expected {n}")
        try:
            idx = encode(point)
        except ValueError as exc:
            raise MeasureSpecError(str(exc)) from None
    w = np.zeros(2**n)
    w[idx] = 1.0
    return DiscreteMeasure(n, w, label=f"dirac(n={n}, index={idx})")


def product(n: int, means: Sequence[float], cap: int = DEFAULT_DIMENSION_CAP) -> DiscreteMeasure:
    """Independent coordinates with ``E[x_i] = means[i]``, each in (-1, 1)."""
    _check_dimension(n, cap)
    m = np.asarray(means, dtype=np.float64)
    if m.shape != (n,):
        raise MeasureSpecError(f"expected {n} means, got {m.size}")
    if np.any(np.abs(m) >= 1):
        raise MeasureSpecError("product means must lie strictly inside (-1, 1)")
    pts = spins(n)
    w = np.prod((1.0 + pts * m) / 2.0, axis=1)
    return DiscreteMeasure(n, w, label=f"product(n={n}, means={m.tolist()})")


def two_point(n: int, cap: int = DEFAULT_DIMENSION_CAP) -> DiscreteMeasure:
    _check_dimension(n, cap)
    w = np.zeros(2**n)
    w[0] = w[-1] = 0.5
    return DiscreteMeasure(n, w, label=f"two_point(n={n})")


def ising(
    n: int,
    J: np.ndarray | Sequence[Sequence[float]] | None = None,
    h: Sequence[float] | None = None,
    *,
    scale: float = 0.3,
    seed: int | None = None,
    cap: int = DEFAULT_DIMENSION_CAP,
) -> DiscreteMeasure:
    """Weights proportional to ``exp(x^T J x / 2 + <h, x>)``.

    When ``J`` is omitted a symmetric zero-diagonal coupling with
    ``N(0, scale**2)`` entries is drawn from ``seed``.
    """
    _check_dimension(n, cap)
    if J is None:
        rng = np.random.default_rng(seed)
        G = rng.normal(0.0, scale, size=(n, n))
        J = np.triu(G, 1)
        J = J + J.T
    J = np.asarray(J, dtype=np.float64)
    if J.shape != (n, n):
        raise MeasureSpecError(f"coupling matrix must be {n}x{n}, got {J.shape}")
    J = 0.5 * (J + J.T)
    hv = np.zeros(n) if h is None else np.asarray(h, dtype=np.float64)
    if hv.shape != (n,):
        raise MeasureSpecError(f"field must have {n} entries")
    pts = spins(n)
    energy = 0.5 * np.einsum("ki,ij,kj->k", pts, J, pts) + pts @ hv
    energy -= energy.max()
    label = f"ising(n={n}, seed={seed})" if seed is not None else f"ising(n={n})"
    return DiscreteMeasure(n, np.exp(energy), label=label)


def slice_measure(n: int, k: int, cap: int = DEFAULT_DIMENSION_CAP) -> DiscreteMeasure:
    """Uniform measure on ``{x : sum(x) = k}``."""
    _check_dimension(n, cap)
    if abs(k) > n or (n - k) % 2:
        raise MeasureSpecError(f"no points with coordinate sum {k} in dimension {n}")
    w = (spins(n).sum(axis=1) == k).astype(np.float64)
    return DiscreteMeasure(n, w, label=f"slice(n={n}, k={k})")


def sylvester_hadamard(n: int) -> np.ndarray:
    """Sylvester construction of the ``n x n`` Hadamard matrix (``n`` a power of two)."""
    if n < 1 or n & (n - 1):
        raise MeasureSpecError(f"Hadamard order must be a power of 2, got {n}")
    H = np.ones((1, 1))
    while H.shape[0] < n:
        H = np.block([[H, H], [H, -H]])
    return H


def hadamard_rows(n: int, cap: int = DEFAULT_DIMENSION_CAP) -> DiscreteMeasure:
    """Uniform measure over the rows of the Sylvester Hadamard matrix of order ``n``."""
    H = sylvester_hadamard(n)
    _check_dimension(n, cap)
    w = np.zeros(2**n)
    for row in H:
        w[encode(row)] += 1.0
    return DiscreteMeasure(n, w, label=f"hadamard_rows(n={n})")


def explicit(n: int, weights: Sequence[float], cap: int = DEFAULT_DIMENSION_CAP) -> DiscreteMeasure:
    _check_dimension(n, cap)
    return DiscreteMeasure(n, np.asarray(weights, dtype=np.float64), label=f"explicit(n={n})")


_FAMILY_ALIASES = {
    "two-point": "two_point",
    "twopoint": "two_point",
    "hadamard": "hadamard_rows",
    "hadamard-rows": "hadamard_rows",
    "slice": "slice",
}


def _require(spec: Mapping[str, Any], key: str) -> Any:
    if key not in spec:
        raise MeasureSpecError(f"field {key!r} is required for family {spec.get('family')!r}")
    return spec[key]


def build_measure(spec: Mapping[str, Any], cap: int = DEFAULT_DIMENSION_CAP) -> DiscreteMeasure:
    """Construct a measure from a JSON-style specification.

    ``spec`` holds ``"family"`` and ``"n"`` plus family parameters:
    ``point`` (dirac), ``means`` (product), ``J``/``h``/``scale``/``seed``
    (ising), ``k`` (slice), ``weights`` (explicit).
    """
    if not isinstance(spec, Mapping):
        raise MeasureSpecError("measure spec must be a JSON object")
    family = str(_require(spec, "family")).lower()
    family = _FAMILY_ALIASES.get(family, family)
    n = _require(spec, "n")
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)):
        raise MeasureSpecError(f"field 'n' must be an integer, got {n!r}")
    n = int(n)
    if family == "uniform":
        return uniform(n, cap)
    if family == "dirac":
        return dirac(n, spec.get("point", [1] * n), cap)
    if family == "product":
        return product(n, _require(spec, "means"), cap)
    if family == "two_point":
        return two_point(n, cap)
    if family == "ising":
        return ising(
            n,
            spec.get("J"),
            spec.get("h"),
            scale=float(spec.get("scale", 0.3)),
            seed=spec.get("seed", 0),
            cap=cap,
        )
    if family == "slice":
        return slice_measure(n, int(spec.get("k", 0)), cap)
    if family == "hadamard_rows":
        return hadamard_rows(n, cap)
    if family == "explicit":
        return explicit(n, _require(spec, "weights"), cap)
    raise MeasureSpecError(f"unknown measure family {spec['family']!r}")


# ---------------------------------------------------------------------------
# Exact statistics


def mean(nu: DiscreteMeasure) -> np.ndarray:
    return nu.weights @ nu.points


def covariance(nu: DiscreteMeasure) -> np.ndarray:
    pts = nu.points
    m = nu.weights @ pts
    second = pts.T @ (nu.weights[:, None] * pts)
    cov = second - np.outer(m, m)
    # the diagonal is exactly 1 - m_i^2 on the cube; write it from marginals
    p_plus = nu.weights @ (pts > 0)
    np.fill_diagonal(cov, 4.0 * p_plus * (1.0 - p_plus))
    return 0.5 * (cov + cov.T)


def variance(nu: DiscreteMeasure, phi: TestFunction | np.ndarray) -> float:
    vals = phi.values if isinstance(phi, TestFunction) else np.asarray(phi, dtype=np.float64)
    m = nu.weights @ vals
    return float(nu.weights @ (vals - m) ** 2)


def marginal(nu: DiscreteMeasure, i: int) -> float:
    """Probability that coordinate ``i`` (0-based) equals +1."""
    return float(nu.weights @ (nu.points[:, i] > 0))


def _xlogx(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def entropy(nu: DiscreteMeasure) -> float:
    """Shannon entropy in nats, with ``0 log 0 = 0``."""
    return float(-_xlogx(nu.weights).sum())


def marginal_entropy_sum(nu: DiscreteMeasure) -> float:
    p = nu.weights @ (nu.points > 0)
    return float(-(_xlogx(p) + _xlogx(1.0 - p)).sum())


def hamming_distance_to_set_bits(n: int, members: Iterable[int]) -> np.ndarray:
    """Number of coordinate flips from every point to the nearest member (BFS)."""
    dist = np.full(2**n, -1, dtype=np.int64)
    frontier = np.unique(np.fromiter(members, dtype=np.int64))
    if frontier.size == 0:
        raise ValueError("target set must be nonempty")
    if frontier.min() < 0 or frontier.max() >= 2**n:
        raise ValueError("target set contains out-of-range indices")
    dist[frontier] = 0
    level = 0
    while frontier.size:
        level += 1
        nbrs = np.unique((frontier[:, None] ^ (1 << np.arange(n))[None, :]).ravel())
        nbrs = nbrs[dist[nbrs] < 0]
        dist[nbrs] = level
        frontier = nbrs
    return dist


def hamming_distance_to_set(n: int, A: Iterable[Sequence[float] | int]) -> TestFunction:
    """l1 distance (two per flipped coordinate) to the set ``A``.

    Members of ``A`` may be given as points in {-1, 1}^n or as bit indices.
    """
    members = [int(a) if isinstance(a, (int, np.integer)) else encode(a) for a in A]
    flips = hamming_distance_to_set_bits(n, members)
    return TestFunction(n, 2.0 * flips, 1.0)
