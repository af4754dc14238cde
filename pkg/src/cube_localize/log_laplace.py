"""Log-Laplace transform, exponential tilts, and certification of curvature conditions.

For a measure ``nu`` on the cube and an external field ``w``, the tilted
measure has weights ``nu(x) exp(<w, x>) / Z(w)``. Its mean and covariance are
the gradient and Hessian of ``L(w) = log Z(w)``. The certification routines
search over fields for the largest value of a criterion built from these
moments; a search can exhibit a violation but can never prove a bound.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .measure_core import DiscreteMeasure

__all__ = [
    "TiltVector",
    "Condition",
    "SearchConfig",
    "CertificationReport",
    "log_laplace",
    "partition",
    "tilt",
    "tilt_probs",
    "tilt_mean",
    "tilt_cov",
    "tilt_moments",
    "third_cumulant",
    "criterion",
    "criterion_and_gradient",
    "certify",
    "rayleigh_implies_beta2_check",
]

RAYLEIGH_SLACK = 1e-10
TIE_TOL = 1e-12


class TiltVector(np.ndarray):
    """A finite external field ``w`` in R^n (a plain ndarray with a finiteness check)."""

    def __new__(cls, w):
        arr = np.asarray(w, dtype=np.float64).reshape(-1).view(cls)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tilt vector entries must be finite")
        return arr


def _as_field(nu: DiscreteMeasure, w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != nu.n:
        raise ValueError(f"field has {w.shape[-1]} entries, measure has n={nu.n}")
    if np.isnan(w).any():
        raise ValueError("NaN in tilt vector")
    return w


def _logits(nu: DiscreteMeasure, w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(nu.weights) + w @ nu.points.T


def log_laplace(nu: DiscreteMeasure, w) -> np.ndarray | float:
    """``log sum_x nu(x) exp(<w, x>)`` with max-shift stabilization.

    ``w`` may be a single field of shape ``(n,)`` or a batch ``(k, n)``.
    """
    w = _as_field(nu, w)
    z = _logits(nu, w)
    top = z.max(axis=-1, keepdims=True)
    out = np.log(np.exp(z - top).sum(axis=-1)) + top[..., 0]
    return float(out) if out.ndim == 0 else out


def partition(nu: DiscreteMeasure, w) -> np.ndarray | float:
    return np.exp(log_laplace(nu, w))


def tilt_probs(nu: DiscreteMeasure, w) -> np.ndarray:
    """Weights of the tilted measure (batched over leading axes of ``w``)."""
    w = _as_field(nu, w)
    z = _logits(nu, w)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def tilt(nu: DiscreteMeasure, w) -> DiscreteMeasure:
    w = _as_field(nu, w)
    if w.ndim != 1:
        raise ValueError("tilt expects a single field")
    label = f"tilt({nu.describe()})"
    return DiscreteMeasure(nu.n, tilt_probs(nu, w), label=label)


def tilt_moments(nu: DiscreteMeasure, w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(p, a, A)``: tilted weights, mean, covariance (batched)."""
    p = tilt_probs(nu, w)
    X = nu.points
    pos = X > 0
    p_plus = p @ pos
    p_minus = p @ ~pos
    a = np.clip(p_plus - p_minus, -1.0, 1.0)
    # x_i - a_i equals 2 p-_i or -2 p+_i; forming it this way keeps full
    # relative precision for coordinates pinned near +-1
    dev = np.where(pos, 2.0 * p_minus[..., None, :], -2.0 * p_plus[..., None, :])
    A = np.einsum("...m,...mi,...mj->...ij", p, dev, dev)
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    idx = np.arange(nu.n)
    A[..., idx, idx] = 4.0 * p_plus * p_minus
    return p, a, A


def tilt_mean(nu: DiscreteMeasure, w) -> np.ndarray:
    # rounding in the normalization can push a pinned coordinate past +-1
    return np.clip(tilt_probs(nu, w) @ nu.points, -1.0, 1.0)


def tilt_cov(nu: DiscreteMeasure, w) -> np.ndarray:
    return tilt_moments(nu, w)[2]


def third_cumulant(nu: DiscreteMeasure, w) -> np.ndarray:
    """Full third-cumulant tensor ``E[(x-a)_i (x-a)_j (x-a)_k]`` of the tilt."""
    p = tilt_probs(nu, w)
    Xc = nu.points - p @ nu.points
    return np.einsum("m,mi,mj,mk->ijk", p, Xc, Xc, Xc)


# ---------------------------------------------------------------------------
# Conditions


class Condition(str, enum.Enum):
    SEMI_LC = "semi-lc"
    DIAG_DOMINATED = "diag-dominated"
    RAYLEIGH = "rayleigh"
    AOV = "aov"

    @classmethod
    def parse(cls, value: "str | Condition") -> "Condition":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for c in cls:
            if c.value == key or c.name.lower().replace("_", "-") == key:
                return c
        raise ValueError(f"unknown condition {value!r}")


_PIN_TOL = 1e-12


def _diag_dominated(A: np.ndarray):
    d = np.diag(A)
    keep = d > _PIN_TOL
    if not keep.any():
        return 0.0, None
    Ak = A[np.ix_(keep, keep)]
    s = 1.0 / np.sqrt(d[keep])
    M = Ak * s[:, None] * s[None, :]
    vals, vecs = np.linalg.eigh(M)
    v = np.zeros(A.shape[0])
    v[keep] = vecs[:, -1] * s  # generalized eigenvector with v^T D v = 1
    return float(vals[-1]), v


def criterion(nu: DiscreteMeasure, cond: Condition, w) -> np.ndarray | float:
    """Criterion value at one field or a batch of fields (exact enumeration)."""
    cond = Condition.parse(cond)
    w = _as_field(nu, w)
    single = w.ndim == 1
    W = np.atleast_2d(w)
    _, a, A = tilt_moments(nu, W)
    n = nu.n
    if cond is Condition.SEMI_LC:
        out = np.linalg.eigvalsh(A)[:, -1]
    elif cond is Condition.DIAG_DOMINATED:
        out = np.array([_diag_dominated(Ak)[0] for Ak in A])
    elif cond is Condition.RAYLEIGH:
        if n < 2:
            raise ValueError("the Rayleigh criterion needs n >= 2")
        off = ~np.eye(n, dtype=bool)
        out = A[:, off].max(axis=1)
    else:
        B = A - 2.0 * (a[:, :, None] * np.eye(n)) - 2.0 * np.eye(n)
        out = np.linalg.eigvalsh(B)[:, -1]
    return float(out[0]) if single else out


def criterion_and_gradient(nu: DiscreteMeasure, cond: Condition, w) -> tuple[float, np.ndarray]:
    """Criterion value and its gradient in ``w``, using third cumulants of the tilt."""
    cond = Condition.parse(cond)
    w = _as_field(nu, w)
    p, a, A = tilt_moments(nu, w)
    Xc = nu.points - a
    n = nu.n
    if cond is Condition.SEMI_LC:
        vals, vecs = np.linalg.eigh(A)
        v = vecs[:, -1]
        y = Xc @ v
        return float(vals[-1]), (p * y * y) @ Xc
    if cond is Condition.DIAG_DOMINATED:
        lam, v = _diag_dominated(A)
        if v is None:
            return lam, np.zeros(n)
        y = Xc @ v
        grad = (p * y * y) @ Xc
        # d/dw_k of D_ii is E[(x_i - a_i)^2 (x_k - a_k)]
        dD = (p[:, None] * Xc * Xc).T @ Xc
        grad = grad - lam * (v * v) @ dD
        return lam, grad
    if cond is Condition.RAYLEIGH:
        if n < 2:
            raise ValueError("the Rayleigh criterion needs n >= 2")
        off = A - np.diag(np.full(n, np.inf))
        i, j = np.unravel_index(np.argmax(off), off.shape)
        return float(A[i, j]), (p * Xc[:, i] * Xc[:, j]) @ Xc
    B = A - 2.0 * np.diag(a) - 2.0 * np.eye(n)
    vals, vecs = np.linalg.eigh(B)
    v = vecs[:, -1]
    y = Xc @ v
    grad = (p * y * y) @ Xc - 2.0 * (v * v) @ A
    return float(vals[-1]), grad


# ---------------------------------------------------------------------------
# Certification search


@dataclass(frozen=True)
class SearchConfig:
    """Box radius, grid density, multistart count, and ascent iterations."""

    radius: float = 6.0
    grid: int = 7
    starts: int = 8
    iters: int = 60
    seed: int = 0
    random_points: int = 2000

    def validate(self) -> None:
        if not self.radius > 0:
            raise ValueError("search radius must be positive")
        if self.grid < 1 and self.starts < 1 and self.random_points < 1:
            raise ValueError("search budget is zero")
        if min(self.grid, self.starts, self.iters, self.random_points) < 0:
            raise ValueError("search budget entries must be nonnegative")

    @property
    def budget(self) -> int:
        return self.grid + self.starts * (1 + self.iters)


@dataclass
class CertificationReport:
    """Lower-bound certificate for one condition.

    ``certified_value`` is the largest criterion value seen over the visited
    fields, attained at ``witness``. A ``fail`` verdict with its witness proves
    a violation; a ``pass`` is only evidence over the searched box.
    """

    condition: Condition
    certified_value: float
    witness: np.ndarray
    search_budget: int
    threshold: float
    verdict: str
    measure: str = ""
    config: SearchConfig = field(default_factory=SearchConfig)
    visited: np.ndarray | None = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    @property
    def is_proof(self) -> bool:
        return self.verdict == "fail"

    def to_dict(self) -> dict[str, Any]:
        return {
            "condition": self.condition.value,
            "certified_value": self.certified_value,
            "witness": np.asarray(self.witness).tolist(),
            "search_budget": self.search_budget,
            "threshold": self.threshold,
            "verdict": self.verdict,
            "measure": self.measure,
            "lower_bound_only": True,
            "meaning": (
                "violation proven by witness" if self.verdict == "fail"
                else "no violation found in searched box (evidence, not proof)"
            ),
            "search": {
                "radius": self.config.radius,
                "grid": self.config.grid,
                "starts": self.config.starts,
                "iters": self.config.iters,
                "seed": self.config.seed,
                "random_points": self.config.random_points,
            },
        }


def _default_threshold(cond: Condition, nu: DiscreteMeasure) -> float:
    if cond is Condition.RAYLEIGH:
        return RAYLEIGH_SLACK
    if cond is Condition.AOV:
        return RAYLEIGH_SLACK
    return float(nu.n)


def _grid_points(n: int, cfg: SearchConfig, rng: np.random.Generator) -> np.ndarray:
    pts = [np.zeros((1, n))]
    if cfg.grid >= 2 and n <= 4:
        axis = np.linspace(-cfg.radius, cfg.radius, cfg.grid)
        pts.append(np.array(list(itertools.product(axis, repeat=n))))
    if cfg.random_points:
        pts.append(rng.uniform(-cfg.radius, cfg.radius, size=(cfg.random_points, n)))
    return np.concatenate(pts, axis=0)


def _ascend(nu, cond, w0, cfg: SearchConfig, visited: list, values: list) -> None:
    w = np.clip(w0, -cfg.radius, cfg.radius)
    val, grad = criterion_and_gradient(nu, cond, w)
    visited.append(w.copy())
    values.append(val)
    step = 1.0
    for _ in range(cfg.iters):
        gnorm = np.linalg.norm(grad)
        if gnorm < 1e-14:
            break
        improved = False
        while step > 1e-8:
            cand = np.clip(w + step * grad / gnorm, -cfg.radius, cfg.radius)
            cval, cgrad = criterion_and_gradient(nu, cond, cand)
            visited.append(cand)
            values.append(cval)
            if cval > val:
                w, val, grad = cand, cval, cgrad
                step *= 2.0
                improved = True
                break
            step *= 0.5
        if not improved:
            break


def certify(
    nu: DiscreteMeasure,
    condition: Condition | str,
    search: SearchConfig | None = None,
    threshold: float | None = None,
    keep_visited: bool = False,
) -> CertificationReport:
    """Search the box ``[-R, R]^n`` for the largest criterion value.

    The visited set is the origin, a tensor grid (``n <= 4``), seeded random
    points, and projected gradient-ascent paths from the best grid point plus
    seeded random starts. For a fixed grid and seed, raising ``starts`` or
    ``iters`` visits a superset of fields, so the certified value never drops
    (beyond the ``TIE_TOL`` rounding band used to pick a stable witness).
    """
    cond = Condition.parse(condition)
    cfg = search or SearchConfig()
    cfg.validate()
    if cond is Condition.RAYLEIGH and nu.n < 2:
        raise ValueError("the Rayleigh criterion needs n >= 2")
    rng = np.random.default_rng(cfg.seed)
    grid = _grid_points(nu.n, cfg, rng)
    start_rng = np.random.default_rng([cfg.seed, 1])
    grid_vals = np.concatenate(
        [np.atleast_1d(criterion(nu, cond, chunk)) for chunk in np.array_split(grid, max(1, len(grid) // 4096 + 1))]
    )
    visited = [grid]
    values = [grid_vals]
    path_pts: list[np.ndarray] = []
    path_vals: list[float] = []
    if cfg.starts > 0:
        best = grid[int(np.argmax(grid_vals))]
        _ascend(nu, cond, best, cfg, path_pts, path_vals)
        for _ in range(cfg.starts - 1):
            w0 = start_rng.uniform(-cfg.radius, cfg.radius, size=nu.n)
            _ascend(nu, cond, w0, cfg, path_pts, path_vals)
    if path_pts:
        visited.append(np.array(path_pts))
        values.append(np.array(path_vals))
    all_pts = np.concatenate(visited, axis=0)
    all_vals = np.concatenate(values)
    top = np.max(all_vals)
    # values within rounding of the top count as ties; prefer the smallest
    # field, then the lexicographically smallest, so the witness is stable
    cands = all_pts[all_vals >= top - TIE_TOL * max(1.0, abs(top))]
    order = np.lexsort(np.vstack([cands.T[::-1], np.linalg.norm(cands, axis=1)]))
    witness = cands[order[0]].copy()
    value = float(criterion(nu, cond, witness))
    thr = _default_threshold(cond, nu) if threshold is None else float(threshold)
    verdict = "pass" if value <= thr else "fail"
    return CertificationReport(
        condition=cond,
        certified_value=value,
        witness=witness,
        search_budget=int(len(all_pts)),
        threshold=thr,
        verdict=verdict,
        measure=nu.describe(),
        config=cfg,
        visited=all_pts if keep_visited else None,
    )


def rayleigh_implies_beta2_check(
    nu: DiscreteMeasure,
    search: SearchConfig | None = None,
    extra_points: int = 10_000,
    seed: int = 0,
):
    """Check the consequence of the Rayleigh property at every visited field.

    Non-positive off-diagonal covariance entries give ``A <= 2 diag(A)`` and
    ``lambda_max(A) <= 2``. Returns an :class:`~cube_localize.report.AuditReport`.
    """
    from .report import AuditReport

    cfg = search or SearchConfig(seed=seed)
    cert = certify(nu, Condition.RAYLEIGH, cfg, keep_visited=True)
    report = AuditReport("rayleigh-implies-beta2", nu.describe(), {"search": cert.to_dict()["search"]})
    report.check("Rayleigh certification (max off-diagonal covariance)", cert.certified_value, 0.0, RAYLEIGH_SLACK)
    report.diagnostics["rayleigh_witness"] = cert.witness.tolist()
    if not cert.passed:
        report.diagnostics["note"] = "Rayleigh property violated; beta=2 consequence not implied"
        return report
    rng = np.random.default_rng([seed, 2])
    extra = rng.uniform(-cfg.radius, cfg.radius, size=(extra_points, nu.n))
    pts = np.concatenate([cert.visited, extra], axis=0)
    worst_lam = -np.inf
    worst_gen = -np.inf
    for chunk in np.array_split(pts, max(1, len(pts) // 4096 + 1)):
        worst_lam = max(worst_lam, float(np.max(criterion(nu, Condition.SEMI_LC, chunk))))
        _, _, A = tilt_moments(nu, chunk)
        # A <= 2 diag(A) iff 2 diag(A) - A is positive semidefinite
        D = np.einsum("kii->ki", A)
        B = 2.0 * D[:, :, None] * np.eye(nu.n) - A
        worst_gen = max(worst_gen, float(np.max(-np.linalg.eigvalsh(B)[:, 0])))
    report.check("max lambda_max(A) over visited fields", worst_lam, 2.0, 1e-9)
    report.check("max lambda_max(A - 2 diag(A)) over visited fields", worst_gen, 0.0, 1e-9)
    report.diagnostics["points_checked"] = int(len(pts))
    return report
