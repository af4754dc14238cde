"""End-to-end checks of the variance and entropy bounds on small cubes.

Exact quantities (variances, entropies, W1 between tilts) come from
enumeration and carry no tolerance. Monte Carlo sides are reported with
their standard errors and, where a step size is involved, an allowance equal
to the change in the estimate when the step is halved on the same Brownian
path.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Iterable, Sequence

import numpy as np

from .coupling import w1_exact
from .localization import PathBatch, SDEConfig, checkpoint_probs, simulate_paths
from .log_laplace import Condition, SearchConfig, certify, tilt, tilt_moments
from .measure_core import (
    DiscreteMeasure,
    TestFunction,
    build_measure,
    entropy,
    hamming_distance_to_set,
    hadamard_rows,
    is_lipschitz,
    marginal_entropy_sum,
    mean,
    slice_measure,
    spins,
    sylvester_hadamard,
    encode,
    variance,
)
from .report import AuditReport

__all__ = [
    "CORPUS",
    "corpus",
    "binary_entropy_sum",
    "random_lipschitz_function",
    "variance_decomposition_audit",
    "smalltail_check",
    "sup_quotient",
    "main_theorem_audit",
    "adversarial_distance_function",
    "variance_exponent_audit",
    "hadamard_negative_control",
    "entropy_identity_audit",
    "entropy_theorem_check",
    "h_drift_audit",
    "rayleigh_corollary_audit",
]

CORPUS: dict[str, dict] = {
    "uniform3": {"family": "uniform", "n": 3},
    "product3": {"family": "product", "n": 3, "means": [0.4, -0.2, 0.6]},
    "two_point3": {"family": "two_point", "n": 3},
    "slice4": {"family": "slice", "n": 4, "k": 0},
    "ising3": {"family": "ising", "n": 3, "seed": 0},
    "hadamard4": {"family": "hadamard_rows", "n": 4},
}


def corpus() -> dict[str, DiscreteMeasure]:
    return {name: build_measure(spec) for name, spec in CORPUS.items()}


def _se(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0


def _values(phi: TestFunction | np.ndarray) -> np.ndarray:
    return phi.values if isinstance(phi, TestFunction) else np.asarray(phi, dtype=np.float64)


def binary_entropy_sum(a) -> np.ndarray | float:
    """``h(a) = sum_i H((1 + a_i) / 2)`` in nats, batched over leading axes."""
    a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
    out = np.zeros(a.shape)
    for q in ((1.0 + a) / 2.0, (1.0 - a) / 2.0):
        pos = q > 0
        out[pos] -= q[pos] * np.log(q[pos])
    s = out.sum(axis=-1)
    return float(s) if np.ndim(s) == 0 else s


def random_lipschitz_function(n: int, rng: np.random.Generator, anchors: int | None = None) -> TestFunction:
    """``min_j (c_j + ||x - y_j||_1)`` over random anchors ``y_j`` and offsets ``c_j``.

    Each term is 1-Lipschitz, hence so is the minimum.
    """
    k = anchors or int(rng.integers(1, 2**n + 1))
    idx = rng.choice(2**n, size=min(k, 2**n), replace=False)
    X = spins(n)
    offsets = rng.uniform(0.0, 2.0 * n, size=len(idx))
    dist = np.abs(X[:, None, :] - X[None, idx, :]).sum(axis=2)
    return TestFunction(n, (dist + offsets[None, :]).min(axis=1), 1.0)


# ---------------------------------------------------------------------------
# paired step sizes


def _paired_runs(
    nu: DiscreteMeasure, config: SDEConfig, num_paths: int, **kwargs
) -> tuple[PathBatch, PathBatch]:
    """Runs at step ``dt`` and ``dt / 2`` driven by the same Brownian path."""
    half = replace(config, dt=config.dt / 2, max_dt=max(config.max_dt, config.dt))
    coarse = simulate_paths(nu, half, num_paths, coarsen=2, **kwargs)
    fine = simulate_paths(nu, half, num_paths, coarsen=1, **kwargs)
    return coarse, fine


# ---------------------------------------------------------------------------
# variance decomposition and the small-tail fact


def _decomposition_rhs(nu: DiscreteMeasure, batch: PathBatch, vals: np.ndarray, k: int) -> np.ndarray:
    probs = checkpoint_probs(nu, batch, k)
    m = probs @ vals
    var_t = np.clip(probs @ (vals * vals) - m * m, 0.0, None)
    return batch.ck_acc[:, k, 1] + var_t


def variance_decomposition_audit(
    nu: DiscreteMeasure,
    phi: TestFunction | np.ndarray,
    t_values: Sequence[float] = (0.5, 2.0),
    num_paths: int = 10_000,
    config: SDEConfig | None = None,
) -> AuditReport:
    """``Var phi = E [M]_t + E Var_{nu_t} phi`` with ``M_t = E_{nu_t} phi``.

    ``[M]_t`` is the sum of squared increments of ``M`` along each path.
    """
    cfg = replace(config or SDEConfig(), adaptive=False)
    vals = _values(phi)
    lhs = variance(nu, vals)
    ts = sorted(float(t) for t in t_values)
    report = AuditReport(
        "variance-decomposition", nu.describe(),
        {"t_values": ts, "num_paths": num_paths, "dt": cfg.dt, "seed": cfg.seed},
    )
    report.diagnostics["variance"] = lhs
    if not ts or ts[-1] == 0.0:
        report.check("Var = Var_{nu_0} at t=0", variance(nu, vals), lhs, 1e-12, "==")
        return report
    coarse, fine = _paired_runs(nu, cfg, num_paths, phi=vals, checkpoints=ts, t_end=ts[-1])
    for k, t in enumerate(ts):
        rhs = _decomposition_rhs(nu, coarse, vals, k)
        rhs_fine = _decomposition_rhs(nu, fine, vals, k)
        allowance = abs(float(rhs.mean() - rhs_fine.mean()))
        se = _se(rhs)
        report.check(f"Var = E[M]_t + E Var_t at t={t:g}", float(rhs.mean()), lhs, 4 * se + allowance, "==")
        report.diagnostics[f"rhs_t{t:g}"] = float(rhs.mean())
        report.diagnostics[f"rhs_half_dt_t{t:g}"] = float(rhs_fine.mean())
        report.diagnostics[f"se_t{t:g}"] = se
        report.diagnostics[f"qv_t{t:g}"] = float(coarse.ck_acc[:, k, 1].mean())
    return report


def smalltail_check(nu: DiscreteMeasure, phi: TestFunction | np.ndarray, tilts: Iterable) -> AuditReport:
    """``Var_{tilt_w nu} phi <= n Tr A(w)`` at each given field, both sides exact."""
    vals = _values(phi)
    if not is_lipschitz(vals, nu.n, 1.0):
        raise ValueError("test function is not 1-Lipschitz")
    W = np.atleast_2d(np.asarray(list(tilts), dtype=np.float64))
    report = AuditReport("small-tail", nu.describe(), {"num_tilts": len(W)})
    p, _, A = tilt_moments(nu, W)
    m = p @ vals
    var = np.clip(p @ (vals * vals) - m * m, 0.0, None)
    rhs = nu.n * np.trace(A, axis1=-2, axis2=-1)
    for k in range(len(W)):
        report.check(f"Var_tilt phi <= n Tr A at tilt {k}", float(var[k]), float(rhs[k]), 1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, var / rhs, 0.0)
    report.diagnostics["max_ratio"] = float(ratio.max()) if len(ratio) else 0.0
    return report


# ---------------------------------------------------------------------------
# the proof-chain inequality for the variance bound


def sup_quotient(
    nu: DiscreteMeasure,
    w,
    directions: np.ndarray,
    eps: float = 1e-3,
) -> tuple[float, float, float]:
    """Largest W1 difference quotient over ``directions`` at field ``w``.

    Returns ``(q_eps, q_half, richardson)`` for the best direction, where
    ``q_h = W1(tilt_w, tilt_{w + h theta}) / h`` and the Richardson value is
    ``2 q_{eps/2} - q_eps``.
    """
    base = tilt(nu, w)
    if len(base.support) == 1:
        return 0.0, 0.0, 0.0
    best = (0.0, 0.0, 0.0)
    for theta in directions:
        q1 = w1_exact(base, tilt(nu, w + eps * theta)) / eps
        q2 = w1_exact(base, tilt(nu, w + 0.5 * eps * theta)) / (0.5 * eps)
        r = 2.0 * q2 - q1
        if r > best[2]:
            best = (q1, q2, r)
    return best


def main_theorem_audit(
    nu: DiscreteMeasure,
    beta: float,
    phi: TestFunction | np.ndarray,
    num_paths: int = 16,
    time_samples: int = 6,
    n_dirs: int = 64,
    eps: float = 1e-3,
    T: float | None = None,
    config: SDEConfig | None = None,
    seed: int = 0,
) -> AuditReport:
    """``Var phi <= E int_0^T S(w_t) dt + n^2 exp(-T/8)`` with ``T = 16 log n``.

    ``S(w)`` is the squared supremum over unit directions of the derivative
    of ``W1(tilt_w nu, tilt_{w + eps theta} nu)`` in ``eps``. The supremum is
    taken over ``n_dirs`` random directions, the coordinate directions and
    the direction of ``Cov_{tilt_w}(phi, x)``, so the estimate is a lower
    bound of ``S``. The time integral is estimated with one uniform time in
    each of ``time_samples`` strata whose widths grow geometrically (``S``
    is largest before the measure localizes), which is unbiased.
    """
    n = nu.n
    vals = _values(phi)
    cfg = config or SDEConfig(seed=seed)
    T = 16.0 * math.log(n) if T is None else float(T)
    if not T > 0:
        raise ValueError("T must be positive (n >= 2)")
    rng = np.random.default_rng([seed, 7])
    lhs = variance(nu, vals)
    report = AuditReport(
        "main-theorem", nu.describe(),
        {"beta": beta, "T": T, "num_paths": num_paths, "time_samples": time_samples, "n_dirs": n_dirs,
         "eps": eps, "dt": cfg.dt, "seed": seed},
    )
    fixed = np.vstack([rng.standard_normal((n_dirs, n)), np.eye(n)]) if n_dirs else np.eye(n)
    fixed /= np.linalg.norm(fixed, axis=1, keepdims=True)
    integrals = np.zeros(num_paths)
    worst_rel = 0.0
    evaluations = 0
    edges = np.expm1(np.linspace(0.0, math.log1p(T), time_samples + 1))
    edges[-1] = T
    widths = np.diff(edges)
    for path in range(num_paths):
        times = edges[:-1] + rng.random(time_samples) * widths
        batch = simulate_paths(nu, cfg, 1, checkpoints=times, t_end=float(times[-1]), path_offset=path)
        total = 0.0
        for k in range(time_samples):
            if not batch.ck_reached[0, k]:
                continue  # collapsed: the tilt is a point mass and S vanishes
            w = batch.ck_w[0, k]
            p = tilt(nu, w).weights
            cov = (p * (vals - p @ vals)) @ spins(n)
            dirs = fixed if not np.linalg.norm(cov) > 1e-14 else np.vstack([fixed, cov / np.linalg.norm(cov)])
            q1, q2, r = sup_quotient(nu, w, dirs, eps)
            evaluations += 1
            if max(q1, q2) > 1e-12:
                worst_rel = max(worst_rel, abs(q1 - q2) / max(q1, q2))
            total += widths[k] * r * r
        integrals[path] = total
    est = float(integrals.mean())
    se = _se(integrals)
    tail = n * n * math.exp(-T / 8.0)
    report.check("Var <= E int S dt + n^2 exp(-T/8)", lhs, est + tail, 4 * se)
    report.check("difference quotient stable under eps -> eps/2 (relative)", worst_rel, 0.0, 1e-2)
    report.diagnostics.update(
        {"variance": lhs, "integral_estimate": est, "integral_se": se, "tail": tail,
         "evaluations": evaluations, "bound_n2": n * n}
    )
    return report


# ---------------------------------------------------------------------------
# exponent fit on Rayleigh slices and the Hadamard control


def _support_distance_matrix(nu: DiscreteMeasure) -> np.ndarray:
    sup = nu.support
    diff = np.bitwise_xor(sup[:, None], sup[None, :])
    out = np.zeros(diff.shape, dtype=np.int64)
    while diff.any():
        out += diff & 1
        diff >>= 1
    return 2.0 * out


def _var_of_min(weights: np.ndarray, D: np.ndarray, members: np.ndarray) -> float:
    phi = D[members].min(axis=0)
    m = weights @ phi
    return float(weights @ (phi - m) ** 2)


def adversarial_distance_function(
    nu: DiscreteMeasure,
    rng: np.random.Generator,
    restarts: int = 4,
    passes: int = 3,
) -> tuple[TestFunction, float, np.ndarray]:
    """Local search for a set ``A`` in the support maximizing ``Var`` of the distance to ``A``.

    Starts from random sets of random density and toggles single members
    while the variance improves. Returns the function, its variance and the
    member indices.
    """
    sup = nu.support
    wts = nu.weights[sup]
    D = _support_distance_matrix(nu)
    m = len(sup)
    best_var, best_set = -1.0, None
    for _ in range(restarts):
        density = rng.uniform(0.05, 0.6)
        member = rng.random(m) < density
        if not member.any():
            member[rng.integers(m)] = True
        cur = _var_of_min(wts, D, np.flatnonzero(member))
        for _ in range(passes):
            improved = False
            for j in rng.permutation(m):
                member[j] = not member[j]
                if member.any():
                    v = _var_of_min(wts, D, np.flatnonzero(member))
                    if v > cur + 1e-12:
                        cur = v
                        improved = True
                        continue
                member[j] = not member[j]
            if not improved:
                break
        if cur > best_var:
            best_var, best_set = cur, np.flatnonzero(member)
    members = sup[best_set]
    phi = hamming_distance_to_set(nu.n, [int(i) for i in members])
    return phi, variance(nu, phi), members


def variance_exponent_audit(
    ns: Sequence[int] = (4, 6, 8, 10),
    margin: float = 0.05,
    restarts: int = 4,
    passes: int = 3,
    seed: int = 0,
) -> AuditReport:
    """Fit ``log max Var`` against ``log n`` on balanced slices; assert slope ``<= 2 - margin``."""
    rng = np.random.default_rng([seed, 11])
    report = AuditReport(
        "variance-exponent", "slice(n, k=0)",
        {"ns": list(ns), "margin": margin, "restarts": restarts, "passes": passes, "seed": seed},
    )
    best = []
    for n in ns:
        nu = slice_measure(n, 0)
        _, var, members = adversarial_distance_function(nu, rng, restarts, passes)
        # the distance to a single point is a fixed competitor
        single = variance(nu, hamming_distance_to_set(n, [int(nu.support[0])]))
        var = max(var, single)
        best.append(var)
        report.diagnostics[f"max_var_n{n}"] = var
        report.diagnostics[f"ratio_n{n}"] = var / n**2
        report.diagnostics[f"set_size_n{n}"] = int(len(members))
    slope, intercept = np.polyfit(np.log(ns), np.log(best), 1)
    report.check("fitted exponent <= 2 - margin", float(slope), 2.0 - margin, 0.0)
    report.diagnostics["fitted_exponent"] = float(slope)
    report.diagnostics["fitted_log_constant"] = float(intercept)
    return report


def hadamard_negative_control(ns: Sequence[int] = (4, 8, 16), floor: float = 0.05) -> AuditReport:
    """Uniform measure on Hadamard rows with the distance to half of the rows: ``Var / n^2 >= floor``."""
    report = AuditReport("hadamard-control", "hadamard_rows", {"ns": list(ns), "floor": floor})
    for n in ns:
        nu = hadamard_rows(n)
        rows = sylvester_hadamard(n)
        half = [encode(r) for r in rows[: n // 2]]
        phi = hamming_distance_to_set(n, half)
        ratio = variance(nu, phi) / n**2
        report.check(f"Var / n^2 >= {floor:g} at n={n}", ratio, floor, 0.0, ">=")
        report.diagnostics[f"ratio_n{n}"] = ratio
    return report


# ---------------------------------------------------------------------------
# entropy


def entropy_identity_audit(
    nu: DiscreteMeasure,
    num_paths: int = 10_000,
    t_max: float | None = None,
    config: SDEConfig | None = None,
) -> AuditReport:
    """``H(nu) = 1/2 E int_0^inf Tr A_t dt`` with the integral truncated at collapse or ``t_max``.

    The tolerance adds the tail bound ``8 n exp(-t_max / 8)``.
    """
    n = nu.n
    t_max = 16.0 * math.log(n) + 40.0 if t_max is None else float(t_max)
    cfg = config or SDEConfig()
    batch = simulate_paths(nu, cfg, num_paths, t_end=t_max)
    half = 0.5 * batch.int_trace
    est = float(half.mean())
    se = _se(half)
    exact = entropy(nu)
    tail = 8.0 * n * math.exp(-t_max / 8.0)
    report = AuditReport(
        "entropy-identity", nu.describe(),
        {"num_paths": num_paths, "t_max": t_max, "dt": cfg.dt, "adaptive": cfg.adaptive, "seed": cfg.seed},
    )
    report.check("H(nu) = 1/2 E int Tr A_t dt", est, exact, 4 * se + tail, "==")
    report.diagnostics.update(
        {"entropy": exact, "estimate": est, "se": se, "tail_bound": tail,
         "collapsed_fraction": float(batch.collapsed.mean())}
    )
    return report


def entropy_theorem_check(nu: DiscreteMeasure, beta: float, rounding: float = 1e-10) -> AuditReport:
    """Sum of marginal entropies against ``beta`` times the joint entropy, both exact."""
    H = entropy(nu)
    Ht = marginal_entropy_sum(nu)
    report = AuditReport("entropy-theorem", nu.describe(), {"beta": beta})
    if H <= rounding and Ht > rounding:
        report.check("marginal entropy vanishes with the joint entropy (condition inconsistent)", Ht, 0.0, rounding)
    report.check("sum_i H(X_i) <= beta H(X)", Ht, beta * H, rounding)
    report.diagnostics.update({"entropy": H, "marginal_entropy_sum": Ht, "ratio": Ht / H if H > 0 else math.nan})
    return report


def _ada_trace(A: np.ndarray) -> np.ndarray:
    d = np.diagonal(A, axis1=-2, axis2=-1)
    live = d > 1e-300
    safe = np.where(live, d, 1.0)
    return np.where(live, (A * A).sum(axis=-1) / safe, 0.0).sum(axis=-1)


def h_drift_audit(
    nu: DiscreteMeasure,
    beta: float | None = None,
    num_paths: int = 2000,
    windows: Sequence[float] = (0.0, 0.1, 0.25, 0.5, 1.0),
    dense: int = 41,
    config: SDEConfig | None = None,
) -> AuditReport:
    """Checks on ``h(a) = sum_i H((1 + a_i) / 2)`` along localization paths.

    (i) ``h(mean)`` is the sum of marginal entropies; (ii) on each window,
    ``E[h(a_s) - h(a_t)] = 1/2 E int_s^t Tr(A D^-1 A)`` with ``D = diag A``,
    i.e. ``h(a_t)`` decreases at that rate; (iii) with ``beta``, pathwise
    ``Tr(A D^-1 A) <= beta Tr A`` at ``dense`` equally spaced times.
    """
    cfg = replace(config or SDEConfig(), adaptive=False)
    ws = sorted(float(t) for t in windows)
    report = AuditReport(
        "h-drift", nu.describe(),
        {"beta": beta, "num_paths": num_paths, "windows": ws, "dt": cfg.dt, "seed": cfg.seed},
    )
    report.check("h(mean) = sum of marginal entropies", abs(binary_entropy_sum(mean(nu)) - marginal_entropy_sum(nu)), 0.0, 1e-10)
    grid = np.linspace(0.0, ws[-1], dense)
    cks = np.unique(np.concatenate([ws, grid]))
    coarse, fine = _paired_runs(nu, cfg, num_paths, checkpoints=cks, t_end=ws[-1], compute_ada=True)
    pos = {float(t): int(np.argmin(np.abs(cks - t))) for t in ws}

    def window_gaps(batch):
        out = []
        h = [binary_entropy_sum(checkpoint_probs(nu, batch, pos[t]) @ nu.points) for t in ws]
        for k in range(len(ws) - 1):
            drift = 0.5 * (batch.ck_acc[:, pos[ws[k + 1]], 2] - batch.ck_acc[:, pos[ws[k]], 2])
            out.append((h[k] - h[k + 1]) - drift)
        return out

    gaps = window_gaps(coarse)
    gaps_fine = window_gaps(fine)
    for k in range(len(ws) - 1):
        g = gaps[k]
        allowance = abs(float(g.mean() - gaps_fine[k].mean()))
        report.check(
            f"E[h(a_s) - h(a_t)] = 1/2 E int Tr(A D^-1 A) on [{ws[k]:g}, {ws[k + 1]:g}]",
            float(g.mean()), 0.0, 4 * _se(g) + allowance, "==",
        )
    if beta is not None:
        reached = coarse.ck_reached
        W = coarse.ck_w[reached]
        _, _, A = tilt_moments(nu, W)
        excess = _ada_trace(A) - beta * np.trace(A, axis1=-2, axis2=-1)
        report.check("pathwise Tr(A D^-1 A) <= beta Tr A", float(excess.max()) if excess.size else 0.0, 0.0, 1e-9)
        report.diagnostics["pathwise_points"] = int(excess.size)
    return report


def rayleigh_corollary_audit(
    nu: DiscreteMeasure,
    search: SearchConfig | None = None,
    phi: TestFunction | None = None,
    part1_paths: int = 8,
    part1_time_samples: int = 6,
    part1_dirs: int = 64,
    seed: int = 0,
) -> AuditReport:
    """Rayleigh certification, then the entropy bound with factor 2 and the variance chain with ``beta = 2``."""
    cert = certify(nu, Condition.RAYLEIGH, search or SearchConfig(seed=seed))
    report = AuditReport("rayleigh-corollary", nu.describe(), {"seed": seed, "part1_paths": part1_paths})
    report.check("Rayleigh certification (max off-diagonal tilted covariance)", cert.certified_value, 0.0, 1e-10)
    report.diagnostics["rayleigh_certified_value"] = cert.certified_value
    if not report.passed:
        return report
    ent = entropy_theorem_check(nu, 2.0)
    report.assertions.extend(ent.assertions)
    report.diagnostics.update({f"entropy_{k}": v for k, v in ent.diagnostics.items()})
    if part1_paths > 0 and nu.n >= 2:
        if phi is None:
            phi, _, _ = adversarial_distance_function(nu, np.random.default_rng([seed, 13]), restarts=2, passes=2)
        chain = main_theorem_audit(
            nu, 2.0, phi, num_paths=part1_paths, time_samples=part1_time_samples, n_dirs=part1_dirs, seed=seed
        )
        report.assertions.extend(chain.assertions)
        report.diagnostics.update({f"variance_{k}": v for k, v in chain.diagnostics.items()})
    return report
