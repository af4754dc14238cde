"""Exact Wasserstein-1 distance on the cube and the reflection coupling of tilt paths.

Distances use the l1 ground metric, which on {-1, 1}^n is twice the Hamming
distance. W1 is solved as a linear program with the HiGHS simplex solver,
either as a transport problem between the two supports or as a flow along
cube edges; the Lipschitz dual is available for cross-checking.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from . import _kernels as K
from .localization import PathStreams, _Prepared, path_rng
from .log_laplace import tilt, tilt_probs
from .measure_core import DiscreteMeasure, MeasureSpecError, decode
from .report import AuditReport

__all__ = [
    "W1_DIMENSION_CAP",
    "w1_exact",
    "w1_dual",
    "CouplingConfig",
    "CouplingRun",
    "CouplingBatch",
    "reflection_coupling",
    "coupling_batch",
    "random_direction",
    "hitting_lemma_audit",
    "supermartingale_audit",
    "transport_bound",
    "transport_bound_audit",
]

W1_DIMENSION_CAP = 10
_HIGHS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}
_BIPARTITE_LIMIT = 40_000


def _check_pair(mu: DiscreteMeasure, nu: DiscreteMeasure) -> int:
    if mu.n != nu.n:
        raise MeasureSpecError(f"dimension mismatch: {mu.n} vs {nu.n}")
    if mu.n > W1_DIMENSION_CAP:
        raise MeasureSpecError(f"exact W1 is limited to n <= {W1_DIMENSION_CAP}")
    return mu.n


def _hamming_matrix(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    diff = np.bitwise_xor(rows[:, None], cols[None, :])
    out = np.zeros(diff.shape, dtype=np.int64)
    while diff.any():
        out += diff & 1
        diff >>= 1
    return out


def _solve(c, A_eq, b_eq, bounds) -> float:
    res = linprog(c, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs-ds", options=_HIGHS)
    if res.status != 0:
        raise RuntimeError(f"W1 linear program failed: {res.message}")
    return res


def _w1_bipartite(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    S, T = mu.support, nu.support
    cost = 2.0 * _hamming_matrix(S, T)
    k, m = len(S), len(T)
    # row sums are mu, column sums are nu; the last column constraint is implied
    rows = sparse.kron(sparse.identity(k), np.ones((1, m)))
    cols = sparse.kron(np.ones((1, k)), sparse.identity(m))
    A = sparse.vstack([rows, cols.tocsr()[: m - 1]]).tocsc()
    b = np.concatenate([mu.weights[S], nu.weights[T][: m - 1]])
    res = _solve(cost.ravel(), A, b, (0, None))
    return math.fsum(res.x * cost.ravel())


def _edge_lists(n: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.repeat(np.arange(2**n), n)
    i = np.tile(np.arange(n), 2**n)
    return x, x ^ (1 << i)


def _w1_flow(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    n = mu.n
    tail, head = _edge_lists(n)
    E = len(tail)
    idx = np.arange(E)
    # node balance: outflow - inflow = mu - nu, one redundant row dropped
    A = sparse.coo_matrix(
        (np.concatenate([np.ones(E), -np.ones(E)]), (np.concatenate([tail, head]), np.concatenate([idx, idx]))),
        shape=(2**n, E),
    ).tocsr()[1:]
    b = (mu.weights - nu.weights)[1:]
    res = _solve(np.full(E, 2.0), A.tocsc(), b, (0, None))
    return 2.0 * math.fsum(res.x)


def w1_exact(mu: DiscreteMeasure, nu: DiscreteMeasure, method: str = "auto") -> float:
    """Wasserstein-1 distance with ground cost ``||x - y||_1``.

    ``method`` is ``"transport"`` (coupling LP between the supports),
    ``"flow"`` (flow along cube edges, valid because the l1 metric is a
    multiple of the cube's graph distance) or ``"auto"``.
    """
    _check_pair(mu, nu)
    if method == "auto":
        method = "transport" if len(mu.support) * len(nu.support) <= _BIPARTITE_LIMIT else "flow"
    if len(mu.support) == 1 and len(nu.support) == 1:
        return 2.0 * float(_hamming_matrix(mu.support, nu.support)[0, 0])
    if method == "transport":
        return _w1_bipartite(mu, nu)
    if method == "flow":
        return _w1_flow(mu, nu)
    raise ValueError(f"unknown W1 method {method!r}")


def w1_dual(mu: DiscreteMeasure, nu: DiscreteMeasure, return_potential: bool = False):
    """``sup E_mu phi - E_nu phi`` over phi with ``|phi(x) - phi(y)| <= 2`` on cube edges."""
    n = _check_pair(mu, nu)
    tail, head = _edge_lists(n)
    E = len(tail)
    A = sparse.coo_matrix(
        (np.concatenate([np.ones(E), -np.ones(E)]), (np.concatenate([np.arange(E)] * 2), np.concatenate([tail, head]))),
        shape=(E, 2**n),
    ).tocsc()
    diff = mu.weights - nu.weights
    bounds = [(0.0, 0.0)] + [(None, None)] * (2**n - 1)
    res = linprog(-diff, A_ub=A, b_ub=np.full(E, 2.0), bounds=bounds, method="highs-ds", options=_HIGHS)
    if res.status != 0:
        raise RuntimeError(f"W1 dual program failed: {res.message}")
    value = math.fsum(res.x * diff)
    return (value, res.x) if return_potential else value


# ---------------------------------------------------------------------------
# reflection coupling


@dataclass(frozen=True)
class CouplingConfig:
    """Settings for the coupled pair.

    Coupling is declared when the step crosses the reflection axis, when
    ``|u - w| <= tol`` (default ``1e-8 sqrt(n)``), or, with ``bridge``, with
    the probability that the Brownian bridge of ``|u - w|`` hits zero inside
    the step.
    """

    dt: float = 1e-3
    t_max: float = 1.0
    tol: float | None = None
    bridge: bool = True
    collapse_tol: float = 1e-6
    run_to_collapse: bool = False
    adaptive: bool = False
    max_dt: float = 0.05
    seed: int = 0
    stride: int = 1

    def __post_init__(self) -> None:
        if not 0 < self.dt < 1:
            raise ValueError("dt must lie in (0, 1)")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")

    def coupling_tol(self, n: int) -> float:
        return 1e-8 * math.sqrt(n) if self.tol is None else float(self.tol)


def _check_direction(theta, n: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (n,):
        raise ValueError(f"direction must have {n} coordinates")
    if abs(np.linalg.norm(theta) - 1.0) > 1e-9:
        raise ValueError("direction must have unit norm")
    return theta


def random_direction(n: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal(n)
    return g / np.linalg.norm(g)


@dataclass
class CouplingRun:
    times: np.ndarray
    w_path: np.ndarray
    u_path: np.ndarray
    Y: np.ndarray
    coupled_flags: np.ndarray
    tau: float | None
    reflections_applied: int
    terminal_w: np.ndarray | None = None
    terminal_u: np.ndarray | None = None
    max_excess: float = -math.inf

    @property
    def event_E(self) -> bool:
        return self.tau is not None and self.tau <= 1.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "Y", "coupled"])
            for t, y, c in zip(self.times, self.Y, self.coupled_flags):
                wr.writerow([repr(float(t)), repr(float(y)), int(c)])


class _PairState:
    def __init__(self, nu: DiscreteMeasure, v, theta, eps: float):
        n = nu.n
        self.prep = _Prepared.of(nu)
        self.w = np.asarray(v, dtype=np.float64).copy()
        self.u = self.w + eps * theta
        self.acc = np.array([0.0, 0.0, 0.0, -math.inf, math.inf])
        self.status = np.array([0, 0, 0, 0, 0, -1, -1], dtype=np.int64)
        if eps == 0:
            self.status[K.C_COUPLED] = 1
            self.acc[K.C_TAU] = 0.0
        self.p = np.empty(len(self.prep.support))
        self.a_w = np.empty(n)
        self.a_u = np.empty(n)
        self.d = np.empty(n)

    def advance(self, rng, unif_rng, budget: int, cfg: CouplingConfig, beta: float, ck, ck_y, t_end: float) -> int:
        self.status[K.C_POS] = 0
        prep = self.prep
        return K.coupling_advance(
            prep.logw, prep.X, prep.Xpos, self.w, self.u, self.acc, self.status, rng, unif_rng, budget,
            cfg.dt, max(cfg.max_dt, cfg.dt), cfg.adaptive, t_end, cfg.coupling_tol(len(self.w)),
            cfg.collapse_tol, beta, cfg.bridge, cfg.run_to_collapse, ck, ck_y,
            self.p, self.a_w, self.a_u, self.d,
        )


def _validate(nu: DiscreteMeasure, theta, eps: float) -> np.ndarray:
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return _check_direction(theta, nu.n)


def reflection_coupling(
    nu: DiscreteMeasure,
    v,
    eps: float,
    theta,
    config: CouplingConfig | None = None,
    beta: float = math.inf,
    path_index: int = 0,
) -> CouplingRun:
    """Simulate one coupled pair started at ``w_0 = v`` and ``u_0 = v + eps theta``."""
    cfg = config or CouplingConfig()
    theta = _validate(nu, theta, eps)
    st = _PairState(nu, v, theta, eps)
    noise_rng = path_rng(cfg.seed, path_index, stream=1)
    unif_rng = path_rng(cfg.seed, path_index, stream=2)
    empty_ck, empty_y = np.zeros(0), np.zeros(0)
    times, ws, us, ys, flags = [], [], [], [], []
    t_end = cfg.t_max if not cfg.run_to_collapse else max(cfg.t_max, 1e9)

    def record():
        times.append(st.acc[K.C_T])
        ws.append(st.w.copy())
        us.append(st.u.copy())
        ys.append(float(np.linalg.norm(st.u - st.w)))
        flags.append(bool(st.status[K.C_COUPLED]))

    record()
    while True:
        code = st.advance(noise_rng, unif_rng, cfg.stride, cfg, beta, empty_ck, empty_y, t_end)
        if code == K.DONE:
            if st.acc[K.C_T] > times[-1]:
                record()
            break
        record()
    tau = float(st.acc[K.C_TAU]) if st.status[K.C_COUPLED] else None
    tw, tu = int(st.status[K.C_TERM_W]), int(st.status[K.C_TERM_U])
    return CouplingRun(
        np.array(times), np.array(ws), np.array(us), np.array(ys), np.array(flags), tau,
        int(st.status[K.C_REFLECTIONS]),
        decode(tw, nu.n) if tw >= 0 else None,
        decode(tu, nu.n) if tu >= 0 else None,
        float(st.acc[K.C_MAX_EXCESS]),
    )


@dataclass
class CouplingBatch:
    tau: np.ndarray
    coupled: np.ndarray
    final_w: np.ndarray
    final_u: np.ndarray
    terminal_w: np.ndarray
    terminal_u: np.ndarray
    max_excess: np.ndarray
    qv_y: np.ndarray
    qv_time: np.ndarray
    ck_times: np.ndarray
    ck_y: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def num_paths(self) -> int:
        return len(self.tau)

    def survival(self, s: float) -> float:
        """Empirical ``P(tau >= s)``."""
        return float(np.mean(self.tau >= s))


def coupling_batch(
    nu: DiscreteMeasure,
    v,
    eps: float,
    theta,
    config: CouplingConfig,
    num_paths: int,
    beta: float = math.inf,
    checkpoints: Sequence[float] = (),
    path_offset: int = 0,
) -> CouplingBatch:
    """Independent coupled pairs; path ``k`` matches ``reflection_coupling(..., path_index=k)``."""
    theta = _validate(nu, theta, eps)
    n = nu.n
    ck = np.asarray(sorted(float(c) for c in checkpoints), dtype=np.float64)
    t_end = config.t_max if not config.run_to_collapse else max(config.t_max, 1e9)
    if ck.size and ck[-1] > config.t_max + 1e-12:
        raise ValueError("checkpoints must not exceed t_max")
    P = int(num_paths)
    out = {
        "tau": np.full(P, math.inf),
        "coupled": np.zeros(P, dtype=bool),
        "final_w": np.zeros((P, n)),
        "final_u": np.zeros((P, n)),
        "terminal_w": np.full(P, -1, dtype=np.int64),
        "terminal_u": np.full(P, -1, dtype=np.int64),
        "max_excess": np.full(P, -math.inf),
        "qv_y": np.zeros(P),
        "qv_time": np.zeros(P),
        "ck_y": np.zeros((P, len(ck))),
    }
    noise_streams = PathStreams(config.seed, stream=1)
    unif_streams = PathStreams(config.seed, stream=2)
    for path in range(P):
        st = _PairState(nu, v, theta, eps)
        noise_rng = noise_streams.at(path_offset + path)
        unif_rng = unif_streams.at(path_offset + path)
        st.advance(noise_rng, unif_rng, -1, config, beta, ck, out["ck_y"][path], t_end)
        if st.status[K.C_COUPLED]:
            out["coupled"][path] = True
            out["tau"][path] = st.acc[K.C_TAU]
        out["final_w"][path] = st.w
        out["final_u"][path] = st.u
        out["terminal_w"][path] = st.status[K.C_TERM_W]
        out["terminal_u"][path] = st.status[K.C_TERM_U]
        out["max_excess"][path] = st.acc[K.C_MAX_EXCESS]
        out["qv_y"][path] = st.acc[K.C_QV_Y]
        out["qv_time"][path] = st.acc[K.C_QV_TIME]
    return CouplingBatch(
        ck_times=ck,
        params={"dt": config.dt, "t_max": config.t_max, "eps": eps, "seed": config.seed, "num_paths": P,
                "bridge": config.bridge, "coupling_tol": config.coupling_tol(n)},
        **out,
    )


# ---------------------------------------------------------------------------
# audits


def _normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def hitting_lemma_audit(
    eps: float,
    num_paths: int = 100_000,
    s_values: Sequence[float] = (0.25, 1.0, 4.0),
    dt: float = 1e-3,
    seed: int = 0,
) -> AuditReport:
    """Survival of Brownian motion started at ``eps`` against ``eps / sqrt(s)``.

    Paths are advanced on a grid of width ``dt`` and killed either when they
    end a step below zero or with the bridge probability ``exp(-2 x x' / dt)``
    of having crossed inside it, which makes the killing time exact in law.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    s_values = sorted(float(s) for s in s_values)
    rng = path_rng(seed, 0, stream=5)
    x = np.full(num_paths, float(eps))
    alive = np.arange(num_paths)
    tau = np.full(num_paths, math.inf)
    steps = int(math.ceil(s_values[-1] / dt - 1e-9))
    sq = math.sqrt(dt)
    for k in range(steps):
        if alive.size == 0:
            break
        xa = x[alive]
        xn = xa + sq * rng.standard_normal(alive.size)
        u = rng.random(alive.size)
        hit = (xn <= 0) | (u < np.exp(-2.0 * xa * np.maximum(xn, 0.0) / dt))
        tau[alive[hit]] = (k + 1) * dt
        x[alive] = xn
        alive = alive[~hit]
    report = AuditReport("hitting-lemma", "brownian", {"eps": eps, "num_paths": num_paths, "dt": dt, "seed": seed})
    for s in s_values:
        surv = tau >= s - 1e-12
        phat = float(surv.mean())
        se = math.sqrt(max(phat * (1 - phat), 1e-300) / num_paths)
        exact = 2.0 * _normal_cdf(eps / math.sqrt(s)) - 1.0
        report.check(f"P(tau >= {s:g}) <= eps/sqrt(s)", phat, eps / math.sqrt(s), 4 * se)
        if abs(s - 1.0) < 1e-12:
            report.check("P(tau >= 1) = 2 Phi(eps) - 1", phat, exact, 4 * se, "==")
        report.diagnostics[f"survival_s{s:g}"] = phat
        report.diagnostics[f"exact_s{s:g}"] = exact
    return report


def _se(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0


def supermartingale_audit(
    nu: DiscreteMeasure,
    beta: float,
    v=None,
    theta=None,
    eps: float = 0.05,
    config: CouplingConfig | None = None,
    num_paths: int = 10_000,
    checkpoints: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    batch: CouplingBatch | None = None,
) -> AuditReport:
    """Drift contraction, the supermartingale ``exp(-beta t) Y_t`` and ``E Y_t <= exp(beta t) eps``."""
    n = nu.n
    v = np.zeros(n) if v is None else np.asarray(v, dtype=np.float64)
    theta = np.eye(n)[0] if theta is None else np.asarray(theta, dtype=np.float64)
    cfg = config or CouplingConfig(t_max=max(checkpoints))
    if batch is None:
        batch = coupling_batch(nu, v, eps, theta, cfg, num_paths, beta=beta, checkpoints=checkpoints)
    report = AuditReport(
        "supermartingale", nu.describe(),
        {"beta": beta, "eps": eps, "v": v.tolist(), "theta": theta.tolist(), **batch.params},
    )
    report.check("max |a(u) - a(w)| - beta |u - w|", float(batch.max_excess.max()), 0.0, 1e-9)
    t = batch.ck_times
    disc = np.exp(-beta * t)[None, :] * batch.ck_y
    for k in range(1, len(t)):
        diff = disc[:, k] - disc[:, k - 1]
        report.check(
            f"E exp(-beta t) Y non-increasing on [{t[k - 1]:g}, {t[k]:g}]", float(diff.mean()), 0.0, 4 * _se(diff)
        )
    for k in range(len(t)):
        y = batch.ck_y[:, k]
        bound = math.exp(beta * t[k]) * eps
        report.check(f"E Y_t <= exp(beta t) eps at t={t[k]:g}", float(y.mean()), bound, 4 * _se(y) + 1e-12 * bound)
    qv_rate = float(batch.qv_y.sum() / max(batch.qv_time.sum(), 1e-300))
    p_ec = batch.survival(1.0) if cfg.t_max >= 1.0 else math.nan
    report.diagnostics.update(
        {
            "quadratic_variation_rate": qv_rate,
            "coupled_fraction": float(batch.coupled.mean()),
            "P_not_E": p_ec,
            "eps_sqrt_beta": eps * math.sqrt(beta),
        }
    )
    return report


def transport_bound(eps: float, beta: float, n: int) -> float:
    """``4 eps beta n^(1 - 1/(32 beta))``."""
    return 4.0 * eps * beta * n ** (1.0 - 1.0 / (32.0 * beta))


def transport_bound_audit(
    nu: DiscreteMeasure,
    beta: float,
    v,
    theta,
    eps: float,
    config: CouplingConfig | None = None,
    coupling_paths: int = 0,
) -> AuditReport:
    """Exact ``W1(tilt_v nu, tilt_{v + eps theta} nu)`` against the transport bound.

    With ``coupling_paths > 0`` the coupling estimate
    ``sqrt(n) E |a(w_t) - a(u_t)|`` at ``t = log(2n) / (2 beta + 1/8)`` is
    reported as a diagnostic.
    """
    if not 0 < eps < 0.1:
        raise ValueError("eps must lie in (0, 0.1)")
    n = nu.n
    theta = _check_direction(theta, n)
    v = np.asarray(v, dtype=np.float64)
    lhs = w1_exact(tilt(nu, v), tilt(nu, v + eps * theta))
    rhs = transport_bound(eps, beta, n)
    report = AuditReport(
        "transport-bound", nu.describe(),
        {"beta": beta, "eps": eps, "v": v.tolist(), "theta": theta.tolist()},
    )
    report.check("W1(tilt_v, tilt_{v+eps theta}) <= 4 eps beta n^(1-1/(32 beta))", lhs, rhs, 0.0)
    report.diagnostics["w1"] = lhs
    if coupling_paths > 0:
        t_star = math.log(2 * n) / (2 * beta + 0.125)
        cfg = config or CouplingConfig()
        cfg = CouplingConfig(**{**cfg.__dict__, "t_max": t_star, "run_to_collapse": False})
        batch = coupling_batch(nu, v, eps, theta, cfg, coupling_paths, beta=beta)
        a_w = _means(nu, batch.final_w)
        a_u = _means(nu, batch.final_u)
        gap = np.linalg.norm(a_w - a_u, axis=1)
        report.diagnostics.update(
            {"coupling_time": t_star, "coupling_estimate": math.sqrt(n) * float(gap.mean()),
             "coupling_estimate_se": math.sqrt(n) * _se(gap)}
        )
    return report


def _means(nu: DiscreteMeasure, W: np.ndarray) -> np.ndarray:
    return tilt_probs(nu, W) @ nu.points
