"""Stochastic localization on the cube, in tilt form and in measure form.

The tilt form integrates ``dw = dB + a(w) dt`` with ``a(w)`` the mean of the
measure tilted by ``w``; the measure at time ``t`` is that tilt. The measure
form updates weights by ``dF = F <x - a, dB>``. Every path draws its noise
from a Philox stream keyed by ``(seed, path_index)``, so any single path can
be replayed in isolation.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba.typed
import numpy as np

from . import _kernels as K
from .log_laplace import tilt_probs
from .measure_core import DiscreteMeasure, TestFunction, decode, mean
from .report import AuditReport

__all__ = [
    "Scheme",
    "SDEConfig",
    "LocalizationTrajectory",
    "PathBatch",
    "PathStreams",
    "path_rng",
    "step_tilt",
    "step_measure",
    "run_localization",
    "simulate_paths",
    "checkpoint_probs",
    "sample_tilted",
    "sample_tilted_batch",
    "empirical_law",
    "total_variation",
    "scheme_gap",
    "martingale_audit",
    "trace_decay_audit",
]


class Scheme(str, enum.Enum):
    TILT_EULER = "tilt-euler"
    MEASURE_EULER = "measure-euler"


@dataclass(frozen=True)
class SDEConfig:
    """Discretization settings.

    ``adaptive`` lengthens the step to ``dt / Tr A`` (capped at ``max_dt``)
    once the trace of the tilted covariance drops below one; the base step
    ``dt`` is used whenever the measure is still spread out.
    """

    dt: float = 1e-3
    t_max: float = 60.0
    collapse_tol: float = 1e-6
    seed: int = 0
    scheme: Scheme = Scheme.TILT_EULER
    adaptive: bool = False
    max_dt: float = 0.05
    stride: int = 1

    def __post_init__(self) -> None:
        if not 0 < self.dt < 1:
            raise ValueError("dt must lie in (0, 1)")
        if not 0 < self.collapse_tol < 1:
            raise ValueError("collapse_tol must lie in (0, 1)")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if self.max_dt < self.dt:
            raise ValueError("max_dt must be at least dt")
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")
        object.__setattr__(self, "scheme", Scheme(self.scheme))


def _path_key(seed: int, path_index: int, stream: int) -> np.ndarray:
    return np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, (int(path_index) << 4) | int(stream)], dtype=np.uint64)


def path_rng(seed: int, path_index: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for one path; ``stream`` separates independent uses."""
    return np.random.Generator(np.random.Philox(key=_path_key(seed, path_index, stream)))


# generators rewound per kernel call when simulating a batch
_POOL = 256


class PathStreams:
    """A pool of reusable generators that can be rewound to the start of any path's stream.

    ``at(k)`` and slot ``j`` of ``fill(k0, c)`` produce the same draws as
    ``path_rng(seed, k, stream)`` and ``path_rng(seed, k0 + j, stream)``,
    without building a new bit generator for every path.
    """

    def __init__(self, seed: int, stream: int = 0, size: int = 1):
        self.seed = int(seed)
        self.stream = int(stream)
        self._bits = [np.random.Philox(key=_path_key(seed, 0, stream)) for _ in range(max(1, int(size)))]
        self._gens = [np.random.Generator(b) for b in self._bits]
        self._typed = None

    @property
    def size(self) -> int:
        return len(self._bits)

    def _rewind(self, slot: int, path_index: int) -> None:
        self._bits[slot].state = {
            "bit_generator": "Philox",
            "state": {"counter": np.zeros(4, dtype=np.uint64), "key": _path_key(self.seed, path_index, self.stream)},
            "buffer": np.zeros(4, dtype=np.uint64),
            "buffer_pos": 4,
            "has_uint32": 0,
            "uinteger": 0,
        }

    def at(self, path_index: int) -> np.random.Generator:
        self._rewind(0, path_index)
        return self._gens[0]

    def fill(self, first: int, count: int) -> numba.typed.List:
        """Rewind slots ``0 .. count - 1`` to paths ``first ..`` and return the pool as a typed list."""
        if count > self.size:
            raise ValueError("count exceeds the pool size")
        for j in range(count):
            self._rewind(j, first + j)
        if self._typed is None:
            self._typed = numba.typed.List(self._gens)
        return self._typed


# ---------------------------------------------------------------------------
# single steps


def step_tilt(nu: DiscreteMeasure, w, dt: float, noise) -> np.ndarray:
    """One Euler-Maruyama step ``w + sqrt(dt) noise + a(w) dt``."""
    w = np.asarray(w, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    a = tilt_probs(nu, w) @ nu.points
    return w + math.sqrt(dt) * noise + a * dt


@dataclass
class MeasureStepDiagnostics:
    clamped_mass: float
    renormalization: float


def step_measure(nu: DiscreteMeasure, F, a, dt: float, noise) -> tuple[np.ndarray, MeasureStepDiagnostics]:
    """One Euler step of ``dF = F <x - a, dB>`` followed by clamping and renormalization.

    ``F`` is the density of the current measure relative to ``nu``.
    Raises ``FloatingPointError`` when the updated mass is not positive.
    """
    F = np.asarray(F, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    dB = math.sqrt(dt) * np.asarray(noise, dtype=np.float64)
    Fn = F * (1.0 + (nu.points - a) @ dB)
    neg = Fn < 0
    clamped = float(-(Fn[neg] * nu.weights[neg]).sum())
    Fn[neg] = 0.0
    mass = float(Fn @ nu.weights)
    if not mass > 0:
        raise FloatingPointError("measure step left no positive mass; lower dt")
    return Fn / mass, MeasureStepDiagnostics(clamped, mass)


# ---------------------------------------------------------------------------
# prepared measure for the kernels


@dataclass(frozen=True, eq=False)
class _Prepared:
    logw: np.ndarray
    X: np.ndarray
    Xpos: np.ndarray
    XT: np.ndarray
    phi: np.ndarray
    support: np.ndarray

    @classmethod
    def of(cls, nu: DiscreteMeasure, phi=None) -> "_Prepared":
        sup = nu.support
        X = np.ascontiguousarray(nu.points[sup])
        Xpos = (X > 0).astype(np.float64)
        # an empty table tells the kernels not to track E phi
        if phi is None:
            vals = np.zeros(0)
        else:
            vals = (phi.values if isinstance(phi, TestFunction) else np.asarray(phi, float))[sup]
        return cls(
            np.log(nu.weights[sup]),
            X,
            np.ascontiguousarray(Xpos),
            np.ascontiguousarray(Xpos.T),
            np.ascontiguousarray(vals, dtype=np.float64),
            sup,
        )


# ---------------------------------------------------------------------------
# single path trajectories


@dataclass
class LocalizationTrajectory:
    times: np.ndarray
    tilts: np.ndarray
    means: np.ndarray
    trace_cov: np.ndarray
    terminal_point: np.ndarray | None
    terminal_index: int | None
    scheme: Scheme = Scheme.TILT_EULER
    clamped_mass: float = 0.0
    flagged: bool = False

    def to_csv(self, path) -> None:
        n = self.tilts.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t"] + [f"w_{i + 1}" for i in range(n)] + [f"a_{i + 1}" for i in range(n)] + ["trace_cov"])
            for k in range(len(self.times)):
                wr.writerow(
                    [repr(float(self.times[k]))]
                    + [repr(float(x)) for x in self.tilts[k]]
                    + [repr(float(x)) for x in self.means[k]]
                    + [repr(float(self.trace_cov[k]))]
                )


class _NoiseFeed:
    """Sequential blocks of normals from one path stream."""

    def __init__(self, seed: int, path_index: int, n: int, stream: int = 0):
        self.rng = path_rng(seed, path_index, stream)
        self.n = n

    def take(self, rows: int) -> np.ndarray:
        return self.rng.standard_normal((rows, self.n))


def run_localization(
    nu: DiscreteMeasure,
    config: SDEConfig | None = None,
    v=None,
    path_index: int = 0,
) -> LocalizationTrajectory:
    """Run one path until collapse or ``t_max``, recording every ``stride`` steps."""
    cfg = config or SDEConfig()
    v = np.zeros(nu.n) if v is None else np.asarray(v, dtype=np.float64)
    if cfg.scheme is Scheme.MEASURE_EULER:
        return _run_measure_scheme(nu, cfg, v, path_index)
    prep = _Prepared.of(nu)
    n = nu.n
    w = v.astype(np.float64).copy()
    acc = np.zeros(5)
    status = np.array([-1, 0, 0, 0], dtype=np.int64)
    p = np.empty(len(prep.support))
    a = np.empty(n)
    d = np.empty(n)
    no_ck = np.zeros(0)
    ck_w = np.zeros((0, n))
    ck_acc = np.zeros((0, 3))
    rng = path_rng(cfg.seed, path_index)
    times, tilts, means, traces = [], [], [], []

    p_rec, a_rec, d_rec = np.empty_like(p), np.empty_like(a), np.empty_like(d)

    def record():
        tr, _, _ = K.moments(prep.logw, prep.X, prep.Xpos, prep.phi, w, p_rec, a_rec, d_rec)
        times.append(acc[K.T])
        tilts.append(w.copy())
        means.append(a_rec.copy())
        traces.append(tr)

    record()
    while True:
        status[K.POS] = 0
        code = K.tilt_advance(
            prep.logw, prep.X, prep.Xpos, prep.XT, prep.phi, w, acc, status, rng, cfg.stride,
            cfg.dt, cfg.max_dt, cfg.adaptive, 1, cfg.t_max, cfg.collapse_tol, True,
            no_ck, ck_w, ck_acc, False, p, a, d,
        )
        if code == K.DONE:
            if acc[K.T] > times[-1]:
                record()
            break
        record()
    term = int(status[K.TERMINAL])
    return LocalizationTrajectory(
        np.array(times),
        np.array(tilts),
        np.array(means),
        np.array(traces),
        decode(term, n) if term >= 0 else None,
        term if term >= 0 else None,
        Scheme.TILT_EULER,
    )


def _run_measure_scheme(nu, cfg: SDEConfig, v, path_index: int) -> LocalizationTrajectory:
    base = nu if not np.any(v) else DiscreteMeasure(nu.n, tilt_probs(nu, v), label=nu.describe())
    feed = _NoiseFeed(cfg.seed, path_index, nu.n)
    F = np.ones(nu.size)
    X = nu.points
    w = v.copy()
    t = 0.0
    times, tilts, means, traces = [], [], [], []
    clamped = 0.0
    steps = 0
    term = None
    while True:
        p = F * base.weights
        a = p @ X
        pp = p @ (X > 0)
        diag = 4.0 * pp * (1.0 - pp)
        if steps % cfg.stride == 0:
            times.append(t)
            tilts.append(w.copy())
            means.append(a)
            traces.append(float(diag.sum()))
        if diag.max() < cfg.collapse_tol:
            term = int(sum(1 << i for i in range(nu.n) if a[i] > 0))
            break
        if t >= cfg.t_max - 1e-12:
            break
        xi = feed.take(1)[0]
        F, diag_info = step_measure(base, F, a, cfg.dt, xi)
        clamped += diag_info.clamped_mass
        w = w + math.sqrt(cfg.dt) * xi + a * cfg.dt
        t += cfg.dt
        steps += 1
    if times[-1] != t:
        times.append(t)
        tilts.append(w.copy())
        means.append(a)
        traces.append(float(diag.sum()))
    return LocalizationTrajectory(
        np.array(times),
        np.array(tilts),
        np.array(means),
        np.array(traces),
        decode(term, nu.n) if term is not None else None,
        term,
        Scheme.MEASURE_EULER,
        clamped_mass=clamped,
        flagged=clamped > 1e-3,
    )


# ---------------------------------------------------------------------------
# path batches


@dataclass
class PathBatch:
    """Per-path summaries of a batch of tilt-form localization paths."""

    n: int
    seed: int
    terminal: np.ndarray
    final_t: np.ndarray
    final_w: np.ndarray
    int_trace: np.ndarray
    qv: np.ndarray
    int_ada: np.ndarray
    steps: np.ndarray
    ck_times: np.ndarray
    ck_w: np.ndarray
    ck_acc: np.ndarray
    ck_reached: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def num_paths(self) -> int:
        return len(self.terminal)

    @property
    def collapsed(self) -> np.ndarray:
        return self.terminal >= 0


def simulate_paths(
    nu: DiscreteMeasure,
    config: SDEConfig,
    num_paths: int,
    v=None,
    phi: TestFunction | np.ndarray | None = None,
    checkpoints: Sequence[float] = (),
    t_end: float | None = None,
    stop_on_collapse: bool = True,
    compute_ada: bool = False,
    coarsen: int = 1,
    path_offset: int = 0,
) -> PathBatch:
    """Simulate independent tilt-form paths and collect checkpoint summaries.

    Paths stop at collapse (when ``stop_on_collapse``) or at ``t_end``
    (default ``config.t_max``). The step is ``coarsen * config.dt`` using
    ``coarsen`` underlying normals per step, which keeps runs at different
    step sizes on a common Brownian path.
    """
    n = nu.n
    prep = _Prepared.of(nu, phi)
    t_end = float(config.t_max if t_end is None else t_end)
    ck = np.asarray(sorted(float(c) for c in checkpoints), dtype=np.float64)
    if ck.size and (ck[0] < 0 or ck[-1] > t_end + 1e-12):
        raise ValueError("checkpoints must lie in [0, t_end]")
    v0 = np.zeros(n) if v is None else np.asarray(v, dtype=np.float64)
    dt = config.dt * coarsen
    max_dt = max(config.max_dt, dt)
    P, Kc = int(num_paths), len(ck)
    terminal = np.full(P, -1, dtype=np.int64)
    final_t = np.zeros(P)
    final_w = np.zeros((P, n))
    int_trace = np.zeros(P)
    qv = np.zeros(P)
    int_ada = np.zeros(P)
    steps = np.zeros(P, dtype=np.int64)
    ck_w = np.zeros((P, Kc, n))
    ck_acc = np.zeros((P, Kc, 3))
    m0 = float(tilt_probs(nu, v0)[prep.support] @ prep.phi) if phi is not None else 0.0
    ck_count = np.zeros(P, dtype=np.int64)
    streams = PathStreams(config.seed, size=min(P, _POOL))
    for first in range(0, P, streams.size):
        count = min(streams.size, P - first)
        K.tilt_batch(
            prep.logw, prep.X, prep.Xpos, prep.XT, prep.phi, v0, m0,
            streams.fill(path_offset + first, count), count, first,
            dt, max_dt, config.adaptive, coarsen, t_end, config.collapse_tol, stop_on_collapse,
            ck, ck_w, ck_acc, compute_ada,
            terminal, final_t, final_w, int_trace, qv, int_ada, steps, ck_count,
        )
    # checkpoints after a path stopped carry its final state
    ck_reached = np.arange(Kc)[None, :] < ck_count[:, None]
    late = ~ck_reached
    ck_w[late] = np.broadcast_to(final_w[:, None, :], ck_w.shape)[late]
    for col, src in enumerate((int_trace, qv, int_ada)):
        ck_acc[..., col][late] = np.broadcast_to(src[:, None], late.shape)[late]
    return PathBatch(
        n, config.seed, terminal, final_t, final_w, int_trace, qv, int_ada, steps,
        ck, ck_w, ck_acc, ck_reached,
        params={"dt": dt, "adaptive": config.adaptive, "max_dt": max_dt, "collapse_tol": config.collapse_tol,
                "t_end": t_end, "num_paths": P, "seed": config.seed, "v": v0.tolist()},
    )


def checkpoint_probs(nu: DiscreteMeasure, batch: PathBatch, k: int) -> np.ndarray:
    """Full-cube weights of the path measures at checkpoint ``k``, shape (paths, 2**n).

    Paths that collapsed before the checkpoint are represented by the Dirac
    mass at their terminal point.
    """
    probs = tilt_probs(nu, batch.ck_w[:, k, :])
    late = ~batch.ck_reached[:, k]
    if late.any():
        probs[late] = 0.0
        idx = np.flatnonzero(late)
        term = batch.terminal[idx]
        ok = term >= 0
        probs[idx[ok], term[ok]] = 1.0
        if (~ok).any():
            probs[idx[~ok]] = tilt_probs(nu, batch.final_w[idx[~ok]])
    return probs


# ---------------------------------------------------------------------------
# sampling


def sample_tilted(nu: DiscreteMeasure, v, config: SDEConfig | None = None, path_index: int = 0) -> np.ndarray | None:
    """Terminal point of the localization path started from field ``v``."""
    traj = run_localization(nu, config or SDEConfig(), v=v, path_index=path_index)
    return traj.terminal_point


def sample_tilted_batch(nu: DiscreteMeasure, v, config: SDEConfig, num_paths: int, path_offset: int = 0) -> PathBatch:
    return simulate_paths(nu, config, num_paths, v=v, path_offset=path_offset)


def empirical_law(batch: PathBatch) -> tuple[np.ndarray, int]:
    """Empirical law of collapsed terminal points and the number of uncollapsed paths."""
    term = batch.terminal[batch.terminal >= 0]
    counts = np.bincount(term, minlength=2**batch.n).astype(np.float64)
    total = counts.sum()
    law = counts / total if total else counts
    return law, int((batch.terminal < 0).sum())


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------------------
# scheme cross-check


def scheme_gap(
    nu: DiscreteMeasure,
    dt: float,
    t_end: float,
    num_paths: int,
    seed: int = 0,
    refine: int = 4,
) -> tuple[float, float]:
    """Mean over paths of ``max_t |a_tilt - a_measure|`` at step ``dt`` and ``dt / refine``.

    Both schemes and both step sizes share one Brownian path per sample.
    """
    steps_fine = int(round(t_end / dt)) * refine
    rng = path_rng(seed, 0, stream=3)
    dB_fine = rng.standard_normal((num_paths, steps_fine, nu.n)) * math.sqrt(dt / refine)
    dB_coarse = dB_fine.reshape(num_paths, steps_fine // refine, refine, nu.n).sum(axis=2)
    return _scheme_gap_run(nu, dB_coarse, dt), _scheme_gap_run(nu, dB_fine, dt / refine)


def _scheme_gap_run(nu: DiscreteMeasure, dB: np.ndarray, h: float) -> float:
    P, S, n = dB.shape
    X = nu.points
    w = np.zeros((P, n))
    F = np.tile(nu.weights, (P, 1))
    gap = np.zeros(P)
    for s in range(S):
        a_t = tilt_probs(nu, w) @ X
        a_m = F @ X
        gap = np.maximum(gap, np.abs(a_t - a_m).max(axis=1))
        w = w + dB[:, s] + a_t * h
        drift = dB[:, s] @ X.T - (a_m * dB[:, s]).sum(axis=1, keepdims=True)
        F = np.clip(F * (1.0 + drift), 0.0, None)
        F = F / F.sum(axis=1, keepdims=True)
    a_t = tilt_probs(nu, w) @ X
    a_m = F @ X
    gap = np.maximum(gap, np.abs(a_t - a_m).max(axis=1))
    return float(gap.mean())


# ---------------------------------------------------------------------------
# audits


def _se(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0


def martingale_audit(
    nu: DiscreteMeasure,
    A: Iterable[int] | np.ndarray,
    config: SDEConfig,
    num_paths: int,
    checkpoints: Sequence[float] = (0.1, 0.5, 1.0, 2.0),
) -> AuditReport:
    """``E nu_t(A) = nu(A)`` and ``E a_t = mean(nu)`` at checkpoints, within 4 SE."""
    A = np.asarray(A)
    mask = A if A.dtype == bool else np.isin(np.arange(nu.size), A.astype(np.int64))
    target = float(nu.weights[mask].sum())
    batch = simulate_paths(nu, config, num_paths, checkpoints=checkpoints, t_end=max(checkpoints))
    report = AuditReport(
        "martingale", nu.describe(),
        {"dt": config.dt, "seed": config.seed, "num_paths": num_paths, "event_size": int(mask.sum())},
    )
    m0 = mean(nu)
    for k, t in enumerate(batch.ck_times):
        probs = checkpoint_probs(nu, batch, k)
        mass = probs[:, mask].sum(axis=1)
        se = _se(mass)
        report.check(f"E nu_t(A) = nu(A) at t={t:g}", float(mass.mean()), target, 4 * se, "==")
        at = probs @ nu.points
        for i in range(nu.n):
            sei = _se(at[:, i])
            report.check(f"E a_t[{i + 1}] = mean_{i + 1} at t={t:g}", float(at[:, i].mean()), float(m0[i]), 4 * sei, "==")
    return report


def trace_decay_audit(
    nu: DiscreteMeasure,
    config: SDEConfig,
    num_paths: int,
    checkpoints: Sequence[float] = (1.0, 2.0, 4.0, 8.0),
) -> AuditReport:
    """``E Tr A_t <= n exp(-t/8) + 4 SE`` and the diagonal identity ``S_t = 1 - Q_t^2``."""
    n = nu.n
    cks = tuple(sorted(set((0.0,) + tuple(checkpoints))))
    batch = simulate_paths(nu, config, num_paths, checkpoints=cks, t_end=max(cks))
    report = AuditReport("trace-decay", nu.describe(), {"dt": config.dt, "seed": config.seed, "num_paths": num_paths})
    worst_diag = 0.0
    for k, t in enumerate(batch.ck_times):
        probs = checkpoint_probs(nu, batch, k)
        X = nu.points
        a = probs @ X
        second = np.einsum("pm,mi->pi", probs, X * X)
        cov_diag = second - a * a
        trace = np.clip(cov_diag, 0.0, None).sum(axis=1)
        p_plus = probs @ (X > 0)
        worst_diag = max(worst_diag, float(np.abs(cov_diag - (1.0 - a * a)).max()))
        if t == 0.0:
            report.check("Tr A_0 <= n", float(trace.mean()), float(n), 1e-12)
            continue
        report.check(f"E Tr A_t <= n exp(-t/8) at t={t:g}", float(trace.mean()), n * math.exp(-t / 8), 4 * _se(trace))
        report.diagnostics[f"mean_trace_t{t:g}"] = float(trace.mean())
        report.diagnostics[f"p_plus_min_t{t:g}"] = float(p_plus.min())
    report.check("pathwise diag(A_t) = 1 - a_t^2", worst_diag, 0.0, 1e-12)
    report.diagnostics["collapsed_fraction"] = float(batch.collapsed.mean())
    return report
