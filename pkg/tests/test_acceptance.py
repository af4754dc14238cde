"""Acceptance suite: one test and one printed PASS/FAIL line per criterion."""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest

from cube_localize.audits import (
    CORPUS,
    adversarial_distance_function,
    corpus,
    entropy_identity_audit,
    entropy_theorem_check,
    hadamard_negative_control,
    random_lipschitz_function,
    variance_decomposition_audit,
    variance_exponent_audit,
)
from cube_localize.cli import VOLATILE_KEYS, main
from cube_localize.coupling import hitting_lemma_audit, random_direction, transport_bound_audit, w1_dual, w1_exact
from cube_localize.fourier import fact_harmonic_audit, g_identity_check
from cube_localize.localization import SDEConfig, empirical_law, simulate_paths, total_variation, trace_decay_audit
from cube_localize.log_laplace import log_laplace, tilt, tilt_moments, tilt_probs
from cube_localize.measure_core import (
    DiscreteMeasure,
    TestFunction,
    entropy,
    ising,
    marginal_entropy_sum,
    product,
    slice_measure,
    two_point,
    uniform,
    variance,
)
from cube_localize.report import canonical_json

pytestmark = pytest.mark.slow


def random_measure(rng, n):
    w = rng.exponential(size=2**n) * (rng.random(2**n) >= rng.uniform(0.0, 0.5))
    if not w.any():
        w[rng.integers(2**n)] = 1.0
    return DiscreteMeasure(n, w)


def fd_gradient(nu, w, h=1e-5):
    E = np.eye(nu.n) * h
    vals = log_laplace(nu, np.concatenate([w + E, w - E]))
    return (vals[: nu.n] - vals[nu.n:]) / (2 * h)


def fd_hessian(nu, w, h=1e-4):
    n = nu.n
    E = np.eye(n) * h
    pts = []
    for i in range(n):
        for j in range(n):
            pts += [w + E[i] + E[j], w + E[i] - E[j], w - E[i] + E[j], w - E[i] - E[j]]
    vals = log_laplace(nu, np.array(pts)).reshape(n, n, 4)
    return (vals[..., 0] - vals[..., 1] - vals[..., 2] + vals[..., 3]) / (4 * h * h)


def test_criterion_01_cumulant_identities(criterion):
    rng = np.random.default_rng([2026, 1])
    start = time.perf_counter()
    worst_grad = worst_hess = 0.0
    for _ in range(50):
        nu = random_measure(rng, int(rng.integers(1, 9)))
        for w in rng.normal(0.0, 1.5, size=(20, nu.n)):
            _, a, A = tilt_moments(nu, w)
            worst_grad = max(worst_grad, float(np.abs(fd_gradient(nu, w) - a).max()))
            worst_hess = max(worst_hess, float(np.abs(fd_hessian(nu, w) - A).max()))
    elapsed = time.perf_counter() - start
    ok = worst_grad <= 1e-6 and worst_hess <= 1e-4 and elapsed < 30
    criterion("1", ok, f"grad err {worst_grad:.2e} <= 1e-6, hess err {worst_hess:.2e} <= 1e-4, {elapsed:.1f}s < 30s")
    assert ok


def test_criterion_02_terminal_law(criterion):
    measures = {"uniform3": uniform(3), "two_point3": two_point(3), "slice4": slice_measure(4, 0), "ising3": ising(3, seed=0)}
    rng = np.random.default_rng([2026, 2])
    P = 100_000
    cfg = SDEConfig(dt=1e-3, adaptive=True, seed=2)
    start = time.perf_counter()
    rows = []
    for name, nu in measures.items():
        for k in range(3):
            v = rng.normal(size=nu.n)
            batch = simulate_paths(nu, cfg, P, v=v, path_offset=k * P)
            law, unfinished = empirical_law(batch)
            # uncollapsed paths count as missing mass
            tv = total_variation(law * (P - unfinished) / P, tilt_probs(nu, v)) + 0.5 * unfinished / P
            rows.append((name, k, tv))
    elapsed = time.perf_counter() - start
    worst = max(rows, key=lambda r: r[2])
    ok = worst[2] <= 0.02 and elapsed < 300
    criterion("2", ok, f"max TV {worst[2]:.4f} ({worst[0]}, tilt {worst[1]}) <= 0.02 over 12 runs of 1e5 paths, "
                       f"{elapsed:.0f}s < 300s")
    assert ok


def test_criterion_03_variance_decomposition(criterion):
    rng = np.random.default_rng([2026, 3])
    slice4 = slice_measure(4, 0)
    pairs = {
        "uniform3/sum": (uniform(3), TestFunction.coordinate_sum(3)),
        "two_point3/sum": (two_point(3), TestFunction.coordinate_sum(3)),
        "slice4/adversarial": (slice4, adversarial_distance_function(slice4, rng)[0]),
        "ising3/random": (ising(3, seed=0), random_lipschitz_function(3, rng)),
        "product3/random": (product(3, [0.4, -0.2, 0.6]), random_lipschitz_function(3, rng)),
    }
    failed = []
    for k, (name, (nu, phi)) in enumerate(pairs.items()):
        rep = variance_decomposition_audit(nu, phi, (0.5, 2.0), 10_000, SDEConfig(seed=30 + k))
        if not rep.passed:
            failed.append(name)
    sharp = variance(two_point(3), TestFunction.coordinate_sum(3))
    ok = not failed and sharp == pytest.approx(9.0, abs=1e-12)
    criterion("3", ok, f"5 pairs at t=0.5,2 with 1e4 paths, failing: {failed or 'none'}; two-point Var = {sharp:g} = n^2")
    assert ok


def test_criterion_04_trace_decay(criterion):
    failed = []
    worst = -math.inf
    for k, (name, nu) in enumerate(corpus().items()):
        rep = trace_decay_audit(nu, SDEConfig(seed=40 + k, adaptive=True), 10_000)
        if not rep.passed:
            failed.append(name)
        for a in rep.assertions:
            if a.claim.startswith("E Tr A_t"):
                worst = max(worst, a.lhs - a.rhs - a.tolerance)
    ok = not failed
    criterion("4", ok, f"{len(CORPUS)} corpus measures, t=1,2,4,8, failing: {failed or 'none'}; "
                       f"max (E Tr A - bound - 4SE) = {worst:.3f}")
    assert ok


def test_criterion_05_transport_bound(criterion):
    rng = np.random.default_rng([2026, 5])
    failures = 0
    worst_ratio = 0.0
    worst_route = 0.0
    small = 0
    for _ in range(100):
        n = int(rng.integers(2, 9))
        if rng.random() < 0.5:
            nu, beta = uniform(n), 1.0
        else:
            ks = [k for k in range(-n + 2, n - 1) if (n - k) % 2 == 0]
            nu, beta = slice_measure(n, int(rng.choice(ks))), 2.0
        v = rng.normal(size=n)
        theta = random_direction(n, rng)
        eps = float(rng.uniform(1e-3, 0.1))
        rep = transport_bound_audit(nu, beta, v, theta, eps)
        failures += not rep.passed
        a = rep.assertions[0]
        worst_ratio = max(worst_ratio, a.lhs / a.rhs)
        if n <= 5:
            small += 1
            mu, nu2 = tilt(nu, v), tilt(nu, v + eps * theta)
            primal = w1_exact(mu, nu2, "transport")
            routes = (w1_exact(mu, nu2, "flow"), w1_dual(mu, nu2))
            worst_route = max(worst_route, max(abs(r - primal) for r in routes))
    ok = failures == 0 and worst_route <= 1e-8
    criterion("5", ok, f"{100 - failures}/100 cases within the bound (max W1/bound {worst_ratio:.3f}); "
                       f"primal/flow/dual gap {worst_route:.1e} <= 1e-8 on {small} cases with n <= 5")
    assert ok


def test_criterion_06_hitting_lemma(criterion):
    parts = []
    ok = True
    for k, eps in enumerate((0.05, 0.1)):
        rep = hitting_lemma_audit(eps, num_paths=100_000, s_values=(0.25, 1.0, 4.0), seed=60 + k)
        ok &= rep.passed
        d = rep.diagnostics
        parts.append(f"eps={eps:g}: P(tau>=1) {d['survival_s1']:.4f} vs 2Phi(eps)-1 = {d['exact_s1']:.4f}")
    criterion("6", ok, "; ".join(parts))
    assert ok


def test_criterion_07_entropy_identity(criterion):
    failed = []
    worst = 0.0
    for k, (name, nu) in enumerate(corpus().items()):
        rep = entropy_identity_audit(nu, 10_000, config=SDEConfig(seed=70 + k, adaptive=True))
        if not rep.passed:
            failed.append(name)
        d = rep.diagnostics
        worst = max(worst, abs(d["estimate"] - d["entropy"]) / max(4 * d["se"] + d["tail_bound"], 1e-300))
    ok = not failed and len(CORPUS) >= 6
    criterion("7", ok, f"{len(CORPUS)} corpus measures, failing: {failed or 'none'}; max |gap| / (4SE + tail) = {worst:.2f}")
    assert ok


def test_criterion_08_entropy_theorem(criterion):
    ok = True
    for n in (4, 6, 8):
        ok &= entropy_theorem_check(slice_measure(n, 0), 2.0).passed
    nu8 = slice_measure(8, 0)
    lhs8, rhs8 = marginal_entropy_sum(nu8), 2.0 * entropy(nu8)
    # atom counting: 8 log 2 against 2 log C(8, 4)
    ok &= abs(lhs8 - 8 * math.log(2)) <= 1e-10 and abs(rhs8 - 2 * math.log(70)) <= 1e-10
    ok &= round(lhs8, 3) == 5.545 and round(rhs8, 3) == 8.497
    rng = np.random.default_rng([2026, 8])
    worst_eq = 0.0
    for n in range(1, 9):
        nu = product(n, rng.uniform(-0.95, 0.95, size=n))
        rep = entropy_theorem_check(nu, 1.0)
        ok &= rep.passed
        worst_eq = max(worst_eq, abs(rep.assertions[0].lhs - rep.assertions[0].rhs))
    ok &= worst_eq <= 1e-10
    criterion("8", ok, f"slices n=4,6,8 with beta=2 (n=8: {lhs8:.3f} <= {rhs8:.3f}); product equality gap {worst_eq:.1e}")
    assert ok


def test_criterion_09_variance_exponent(criterion):
    fit = variance_exponent_audit((4, 6, 8, 10), margin=0.05, seed=0)
    control = hadamard_negative_control((4, 8, 16), floor=0.05)
    ok = fit.passed and control.passed
    ratios = ", ".join(f"{control.diagnostics[f'ratio_n{n}']:.3f}" for n in (4, 8, 16))
    criterion("9", ok, f"fitted exponent {fit.diagnostics['fitted_exponent']:.3f} <= 1.95; "
                       f"Hadamard Var/n^2 at n=4,8,16: {ratios} >= 0.05")
    assert ok


def test_criterion_10_harmonic_identities(criterion):
    rng = np.random.default_rng([2026, 10])
    worst = 0.0
    for _ in range(100):
        nu = random_measure(rng, int(rng.integers(1, 7)))
        w = rng.uniform(-3.0, 3.0, size=(10, nu.n))
        worst = max(worst, float(np.max(g_identity_check(nu, w))))
    failed = [name for name, nu in corpus().items() if not fact_harmonic_audit(nu).passed]
    ok = worst <= 1e-8 and not failed
    criterion("10", ok, f"g-identity residual {worst:.1e} <= 1e-8 over 1000 (nu, w); "
                        f"beta_cert <= beta_grid + 3 failing: {failed or 'none'}")
    assert ok


DETERMINISM_RUNS = [
    ["audit", "trace-decay", "--family", "ising", "--n", 3, "--paths", 500, "--adaptive"],
    ["audit", "entropy-identity", "--family", "slice", "--n", 4, "--k", 0, "--paths", 500, "--adaptive"],
    ["audit", "supermartingale", "--family", "uniform", "--n", 3, "--beta", 1, "--paths", 300],
    ["audit", "transport-bound", "--family", "slice", "--n", 6, "--k", 0, "--beta", 2, "--eps", 0.05],
    ["audit", "hitting-lemma", "--eps", 0.1, "--paths", 2000],
    ["audit", "variance-exponent", "--ns", "4,6"],
]


def test_criterion_11_determinism(tmp_path, criterion):
    mismatched = []
    for k, argv in enumerate(DETERMINISM_RUNS):
        first, second, replay = (tmp_path / f"{k}{s}.json" for s in "abc")
        codes = [main([str(x) for x in argv + ["--seed", 11, "--out", first]]),
                 main([str(x) for x in argv + ["--seed", 11, "--out", second]]),
                 main(["rerun", str(first), "--out", str(replay)])]
        texts = [canonical_json(json.loads(p.read_text()), drop=VOLATILE_KEYS) for p in (first, second, replay)]
        if len(set(texts)) != 1 or len(set(codes)) != 1:
            mismatched.append(argv[1])
    ok = not mismatched
    criterion("11", ok, f"{len(DETERMINISM_RUNS)} audits rerun by flags and from the manifest, "
                        f"mismatches: {mismatched or 'none'}")
    assert ok
