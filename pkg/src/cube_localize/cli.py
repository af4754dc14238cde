"""Command-line entry point: ``cube-localize <command> [options]``.

Exit codes: 0 on success or a passing check, 2 when a certification finds a
violation or an audit assertion fails, 1 on usage or guard errors.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import secrets
import sys
import time
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .audits import (
    adversarial_distance_function,
    entropy_identity_audit,
    entropy_theorem_check,
    h_drift_audit,
    hadamard_negative_control,
    main_theorem_audit,
    random_lipschitz_function,
    rayleigh_corollary_audit,
    smalltail_check,
    variance_decomposition_audit,
    variance_exponent_audit,
)
from .coupling import (
    CouplingConfig,
    W1_DIMENSION_CAP,
    hitting_lemma_audit,
    supermartingale_audit,
    transport_bound_audit,
    w1_dual,
    w1_exact,
)
from .fourier import fact_harmonic_audit
from .localization import (
    SDEConfig,
    empirical_law,
    martingale_audit,
    run_localization,
    simulate_paths,
    total_variation,
    trace_decay_audit,
)
from .log_laplace import Condition, SearchConfig, certify, rayleigh_implies_beta2_check, tilt, tilt_probs
from .measure_core import (
    DiscreteMeasure,
    MeasureSpecError,
    TestFunction,
    build_measure,
    hamming_distance_to_set,
)
from .report import AuditReport, canonical_json

SEED_ENV = "CUBE_LOCALIZE_SEED"
EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# arguments


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _condition(text: str) -> Condition:
    try:
        return Condition.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_measure_args(p: argparse.ArgumentParser, suffix: str = "") -> None:
    p.add_argument(f"--spec{suffix}", help="measure spec: JSON file path or inline JSON object")
    if not suffix:
        p.add_argument("--family", help="measure family (uniform, dirac, product, two_point, ising, slice, hadamard_rows)")
        p.add_argument("--n", type=int, help="dimension")
        p.add_argument("--k", type=int, default=0, help="slice level (sum of coordinates)")
        p.add_argument("--means", type=_floats, help="product means, comma separated")
        p.add_argument("--point", type=_floats, help="dirac point, comma separated")
        p.add_argument("--ising-seed", type=int, default=0, help="seed of the random Ising couplings")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help=f"random seed (default: ${SEED_ENV} or fresh entropy)")
    p.add_argument("--out", help="output file")
    p.add_argument("--threads", type=int, help="worker cap (recorded; execution is single-threaded)")


def _add_sde(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--t-max", type=float, default=60.0)
    p.add_argument("--adaptive", action="store_true", help="lengthen steps once Tr A < 1")
    p.add_argument("--max-dt", type=float, default=0.05)


def _add_search(p: argparse.ArgumentParser) -> None:
    d = SearchConfig()
    p.add_argument("--radius", type=float, default=d.radius)
    p.add_argument("--grid", type=int, default=d.grid)
    p.add_argument("--starts", type=int, default=d.starts)
    p.add_argument("--iters", type=int, default=d.iters)
    p.add_argument("--random-points", type=int, default=d.random_points)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cube-localize", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("certify", help="search for the largest value of a curvature criterion")
    _add_measure_args(p)
    _add_common(p)
    _add_search(p)
    p.add_argument("--condition", required=True, type=_condition, help="semi-lc | diag-dominated | rayleigh | aov")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("simulate", help="one localization trajectory to CSV")
    _add_measure_args(p)
    _add_common(p)
    _add_sde(p)
    p.add_argument("--tilt", type=_floats, help="initial field v")
    p.add_argument("--scheme", choices=["tilt-euler", "measure-euler"], default="tilt-euler")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--path-index", type=int, default=0)

    p = sub.add_parser("sample", help="terminal points of localization paths started at a field")
    _add_measure_args(p)
    _add_common(p)
    _add_sde(p)
    p.add_argument("--tilt", type=_floats, help="field v (default 0)")
    p.add_argument("--paths", type=int, default=10_000)

    p = sub.add_parser("w1", help="exact Wasserstein-1 distance between two measures")
    _add_measure_args(p, "-a")
    _add_measure_args(p, "-b")
    _add_common(p)
    p.add_argument("--tilt-a", type=_floats)
    p.add_argument("--tilt-b", type=_floats)
    p.add_argument("--method", choices=["auto", "transport", "flow"], default="auto")

    p = sub.add_parser("audit", help="run a named audit and write its report")
    p.add_argument("name", choices=sorted(AUDITS))
    _add_measure_args(p)
    _add_common(p)
    _add_sde(p)
    _add_search(p)
    p.add_argument("--beta", type=float)
    p.add_argument("--paths", type=int)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--phi", default="sum", help="test function: sum | adversarial | random | distance:i,j,...")
    p.add_argument("--tilt", type=_floats)
    p.add_argument("--theta", type=_floats)
    p.add_argument("--checkpoints", type=_floats)
    p.add_argument("--ns", type=_floats, help="dimensions for exponent/control audits")

    p = sub.add_parser("rerun", help="repeat an audit from the manifest in its JSON output")
    p.add_argument("report", help="JSON file written by an audit command")
    p.add_argument("--out", help="where to write the repeated report")
    return parser


# ---------------------------------------------------------------------------
# helpers


def _load_spec(text: str) -> dict:
    src = text.strip()
    if not src.startswith("{"):
        path = Path(src)
        if not path.exists():
            raise UsageError(f"spec file not found: {src}")
        src = path.read_text(encoding="utf-8")
    try:
        spec = json.loads(src)
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed spec (line {exc.lineno}, column {exc.colno}): {exc.msg}") from exc
    if not isinstance(spec, dict):
        raise UsageError("measure spec must be a JSON object")
    return spec


def _spec_from_args(args, suffix: str = "") -> dict:
    raw = getattr(args, f"spec{suffix.replace('-', '_')}", None)
    if raw:
        return _load_spec(raw)
    if suffix:
        raise UsageError(f"--spec{suffix} is required")
    if not args.family or args.n is None:
        raise UsageError("give --spec or both --family and --n")
    spec: dict[str, Any] = {"family": args.family, "n": args.n}
    fam = args.family.replace("-", "_").lower()
    if fam == "slice":
        spec["k"] = args.k
    if fam == "product":
        if args.means is None:
            raise UsageError("--means is required for the product family")
        spec["means"] = args.means
    if fam == "dirac" and args.point is not None:
        spec["point"] = args.point
    if fam == "ising":
        spec["seed"] = args.ising_seed
    return spec


def _measure(spec: dict) -> DiscreteMeasure:
    try:
        return build_measure(spec)
    except MeasureSpecError as exc:
        raise UsageError(f"invalid measure spec: {exc}") from exc


def _resolve_seed(args) -> tuple[int, str]:
    if args.seed is not None:
        return int(args.seed), "flag"
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env), "env"
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return secrets.randbits(63), "entropy"


def _field(values, n: int, name: str) -> np.ndarray:
    if values is None:
        return np.zeros(n)
    if len(values) == 1 and n > 1:
        values = values * n
    if len(values) != n:
        raise UsageError(f"--{name} needs {n} values, got {len(values)}")
    return np.asarray(values, dtype=np.float64)


def _manifest(args, spec, seed: int, seed_source: str, params: dict) -> dict:
    return {
        "command": args.command if args.command != "audit" else f"audit {args.name}",
        "spec": spec,
        "seed": seed,
        "seed_source": seed_source,
        "params": params,
        "threads": args.threads if args.threads is not None else os.cpu_count(),
        "version": __version__,
        "wall_clock": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def _write(out: str | None, payload: dict) -> str:
    text = canonical_json(payload)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    return text


def _sde(args, seed: int) -> SDEConfig:
    try:
        return SDEConfig(dt=args.dt, t_max=args.t_max, seed=seed, adaptive=args.adaptive, max_dt=max(args.max_dt, args.dt))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _search(args, seed: int) -> SearchConfig:
    cfg = SearchConfig(
        radius=args.radius, grid=args.grid, starts=args.starts, iters=args.iters, seed=seed,
        random_points=args.random_points,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_certify(args) -> int:
    spec = _spec_from_args(args)
    nu = _measure(spec)
    seed, source = (args.seed, "flag") if args.seed is not None else (SearchConfig().seed, "default")
    search = _search(args, seed)
    try:
        rep = certify(nu, args.condition, search, args.threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    params = {"condition": args.condition.value, "threshold": rep.threshold, **rep.to_dict()["search"]}
    payload = {"manifest": _manifest(args, spec, seed, source, params), "report": rep.to_dict()}
    _write(args.out, payload)
    print(f"{rep.condition.value}: certified value {rep.certified_value:.10g} vs threshold {rep.threshold:.6g} -> {rep.verdict}")
    if not rep.passed:
        print("witness: " + ", ".join(f"{x:.6g}" for x in rep.witness))
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_simulate(args) -> int:
    spec = _spec_from_args(args)
    nu = _measure(spec)
    seed, source = _resolve_seed(args)
    try:
        cfg = SDEConfig(dt=args.dt, t_max=args.t_max, seed=seed, adaptive=args.adaptive,
                        max_dt=max(args.max_dt, args.dt), scheme=args.scheme, stride=args.stride)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    v = _field(args.tilt, nu.n, "tilt")
    traj = run_localization(nu, cfg, v=v, path_index=args.path_index)
    out = args.out or "trajectory.csv"
    traj.to_csv(out)
    params = {"dt": cfg.dt, "t_max": cfg.t_max, "scheme": args.scheme, "stride": cfg.stride,
              "adaptive": cfg.adaptive, "tilt": v.tolist(), "path_index": args.path_index}
    manifest = _manifest(args, spec, seed, source, params)
    summary = {
        "steps_recorded": len(traj.times),
        "final_time": float(traj.times[-1]),
        "terminal_point": None if traj.terminal_point is None else traj.terminal_point.tolist(),
        "clamped_mass": traj.clamped_mass,
        "flagged": traj.flagged,
    }
    Path(out + ".json").write_text(canonical_json({"manifest": manifest, "summary": summary}) + "\n", encoding="utf-8")
    print(f"wrote {out} ({len(traj.times)} rows); terminal point: {summary['terminal_point']}")
    return EXIT_OK


def cmd_sample(args) -> int:
    spec = _spec_from_args(args)
    nu = _measure(spec)
    seed, source = _resolve_seed(args)
    cfg = _sde(args, seed)
    v = _field(args.tilt, nu.n, "tilt")
    batch = simulate_paths(nu, cfg, args.paths, v=v)
    law, unfinished = empirical_law(batch)
    exact = tilt_probs(nu, v)
    emp_mean = law @ nu.points
    report = {
        "empirical_mean": emp_mean.tolist(),
        "exact_mean": (exact @ nu.points).tolist(),
        "tv_to_exact": total_variation(law, exact),
        "uncollapsed_paths": unfinished,
        "empirical_law": {str(int(i)): float(law[i]) for i in np.flatnonzero(law)},
    }
    params = {"dt": cfg.dt, "t_max": cfg.t_max, "adaptive": cfg.adaptive, "paths": args.paths, "tilt": v.tolist()}
    _write(args.out, {"manifest": _manifest(args, spec, seed, source, params), "report": report})
    print("empirical mean: " + ", ".join(f"{x:.6f}" for x in emp_mean))
    print("exact mean:     " + ", ".join(f"{x:.6f}" for x in report["exact_mean"]))
    print(f"TV to exact tilt law: {report['tv_to_exact']:.5f}  (uncollapsed paths: {unfinished})")
    return EXIT_OK


def cmd_w1(args) -> int:
    spec_a = _spec_from_args(args, "-a")
    spec_b = _spec_from_args(args, "-b")
    mu, nu = _measure(spec_a), _measure(spec_b)
    if mu.n != nu.n:
        raise UsageError(f"dimension mismatch: {mu.n} vs {nu.n}")
    if mu.n > W1_DIMENSION_CAP:
        raise UsageError(f"exact W1 is limited to n <= {W1_DIMENSION_CAP}; use a smaller measure")
    va, vb = _field(args.tilt_a, mu.n, "tilt-a"), _field(args.tilt_b, nu.n, "tilt-b")
    if np.any(va):
        mu = tilt(mu, va)
    if np.any(vb):
        nu = tilt(nu, vb)
    value = w1_exact(mu, nu, args.method)
    report = {"w1": value}
    if mu.n <= 5:
        report["w1_dual"] = w1_dual(mu, nu)
    seed = args.seed if args.seed is not None else 0
    params = {"tilt_a": va.tolist(), "tilt_b": vb.tolist(), "method": args.method}
    manifest = _manifest(args, {"a": spec_a, "b": spec_b}, seed, "unused", params)
    _write(args.out, {"manifest": manifest, "report": report})
    print(f"W1 = {value:.12g}" + (f"  (dual {report['w1_dual']:.12g})" if "w1_dual" in report else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------
# audits


def _phi(args, nu: DiscreteMeasure, seed: int) -> TestFunction:
    kind = args.phi
    if kind == "sum":
        return TestFunction.coordinate_sum(nu.n)
    if kind == "adversarial":
        return adversarial_distance_function(nu, np.random.default_rng([seed, 13]))[0]
    if kind == "random":
        return random_lipschitz_function(nu.n, np.random.default_rng([seed, 17]))
    if kind.startswith("distance:"):
        try:
            members = [int(x) for x in kind.split(":", 1)[1].split(",") if x]
        except ValueError as exc:
            raise UsageError("distance:<i,j,...> takes integer point indices") from exc
        return hamming_distance_to_set(nu.n, members)
    raise UsageError(f"unknown test function {kind!r}")


def _need_beta(args) -> float:
    if args.beta is None:
        raise UsageError("this audit needs --beta")
    return float(args.beta)


def _theta(args, n: int) -> np.ndarray:
    theta = _field(args.theta, n, "theta") if args.theta is not None else np.eye(n)[0]
    norm = np.linalg.norm(theta)
    if not norm > 0:
        raise UsageError("--theta must be nonzero")
    return theta / norm


def _paths(args, default: int) -> int:
    return int(args.paths) if args.paths is not None else default


AuditFn = Callable[[Any, DiscreteMeasure, int], AuditReport]


def _a_martingale(args, nu, seed):
    event = np.flatnonzero(nu.points[:, 0] > 0)
    cks = tuple(args.checkpoints) if args.checkpoints else (0.1, 0.5, 1.0, 2.0)
    return martingale_audit(nu, event, _sde(args, seed), _paths(args, 10_000), cks)


def _a_trace_decay(args, nu, seed):
    cks = tuple(args.checkpoints) if args.checkpoints else (1.0, 2.0, 4.0, 8.0)
    return trace_decay_audit(nu, _sde(args, seed), _paths(args, 10_000), cks)


def _a_variance_decomposition(args, nu, seed):
    cks = tuple(args.checkpoints) if args.checkpoints else (0.5, 2.0)
    return variance_decomposition_audit(nu, _phi(args, nu, seed), cks, _paths(args, 10_000), _sde(args, seed))


def _a_small_tail(args, nu, seed):
    rng = np.random.default_rng([seed, 19])
    return smalltail_check(nu, _phi(args, nu, seed), rng.normal(0.0, 2.0, size=(_paths(args, 50), nu.n)))


def _a_main_theorem(args, nu, seed):
    return main_theorem_audit(nu, _need_beta(args), _phi(args, nu, seed), num_paths=_paths(args, 16),
                              config=_sde(args, seed), seed=seed)


def _a_variance_exponent(args, nu, seed):
    ns = tuple(int(x) for x in args.ns) if args.ns else (4, 6, 8, 10)
    return variance_exponent_audit(ns, seed=seed)


def _a_hadamard_control(args, nu, seed):
    ns = tuple(int(x) for x in args.ns) if args.ns else (4, 8, 16)
    return hadamard_negative_control(ns)


def _a_entropy_identity(args, nu, seed):
    cfg = _sde(args, seed)
    return entropy_identity_audit(nu, _paths(args, 10_000), None, cfg)


def _a_entropy_theorem(args, nu, seed):
    return entropy_theorem_check(nu, _need_beta(args))


def _a_h_drift(args, nu, seed):
    return h_drift_audit(nu, args.beta, _paths(args, 2000), config=_sde(args, seed))


def _a_rayleigh_corollary(args, nu, seed):
    return rayleigh_corollary_audit(nu, _search(args, seed), part1_paths=_paths(args, 8), seed=seed)


def _a_rayleigh_beta2(args, nu, seed):
    return rayleigh_implies_beta2_check(nu, _search(args, seed), seed=seed)


def _a_fact_harmonic(args, nu, seed):
    return fact_harmonic_audit(nu, seed=seed, search=_search(args, seed))


def _a_hitting_lemma(args, nu, seed):
    return hitting_lemma_audit(args.eps, _paths(args, 100_000), dt=args.dt, seed=seed)


def _coupling_cfg(args, seed, t_max) -> CouplingConfig:
    return CouplingConfig(dt=args.dt, t_max=t_max, seed=seed)


def _a_supermartingale(args, nu, seed):
    cks = tuple(args.checkpoints) if args.checkpoints else (0.0, 0.25, 0.5, 0.75, 1.0)
    return supermartingale_audit(
        nu, _need_beta(args), _field(args.tilt, nu.n, "tilt"), _theta(args, nu.n), args.eps,
        _coupling_cfg(args, seed, max(cks)), _paths(args, 10_000), cks,
    )


def _a_transport_bound(args, nu, seed):
    if not 0 < args.eps < 0.1:
        raise UsageError("--eps must lie in (0, 0.1) for the transport bound")
    if nu.n > W1_DIMENSION_CAP:
        raise UsageError(f"exact W1 is limited to n <= {W1_DIMENSION_CAP}")
    return transport_bound_audit(
        nu, _need_beta(args), _field(args.tilt, nu.n, "tilt"), _theta(args, nu.n), args.eps,
        _coupling_cfg(args, seed, 1.0), coupling_paths=_paths(args, 0),
    )


AUDITS: dict[str, AuditFn] = {
    "martingale": _a_martingale,
    "trace-decay": _a_trace_decay,
    "variance-decomposition": _a_variance_decomposition,
    "small-tail": _a_small_tail,
    "main-theorem": _a_main_theorem,
    "variance-exponent": _a_variance_exponent,
    "hadamard-control": _a_hadamard_control,
    "entropy-identity": _a_entropy_identity,
    "entropy-theorem": _a_entropy_theorem,
    "h-drift": _a_h_drift,
    "rayleigh-corollary": _a_rayleigh_corollary,
    "rayleigh-beta2": _a_rayleigh_beta2,
    "fact-harmonic": _a_fact_harmonic,
    "hitting-lemma": _a_hitting_lemma,
    "supermartingale": _a_supermartingale,
    "transport-bound": _a_transport_bound,
}

_NO_MEASURE = {"variance-exponent", "hadamard-control", "hitting-lemma"}


def cmd_audit(args) -> int:
    seed, source = _resolve_seed(args)
    return _run_audit(args, seed, source)


def _run_audit(args, seed: int, source: str) -> int:
    if args.name in _NO_MEASURE and not (args.spec or args.family):
        spec, nu = None, None
    else:
        spec = _spec_from_args(args)
        nu = _measure(spec)
    start = time.perf_counter()
    try:
        report = AUDITS[args.name](args, nu, seed)
    except MeasureSpecError as exc:
        raise UsageError(str(exc)) from exc
    elapsed = time.perf_counter() - start
    params = {k: v for k, v in sorted(vars(args).items())
              if k not in {"command", "name", "spec", "out", "threads", "seed"} and v is not None}
    manifest = _manifest(args, spec, seed, source, params)
    manifest["elapsed_seconds"] = round(elapsed, 3)
    _write(args.out, {"manifest": manifest, "report": report.to_dict()})
    print(report.table())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_rerun(args) -> int:
    """Repeat an audit from the manifest stored in one of its output files."""
    path = Path(args.report)
    if not path.exists():
        raise UsageError(f"file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed report (line {exc.lineno}, column {exc.colno}): {exc.msg}") from exc
    manifest = doc.get("manifest", doc) if isinstance(doc, dict) else None
    command = manifest.get("command", "") if isinstance(manifest, dict) else ""
    if not command.startswith("audit "):
        raise UsageError("rerun needs the output of an audit command")
    name = command.split(" ", 1)[1]
    if name not in AUDITS:
        raise UsageError(f"unknown audit in manifest: {name}")
    ns = build_parser().parse_args(["audit", name])
    for key, value in manifest.get("params", {}).items():
        if not hasattr(ns, key) or key in {"command", "name"}:
            raise UsageError(f"unknown parameter in manifest: {key}")
        setattr(ns, key, value)
    if manifest.get("spec") is not None:
        ns.spec = json.dumps(manifest["spec"])
    ns.threads = manifest.get("threads")
    ns.out = args.out
    return _run_audit(ns, int(manifest["seed"]), manifest.get("seed_source", "manifest"))


COMMANDS = {
    "certify": cmd_certify,
    "simulate": cmd_simulate,
    "sample": cmd_sample,
    "w1": cmd_w1,
    "audit": cmd_audit,
    "rerun": cmd_rerun,
}

# keys excluded when comparing reports of two runs for equality
VOLATILE_KEYS = ("manifest.wall_clock", "manifest.elapsed_seconds")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, MeasureSpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:  # guard rejected the inputs
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
