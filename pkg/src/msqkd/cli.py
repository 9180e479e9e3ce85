"""Command-line front end: ``msqkd {simulate,keyrate,threshold,verify-bounds,replay}``.

Exit codes: 0 success, 1 bad input, 2 protocol abort, 3 symmetry check
failed, 4 bound violation found.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import replace
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .channels import (
    AttackSpecError,
    ConfigError,
    load_attack_file,
    random_symmetric_attack,
    save_attack_file,
    semi_honest_f_norms,
)
from .keyrate import (
    InconsistentObservation,
    bound_chain,
    estimate_q_from_pw,
    find_threshold,
    fmt,
    keyrate_semi_honest,
    keyrate_worst_high,
    keyrate_worst_low,
    p_a_formula,
    q_z_formula,
    write_curve_csv,
)
from .postprocess import distill
from .protocol import ProtocolConfig, check_symmetry, load_config, run_protocol, worker_count
from .quantum import random_density_matrix, trace_norm, von_neumann_entropy

EXIT_OK, EXIT_INPUT, EXIT_ABORT, EXIT_SYMMETRY, EXIT_VIOLATION = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _round_floats(obj):
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            return None
        return float(fmt(obj))
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, np.generic):
        return _round_floats(obj.item())
    return obj


def _dump_json(obj, path: Path | None = None) -> str:
    text = json.dumps(_round_floats(obj), indent=2, sort_keys=True) + "\n"
    if path is not None:
        path.write_text(text)
    return text


def _write_manifest(path: Path, argv, command, config, seed, outputs, started) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "version": __version__,
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": round(time.perf_counter() - started, 3),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _snapshot(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _manifest_for(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# -- parameter parsing -------------------------------------------------------

def _parse_grid(text: str) -> list[float]:
    try:
        lo, hi, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"--q-grid expects lo:hi:step, got {text!r}") from None
    if step <= 0 or hi < lo:
        raise UsageError(f"invalid grid {text!r}")
    n = int(math.floor((hi - lo) / step + 1e-9))
    return [round(lo + i * step, 12) for i in range(n + 1)]


def _parse_list(text: str, name: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{name} expects comma-separated numbers, got {text!r}") from None
    if not vals:
        raise UsageError(f"{name} is empty")
    return vals


def _q_or_value(text: str, name: str, symbol: str = "Q"):
    if text == symbol:
        return None
    try:
        v = float(text)
    except ValueError:
        raise UsageError(f"{name} expects a number or '{symbol}', got {text!r}") from None
    if not 0 <= v <= 1:
        raise UsageError(f"{name} must lie in [0, 1]")
    return v


def _rate_functions(args):
    """Yield (tag, Q -> KeyRateReport, default hi) for the requested model."""
    if args.model == "semi-honest":
        q_fixed = _q_or_value(args.q, "--q", "p")
        tag = "semi-honest[q=%s]" % ("p" if q_fixed is None else fmt(q_fixed))

        def fn(Q, q_fixed=q_fixed):
            p = 2 * Q
            return keyrate_semi_honest(p, p if q_fixed is None else q_fixed)

        yield tag, fn, 0.499
        return
    p_w = _q_or_value(args.p_w, "--p-w")
    for p_a in _parse_list(args.p_a, "--p-a"):
        if not 0 < p_a <= 1:
            raise UsageError("--p-a values must lie in (0, 1]")
        pw_tag = "Q" if p_w is None else fmt(p_w)
        if args.model == "worst-low":
            q_z = _q_or_value(args.q_z, "--q-z")
            tag = "worst-low[p_a=%s,p_w=%s,Q_Z=%s]" % (fmt(p_a), pw_tag, "Q" if q_z is None else fmt(q_z))

            def fn(Q, p_a=p_a, q_z=q_z):
                return keyrate_worst_low(Q, Q if q_z is None else q_z, Q if p_w is None else p_w, p_a)

            yield tag, fn, 0.5
        else:
            tag = "worst-high[p_a=%s,p_w=%s]" % (fmt(p_a), pw_tag)

            def fn(Q, p_a=p_a):
                return keyrate_worst_high(Q, Q if p_w is None else p_w, p_a)

            yield tag, fn, min(0.5, math.sqrt(p_a / 2))


def _add_model_args(p: argparse.ArgumentParser, models) -> None:
    p.add_argument("--model", required=True, choices=models)
    p.add_argument("--p-a", default="0.5", help="p_a value(s), comma separated (worst-* models)")
    p.add_argument("--p-w", default="Q", help="p_w value or 'Q' for p_w = Q (worst-* models)")
    p.add_argument("--q-z", default="Q", help="Q_Z value or 'Q' (worst-low)")
    p.add_argument("--q", default="p", help="reverse noise q or 'p' for q = p (semi-honest)")


# -- commands ---------------------------------------------------------------

def cmd_keyrate(args, argv, started) -> int:
    grid = _parse_grid(args.q_grid)
    out = Path(args.out)
    if args.model == "semi-honest-stats":
        rows = ["Q,p,q,p_w,p_a,Q_Z"]
        for Q in grid:
            p = 2 * Q
            if p >= 1:
                raise UsageError(f"Q = {Q} gives p = {p} >= 1")
            f = semi_honest_f_norms(p)
            p_a = p_a_formula(Q, f)
            rows.append(",".join(fmt(x) for x in (Q, p, p, (1 - p) * p / 4 + p / 4, p_a, q_z_formula(Q, f[2], f[3], p_a))))
        out.write_text("\n".join(rows) + "\n")
    else:
        rows = []
        for tag, fn, _ in _rate_functions(args):
            for Q in grid:
                try:
                    rep = fn(Q)
                except ValueError as exc:
                    raise UsageError(f"Q = {Q}: {exc}") from None
                rows.append((Q, replace(rep, formula_tag=";".join((tag,) + rep.flags))))
        write_curve_csv(rows, out)
    _write_manifest(_manifest_for(out), argv, "keyrate", _snapshot(args), None, [out], started)
    return EXIT_OK


def cmd_threshold(args, argv, started) -> int:
    results = []
    for tag, fn, default_hi in _rate_functions(args):
        hi = default_hi if args.hi is None else args.hi
        try:
            th = find_threshold(lambda Q: fn(Q).rate, args.lo, hi)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        results.append({"model": tag, "Q_star": th.q_star, "bracket": list(th.bracket),
                        "rates": list(th.rates), "crossed": th.crossed})
    text = _dump_json({"results": results})
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.write_text(text)
        _write_manifest(_manifest_for(out), argv, "threshold", _snapshot(args), None, [out], started)
    return EXIT_OK


def _rate_report_from_stats(stats, model: str):
    est = {k: getattr(stats, k) for k in ("Q", "Q_Z", "p_w", "p_a")}
    if any(v is None for v in est.values()) or est["p_a"].value == 0:
        return None, "statistics undefined"
    Q, Q_Z, p_w, p_a = (est[k].value for k in ("Q", "Q_Z", "p_w", "p_a"))
    try:
        if model == "worst-low":
            return keyrate_worst_low(Q, Q_Z, p_w, p_a), None
        if model == "worst-high":
            return keyrate_worst_high(Q, p_w, p_a), None
        p = 2 * Q
        return keyrate_semi_honest(p, estimate_q_from_pw(p, p_w)), None
    except (ValueError, InconsistentObservation) as exc:
        return None, str(exc)


def _estimate_dict(e):
    return None if e is None else {"value": e.value, "stderr": e.stderr, "count": e.count}


def cmd_simulate(args, argv, started) -> int:
    config, doc = load_config(args.config)
    if args.seed is not None:
        config = ProtocolConfig(config.N, config.p_M_A, config.p_M_B, config.tau, args.seed, config.server)
    rate_model = args.rate_model or doc.get("rate_model", "worst-low")
    if rate_model not in ("worst-low", "worst-high", "semi-honest"):
        raise ConfigError(f"unknown rate model {rate_model!r}", "rate_model")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    run = run_protocol(config)
    stats = run.stats
    symmetry = check_symmetry(stats, args.z_sigma) if stats.n_both_measure else None
    report, why = _rate_report_from_stats(stats, rate_model)

    result = None
    if not run.abort and report is not None and stats.Q_Z is not None and stats.Q_Z.value < 0.5:
        result = distill(run.keys, report, stats.Q_Z.value, seed=config.seed)

    transcript = out / "transcript.csv"
    run.records.write_csv(transcript)
    s = stats.to_dict()
    stats_doc = {
        "counts": {k: s[k] for k in ("n_iterations", "n_both_measure", "n_both_reflect", "n_one_measure",
                                      "n_kept", "n_reflect_errors", "counts_ij", "minus_counts_ij")},
        "estimates": {
            "p00": _estimate_dict(stats.p_ij[0]), "p01": _estimate_dict(stats.p_ij[1]),
            "p10": _estimate_dict(stats.p_ij[2]), "p11": _estimate_dict(stats.p_ij[3]),
            "Q": _estimate_dict(stats.Q), "p_a": _estimate_dict(stats.p_a), "p_w": _estimate_dict(stats.p_w),
            "Q_Z": _estimate_dict(stats.Q_Z), "p_minus1_eq": _estimate_dict(stats.p_minus1_eq),
            "p_minus1_neq": _estimate_dict(stats.p_minus1_neq), "sift_rate": _estimate_dict(stats.sift_rate),
        },
        "abort": run.abort,
        "tau": config.tau,
        "symmetry": None if symmetry is None else symmetry.to_dict(),
        "key_rate": None if report is None else {
            "model": rate_model, "rate": report.rate, "i_ab": report.i_ab,
            "i_ac_bound": report.i_ac_bound, "flags": list(report.flags)},
        "key_rate_unavailable": why,
    }
    stats_path = out / "stats.json"
    _dump_json(stats_doc, stats_path)
    key_path = out / "final_key.txt"
    if result is None:
        key_path.write_text(f"\nn={run.keys.n} final_len=0 verified=false\n")
    else:
        key_path.write_text(result.export())
    cfg = config.to_dict() | {"rate_model": rate_model}
    _write_manifest(out / "manifest.json", argv, "simulate", cfg, config.seed,
                    [transcript, stats_path, key_path], started)
    if run.abort:
        return EXIT_ABORT
    if symmetry is not None and not symmetry.passed:
        return EXIT_SYMMETRY
    return EXIT_OK


def _sample_check(i, seed, dcs, qs):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
    d_C = dcs[i % len(dcs)]
    Q = qs[(i // len(dcs)) % len(qs)]
    attack = random_symmetric_attack(d_C, rng)
    chain = bound_chain(attack, Q)

    # Rank-two norm bound on an independent zero-trace pair.
    dim = int(rng.integers(2, 17))
    a = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    b = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    b -= (np.vdot(a, b).real / np.vdot(a, a).real) * a
    b *= rng.uniform(0.01, 2)
    rank2_lhs = trace_norm(np.outer(a, b.conj()) + np.outer(b, a.conj()))
    rank2_rhs = 2 * math.sqrt(np.vdot(a, a).real * np.vdot(b, b).real)

    # Trace-norm Holevo bound on an independent pair of states.
    dim = int(rng.integers(2, 9))
    r0 = random_density_matrix(dim, rng, int(rng.integers(1, dim + 1)))
    r1 = random_density_matrix(dim, rng, int(rng.integers(1, dim + 1)))
    gap = von_neumann_entropy(0.5 * (r0 + r1)) - 0.5 * von_neumann_entropy(r0) - 0.5 * von_neumann_entropy(r1)
    return attack, Q, chain, (rank2_lhs, rank2_rhs), (gap, 0.5 * trace_norm(r0 - r1))


def cmd_verify_bounds(args, argv, started) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    qs = _parse_list(args.Q, "--Q")
    margins: dict[str, list[float]] = {}
    violations = []

    def record(name, lhs, rhs):
        margins.setdefault(name, []).append(rhs - lhs)
        return lhs > rhs + args.slack

    if args.attack:
        attack, _ = load_attack_file(args.attack)
        samples = [(attack, Q, bound_chain(attack, Q), None, None) for Q in qs]
    else:
        if args.samples < 1:
            raise UsageError("--samples must be >= 1")
        dcs = [int(x) for x in _parse_list(args.dc, "--dc")]
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            samples = list(pool.map(lambda i: _sample_check(i, args.seed, dcs, qs), range(args.samples)))

    for i, (attack, Q, chain, rank2, holevo) in enumerate(samples):
        bad = [name for name, (lhs, rhs) in chain.links().items() if record(name, lhs, rhs)]
        for j, s in enumerate(chain.rank2_slack):
            if record(f"rank2_on_sigma{j}", 0.0, s):
                bad.append(f"rank2_on_sigma{j}")
        if rank2 is not None and record("rank2_random_pair", *rank2):
            bad.append("rank2_random_pair")
        if holevo is not None and record("holevo_trace_norm_random_pair", *holevo):
            bad.append("holevo_trace_norm_random_pair")
        if bad:
            path = out.with_name(f"{out.stem}.violation{i}.json")
            save_attack_file(attack, path)
            violations.append({"sample": i, "Q": Q, "d_C": attack.d_C, "links": bad, "attack_file": str(path)})

    report = {
        "samples": len(samples),
        "seed": args.seed,
        "slack": args.slack,
        "violations": len(violations),
        "violation_details": violations,
        "links": {name: {"min_margin": min(m), "max_margin": max(m)} for name, m in sorted(margins.items())},
    }
    _dump_json(report, out)
    outputs = [out] + [Path(v["attack_file"]) for v in violations]
    _write_manifest(_manifest_for(out), argv, "verify-bounds", _snapshot(args), args.seed, outputs, started)
    print(f"{len(samples)} samples, {len(violations)} violations")
    return EXIT_VIOLATION if violations else EXIT_OK


def cmd_replay(args, argv, started) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    replay_argv = list(manifest["argv"])
    if args.out:
        if "--out" not in replay_argv:
            raise UsageError("manifest command has no --out to override")
        replay_argv[replay_argv.index("--out") + 1] = args.out
    return main(replay_argv)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msqkd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the protocol from a JSON config")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--z-sigma", type=float, default=4.0)
    p.add_argument("--rate-model", choices=["worst-low", "worst-high", "semi-honest"], default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("keyrate", help="emit a key-rate curve as CSV")
    _add_model_args(p, ["semi-honest", "worst-low", "worst-high", "semi-honest-stats"])
    p.add_argument("--q-grid", required=True, help="lo:hi:step")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keyrate)

    p = sub.add_parser("threshold", help="locate the largest Q with a non-negative rate")
    _add_model_args(p, ["semi-honest", "worst-low", "worst-high"])
    p.add_argument("--lo", type=float, default=0.0)
    p.add_argument("--hi", type=float, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("verify-bounds", help="check the I(A:C) bound chain on random attacks")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--dc", default="1,2,4")
    p.add_argument("--Q", default="0,0.05,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--slack", type=float, default=1e-9)
    p.add_argument("--attack", default=None, help="verify one attack-spec file instead of sampling")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_verify_bounds)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="redirect the output location")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    started = time.perf_counter()
    try:
        return args.func(args, argv, started)
    except (ConfigError, AttackSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
    except (UsageError, InconsistentObservation, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
