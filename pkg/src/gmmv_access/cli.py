"""Command-line entry point: ``python -m gmmv_access <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from .harness import (SCHEMES, ExperimentSpec, emit_results, json_default, load_experiment_spec, results_csv,
                      run_trial, run_trials)
from .se import SeConfig, run_state_evolution, write_trace_csv
from .sysmodel import SystemConfig, config_from_mapping, parse_config_text
from .turbo import initial_overhead

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat 'key = value' configuration file")
    common.add_argument("--seed", type=_u64, help="base seed (overrides the config file)")
    common.add_argument("--threads", type=_positive_int, default=1, help="worker processes")
    common.add_argument("--out", type=Path, help="output path (default: stdout)")
    common.add_argument("--scale", type=_positive_float, default=1.0,
                        help="shrink K, Ka and G by this factor for desk-scale runs")

    parser = _Parser(prog="gmmv_access", description="Grant-free massive access simulations.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", parents=[common], help="one trial with diagnostics")
    p.add_argument("--scheme", choices=SCHEMES, default="scheme1")

    p = sub.add_parser("sweep", parents=[common], help="Monte Carlo sweep from an experiment file")
    p.add_argument("spec", type=Path, help="experiment file")
    p.add_argument("--trials", type=_positive_int, help="override n_trials")

    sub.add_parser("se", parents=[common], help="state-evolution trace")

    p = sub.add_parser("adaptive", parents=[common], help="consumed-overhead study of scheme 4")
    p.add_argument("--trials", type=_positive_int, default=20)
    p.add_argument("--G0", type=_positive_int, help="initial overhead (default: expected-sparsity rule)")
    p.add_argument("--G-max", dest="G_max", type=_positive_int, help="overhead cap (default 2*G)")

    p = sub.add_parser("compare", parents=[common], help="schemes side by side at one operating point")
    p.add_argument("--schemes", default="scheme1,scheme2,scheme3,somp,oracle_ls",
                   help="comma-separated list of schemes")
    p.add_argument("--trials", type=_positive_int, default=10)
    return parser


def _system_config(args) -> SystemConfig:
    if args.config is not None:
        values = parse_config_text(args.config.read_text())
        known = {f.name for f in dataclasses.fields(SystemConfig)}
        cfg = config_from_mapping({k: v for k, v in values.items() if k in known})
    else:
        cfg = SystemConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.scale != 1.0:
        cfg = cfg.scaled(args.scale)
    return cfg


def se_config_from_values(values: dict[str, str], scale: float = 1.0, seed: int | None = None) -> SeConfig:
    """SE settings from a config file: explicit ``gamma``/``kappa``/``K_tilde`` keys,
    otherwise ``gamma = Ka/K`` and ``kappa = G/K`` from the system keys."""
    fields = {f.name: f for f in dataclasses.fields(SeConfig)}
    base = SeConfig()
    kw = {}
    for key in ("gamma", "kappa", "rho", "eta", "snr_db", "sigma0"):
        if key in values:
            kw[key] = float(values[key])
    for key in ("M", "Ptilde", "K_tilde", "T_amp", "seed"):
        if key in values:
            kw[key] = int(values[key])
    for key in ("refine_mode", "l_form"):
        if key in values:
            kw[key] = values[key].strip()
    if "Sa_range" in values:
        lo, hi = values["Sa_range"].replace("(", "").replace(")", "").replace(",", " ").split()
        kw["Sa_range"] = (int(lo), int(hi))
    if "pathloss" in values:
        kw["pathloss"] = values["pathloss"].strip().lower() in ("1", "true", "yes", "on")
    if "K" in values:
        K = int(values["K"])
        kw.setdefault("gamma", int(values.get("Ka", round(base.gamma * K))) / K)
        if "G" in values:
            kw.setdefault("kappa", int(values["G"]) / K)
    if seed is not None:
        kw["seed"] = seed
    cfg = SeConfig(**{k: v for k, v in kw.items() if k in fields})
    if scale != 1.0:
        cfg = dataclasses.replace(cfg, K_tilde=max(1, round(cfg.K_tilde * scale)))
    return cfg


def _write_text(path: Path | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _progress(stream=sys.stderr):
    def report(done, total):
        if done == total or done % max(1, total // 20) == 0:
            print(f"  {done}/{total} trials", file=stream, flush=True)
    return report


def cmd_simulate(args) -> int:
    cfg = _system_config(args)
    seed_seq = np.random.SeedSequence(cfg.seed, spawn_key=(0, 0))
    (rec,) = run_trial(cfg, (args.scheme,), seed_seq)
    report = {"config": dataclasses.asdict(cfg), "record": rec}
    _write_text(args.out, json.dumps(report, indent=1, default=json_default) + "\n")
    if rec["excluded"]:
        print(f"trial excluded: {rec['error']}", file=sys.stderr)
    else:
        print(f"{args.scheme}: Pe={rec['pe']:.4g}  MSE={10 * math.log10(max(rec['mse'], 1e-300)):.2f} dB  "
              f"detected={rec['n_detected']}  G={rec['consumed_G']}", file=sys.stderr)
    return EXIT_OK


def _run_and_emit(spec: ExperimentSpec, args, out: Path | None) -> int:
    table = run_trials(spec, threads=args.threads, progress=_progress())
    if out is None:
        sys.stdout.write(results_csv(table))
    else:
        emit_results(table, out)
        print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.config is not None:
        raise UsageError("sweep takes its configuration from the experiment file; drop --config")
    spec = load_experiment_spec(args.spec, seed=args.seed)
    if args.scale != 1.0:
        spec = spec.scaled(args.scale)
    if args.trials is not None:
        spec = dataclasses.replace(spec, n_trials=args.trials)
    out = args.out if args.out is not None else (Path(spec.output) if spec.output else None)
    return _run_and_emit(spec, args, out)


def cmd_se(args) -> int:
    values = parse_config_text(args.config.read_text()) if args.config is not None else {}
    cfg = se_config_from_values(values, args.scale, args.seed)
    trace = run_state_evolution(cfg)
    if args.out is None:
        sys.stdout.write("iteration,e,vartheta\n")
        for i, (e, v) in enumerate(zip(trace.e, trace.vartheta), start=1):
            sys.stdout.write(f"{i},{e!r},{v!r}\n")
    else:
        write_trace_csv(trace, args.out)
    print(f"SE: {len(trace.e) - 1} iterations, converged={trace.converged}, "
          f"MSE={trace.final_mse_db:.2f} dB", file=sys.stderr)
    return EXIT_OK


def cmd_adaptive(args) -> int:
    cfg = _system_config(args)
    G0 = args.G0 or initial_overhead(cfg.Ka, cfg.K, cfg.M, cfg.mean_Sa)
    G_max = args.G_max or max(2 * cfg.G, G0)
    spec = ExperimentSpec(scheme="scheme4", n_trials=args.trials, base=cfg.replace(G=G0), G0=G0, G_max=G_max)
    table = run_trials(spec, threads=args.threads, progress=_progress())
    hist = table.consumed_g_histogram("scheme4")
    n = sum(hist.values())
    lines = ["consumed_g,count,fraction"] + [f"{g},{c},{c / n!r}" for g, c in hist.items()]
    _write_text(args.out, "\n".join(lines) + "\n")
    if args.out is not None:
        Path(str(args.out) + ".json").write_text(json.dumps(
            {"config": table.config, "trials": table.trials}, indent=1, default=json_default))
    row = table.rows[0]
    print(f"G0={G0} G_max={G_max}: mean consumed G={row.consumed_g_mean:.2f}  Pe={row.pe_mean:.4g}  "
          f"MSE={row.mse_db:.2f} dB  excluded={row.excluded}", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _system_config(args)
    schemes = tuple(s.strip() for s in args.schemes.split(",") if s.strip())
    unknown = [s for s in schemes if s not in SCHEMES]
    if unknown:
        raise UsageError(f"unknown schemes {unknown}; choose from {', '.join(SCHEMES)}")
    spec = ExperimentSpec(scheme=schemes, sweep=[("G", [cfg.G])], n_trials=args.trials, base=cfg)
    return _run_and_emit(spec, args, args.out)


COMMANDS = {"simulate": cmd_simulate, "sweep": cmd_sweep, "se": cmd_se,
            "adaptive": cmd_adaptive, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (OSError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
