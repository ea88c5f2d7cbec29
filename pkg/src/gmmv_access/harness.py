"""Seeded Monte Carlo experiments: per-trial scheme runs, metrics, sweeps and result files.

Every trial draws one channel realisation and one pilot/noise stream; all schemes of a
run see the same realisation, so side-by-side comparisons are paired.  Trial seeds are
derived from ``(base_seed, point index, trial index)`` only, so aggregates do not depend
on the number of worker processes or on completion order.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .amp import AmpConfig, AmpDivergenceError, run_gmmv_amp
from .baselines import oracle_ls, somp
from .detect import DetectorConfig, bi_ad, cg_ad, detection_error_probability
from .sysmodel import (
    ChannelRealization,
    InvalidStateError,
    ObservationSource,
    SystemConfig,
    angular_sparsity_level,
    config_from_mapping,
    generate_channels,
    make_angular_transform,
    parse_config_text,
    to_angular,
    to_spatial,
)
from .turbo import AccessResult, AdaptiveConfig, TurboConfig, initial_overhead, run_adaptive, run_turbo

__all__ = [
    "SCHEMES",
    "SWEEPABLE",
    "CSV_HEADER",
    "ExperimentSpec",
    "MetricRecord",
    "ResultRow",
    "ResultTable",
    "compute_metrics",
    "trial_seeds",
    "run_trial",
    "run_trials",
    "json_default",
    "results_csv",
    "emit_results",
    "read_results",
    "parse_values",
    "load_experiment_spec",
]

BASE_SCHEMES = ("scheme1", "scheme2", "scheme3", "scheme4", "somp", "oracle_ls")
# detector variants for the two single-AMP schemes
SCHEMES = BASE_SCHEMES + ("scheme1-cg", "scheme2-bi")
SWEEPABLE = ("G", "M", "Ptilde", "Ka", "snr_db")
CSV_HEADER = ["scheme", "sweep_param", "sweep_value", "n_trials", "pe_mean", "mse_mean", "mse_db",
              "success_rate", "consumed_g_mean", "excluded"]
# algorithm failures that exclude a trial instead of aborting the run
EXCLUDED_ERRORS = (AmpDivergenceError, np.linalg.LinAlgError, InvalidStateError, FloatingPointError)


@dataclass
class ExperimentSpec:
    scheme: str | tuple[str, ...]
    sweep: list[tuple[str, list]] = field(default_factory=list)
    n_trials: int = 1
    base: SystemConfig = field(default_factory=SystemConfig)
    output: str | None = None
    # scheme 4 settings; G0 = None uses the expected-sparsity rule
    G0: int | None = None
    G_max: int | None = None
    T_tur: int = 10

    def __post_init__(self):
        for s in self.schemes:
            if s not in SCHEMES:
                raise ValueError(f"unknown scheme {s!r}; choose from {', '.join(SCHEMES)}")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        names = set()
        for name, values in self.sweep:
            if name not in SWEEPABLE:
                raise ValueError(f"cannot sweep {name!r}; sweepable: {', '.join(SWEEPABLE)}")
            if name in names:
                raise ValueError(f"{name!r} swept twice")
            if len(values) == 0:
                raise ValueError(f"empty value list for {name!r}")
            names.add(name)
        # fail early on sweep points that give an invalid configuration
        self.point_configs()

    @property
    def schemes(self) -> tuple[str, ...]:
        return (self.scheme,) if isinstance(self.scheme, str) else tuple(self.scheme)

    @property
    def sweep_param(self) -> str:
        return "+".join(name for name, _ in self.sweep) if self.sweep else "none"

    def points(self) -> list[tuple]:
        if not self.sweep:
            return [()]
        return list(itertools.product(*[values for _, values in self.sweep]))

    def point_label(self, point: tuple) -> str:
        return ";".join(_fmt_value(v) for v in point) if point else ""

    def point_configs(self) -> list[SystemConfig]:
        names = [name for name, _ in self.sweep]
        return [self.base.replace(**dict(zip(names, point))) for point in self.points()]

    def scaled(self, factor: float) -> "ExperimentSpec":
        """Shrink K, Ka and G (including swept Ka and G values) by ``factor``."""
        base = self.base.scaled(factor)
        sweep = []
        for name, values in self.sweep:
            if name in ("G", "Ka"):
                values = list(dict.fromkeys(max(1, round(v * factor)) for v in values))
            sweep.append((name, values))
        G0 = None if self.G0 is None else max(1, round(self.G0 * factor))
        G_max = None if self.G_max is None else max(1, round(self.G_max * factor))
        return dataclasses.replace(self, base=base, sweep=sweep, G0=G0, G_max=G_max)

    def to_dict(self) -> dict:
        return {"scheme": list(self.schemes), "sweep": [[n, list(v)] for n, v in self.sweep],
                "n_trials": self.n_trials, "base": dataclasses.asdict(self.base),
                "output": self.output, "G0": self.G0, "G_max": self.G_max, "T_tur": self.T_tur}


@dataclass
class MetricRecord:
    pe: float
    mse: float
    success: bool
    consumed_G: int
    wall_time_ms: float = 0.0

    @property
    def mse_db(self) -> float:
        return 10.0 * math.log10(self.mse) if self.mse > 0 else -math.inf


@dataclass
class ResultRow:
    scheme: str
    sweep_param: str
    sweep_value: str
    n_trials: int
    pe_mean: float
    mse_mean: float
    mse_db: float
    success_rate: float
    consumed_g_mean: float
    excluded: int


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)
    trials: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def row(self, scheme: str, sweep_value) -> ResultRow:
        label = sweep_value if isinstance(sweep_value, str) else _fmt_value(sweep_value)
        for r in self.rows:
            if r.scheme == scheme and r.sweep_value == label:
                return r
        raise KeyError((scheme, label))

    def records(self, scheme: str | None = None, sweep_value=None) -> list[dict]:
        label = None if sweep_value is None else (
            sweep_value if isinstance(sweep_value, str) else _fmt_value(sweep_value))
        return [t for t in self.trials
                if (scheme is None or t["scheme"] == scheme)
                and (label is None or t["sweep_value"] == label)]

    def consumed_g_histogram(self, scheme: str, sweep_value=None) -> dict[int, int]:
        hist: dict[int, int] = {}
        for t in self.records(scheme, sweep_value):
            if not t["excluded"]:
                hist[t["consumed_G"]] = hist.get(t["consumed_G"], 0) + 1
        return dict(sorted(hist.items()))


def _fmt_value(v) -> str:
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return str(v)


# ---------------------------------------------------------------------------
# metrics

def compute_metrics(truth: ChannelRealization, result) -> MetricRecord:
    """Detection error probability and per-entry MSE of one recovery.

    ``result`` is an :class:`AccessResult` or a dense channel estimate ``(Pt, K, M)``
    whose nonzero rows are taken as the detected users.
    """
    X = truth.X
    if isinstance(result, AccessResult):
        Xhat = result.dense()
        alpha_hat = result.alpha_hat
        consumed = int(result.consumed_G)
    else:
        Xhat = np.asarray(result)
        alpha_hat = np.any(Xhat != 0, axis=(0, 2)).astype(np.int8)
        consumed = 0
    if Xhat.shape != X.shape:
        raise ValueError(f"estimate shape {Xhat.shape} does not match truth {X.shape}")
    Pt, K, M = X.shape
    pe = detection_error_probability(alpha_hat, truth.activity)
    diff = Xhat - X
    mse = float(np.sum(diff.real ** 2 + diff.imag ** 2) / (K * M * Pt))
    return MetricRecord(pe=pe, mse=mse, success=pe == 0.0, consumed_G=consumed)


# ---------------------------------------------------------------------------
# seeding

def trial_seeds(base_seed: int, n_points: int, n_trials: int) -> dict[tuple[int, int], np.random.SeedSequence]:
    """One independent seed sequence per (point, trial), checked for collisions."""
    seeds = {}
    seen: dict[tuple, tuple[int, int]] = {}
    for p in range(n_points):
        for t in range(n_trials):
            ss = np.random.SeedSequence(base_seed, spawn_key=(p, t))
            state = tuple(ss.generate_state(4).tolist())
            if state in seen:
                raise RuntimeError(f"seed collision between {seen[state]} and {(p, t)}")
            seen[state] = (p, t)
            seeds[(p, t)] = ss
    return seeds


# ---------------------------------------------------------------------------
# single trial

def _restrict(xhat: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    out = np.array(xhat, copy=True)
    out[:, alpha == 0] = 0
    return out


def _scheme_result(scheme: str, cfg: SystemConfig, channel: ChannelRealization,
                   source: ObservationSource, A_R: np.ndarray, algo_seed: np.random.SeedSequence,
                   cache: dict, opts: dict) -> tuple[AccessResult, dict]:
    Y, S = source.observe(cfg.G)
    det = DetectorConfig()
    K = cfg.K
    extra: dict = {}
    if scheme in ("scheme1", "scheme1-cg"):
        if "amp_spatial" not in cache:
            cache["amp_spatial"] = run_gmmv_amp(Y, S, AmpConfig(refine_mode="spatial"))
        res = cache["amp_spatial"]
        alpha = bi_ad(res.pi, "spatial", det).alpha_hat if scheme == "scheme1" else cg_ad(res.xhat, det).alpha_hat
        Xhat = _restrict(res.xhat, alpha)
        extra["amp_iters"] = res.n_iter
    elif scheme in ("scheme2", "scheme2-bi"):
        if "amp_angular" not in cache:
            cache["amp_angular"] = run_gmmv_amp(to_angular(Y, A_R), S, AmpConfig(refine_mode="angular"))
        res = cache["amp_angular"]
        X_full = to_spatial(res.xhat, A_R)
        alpha = cg_ad(X_full, det).alpha_hat if scheme == "scheme2" else bi_ad(res.pi, "angular", det).alpha_hat
        Xhat = _restrict(X_full, alpha)
        extra["amp_iters"] = res.n_iter
    elif scheme == "scheme3":
        out = run_turbo(Y, S, A_R, TurboConfig(T_tur=opts["T_tur"]), np.random.default_rng(algo_seed))
        extra["turbo"] = out.diagnostics
        return out, extra
    elif scheme == "scheme4":
        G0 = opts["G0"] or initial_overhead(cfg.Ka, cfg.K, cfg.M, cfg.mean_Sa)
        G_max = max(opts["G_max"] or 2 * cfg.G, G0)
        acfg = AdaptiveConfig(G0=G0, G_max=G_max, turbo=TurboConfig(T_tur=opts["T_tur"]))
        out = run_adaptive(source, A_R, acfg, np.random.default_rng(algo_seed))
        extra["G0"] = G0
        extra["G_max"] = G_max
        extra["converged"] = out.converged
        extra["history"] = [d for d in out.diagnostics if "G" in d]
        return out, extra
    elif scheme == "somp":
        res = somp(Y, S, n_support=cfg.Ka)
        Xhat = res.xhat
        alpha = np.zeros(K, dtype=np.int8)
        alpha[res.support] = 1
    elif scheme == "oracle_ls":
        Xhat = oracle_ls(Y, S, np.flatnonzero(channel.activity))
        alpha = channel.activity.astype(np.int8)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    aus = np.flatnonzero(alpha)
    return AccessResult(aus_hat=aus, channels=Xhat[:, aus], K=K, consumed_G=cfg.G), extra


def run_trial(cfg: SystemConfig, schemes, seed_seq: np.random.SeedSequence, opts: dict | None = None) -> list[dict]:
    """Run every scheme on one shared realisation; returns one record per scheme."""
    opts = {"G0": None, "G_max": None, "T_tur": 10, **(opts or {})}
    channel_seed, source_seed, algo_seed = seed_seq.spawn(3)
    channel = generate_channels(cfg, np.random.default_rng(channel_seed))
    A_R = make_angular_transform(cfg.M)
    cache: dict = {}
    records = []
    for scheme in schemes:
        # a fresh source per scheme so scheme 4 cannot leak extra slots into the others
        source = ObservationSource(channel, cfg, source_seed, G_ref=cfg.G)
        t0 = time.perf_counter()
        rec = {"scheme": scheme, "excluded": False, "error": None,
               "angular_sparsity": angular_sparsity_level(channel.W),
               "mean_Sa": float(np.mean(channel.Sa[channel.activity == 1])) if channel.activity.any() else 0.0}
        try:
            result, extra = _scheme_result(scheme, cfg, channel, source, A_R, algo_seed, cache, opts)
            m = compute_metrics(channel, result)
            if not math.isfinite(m.mse):
                raise FloatingPointError("non-finite channel estimate")
            rec.update(pe=m.pe, mse=m.mse, success=m.success, consumed_G=m.consumed_G,
                       n_detected=int(result.aus_hat.size), **extra)
        except EXCLUDED_ERRORS as exc:
            rec.update(excluded=True, error=f"{type(exc).__name__}: {exc}", pe=None, mse=None,
                       success=None, consumed_G=None, n_detected=None)
        rec["wall_time_ms"] = 1e3 * (time.perf_counter() - t0)
        records.append(rec)
    return records


def _run_job(job):
    cfg, schemes, seed_seq, opts, key = job
    with threadpool_limits(limits=1):
        return key, run_trial(cfg, schemes, seed_seq, opts)


# ---------------------------------------------------------------------------
# sweeps

def run_trials(spec: ExperimentSpec, base_seed: int | None = None, threads: int = 1,
               progress=None) -> ResultTable:
    """Run ``spec.n_trials`` seeded trials at every sweep point for all schemes.

    ``threads > 1`` distributes trials over worker processes; BLAS is limited to one
    thread per trial either way, so the table is bit-identical for any ``threads``.
    ``progress``, if given, is called with ``(done, total)`` after each trial.
    """
    base_seed = spec.base.seed if base_seed is None else base_seed
    configs = spec.point_configs()
    points = spec.points()
    seeds = trial_seeds(base_seed, len(points), spec.n_trials)
    opts = {"G0": spec.G0, "G_max": spec.G_max, "T_tur": spec.T_tur}
    jobs = [(configs[p], spec.schemes, seeds[(p, t)], opts, (p, t))
            for p in range(len(points)) for t in range(spec.n_trials)]

    results: dict[tuple[int, int], list[dict]] = {}
    if threads <= 1 or len(jobs) <= 1:
        for i, job in enumerate(jobs):
            key, recs = _run_job(job)
            results[key] = recs
            if progress:
                progress(i + 1, len(jobs))
    else:
        with ProcessPoolExecutor(max_workers=threads, mp_context=get_context("spawn")) as pool:
            for i, (key, recs) in enumerate(pool.map(_run_job, jobs)):
                results[key] = recs
                if progress:
                    progress(i + 1, len(jobs))

    table = ResultTable(config={"base_seed": base_seed, "spec": spec.to_dict()})
    # ordered reduction: scheme, then sweep point, then trial
    for scheme_idx, scheme in enumerate(spec.schemes):
        for p, point in enumerate(points):
            label = spec.point_label(point)
            recs = []
            for t in range(spec.n_trials):
                rec = dict(results[(p, t)][scheme_idx])
                rec.update(sweep_value=label, point=p, trial=t)
                recs.append(rec)
            table.trials.extend(recs)
            table.rows.append(_aggregate(scheme, spec.sweep_param, label, recs))
    return table


def _aggregate(scheme: str, param: str, label: str, recs: list[dict]) -> ResultRow:
    ok = [r for r in recs if not r["excluded"]]
    n_ok = len(ok)
    if n_ok:
        pe = math.fsum(r["pe"] for r in ok) / n_ok
        mse = math.fsum(r["mse"] for r in ok) / n_ok
        succ = sum(bool(r["success"]) for r in ok) / n_ok
        cg = math.fsum(r["consumed_G"] for r in ok) / n_ok
    else:
        pe = mse = succ = cg = math.nan
    mse_db = 10.0 * math.log10(mse) if mse > 0 else (-math.inf if mse == 0 else math.nan)
    return ResultRow(scheme=scheme, sweep_param=param, sweep_value=label, n_trials=len(recs),
                     pe_mean=pe, mse_mean=mse, mse_db=mse_db, success_rate=succ,
                     consumed_g_mean=cg, excluded=len(recs) - n_ok)


# ---------------------------------------------------------------------------
# result files

def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json") if path.suffix != ".json" else path.with_suffix(".meta.json")


def json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def results_csv(table: ResultTable) -> str:
    """The aggregate table as CSV text (floats written with full precision)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in table.rows:
        w.writerow([r.scheme, r.sweep_param, r.sweep_value, r.n_trials, repr(r.pe_mean),
                    repr(r.mse_mean), repr(r.mse_db), repr(r.success_rate),
                    repr(r.consumed_g_mean), r.excluded])
    return buf.getvalue()


def emit_results(table: ResultTable, path: str | Path) -> Path:
    """Write the aggregate CSV and a JSON sidecar (``<path>.json``) with the run config
    and per-trial records.  Returns the sidecar path."""
    path = Path(path)
    side = _sidecar(path)
    try:
        path.write_text(results_csv(table))
        side.write_text(json.dumps({"config": table.config, "trials": table.trials},
                                   default=json_default, indent=1))
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return side


def read_results(path: str | Path) -> ResultTable:
    """Parse a CSV written by :func:`emit_results` (and its sidecar, if present)."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != CSV_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            rows = [ResultRow(scheme=s, sweep_param=sp, sweep_value=sv, n_trials=int(n),
                              pe_mean=float(pe), mse_mean=float(mse), mse_db=float(db),
                              success_rate=float(sr), consumed_g_mean=float(cg), excluded=int(ex))
                    for s, sp, sv, n, pe, mse, db, sr, cg, ex in reader]
        side = _sidecar(path)
        meta = json.loads(side.read_text()) if side.exists() else {}
    except OSError as exc:
        raise OSError(f"cannot read results from {path}: {exc}") from exc
    return ResultTable(rows=rows, trials=meta.get("trials", []), config=meta.get("config", {}))


# ---------------------------------------------------------------------------
# experiment spec files

def parse_values(text: str, kind=float) -> list:
    """Parse ``"30 35 40"``, ``"30, 35"``, ``"30..60"`` or ``"30..60:5"`` (inclusive)."""
    out = []
    for tok in text.replace(",", " ").split():
        if ".." in tok:
            rng, _, step = tok.partition(":")
            lo, hi = rng.split("..")
            lo, hi, step = kind(lo), kind(hi), kind(step) if step else kind(1)
            if step <= 0:
                raise ValueError(f"range step must be positive in {tok!r}")
            n = int(math.floor((hi - lo) / step + 1e-9)) + 1
            out.extend(kind(lo + i * step) for i in range(max(n, 0)))
        else:
            out.append(kind(tok))
    if not out:
        raise ValueError(f"no values in {text!r}")
    return out


_SPEC_KEYS = {"scheme", "sweep", "n_trials", "output", "G0", "G_max", "T_tur"}


def load_experiment_spec(path: str | Path, seed: int | None = None) -> ExperimentSpec:
    """Read an experiment file: SystemConfig keys plus ``scheme`` (comma separated),
    ``sweep`` (``name: values; name: values``), ``n_trials``, ``output``, ``G0``,
    ``G_max`` and ``T_tur``."""
    values = parse_config_text(Path(path).read_text())
    unknown = set(values) - _SPEC_KEYS - {f.name for f in dataclasses.fields(SystemConfig)}
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    base = config_from_mapping({k: v for k, v in values.items() if k not in _SPEC_KEYS})
    if seed is not None:
        base = base.replace(seed=seed)
    sweep = []
    for part in filter(None, (p.strip() for p in values.get("sweep", "").split(";"))):
        name, _, vals = part.partition(":")
        name = name.strip()
        kind = float if name == "snr_db" else int
        sweep.append((name, parse_values(vals, kind)))
    schemes = tuple(s.strip() for s in values.get("scheme", "scheme1").split(",") if s.strip())
    opt = lambda k: int(values[k]) if k in values else None  # noqa: E731
    return ExperimentSpec(scheme=schemes, sweep=sweep, n_trials=int(values.get("n_trials", 1)), base=base,
                          output=values.get("output"), G0=opt("G0"), G_max=opt("G_max"),
                          T_tur=int(values.get("T_tur", 10)))
