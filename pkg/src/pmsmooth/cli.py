"""Command line experiment runner.

Verbs:

    pmsmooth simulate  write a synthetic dataset for a preset
    pmsmooth smooth    run smoothers over a dataset, one row per replicate
    pmsmooth rml       recursive maximum likelihood from several starts
    pmsmooth bench     wall-time comparison of backward IS and accept-reject

Settings come from an optional YAML file (``--config``) and are overridden by
flags. Every output CSV is written next to a ``*.manifest.json`` holding the
seed, the resolved configuration, its hash and the package version.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import yaml

from pmsmooth import __version__
from pmsmooth.errors import ConfigError, DimensionMismatch, NumericalError
from pmsmooth.functionals import all_states, cumulative_state, score_functional, state_at
from pmsmooth.models.presets import build_preset
from pmsmooth.rml import StepSizeSchedule, run_rml
from pmsmooth.smoother import Method, SmootherConfig, default_n_backward, smooth_online

log = logging.getLogger("pmsmooth")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
FUNCTIONALS = ("state_at", "cumulative_state", "all_states", "score")


@dataclass
class ExperimentConfig:
    """Resolved settings of one CLI invocation."""

    preset: str = "sine"
    overrides: dict = field(default_factory=dict)
    n: Optional[int] = None
    seed: int = 0
    out: str = "out"
    dataset: Optional[str] = None
    replicates: int = 1
    methods: list = field(default_factory=lambda: ["BackwardIS"])
    particles: Optional[int] = None
    backward: Optional[int] = None
    backward_sweep: list = field(default_factory=list)
    functional: str = "state_at"
    k_star: int = 0
    jobs: int = 1
    rml: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.replicates) < 1:
            raise ConfigError("replicates must be at least 1")
        if self.functional not in FUNCTIONALS:
            raise ConfigError(f"functional must be one of {FUNCTIONALS}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.methods = [Method(m).value for m in self.methods]
        if int(self.jobs) < 1:
            raise ConfigError("jobs must be at least 1")

    def reproducible_fields(self) -> dict:
        """Settings that determine the output (everything but the output directory)."""
        data = asdict(self)
        data.pop("out")
        return data

    def digest(self) -> str:
        blob = json.dumps(self.reproducible_fields(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    return data


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    data = load_config(args.config)
    flags = {
        "preset": args.preset,
        "seed": args.seed,
        "out": args.out,
        "dataset": getattr(args, "dataset", None),
        "replicates": args.replicates,
        "particles": args.particles,
        "backward": args.backward,
        "n": args.n,
        "functional": getattr(args, "functional", None),
        "k_star": getattr(args, "k_star", None),
        "jobs": args.jobs,
    }
    for key, val in flags.items():
        if val is not None:
            data[key] = val
    if args.method:
        data["methods"] = list(args.method)
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return ExperimentConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# file helpers


def write_manifest(csv_path: str, cfg: ExperimentConfig, verb: str, extra: Optional[dict] = None) -> str:
    manifest = {
        "verb": verb,
        "version": __version__,
        "seed": int(cfg.seed),
        "preset": cfg.preset,
        "config_sha256": cfg.digest(),
        "config": cfg.reproducible_fields(),
    }
    manifest.update(extra or {})
    path = os.path.splitext(csv_path)[0] + ".manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in rows:
            wr.writerow([_fmt(v) for v in row])


def write_dataset(path: str, times, y, x=None) -> None:
    header = ["time"] + [f"y_{i + 1}" for i in range(y.shape[1])]
    cols = [times[:, None], y]
    if x is not None:
        header += [f"x_{i + 1}" for i in range(x.shape[1])]
        cols.append(x)
    write_rows(path, header, np.hstack(cols).tolist())


def read_dataset(path: str):
    """Return ``(times, Y, X or None)`` from a dataset CSV."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        data = np.array([[float(v) for v in row] for row in rd if row], dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ConfigError(f"{path} holds no data rows")
    ycols = [i for i, h in enumerate(header) if h.startswith("y_")]
    xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
    if header[0] != "time" or not ycols:
        raise ConfigError(f"{path} must have columns time, y_1, ...")
    return data[:, 0], data[:, ycols], (data[:, xcols] if xcols else None)


def _load_or_simulate(cfg: ExperimentConfig, preset):
    if cfg.dataset:
        times, y, x = read_dataset(cfg.dataset)
    else:
        n = preset.n if cfg.n is None else int(cfg.n)
        times, x, y = preset.simulate(n, np.random.default_rng(np.random.SeedSequence(cfg.seed)))
    model = preset.model(y)
    if y.shape[1] != model.obs_dim:
        raise DimensionMismatch(f"dataset has {y.shape[1]} observation columns, model expects {model.obs_dim}")
    if x is not None and x.shape[1] != model.state_dim:
        raise DimensionMismatch(f"dataset has {x.shape[1]} state columns, model expects {model.state_dim}")
    return times, y, x


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: ExperimentConfig) -> str:
    """Write ``dataset.csv`` (time, y_*, x_*) and its manifest; return the CSV path."""
    preset = build_preset(cfg.preset, {**cfg.overrides})
    n = preset.n if cfg.n is None else int(cfg.n)
    times, x, y = preset.simulate(n, np.random.default_rng(np.random.SeedSequence(cfg.seed)))
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "dataset.csv")
    write_dataset(path, times, y, x)
    write_manifest(path, cfg, "simulate", {"rows": int(len(times))})
    return path


# ---------------------------------------------------------------------------
# smooth


def _functional(cfg: ExperimentConfig, model, y, rng):
    n = y.shape[0] - 1
    if cfg.functional == "state_at":
        if not 0 <= cfg.k_star <= n:
            raise ConfigError(f"k_star must lie in [0, {n}]")
        return state_at(cfg.k_star, model.state_dim)
    if cfg.functional == "cumulative_state":
        return cumulative_state(model.state_dim)
    if cfg.functional == "all_states":
        return all_states(n, model.state_dim)
    return score_functional(model, y, rng)


def _truth(cfg: ExperimentConfig, x):
    if x is None or cfg.functional == "score":
        return None
    if cfg.functional == "state_at":
        return x[cfg.k_star]
    if cfg.functional == "cumulative_state":
        return x.sum(axis=0)
    return x.ravel()


def _wald_budget(preset) -> int:
    return int(preset.smoother.get("wald_max_rounds", 1000))


def _smoother_settings(cfg: ExperimentConfig, preset):
    n_part = int(cfg.particles or preset.smoother.get("particles", 100))
    k_default = cfg.backward or preset.smoother.get("backward") or default_n_backward(n_part)
    return n_part, int(k_default)


def _smooth_job(job):
    """One replicate of one method; top level so process pools can pickle it."""
    cfg, rep, method, n_part, kb = job
    preset = build_preset(cfg.preset, cfg.overrides)
    times, y, x = _load_or_simulate(cfg, preset)
    model = preset.model(y)
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(1, rep))
    func = _functional(cfg, model, y, np.random.default_rng(ss.spawn(1)[0]))
    scfg = SmootherConfig(n_part, kb, Method(method), wald_max_rounds=_wald_budget(preset))
    t0 = time.perf_counter_ns()
    res = smooth_online(model, func, y, scfg, ss)
    wall = time.perf_counter_ns() - t0
    est = np.asarray(res.estimate, dtype=float)
    truth = _truth(cfg, x)
    mse = float(np.mean((est - truth) ** 2)) if truth is not None else float("nan")
    ess = float(np.mean([t.ess for t in res.trace]))
    wr_f = float(np.mean([t.wald_rounds_filter for t in res.trace]))
    wr_b = float(np.mean([t.mean_wald_rounds_backward for t in res.trace]))
    return [rep, method, n_part, kb, *est.tolist(), mse, wall, ess, wr_f, wr_b]


def _run_jobs(fn, jobs, n_workers: int):
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, jobs))


def cmd_smooth(cfg: ExperimentConfig) -> tuple[str, str]:
    """Run every (method, backward size, replicate) and write results and summary CSVs.

    ``results.csv`` has one row per replicate; ``summary.csv`` one row per
    (method, backward size) with the mean, standard error and mean MSE.
    """
    preset = build_preset(cfg.preset, cfg.overrides)
    times, y, x = _load_or_simulate(cfg, preset)
    n_part, k_default = _smoother_settings(cfg, preset)
    jobs = []
    for method in cfg.methods:
        sweep = cfg.backward_sweep if (cfg.backward_sweep and method != Method.PATH_SPACE.value) else [k_default]
        for kb in sweep:
            for rep in range(int(cfg.replicates)):
                jobs.append((cfg, rep, method, n_part, int(kb)))
    rows = _run_jobs(_smooth_job, jobs, int(cfg.jobs))
    dim = len(rows[0]) - 9
    header = ["replicate", "method", "particles", "backward"]
    header += [f"estimate_{i}" for i in range(dim)]
    header += ["mse", "wall_time_ns", "mean_ess", "mean_wald_rounds_filter", "mean_wald_rounds_backward"]
    os.makedirs(cfg.out, exist_ok=True)
    res_path = os.path.join(cfg.out, "results.csv")
    write_rows(res_path, header, rows)
    write_manifest(res_path, cfg, "smooth")

    summary = []
    groups: dict = {}
    for row in rows:
        groups.setdefault((row[1], row[3]), []).append(row)
    for (method, kb), grp in groups.items():
        est = np.array([r[4 : 4 + dim] for r in grp], dtype=float)
        mse = np.array([r[4 + dim] for r in grp], dtype=float)
        wall = np.array([r[5 + dim] for r in grp], dtype=float)
        r = len(grp)
        se = est.std(axis=0, ddof=1) / np.sqrt(r) if r > 1 else np.full(dim, np.nan)
        mse_se = mse.std(ddof=1) / np.sqrt(r) if r > 1 else float("nan")
        summary.append(
            [method, n_part, kb, r, *est.mean(axis=0).tolist(), *se.tolist(), mse.mean(), mse_se, float(np.median(wall))]
        )
    sheader = ["method", "particles", "backward", "replicates"]
    sheader += [f"mean_{i}" for i in range(dim)] + [f"se_{i}" for i in range(dim)]
    sheader += ["mse", "mse_se", "median_wall_time_ns"]
    sum_path = os.path.join(cfg.out, "summary.csv")
    write_rows(sum_path, sheader, summary)
    write_manifest(sum_path, cfg, "smooth")
    return res_path, sum_path


# ---------------------------------------------------------------------------
# rml


def _rml_job(job):
    cfg, start_id, theta0, kappa, n_part, kb = job
    preset = build_preset(cfg.preset, cfg.overrides)
    if preset.family is None:
        raise ConfigError(f"preset {cfg.preset!r} has no parameter family for recursive MLE")
    times, y, x = _load_or_simulate(cfg, preset)
    r = {**preset.rml, **cfg.rml}
    sched = StepSizeSchedule(float(r.get("gamma0", 0.5)), int(r.get("burn_in", 300)), float(kappa))
    state = run_rml(
        preset.family(y),
        y,
        theta0,
        sched,
        SmootherConfig(n_part, kb, wald_max_rounds=_wald_budget(preset)),
        np.random.SeedSequence(cfg.seed, spawn_key=(2, start_id)),
    )
    return [
        [start_id, *np.ravel(theta0).tolist(), kappa, k, *th.tolist(), *pa.tolist(), g, nrm, ns]
        for k, th, pa, g, nrm, ns in state.log
    ]


def cmd_rml(cfg: ExperimentConfig) -> str:
    """Run recursive MLE from several starts (and step-size exponents); write ``rml.csv``.

    ``rml`` settings: ``starts`` (explicit list of initial parameters) or
    ``n_starts`` with ``start_low``/``start_high`` for uniform draws,
    ``kappas`` (list), ``gamma0`` and ``burn_in``.
    """
    preset = build_preset(cfg.preset, cfg.overrides)
    r = {**preset.rml, **cfg.rml}
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3,)))
    if "starts" in r:
        starts = [np.atleast_1d(np.asarray(s, dtype=float)) for s in r["starts"]]
    else:
        lo, hi = float(r.get("start_low", 0.0)), float(r.get("start_high", 2 * np.pi))
        q = int(r.get("param_dim", 1))
        starts = [rng.uniform(lo, hi, size=q) for _ in range(int(r.get("n_starts", 1)))]
    kappas = [float(k) for k in r.get("kappas", [r.get("kappa", 0.6)])]
    n_part, kb = _smoother_settings(cfg, preset)
    jobs = [
        (cfg, i * len(kappas) + j, th, kap, n_part, kb)
        for i, th in enumerate(starts)
        for j, kap in enumerate(kappas)
    ]
    chunks = _run_jobs(_rml_job, jobs, int(cfg.jobs))
    q = starts[0].size
    header = ["run", *[f"theta0_{i}" for i in range(q)], "kappa", "k"]
    header += [f"theta_{i}" for i in range(q)] + [f"polyak_{i}" for i in range(q)]
    header += ["gamma", "score_norm", "wall_time_ns"]
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "rml.csv")
    write_rows(path, header, [row for chunk in chunks for row in chunk])
    write_manifest(path, cfg, "rml", {"runs": len(jobs)})
    return path


# ---------------------------------------------------------------------------
# bench


def cmd_bench(cfg: ExperimentConfig) -> str:
    """Time full smoothing runs per method and particle count; write ``bench.csv``.

    ``bench`` settings: ``particles`` (list of N), ``repeats``, and
    ``backward`` as a mapping from method to either an integer or ``"N/10"``.
    Defaults: N/10 backward draws for BackwardIS and 2 for BackwardAR.
    """
    preset = build_preset(cfg.preset, cfg.overrides)
    times, y, x = _load_or_simulate(cfg, preset)
    model = preset.model(y)
    b = cfg.bench
    n_list = [int(v) for v in b.get("particles", [cfg.particles or 100])]
    repeats = int(b.get("repeats", cfg.replicates))
    kb_rule = {Method.BACKWARD_IS.value: "N/10", Method.BACKWARD_AR.value: 2, **b.get("backward", {})}
    if cfg.backward is not None:
        kb_rule = {m: cfg.backward for m in kb_rule}
    func = state_at(0, model.state_dim)
    rows = []
    for n_part in n_list:
        for method in cfg.methods:
            rule = kb_rule.get(method, 1)
            kb = max(1, n_part // 10) if rule == "N/10" else int(rule)
            scfg = SmootherConfig(n_part, kb, Method(method), wald_max_rounds=_wald_budget(preset))
            walls = []
            for rep in range(repeats):
                ss = np.random.SeedSequence(cfg.seed, spawn_key=(4, n_part, rep))
                t0 = time.perf_counter_ns()
                smooth_online(model, func, y, scfg, ss)
                walls.append(time.perf_counter_ns() - t0)
            q25, med, q75 = np.percentile(walls, [25, 50, 75])
            rows.append([method, n_part, kb, repeats, med, q25, q75, q75 - q25])
            log.info("bench %s N=%d K=%d median %.3fs", method, n_part, kb, med / 1e9)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "bench.csv")
    header = ["method", "particles", "backward", "repeats", "median_ns", "q25_ns", "q75_ns", "iqr_ns"]
    write_rows(path, header, rows)
    write_manifest(path, cfg, "bench")
    return path


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmsmooth", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("simulate", "smooth", "rml", "bench"):
        s = sub.add_parser(verb)
        s.add_argument("--config", help="YAML file with experiment settings")
        s.add_argument("--preset", help="model preset name")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory")
        s.add_argument("--replicates", type=int)
        s.add_argument("--method", action="append", choices=[m.value for m in Method])
        s.add_argument("--particles", type=int)
        s.add_argument("--backward", type=int)
        s.add_argument("--n", type=int, help="number of transitions when simulating")
        s.add_argument("--jobs", type=int, help="worker processes for replicates")
        if verb in ("smooth", "rml", "bench"):
            s.add_argument("--dataset", help="dataset CSV written by `simulate`")
        if verb == "smooth":
            s.add_argument("--functional", choices=FUNCTIONALS)
            s.add_argument("--k-star", dest="k_star", type=int)
    return p


COMMANDS = {"simulate": cmd_simulate, "smooth": cmd_smooth, "rml": cmd_rml, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        out = COMMANDS[args.verb](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    for path in out if isinstance(out, tuple) else (out,):
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
