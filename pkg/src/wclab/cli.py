"""Command-line front end: JSON config in, CSV and JSON artifacts out.

Every subcommand writes ``config_echo.json`` (the config with all defaults
filled in), ``results.csv`` and ``summary.json`` into ``--out``. Exit codes:
0 on success, 1 when the config fails validation, 2 when the run itself
fails (divergence, a violated precondition, a non-symmetric operator).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import bounds, lab, risk, spectral
from .data import DataError, TeacherSpec, empirical_covariance, load_csv, synth_teacher
from .model import Activation, ShapeError, save_checkpoint
from .optimizer import DivergenceError, GDConfig, Schedule, initial_params, run_gd, step_sizes
from .spectral import NotSymmetricError

COMMANDS = ("train", "stability", "spectrum", "sweep", "bounds", "check")
REQUIRED = object()

SCHEMA = {
    "seed": 0,
    "data": {
        "source": "teacher",
        "train_csv": None,
        "test_csv": None,
        "label_column": -1,
        "has_header": False,
        "standardize": False,
        "M_star": 50,
        "d": 5,
        "mu": 0.25,
        "teacher_c": 0.5,
        "N_train": 200,
        "N_test": 1000,
        "label_noise": False,
        "activation": "sigmoid",
    },
    "model": {"M": 16, "c": 0.5, "train_second_layer": True, "activation": "sigmoid", "v_scale": 1.0},
    "gd": {
        "schedule": REQUIRED,
        "t_max": 1000,
        "early_stopping": False,
        "eval_every": 500,
        "patience": 5,
        "record_stride": 0,
    },
    "stability": {"k_resamples": None, "self_resample": False},
    "spectrum": {"method": "lanczos", "tol": 1e-10},
    "bounds": {"mode": "analytic", "radius": 1.0, "n_samples": 100, "alpha": None},
    "check": {"n_pairs": 1000, "radius": 1.0},
    "sweep": {f.name: f.default for f in fields(lab.SweepSpec)},
}
# sections each command reads; the rest are still validated and echoed
NEEDS_SCHEDULE = ("train", "stability", "spectrum", "bounds", "check")
SCHEDULE_KEYS = {"constant": ("kind", "eta"), "polylog": ("kind", "alpha", "horizon")}


class ConfigError(ValueError):
    """Config failed validation; ``key`` is the dotted path of the culprit."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


# ---------------------------------------------------------------- config

def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


def _merge(schema, given, prefix, command):
    if not isinstance(given, dict):
        raise ConfigError(prefix or "<root>", "expected a JSON object")
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}", "unknown key")
    out = {}
    for key, default in schema.items():
        path = f"{prefix}{key}"
        if isinstance(default, dict):
            out[key] = _merge(default, given.get(key, {}), path + ".", command)
        elif key in given:
            out[key] = given[key]
        elif default is REQUIRED:
            if key == "schedule" and command not in NEEDS_SCHEDULE:
                out[key] = None
                continue
            raise ConfigError(path, "required key is missing")
        else:
            out[key] = _jsonable(copy.deepcopy(default))
    return out


def _expect(cond, key, message):
    if not cond:
        raise ConfigError(key, message)


def _int(cfg, section, key, lo=None, allow_none=False):
    v = cfg[section][key]
    path = f"{section}.{key}"
    if allow_none and v is None:
        return None
    _expect(isinstance(v, int) and not isinstance(v, bool), path, f"expected an integer, got {v!r}")
    _expect(lo is None or v >= lo, path, f"must be >= {lo}")
    return v


def _num(cfg, section, key, allow_none=False):
    v = cfg[section][key]
    path = f"{section}.{key}"
    if allow_none and v is None:
        return None
    _expect(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v), path,
            f"expected a finite number, got {v!r}")
    return float(v)


def _bool(cfg, section, key):
    v = cfg[section][key]
    _expect(isinstance(v, bool), f"{section}.{key}", f"expected true or false, got {v!r}")
    return v


def _schedule(raw):
    _expect(isinstance(raw, dict), "gd.schedule", "expected an object with a 'kind'")
    kind = raw.get("kind")
    _expect(kind in SCHEDULE_KEYS, "gd.schedule.kind", f"must be one of {sorted(SCHEDULE_KEYS)}")
    extra = sorted(set(raw) - set(SCHEDULE_KEYS[kind]))
    _expect(not extra, f"gd.schedule.{extra[0]}" if extra else "", "unknown key")
    for k in SCHEDULE_KEYS[kind][1:]:
        _expect(k in raw, f"gd.schedule.{k}", "required key is missing")
    try:
        if kind == "constant":
            return Schedule.constant(raw["eta"])
        return Schedule.polylog(raw["alpha"], raw["horizon"])
    except (TypeError, ValueError) as exc:
        raise ConfigError("gd.schedule", str(exc)) from None


def validate(cfg: dict, command: str) -> dict:
    """Type and range checks; returns the built domain objects."""
    seed = cfg["seed"]
    _expect(isinstance(seed, int) and not isinstance(seed, bool) and seed >= 0, "seed", "expected an integer >= 0")
    d = cfg["data"]
    _expect(d["source"] in ("teacher", "csv"), "data.source", "must be 'teacher' or 'csv'")
    if d["source"] == "csv":
        _expect(isinstance(d["train_csv"], str), "data.train_csv", "a path is required for csv data")
        _expect(d["test_csv"] is None or isinstance(d["test_csv"], str), "data.test_csv", "expected a path or null")
        _int(cfg, "data", "label_column")
        _bool(cfg, "data", "has_header")
    for k in ("M_star", "d", "N_train", "N_test"):
        _int(cfg, "data", k, lo=1)
    _num(cfg, "data", "mu")
    _num(cfg, "data", "teacher_c")
    _bool(cfg, "data", "label_noise")
    _bool(cfg, "data", "standardize")
    for section in ("data", "model"):
        _expect(cfg[section]["activation"] in ("sigmoid", "tanh", "linear"), f"{section}.activation",
                "must be sigmoid, tanh or linear")
    m = cfg["model"]
    _int(cfg, "model", "M", lo=1)
    c = _num(cfg, "model", "c")
    _expect(0.5 <= c <= 1.0, "model.c", "must lie in [0.5, 1]")
    _bool(cfg, "model", "train_second_layer")
    _num(cfg, "model", "v_scale")

    g = cfg["gd"]
    schedule = _schedule(g["schedule"]) if g["schedule"] is not None else None
    _int(cfg, "gd", "t_max", lo=0)
    _bool(cfg, "gd", "early_stopping")
    _int(cfg, "gd", "eval_every", lo=1)
    _int(cfg, "gd", "patience", lo=1)
    _int(cfg, "gd", "record_stride", lo=0)

    _int(cfg, "stability", "k_resamples", lo=1, allow_none=True)
    _bool(cfg, "stability", "self_resample")
    _expect(cfg["spectrum"]["method"] in spectral.METHODS, "spectrum.method", f"must be one of {spectral.METHODS}")
    _expect(_num(cfg, "spectrum", "tol") > 0, "spectrum.tol", "must be positive")
    _expect(cfg["bounds"]["mode"] in ("analytic", "sampled"), "bounds.mode", "must be analytic or sampled")
    _expect(_num(cfg, "bounds", "radius") > 0, "bounds.radius", "must be positive")
    _int(cfg, "bounds", "n_samples", lo=1)
    alpha = _num(cfg, "bounds", "alpha", allow_none=True)
    _expect(alpha is None or alpha > 0, "bounds.alpha", "must be positive")
    _int(cfg, "check", "n_pairs", lo=1)
    _expect(_num(cfg, "check", "radius") > 0, "check.radius", "must be positive")

    s = cfg["sweep"]
    for k in ("c_values", "M_values"):
        _expect(isinstance(s[k], list) and s[k], f"sweep.{k}", "expected a non-empty list")
    try:
        sweep = lab.SweepSpec(**{**s, "c_values": tuple(s["c_values"]), "M_values": tuple(s["M_values"]),
                                 "seed": seed})
    except TypeError as exc:
        raise ConfigError("sweep", str(exc)) from None

    gd = None
    if schedule is not None:
        try:
            gd = GDConfig(schedule, g["t_max"], M=m["M"], c=c, train_second_layer=m["train_second_layer"],
                          seed=seed, v_scale=float(m["v_scale"]), early_stopping=g["early_stopping"],
                          eval_every=g["eval_every"], patience=g["patience"], record_stride=g["record_stride"])
        except ValueError as exc:
            raise ConfigError("gd", str(exc)) from None
    if command == "check":
        _expect(not m["train_second_layer"], "model.train_second_layer",
                "check certifies the global constants only for a fixed second layer")
        _expect(schedule.kind == "constant", "gd.schedule.kind", "check needs a constant step size")
    if command == "stability":
        _expect(gd.t_max >= 1, "gd.t_max", "stability needs at least one step")
    return {"gd": gd, "sweep": sweep, "activation": Activation(m["activation"])}


def load_config(path, command: str, seed_override=None) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    if isinstance(raw, dict) and "command" in raw:
        _expect(raw["command"] == command, "command", f"config is for {raw['command']!r}, not {command!r}")
        raw = {k: v for k, v in raw.items() if k != "command"}
    cfg = _merge(SCHEMA, raw, "", command)
    if seed_override is not None:
        cfg["seed"] = seed_override
    return cfg


# ---------------------------------------------------------------- data

def load_data(cfg: dict, base_dir: Path):
    """``(train, test)`` datasets; ``test`` is ``None`` for csv without a test file."""
    d = cfg["data"]
    if d["source"] == "csv":
        def read(p):
            path = Path(p) if Path(p).is_absolute() else base_dir / p
            try:
                return load_csv(path, label_column=d["label_column"], has_header=d["has_header"])
            except OSError as exc:
                raise ConfigError("data", f"cannot read {path}: {exc.strerror}") from None
        train = read(d["train_csv"])
        test = read(d["test_csv"]) if d["test_csv"] else None
    else:
        spec = TeacherSpec(M_star=d["M_star"], d=d["d"], mu=float(d["mu"]), c=float(d["teacher_c"]),
                           seed=cfg["seed"], N_train=d["N_train"], N_test=d["N_test"],
                           label_noise=d["label_noise"], activation=d["activation"])
        try:
            spec.validate()
        except DataError as exc:
            raise ConfigError("data", str(exc)) from None
        td = synth_teacher(spec)
        train, test = td.train, td.test
    if d["standardize"]:
        train = train.standardized()
        test = None if test is None else test.standardized()
    return train, test


# ---------------------------------------------------------------- output

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def write_rows(path: Path, columns, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in columns])


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings, numpy scalars become Python."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def write_json(path: Path, doc):
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n")


def _hash_many(datasets):
    h = hashlib.sha256()
    for ds in datasets:
        h.update(ds.content_hash().encode())
    return h.hexdigest()


# ---------------------------------------------------------------- commands

def _contexts(cfg, built, base_dir):
    train, test = load_data(cfg, base_dir)
    act = built["activation"]
    ctx = risk.RiskContext(train, activation=act)
    ctx_test = None if test is None else risk.RiskContext(test, activation=act)
    return ctx, ctx_test, {"dataset_sha256": train.content_hash(),
                           "test_dataset_sha256": None if test is None else test.content_hash()}


def cmd_train(cfg, built, out: Path, threads: int, base_dir: Path):
    ctx, ctx_test, meta = _contexts(cfg, built, base_dir)
    traj = run_gd(ctx, ctx_test, built["gd"])
    traj.to_csv(out / "results.csv")
    save_checkpoint(traj.final_params, out / "checkpoint.json")
    summary = traj.summary()
    if ctx_test is not None:
        summary["final_test_R"] = risk.population_risk_estimate(ctx_test, traj.final_params)
    return {**meta, **summary}


def cmd_stability(cfg, built, out: Path, threads: int, base_dir: Path):
    ctx, ctx_test, meta = _contexts(cfg, built, base_dir)
    st = cfg["stability"]
    if not st["self_resample"] and ctx_test is None:
        raise ConfigError("data.test_csv", "stability draws replacement points from the test set")
    res = lab.stability_experiment(ctx, None if ctx_test is None else ctx_test.dataset, built["gd"],
                                   k_resamples=st["k_resamples"], seed=cfg["seed"], threads=threads,
                                   self_resample=st["self_resample"])
    rows = [{"index": i, "reservoir_index": j, "gap": float(g), "final_deviation": float(dev[-1]),
             "max_deviation": float(dev.max())}
            for i, j, g, dev in zip(res.resample_indices, res.reservoir_indices, res.per_index_gap,
                                    res.deviation_series)]
    write_rows(out / "results.csv", ["index", "reservoir_index", "gap", "final_deviation", "max_deviation"], rows)
    summary = res.summary()
    summary["constants"] = None if res.constants is None else res.constants.to_dict()
    summary["bound"] = None if res.bound_report is None else res.bound_report.to_dict()
    summary["within_bound_3se"] = bool(abs(res.empirical_gen_gap) <= res.bound_value + 3 * res.gap_std_error)
    return {**meta, **summary}


def _snapshot_stride(gd: GDConfig) -> int:
    return gd.record_stride if gd.record_stride > 0 else max(1, gd.t_max // 20)


def _with_stride(gd: GDConfig, stride: int) -> GDConfig:
    return GDConfig(**{**{f: getattr(gd, f) for f in gd.__dataclass_fields__}, "record_stride": stride})


def cmd_spectrum(cfg, built, out: Path, threads: int, base_dir: Path):
    ctx, ctx_test, meta = _contexts(cfg, built, base_dir)
    gd = _with_stride(built["gd"], _snapshot_stride(built["gd"]))
    traj = run_gd(ctx, ctx_test, gd)
    sp = cfg["spectrum"]
    points = spectral.epsilon_trajectory(ctx, traj, tol=sp["tol"], method=sp["method"], seed=cfg["seed"])
    spectral.write_spectrum_csv(points, out / "results.csv")
    violations = sum(p.lambda_min < p.closed_form_bound - 1e-10 for p in points)
    return {**meta, "snapshots": len(points), "max_epsilon": max(p.epsilon for p in points),
            "closed_form_violations": int(violations), "steps_run": traj.steps_run}


def cmd_bounds(cfg, built, out: Path, threads: int, base_dir: Path):
    ctx, ctx_test, meta = _contexts(cfg, built, base_dir)
    gd = built["gd"]
    if gd.t_max < 1:
        raise ConfigError("gd.t_max", "bounds need at least one step")
    gd = _with_stride(gd, _snapshot_stride(gd))
    traj = run_gd(ctx, ctx_test, gd)
    t = traj.steps_run
    b = cfg["bounds"]
    p0 = traj.initial_params
    radius = max(b["radius"], max(traj.dist_from_init_series))
    consts = bounds.constants_estimate(ctx, p0, radius=radius, n_samples=b["n_samples"], seed=cfg["seed"],
                                       mode=b["mode"])
    points = spectral.epsilon_trajectory(ctx, traj, method="lanczos", seed=cfg["seed"])
    eps = spectral.interpolate_eps([p.step for p in points], [p.epsilon for p in points], t)
    etas = step_sizes(gd.schedule, t)
    alpha = b["alpha"] if b["alpha"] is not None else (gd.schedule.alpha if gd.schedule.kind == "polylog" else 1.0)
    reports = [bounds.gen_bound_pointwise(etas, eps, alpha, consts.beta, consts.L, consts.rho, ctx.N, t=t)]
    if gd.schedule.kind == "constant":
        eps_global = lab.stability_bound_inputs(ctx, gd, radius)[0]
        if 2.0 * gd.schedule.eta * eps_global < 1.0:
            reports.append(bounds.gen_bound_global(gd.schedule.eta, eps_global, consts.L, ctx.N, t, beta=consts.beta))
    if ctx_test is not None:
        reports.append(bounds.decomposition_report(ctx, ctx_test, traj))
    rows = []
    for rep in reports:
        rows.append({"bound": rep.name, "key": "value", "value": float(rep.value)})
        for k, v in sorted(rep.terms.items()):
            rows.append({"bound": rep.name, "key": f"term:{k}", "value": float(v)})
        for cnd in rep.conditions:
            rows.append({"bound": rep.name, "key": f"condition:{cnd.desc}", "value": float(cnd.ok)})
    write_rows(out / "results.csv", ["bound", "key", "value"], rows)
    return {**meta, "steps_run": t, "constants": consts.to_dict(), "alpha": alpha,
            "reports": [r.to_dict() for r in reports]}


def cmd_check(cfg, built, out: Path, threads: int, base_dir: Path):
    ctx, ctx_test, meta = _contexts(cfg, built, base_dir)
    gd = built["gd"]
    ck = cfg["check"]
    p0 = initial_params(gd, ctx.dataset.d)
    consts = bounds.constants_estimate(ctx, p0, radius=ck["radius"], mode="analytic")
    eps = bounds.certified_epsilon(p0, empirical_covariance(ctx.dataset), ctx.activation, ctx.loss)
    eta = float(gd.schedule.eta)
    if 2.0 * eta * eps >= 1.0:
        raise ValueError(f"2 eta eps = {2 * eta * eps!r} >= 1; the expansiveness factor is undefined")
    pairs = lab.random_pairs(p0, ck["radius"], ck["n_pairs"], seed=cfg["seed"])
    traj = run_gd(ctx, None, gd)
    reports = [
        lab.check_cocoercivity_global(ctx, p0, pairs, eta, eps, consts.beta),
        lab.check_expansiveness(ctx, p0, pairs, eta, eps),
        lab.check_descent(traj),
        lab.check_trajectory_norm(traj),
    ]
    rows = [r.to_dict() for r in reports]
    write_rows(out / "results.csv", ["name", "count", "min_margin", "violations", "ok"], rows)
    return {**meta, "eta": eta, "eps": eps, "beta": consts.beta, "eta_beta": eta * consts.beta,
            "min_margin": min(r.min_margin for r in reports), "all_ok": all(r.ok for r in reports),
            "checks": rows}


def cmd_sweep(cfg, built, out: Path, threads: int, base_dir: Path):
    spec = built["sweep"]
    result = lab.scaling_sweep(spec, threads=threads)
    result.to_csv(out / "results.csv")
    datasets = []
    for rep in range(spec.replications):
        td = lab.replication_data(spec, rep)
        datasets += [td.train, td.test]
    return {"dataset_sha256": _hash_many(datasets), **result.summary()}


HANDLERS = {"train": cmd_train, "stability": cmd_stability, "spectrum": cmd_spectrum, "sweep": cmd_sweep,
            "bounds": cmd_bounds, "check": cmd_check}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wclab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default="out", help="output directory (default: ./out)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for independent runs")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    return parser


def run_cli(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed", "must be >= 0")
        cfg = load_config(args.config, args.command, args.seed)
        built = validate(cfg, args.command)
        base_dir = Path(args.config).resolve().parent
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config_echo.json", {"command": args.command, **cfg})
        summary = HANDLERS[args.command](cfg, built, out, args.threads, base_dir)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ShapeError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, NotSymmetricError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    write_json(out / "summary.json", {"command": args.command, "seed": cfg["seed"], **summary})
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
