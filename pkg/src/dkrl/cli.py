"""Command line: ``dkrl {gen,fit,bandit,bench} --config run.json``.

Every command reads one JSON document, rejects unknown fields, checks all
paths before computing anything and writes a ``manifest.json`` next to its
outputs. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bandit import TRACE_HEADER, EstimatorFailure, EtcConfig
from .baselines import KINDS, baseline_fit, baseline_predict, baseline_to_dict
from .estimators import (
    DkrlConfig,
    NuclearConfig,
    OutcomeConfig,
    dkrl_fit,
    dkrl_predict,
    model_to_dict,
    residualize,
)
from .experiments import (
    BAND_QUANTILES,
    BenchConfig,
    SeedFailure,
    bench_table,
    mse,
    regret_bands,
    run_bandit,
    run_bench,
    split_indices,
    worker_count,
)
from .kernels import KernelSpec, krr_predict
from .numerics import NumericFailure
from .simdata import (
    PRESETS,
    EmptyInputError,
    FixedBasisDesign,
    NoiseSpec,
    ThetaSpec,
    attach_truth,
    child_seeds,
    gen_design,
    gen_theta,
    load_embeddings,
    sample_dataset,
    write_matrix,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
GEN_FILES = ("z.csv", "x.csv", "y.csv", "indices.csv", "gamma_star.csv")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- config parsing


def _section(doc, name, allowed, required=()):
    """Check a JSON object against an allowed key set; returns it as a dict."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{name}: expected a JSON object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {', '.join(unknown)}")
    missing = [k for k in required if k not in doc]
    if missing:
        raise ConfigError(f"{name}: missing field(s) {', '.join(missing)}")
    return dict(doc)


def _build(name, factory, **kwargs):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _kernel(doc, name):
    d = _section(doc, name, ("family", "lengthscale"))
    return _build(name, KernelSpec, **d)


def _dkrl(doc, name="dkrl", base=None):
    fields = ("rank", "lam", "max_iter", "tol", "inner_sweeps", "init_scale", "seed", "jitter")
    d = _section(doc, name, fields)
    merged = {**(asdict(base) if base else {}), **d}
    return _build(name, DkrlConfig, **merged)


def _outcome(doc):
    d = _section(doc, "outcome", ("mode", "kernel", "lam_m", "folds"))
    if "kernel" in d:
        d["spec"] = _kernel(d.pop("kernel"), "outcome.kernel")
    return _build("outcome", OutcomeConfig, **d)


def _noise(doc):
    d = _section(doc, "noise", ("family", "sigma"))
    return _build("noise", NoiseSpec, **d)


def _int_list(value, name):
    if not isinstance(value, list) or not value or not all(isinstance(v, int) for v in value):
        raise ConfigError(f"{name}: expected a non-empty list of integers")
    if len(set(value)) != len(value):
        raise ConfigError(f"{name}: entries must be distinct")
    return value


def _preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return PRESETS[name]


def _out_dir(value):
    """Resolve an output directory and make sure it can be created or written."""
    if not isinstance(value, str) or not value:
        raise ConfigError("out_dir: expected a non-empty path string")
    path = Path(value)
    if path.exists() and not path.is_dir():
        raise ConfigError(f"out_dir {path} exists and is not a directory")
    probe = path
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir() or not os.access(probe, os.W_OK):
        raise ConfigError(f"out_dir {path} is not writable")
    return path


def _in_file(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing input file {path}")
    return path


def config_hash(doc):
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(command, doc, seed, files, extra=None):
    m = {
        "tool": "dkrl",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config_hash": config_hash(doc),
        "config": doc,
        "files": sorted(files),
    }
    m.update(extra or {})
    return m


# ---------------------------------------------------------------- gen


@dataclass
class GenPlan:
    p: int
    q: int
    d1: int
    d2: int
    n: int
    center_users: bool
    theta: ThetaSpec
    noise: NoiseSpec
    entry_bound: float
    seed: int
    out_dir: Path


def parse_gen(doc):
    d = _section(doc, "gen", ("preset", "design", "theta_spec", "n", "noise", "entry_bound", "seed",
                              "out_dir"), required=("out_dir",))
    base = dict(_preset(d["preset"])) if "preset" in d else {}
    design = _section(d.get("design"), "design", ("p", "q", "d1", "d2", "center_users"))
    dims = {k: design.get(k, base.get(k)) for k in ("p", "q", "d1", "d2")}
    for k, v in dims.items():
        if not isinstance(v, int) or v < 1:
            raise ConfigError(f"design.{k}: expected a positive integer (got {v!r})")
    n = d.get("n", base.get("n"))
    if not isinstance(n, int) or n < 1:
        raise ConfigError(f"n: expected a positive integer (got {n!r})")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed: expected a nonnegative integer")
    theta_doc = _section(d.get("theta_spec"), "theta_spec",
                         ("variant", "rank", "q_exponent", "lq", "radius", "scale"))
    theta_doc.setdefault("variant", "low_rank")
    theta_doc.setdefault("rank", base.get("rank", 2))
    theta = _build("theta_spec", ThetaSpec, dims=(dims["p"], dims["q"]), seed=child_seeds(seed, 3)[1],
                   **theta_doc)
    noise_doc = _section(d.get("noise"), "noise", ("family", "sigma"))
    if "sigma" in base:
        noise_doc.setdefault("sigma", base["sigma"])
    noise = _noise(noise_doc)
    # the planted truth is rescaled so max |gamma| equals the theta scale unless overridden
    bound = d.get("entry_bound", theta.scale)
    if not isinstance(bound, (int, float)) or not bound > 0:
        raise ConfigError("entry_bound: expected a positive number")
    center = design.get("center_users", base.get("center_users", False))
    if not isinstance(center, bool):
        raise ConfigError("design.center_users: expected true or false")
    return GenPlan(dims["p"], dims["q"], dims["d1"], dims["d2"], n, center, theta, noise, float(bound),
                   seed, _out_dir(d["out_dir"]))


def cmd_gen(doc):
    plan = parse_gen(doc)
    s_design, _, s_sample = child_seeds(plan.seed, 3)
    design = gen_design(plan.p, plan.q, plan.d1, plan.d2, s_design, center_users=plan.center_users)
    theta, _ = gen_theta(plan.theta)
    design = attach_truth(design, theta, plan.entry_bound)
    data = sample_dataset(design, design.theta_star, plan.n, plan.noise, seed=s_sample)

    out = plan.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "z.csv", data.z)
    write_matrix(out / "x.csv", data.x)
    write_matrix(out / "y.csv", data.y)
    write_matrix(out / "gamma_star.csv", design.gamma_star)
    with open(out / "indices.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("e_z", "e_x"))
        writer.writerows(zip(data.indices.e_z.tolist(), data.indices.e_x.tolist()))
    # bases and theta let a later bandit run replay the exact design
    write_matrix(out / "z_basis.csv", design.z_basis)
    write_matrix(out / "x_basis.csv", design.x_basis)
    write_matrix(out / "theta_star.csv", design.theta_star)
    files = list(GEN_FILES) + ["z_basis.csv", "x_basis.csv", "theta_star.csv"]
    dims = {"p": plan.p, "q": plan.q, "d1": plan.d1, "d2": plan.d2, "n": plan.n}
    _write_json(out / "manifest.json", _manifest("gen", doc, plan.seed, files, {"dims": dims}))
    return out


# ---------------------------------------------------------------- fit


def _data_paths(d):
    if ("data_dir" in d) == ("data" in d):
        raise ConfigError("give exactly one of data_dir or data")
    if "data_dir" in d:
        root = Path(d["data_dir"])
        paths = {k: root / f"{k}.csv" for k in ("z", "x", "y")}
    else:
        files = _section(d["data"], "data", ("z", "x", "y"), required=("z", "x", "y"))
        paths = {k: Path(v) for k, v in files.items()}
    return {k: _in_file(v) for k, v in paths.items()}


def parse_fit(doc):
    d = _section(doc, "fit", ("data_dir", "data", "out_dir", "method", "kernel_g", "kernel_h", "dkrl",
                              "lambda", "outcome", "collapse", "train_fraction", "seed"),
                 required=("out_dir",))
    method = d.get("method", "dkrl")
    if method != "dkrl" and method not in KINDS:
        raise ConfigError(f"method: expected 'dkrl' or one of {KINDS}")
    plan = {
        "method": method,
        "spec_g": _kernel(d.get("kernel_g"), "kernel_g"),
        "spec_h": _kernel(d.get("kernel_h"), "kernel_h"),
        "dkrl": _dkrl(d.get("dkrl")),
        "lam": d.get("lambda", 1e-3),
        "outcome": _outcome(d.get("outcome")),
        "collapse": d.get("collapse", True),
        "train_fraction": d.get("train_fraction", 0.8),
        "seed": d.get("seed", 0),
    }
    if not isinstance(plan["lam"], (int, float)) or not plan["lam"] > 0:
        raise ConfigError("lambda: expected a positive number")
    if not isinstance(plan["collapse"], bool):
        raise ConfigError("collapse: expected true or false")
    tf = plan["train_fraction"]
    if not isinstance(tf, (int, float)) or not 0 < tf < 1:
        raise ConfigError("train_fraction: expected a number in (0, 1)")
    if not isinstance(plan["seed"], int) or plan["seed"] < 0:
        raise ConfigError("seed: expected a nonnegative integer")
    plan["out_dir"] = _out_dir(d["out_dir"])
    plan["paths"] = _data_paths(d)
    return plan


def _load_fit_data(paths):
    try:
        z = load_embeddings(paths["z"])
        x = load_embeddings(paths["x"])
        y = load_embeddings(paths["y"])
    except (EmptyInputError, ValueError) as exc:
        raise DataError(str(exc)) from None
    if y.shape[1] != 1:
        raise DataError(f"{paths['y']}: expected one column, found {y.shape[1]}")
    y = y[:, 0]
    if not z.shape[0] == x.shape[0] == y.shape[0]:
        raise DataError(f"row counts differ: z={z.shape[0]}, x={x.shape[0]}, y={y.shape[0]}")
    if y.shape[0] < 2:
        raise DataError("need at least two observations to split into train and test")
    return z, x, y


def _krr_to_dict(model):
    if model is None:
        return None
    return {"spec": model.spec.to_dict(), "lambda": model.lam,
            "points": model.points.tolist(), "weights": model.weights.tolist()}


def cmd_fit(doc):
    plan = parse_fit(doc)
    z, x, y = _load_fit_data(plan["paths"])
    tr, te = split_indices(y.size, plan["train_fraction"], plan["seed"])
    t0 = time.perf_counter()
    y_tr, m_model = residualize(x[tr], y[tr], plan["outcome"])

    def base(rows):
        return 0.0 if m_model is None else krr_predict(m_model, x[rows])

    if plan["method"] == "dkrl":
        centered = plan["outcome"].mode != "none"
        model = dkrl_fit(z[tr], x[tr], y_tr, plan["dkrl"], plan["spec_g"], plan["spec_h"],
                         collapse=plan["collapse"], center=centered)
        pred_tr = base(tr) + dkrl_predict(model, z[tr], x[tr])
        pred_te = base(te) + dkrl_predict(model, z[te], x[te])
        body, trace_len = model_to_dict(model), len(model.loss_trace)
    else:
        model = baseline_fit(z[tr], x[tr], y_tr, plan["method"], plan["spec_g"], plan["spec_h"], plan["lam"])
        pred_tr = base(tr) + baseline_predict(model, z[tr], x[tr])
        pred_te = base(te) + baseline_predict(model, z[te], x[te])
        body, trace_len = baseline_to_dict(model), 0
    seconds = time.perf_counter() - t0

    out = plan["out_dir"]
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "model.json", {"model": body, "outcome_model": _krr_to_dict(m_model)})
    metrics = {
        "method": plan["method"],
        "n_train": int(tr.size),
        "n_test": int(te.size),
        "train_fraction": plan["train_fraction"],
        "train_mse": mse(pred_tr, y[tr]),
        "test_mse": mse(pred_te, y[te]),
        "loss_trace_length": trace_len,
        "seconds": seconds,
    }
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "manifest.json", _manifest("fit", doc, plan["seed"], ["model.json", "metrics.json"]))
    return out


# ---------------------------------------------------------------- bandit


def _load_design(root):
    root = Path(root)
    paths = {k: _in_file(root / f"{k}.csv") for k in ("z_basis", "x_basis", "gamma_star")}
    try:
        zb, xb, gamma = (load_embeddings(paths[k]) for k in ("z_basis", "x_basis", "gamma_star"))
        bound = float(np.abs(gamma).max())
        return FixedBasisDesign(zb, xb, bound, gamma)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def parse_bandit(doc):
    d = _section(doc, "bandit", ("preset", "design_dir", "seeds", "out_dir", "horizon", "explore_rounds",
                                 "kappa", "estimator", "dkrl", "kernel_g", "kernel_h", "noise", "outcome",
                                 "nuclear_lambda", "treatment_lambda", "window"),
                 required=("out_dir",))
    if "preset" in d and "design_dir" in d:
        raise ConfigError("give at most one of preset or design_dir")
    preset = d.get("preset", "bandit")
    _preset(preset)
    seeds = _int_list(d.get("seeds", [0]), "seeds")
    defaults = EtcConfig()
    kwargs = {
        "horizon": d.get("horizon", defaults.horizon),
        "explore_rounds": d.get("explore_rounds"),
        "kappa": d.get("kappa", defaults.kappa),
        "estimator": d.get("estimator", defaults.estimator),
        "dkrl": _dkrl(d.get("dkrl"), base=defaults.dkrl),
        "spec_g": _kernel(d.get("kernel_g"), "kernel_g"),
        "spec_h": _kernel(d.get("kernel_h"), "kernel_h"),
        "noise": _noise(d.get("noise")),
        "outcome": _outcome(d.get("outcome")),
        "nuclear": _build("nuclear_lambda", NuclearConfig, lam=d.get("nuclear_lambda", defaults.nuclear.lam)),
        "treatment_lam": d.get("treatment_lambda", defaults.treatment_lam),
    }
    etc = _build("bandit", EtcConfig, **kwargs)
    window = d.get("window", 0.5)
    if not isinstance(window, (int, float)) or not 0 < window <= 1:
        raise ConfigError("window: expected a number in (0, 1]")
    out_dir = _out_dir(d["out_dir"])
    design = _load_design(d["design_dir"]) if "design_dir" in d else None
    return etc, seeds, design, preset, float(window), out_dir


def _write_traces(path, traces):
    """One CSV per seed; the ``policy`` column separates full and treatment-only rounds."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("policy",) + TRACE_HEADER)
        for policy, trace in traces:
            for t, a, u, rew, inst, cum in trace.rounds:
                writer.writerow([policy, t, a, u, repr(rew), repr(inst), repr(cum)])


def cmd_bandit(doc):
    etc, seeds, design, preset, window, out = parse_bandit(doc)
    reps = run_bandit(etc, seeds, design=design, preset=preset, window=window)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for rep in reps:
        name = f"trace_seed{rep.seed}.csv"
        _write_traces(out / name, (("full", rep.full), ("treatment_only", rep.treatment_only)))
        files.append(name)

    bands = {kind: regret_bands([getattr(r, kind).cumulative_regret for r in reps])
             for kind in ("full", "treatment_only")}
    with open(out / "regret_bands.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t"] + [f"{kind}_q{int(round(100 * q)):02d}" for kind in bands for q in BAND_QUANTILES])
        cols = np.vstack([bands[kind] for kind in bands])
        for t in range(cols.shape[1]):
            writer.writerow([t + 1] + [repr(float(v)) for v in cols[:, t]])
    files.append("regret_bands.csv")

    summary = {
        "seeds": [r.seed for r in reps],
        "explore_rounds": [r.full.explore_rounds for r in reps],
        "slope_full": [r.slope_full for r in reps],
        "slope_treatment_only": [r.slope_treatment for r in reps],
        "median_slope_full": float(np.median([r.slope_full for r in reps])),
        "median_slope_treatment_only": float(np.median([r.slope_treatment for r in reps])),
        "final_regret_full": [float(r.full.cumulative_regret[-1]) for r in reps],
        "final_regret_treatment_only": [float(r.treatment_only.cumulative_regret[-1]) for r in reps],
        "window": window,
        "quantiles": list(BAND_QUANTILES),
        "bands_file": "regret_bands.csv",
    }
    _write_json(out / "summary.json", summary)
    files.append("summary.json")
    _write_json(out / "manifest.json", _manifest("bandit", doc, min(seeds), files))
    return out


# ---------------------------------------------------------------- bench


BENCH_COLUMNS = ("rank", "method", "train_mean", "train_std", "test_mean", "test_std", "time_mean", "time_std")


def parse_bench(doc):
    d = _section(doc, "bench", ("preset", "ranks", "seeds", "out_dir", "train_fraction", "dkrl_lambda",
                                "prod_lambda", "max_iter", "tol"), required=("out_dir",))
    kwargs = {"preset": d.get("preset", "lowrank")}
    _preset(kwargs["preset"])
    if "ranks" in d:
        kwargs["ranks"] = tuple(_int_list(d["ranks"], "ranks"))
    if "seeds" in d:
        kwargs["seeds"] = tuple(_int_list(d["seeds"], "seeds"))
    for src, dst in (("train_fraction", "train_fraction"), ("dkrl_lambda", "dkrl_lam"),
                     ("prod_lambda", "prod_lam"), ("max_iter", "max_iter"), ("tol", "tol")):
        if src in d:
            kwargs[dst] = d[src]
    cfg = _build("bench", BenchConfig, **kwargs)
    return cfg, _out_dir(d["out_dir"])


def cmd_bench(doc):
    cfg, out = parse_bench(doc)
    per_seed = run_bench(cfg)
    table = bench_table(per_seed)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "table.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, BENCH_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in table:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                             for k, v in row.items()})
    with open(out / "per_seed.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("rank", "seed", "method", "train_mse", "test_mse", "seconds"))
        for rank, seed, method, tr, te, secs in per_seed:
            writer.writerow((rank, seed, method, repr(tr), repr(te), repr(secs)))
    _write_json(out / "manifest.json",
                _manifest("bench", doc, min(cfg.seeds), ["table.csv", "per_seed.csv"]))
    return out


# ---------------------------------------------------------------- entry point


COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "bandit": cmd_bandit, "bench": cmd_bench}


def _read_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def run(command, doc):
    """Run one command on a parsed config; returns the exit code."""
    try:
        try:
            worker_count(1)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        COMMANDS[command](doc)
    except ConfigError as exc:
        print(f"dkrl {command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"dkrl {command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, EstimatorFailure) as exc:
        print(f"dkrl {command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SeedFailure as exc:
        code = EXIT_NUMERIC if isinstance(exc.cause, (NumericFailure, EstimatorFailure)) else EXIT_DATA
        print(f"dkrl {command}: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"dkrl {command}: cannot write output: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"dkrl {command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main(argv=None):
    parser = argparse.ArgumentParser(prog="dkrl", description="Double kernel representation learning toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "generate a planted semi-synthetic dataset",
        "fit": "fit DKRL or a kernel baseline and report train/test MSE",
        "bandit": "simulate explore-then-commit against a treatment-only baseline",
        "bench": "rank-by-method benchmark table over seeds",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON run configuration")
    args = parser.parse_args(argv)
    try:
        doc = _read_config(args.config)
    except ConfigError as exc:
        print(f"dkrl {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.command, doc)


if __name__ == "__main__":
    sys.exit(main())
