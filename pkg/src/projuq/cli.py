"""Command-line front end: ``projuq {assess,sstat,pde,gen-spd,calibrate}``.

Every command reads an optional JSON config, applies flag overrides, validates
all parameters, and writes CSV/JSON files into a fresh timestamped run
directory together with ``metadata.json`` (the resolved config).  File
contents depend only on the config, so two runs with the same seed produce
byte-identical outputs.
"""
import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .assessment import (
    MIN_DISCREPANCY_SAMPLES,
    PRIOR_MODES,
    REGIMES,
    AssessmentSpec,
    discrepancy,
    run_assessment,
    sstat_comparison,
    write_sstat_csv,
)
from .calibration import calibrate_by_observation, calibrate_cheap
from .distributions import ScalePosterior
from .errors import DegenerateSample, ImproperPosterior, ProjUQError
from .linalg import MatrixHandle, SpdEnsembleSpec, geometric_spd, random_spd, random_spd_factors, spd_from_factors
from .problems import (
    calibrate_fem,
    default_r_grid,
    fem_assemble,
    pde_uncertainty_band,
    read_matrix_market,
    write_matrix_market,
)
from .projection import VARIANTS, krylov_builder, krylov_pair

_LOG = logging.getLogger("projuq")

COMMANDS = ("assess", "sstat", "pde", "gen-spd", "calibrate")

DEFAULTS = {
    "assess": {
        "n": 100,
        "m": [5, 10, 20, 40, 60, 80],
        "M": 50,
        "N": 5,
        "variants": ["cg_like", "gmres_like"],
        "prior_modes": list(PRIOR_MODES),
        "regimes": ["point", "hierarchical"],
        "k": [1],
        "scale": 10.0,
        "alpha": 0.0,
        "beta": 0.0,
        "basis": "krylov_b",
        "solution": "standard",
        "tail_scale": 1.0,
        "grid_points": 512,
        "dump_samples": True,
    },
    "sstat": {
        "matrix": None,
        "n": 400,
        "spectrum": "geometric",
        "cond": 1e4,
        "scale": 10.0,
        "step": 20,
        "max_m": 200,
        "d": 5,
        "samples": 100,
    },
    "pde": {
        "L": 6,
        "m": [20, 30, 50],
        "samples": 30,
        "r_points": 64,
        "r_min": 0.05,
        "r_max": 0.65,
        "k": 1,
    },
    "gen-spd": {"n": 100, "scale": 10.0},
    "calibrate": {
        "matrix": None,
        "n": 100,
        "scale": 10.0,
        "m": 10,
        "k": 1,
        "statistic": "Z",
        "method": "observation",
        "variant": "cg_like",
        "alpha": 0.0,
        "beta": 0.0,
    },
}


@dataclass
class ExperimentConfig:
    command: str
    master_seed: int
    params: dict = field(default_factory=dict)

    def to_json_dict(self):
        return {"command": self.command, "master_seed": self.master_seed, "params": self.params}

    @classmethod
    def from_json_dict(cls, d):
        return cls(d["command"], int(d["master_seed"]), dict(d["params"]))


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _positive_int(p, key):
    v = p[key]
    if not isinstance(v, int) or isinstance(v, bool) or v < 1:
        raise ValueError(f"{key} must be a positive integer, got {v!r}")


def validate(cfg):
    """Check every parameter before any work starts; raises ``ValueError``."""
    p = cfg.params
    if not isinstance(cfg.master_seed, int) or cfg.master_seed < 0 or cfg.master_seed >= 2 ** 64:
        raise ValueError("master_seed must be an unsigned 64-bit integer")
    unknown = set(p) - set(DEFAULTS[cfg.command])
    if unknown:
        raise ValueError(f"unknown parameters for {cfg.command}: {sorted(unknown)}")
    if cfg.command == "assess":
        for key in ("n", "M", "N", "grid_points"):
            _positive_int(p, key)
        for v in p["variants"]:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}")
        for v in p["prior_modes"]:
            if v not in PRIOR_MODES:
                raise ValueError(f"unknown prior mode {v!r}")
        for v in p["regimes"]:
            if v not in REGIMES:
                raise ValueError(f"unknown regime {v!r}")
        for spec in _assess_specs(cfg):
            try:
                spec.validate()
            except ImproperPosterior:
                pass  # reported per configuration in the output table
    elif cfg.command == "sstat":
        for key in ("step", "max_m", "samples", "n"):
            _positive_int(p, key)
        if not isinstance(p["d"], int) or p["d"] < 0:
            raise ValueError("d must be a nonnegative integer")
        if p["matrix"] is not None and not Path(p["matrix"]).is_file():
            raise ValueError(f"matrix file {p['matrix']!r} not found")
        if p["spectrum"] not in ("geometric", "exponential"):
            raise ValueError("spectrum must be 'geometric' or 'exponential'")
        if not p["cond"] >= 1 or not p["scale"] > 0:
            raise ValueError("need cond >= 1 and scale > 0")
    elif cfg.command == "pde":
        if not isinstance(p["L"], int) or not 2 <= p["L"] <= 7:
            raise ValueError("L must be an integer in [2, 7]")
        n = (2 ** p["L"] - 1) ** 2
        for m in _as_list(p["m"]):
            if not isinstance(m, int) or not 1 <= m <= n:
                raise ValueError(f"m must lie in [1, {n}], got {m!r}")
        for key in ("samples", "r_points", "k"):
            _positive_int(p, key)
        if p["samples"] < 2:
            raise ValueError("need at least two posterior samples")
        if not 0 < p["r_min"] <= p["r_max"] < math.sqrt(0.5):
            raise ValueError("need 0 < r_min <= r_max < sqrt(2)/2")
    elif cfg.command == "gen-spd":
        _positive_int(p, "n")
        if not p["scale"] > 0:
            raise ValueError("scale must be positive")
    elif cfg.command == "calibrate":
        for key in ("n", "k"):
            _positive_int(p, key)
        if p["statistic"] not in ("Z", "S"):
            raise ValueError("statistic must be 'Z' or 'S'")
        if p["method"] not in ("observation", "cheap"):
            raise ValueError("method must be 'observation' or 'cheap'")
        if p["variant"] not in VARIANTS:
            raise ValueError(f"unknown variant {p['variant']!r}")
        if p["matrix"] is not None and not Path(p["matrix"]).is_file():
            raise ValueError(f"matrix file {p['matrix']!r} not found")
        if p["matrix"] is None and not 0 <= p["m"] < p["n"]:
            raise ValueError("need 0 <= m < n")
    return cfg


def load_config(command, path=None, seed=None):
    params = dict(DEFAULTS[command])
    master_seed = None
    if path is not None:
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError("config file must hold a JSON object")
        master_seed = raw.pop("master_seed", None)
        params.update(raw)
    if seed is not None:
        master_seed = seed
    if master_seed is None:
        raise ValueError("master_seed is required (config key 'master_seed' or --seed)")
    return validate(ExperimentConfig(command, int(master_seed), params))


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _write_rows(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(v) for v in r) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def make_run_dir(base, command):
    base = Path(base)
    base.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    name = f"{command}-{stamp}"
    run = base / name
    i = 1
    while run.exists():
        run = base / f"{name}-{i}"
        i += 1
    run.mkdir()
    return run


def _load_or_generate(p, rng):
    if p.get("matrix"):
        return read_matrix_market(p["matrix"])
    if p.get("spectrum") == "geometric":
        return geometric_spd(p["n"], p["cond"], rng)
    return random_spd(SpdEnsembleSpec(p["n"], p["scale"]), rng)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _assess_specs(cfg):
    p = cfg.params
    specs = []
    for variant in p["variants"]:
        for mode in p["prior_modes"]:
            for regime in p["regimes"]:
                if mode in ("trivial", "inverse", "normal_inverse") and regime != "point":
                    continue
                if regime == "exact" and mode not in ("cheap", "expensive"):
                    continue
                ks = _as_list(p["k"]) if mode == "expensive" else [1]
                for k in ks:
                    for m in _as_list(p["m"]):
                        specs.append(
                            AssessmentSpec(
                                n=p["n"], m=int(m), M=p["M"], N=p["N"], variant=variant,
                                prior_mode=mode, regime=regime, k=int(k), master_seed=cfg.master_seed,
                                scale=float(p["scale"]), alpha=float(p["alpha"]), beta=float(p["beta"]),
                                basis=p["basis"], solution=p["solution"], tail_scale=float(p["tail_scale"]),
                            )
                        )
    return specs


def cmd_assess(cfg, run):
    p = cfg.params
    header = ["variant", "m", "prior_mode", "regime", "k", "statistic_kind", "target",
              "discrepancy", "ks", "n_samples", "breakdown_count", "status"]
    rows = []
    dump = run / "samples"
    if p["dump_samples"]:
        dump.mkdir()
    for spec in _assess_specs(cfg):
        tag = f"{spec.variant}_{spec.prior_mode}_{spec.regime}_k{spec.k}_m{spec.m}"
        kind = "z_normalized" if spec.regime == "hierarchical" else "Z"
        try:
            series = run_assessment(spec)
        except ImproperPosterior as exc:
            _LOG.warning("%s: skipped (%s)", tag, exc)
            rows.append([spec.variant, spec.m, spec.prior_mode, spec.regime, spec.k, kind, "",
                         math.nan, math.nan, 0, 0, "improper"])
            continue
        status = "ok"
        disc = math.nan
        if series.samples.size >= MIN_DISCREPANCY_SAMPLES:
            try:
                disc = discrepancy(series, p["grid_points"])
            except DegenerateSample as exc:
                # e.g. the trivial posterior, whose statistic is identically zero
                status = "degenerate"
                _LOG.warning("%s: %s", tag, exc)
        else:
            status = "too_few_samples"
            _LOG.warning("%s: %d samples, discrepancy not computed; statistic values %s",
                         tag, series.samples.size, np.array2string(series.samples, precision=6))
        ks = series.ks() if series.samples.size else math.nan
        rows.append([spec.variant, spec.m, spec.prior_mode, spec.regime, spec.k, series.kind,
                     series.describe_target(), disc, ks, series.samples.size, series.breakdown_count, status])
        if p["dump_samples"]:
            series.to_csv(dump / f"{tag}.csv")
        _LOG.info("%s: discrepancy %s over %d samples", tag, _fmt(disc), series.samples.size)
    _write_rows(run / "assess.csv", header, rows)


def cmd_sstat(cfg, run):
    p = cfg.params
    rng = np.random.default_rng([cfg.master_seed, 0])
    A = _load_or_generate(p, rng)
    n = A.n_rows
    checkpoints = [m for m in range(p["step"], p["max_m"] + 1, p["step"]) if m + p["d"] <= n and n - m > 2]
    if not checkpoints:
        raise ValueError(f"no admissible checkpoints for n={n}")
    _LOG.info("sstat on n=%d, checkpoints %s", n, checkpoints)
    rows, trace = sstat_comparison(A, checkpoints, p["d"], p["samples"], seed=cfg.master_seed)
    write_sstat_csv(rows, run / "sstat.csv")
    trace.to_csv(run / "cg_gains.csv")
    source = p["matrix"] or f"{p['spectrum']} spectrum"
    _write_json(run / "matrix.json", {"n": n, "nnz": A.nnz, "source": source})


def cmd_pde(cfg, run):
    p = cfg.params
    problem = fem_assemble(p["L"])
    r_grid = np.linspace(p["r_min"], p["r_max"], p["r_points"]) if p["r_points"] > 1 else np.array([p["r_min"]])
    for m in _as_list(p["m"]):
        cal = None
        if m < problem.n:
            cal = calibrate_fem(problem, m, k=p["k"], seed=cfg.master_seed)
            _write_json(run / f"calibration_m{m}.json", cal.to_json_dict())
        curve = pde_uncertainty_band(problem, r_grid, m, p["samples"], cal, seed=cfg.master_seed)
        curve.to_csv(run / f"loss_m{m}.csv")
        _LOG.info("m=%d: mean absolute gap %.6g", m, curve.mean_abs_gap())


def cmd_gen_spd(cfg, run):
    p = cfg.params
    rng = np.random.default_rng(cfg.master_seed)
    U, lam = random_spd_factors(p["n"], p["scale"], rng)
    A = MatrixHandle.from_dense(spd_from_factors(U, lam))
    write_matrix_market(run / "matrix.mtx", A, comment=f"random SPD, n={p['n']}, scale={p['scale']!r}, seed={cfg.master_seed}")
    _write_rows(run / "eigenvalues.csv", ["index", "eigenvalue"], [(i, v) for i, v in enumerate(np.sort(lam))])


def cmd_calibrate(cfg, run):
    p = cfg.params
    rng = np.random.default_rng([cfg.master_seed, 0])
    A = _load_or_generate(p, rng)
    n = A.n_rows
    m = p["m"]
    if not 0 <= m < n:
        raise ValueError(f"need 0 <= m < n={n}")
    prior = ScalePosterior(p["alpha"], p["beta"])
    if p["method"] == "cheap":
        b = A.apply(rng.standard_normal(n))
        pair = krylov_pair(A, b, m, p["variant"])
        res = calibrate_cheap(A, b, None, pair, prior)
    else:
        res = calibrate_by_observation(
            A, krylov_builder(p["variant"]), lambda g: g.standard_normal(n), m, p["k"],
            prior=prior, stat=p["statistic"], rng=np.random.default_rng([cfg.master_seed, 1]),
        )
    _write_json(run / "calibration.json", res.to_json_dict())


HANDLERS = {
    "assess": cmd_assess,
    "sstat": cmd_sstat,
    "pde": cmd_pde,
    "gen-spd": cmd_gen_spd,
    "calibrate": cmd_calibrate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="projuq", description="Probabilistic projection solvers: calibration experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON file with parameters (and master_seed)")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", default="runs", help="base output directory (PROJUQ_OUT overrides)")
        sp.add_argument("--threads", type=int, default=None, help="cap on worker threads")
        sp.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads is not None and args.threads < 1:
            raise ValueError("--threads must be >= 1")
        cfg = load_config(args.command, args.config, args.seed)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"projuq {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 2
    base = os.environ.get("PROJUQ_OUT") or args.out
    run = make_run_dir(base, args.command)
    _write_json(run / "metadata.json", {"version": __version__, "config": cfg.to_json_dict()})
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                HANDLERS[args.command](cfg, run)
        else:
            HANDLERS[args.command](cfg, run)
    except (ProjUQError, ValueError, OSError) as exc:
        print(f"projuq {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
