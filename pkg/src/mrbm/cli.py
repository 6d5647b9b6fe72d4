"""``mrbm <command> --config path.json [--out dir]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 acceptance target missed. Every random draw comes from
``stream(seed, <command>, ...)``; relative paths in a config resolve
against the config file's directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import jsonschema
import numpy as np

from .constraints import (ContractError, Hypercube, SphericalPolygon, constraint_from_json,
                          lonlat_to_unit, polygon_crossings_bruteforce)
from .datasets import Dataset, GeneratorMismatchError, synth_bimodal
from .diagnostics import (MmdKernel, NonConvergenceError, ScalingResult, bin_masses, fit_power_law,
                          convergence_time, mmd, mmd_bootstrap_ci)
from .diffusion import BetaSchedule, InitialisationError, InputError, TimeGrid, TuningError, reverse_generate
from .geometry import Euclidean, manifold_from_json
from .samplers import SAMPLERS, ChainError, run_chains
from .scorenet import (ScoreModel, TrainConfig, TrainingError, load_checkpoint, save_checkpoint,
                       train, train_config_dict)
from .streams import stream

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISS = 0, 2, 3, 4


class ConfigError(Exception):
    pass


_POS = {"type": "number", "exclusiveMinimum": 0}
_INT = {"type": "integer", "minimum": 1}
_DESC = {"type": "object", "required": ["kind"],
         "properties": {"kind": {"type": "string"}, "params": {"type": "object"}},
         "additionalProperties": False}
_GRID = {"type": "object", "additionalProperties": False,
         "properties": {"beta0": _POS, "beta1": _POS, "T": _POS, "N": _INT}}


def _schema(required, **props):
    return {"type": "object", "required": ["seed"] + list(required), "additionalProperties": False,
            "properties": {"seed": {"type": "integer", "minimum": 0}, **props}}


SCHEMAS = {
    "density1d": _schema(
        ["x0", "times", "gammas"],
        x0={"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        times={"type": "array", "items": _POS, "minItems": 1},
        gammas={"type": "array", "items": _POS, "minItems": 1},
        samplers={"type": "array", "items": {"enum": list(SAMPLERS)}, "minItems": 1},
        n_chains=_INT, bins={"type": "integer", "minimum": 2}, tv_target=_POS),
    "scaling": _schema(
        ["dims"],
        dims={"type": "array", "items": _INT, "minItems": 1},
        samplers={"type": "array", "items": {"enum": list(SAMPLERS)}, "minItems": 1},
        gamma=_POS, tv_threshold=_POS, n_chains=_INT, check_every=_INT,
        bins={"type": "integer", "minimum": 2}, max_steps=_INT),
    "train": _schema(
        ["dataset"],
        dataset={"type": "object", "additionalProperties": False,
                 "properties": {"generator": {"enum": ["bimodal"]}, "path": {"type": "string"},
                                "d": _INT, "n": _INT, "constraint": _DESC}},
        grid=_GRID,
        train={"type": "object", "additionalProperties": False,
               "properties": {"learning_rate": _POS, "batch_size": _INT, "repeats": _INT,
                              "steps": {"type": "integer", "minimum": 0}, "probes": _INT,
                              "width": _INT, "n_layers": {"type": "integer", "minimum": 2},
                              "eps": _POS, "divergence": {"enum": ["auto", "exact", "hutchinson"]}}}),
    "sample": _schema(["checkpoint"], checkpoint={"type": "string"}, n_samples=_INT),
    "mmd": _schema(
        ["a", "b"], a={"type": "string"}, b={"type": "string"},
        kernel={"type": "object", "additionalProperties": False, "required": ["lengthscales"],
                "properties": {"lengthscales": {"type": "array", "items": _POS, "minItems": 1},
                               "weights": {"type": "array", "items": {"type": "number", "minimum": 0}}}},
        n_boot=_INT, max_points=_INT),
    "polycheck": _schema(["polygon", "points"], polygon={"type": "string"}, points={"type": "string"},
                         oracle={"type": "boolean"}),
}


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return repr(float(v))


def _read_points(path):
    """Numeric CSV with a header; a leading ``t`` column (sample exports) is dropped."""
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        pts = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise ConfigError(f"cannot read points file {path}: {exc}") from None
    return pts[:, 1:] if header and header[0] == "t" else pts


# Commands. Each returns an exit code.

def cmd_density1d(cfg, out, base):
    from .diagnostics import rbm_density_1d

    c = Hypercube([0.0], [1.0])
    m = Euclidean(1)
    x0, n = cfg["x0"], cfg.get("n_chains", 100_000)
    bins, target = cfg.get("bins", 50), cfg.get("tv_target", 0.05)
    times = sorted(cfg["times"])
    edges = np.linspace(0.0, 1.0, bins + 1)
    centres = 0.5 * (edges[:-1] + edges[1:])
    rows, summary, ok = [], [], True
    for sampler in cfg.get("samplers", ["metropolis", "reflected"]):
        for gamma in cfg["gammas"]:
            steps = [max(1, int(round(t / gamma))) for t in times]
            rng = stream(cfg["seed"], "density1d", sampler, repr(float(gamma)))
            _, _, saved = run_chains(m, c, np.full((n, 1), x0), sampler, np.full(steps[-1], gamma),
                                     rng=rng, record=steps)
            for t, k in zip(times, steps):
                t_eff = k * gamma
                counts, _ = np.histogram(saved[k][:, 0], bins=bins, range=(0.0, 1.0))
                p = counts / n
                q = bin_masses(lambda x: rbm_density_1d(x, t_eff, x0), bins, [(0.0, 1.0)])
                tv = 0.5 * float(np.abs(p - q).sum())
                ok &= tv < target
                summary.append({"sampler": sampler, "gamma": gamma, "t": t_eff, "tv": tv})
                for xc, pe, qe in zip(centres, p * bins, q * bins):
                    rows.append([sampler, _fmt(gamma), _fmt(t_eff), _fmt(xc), _fmt(pe), _fmt(qe), _fmt(tv)])
    _write_rows(os.path.join(out, "density1d.csv"),
                ["sampler", "gamma", "t", "x", "empirical", "oracle", "tv"], rows)
    with open(os.path.join(out, "density1d.json"), "w") as fh:
        json.dump({"tv_target": target, "slices": summary, "passed": bool(ok)}, fh, indent=2, sort_keys=True)
    return EXIT_OK if ok else EXIT_MISS


def cmd_scaling(cfg, out, base):
    dims = cfg["dims"]
    if len(dims) < 3:
        raise ConfigError("scaling fit needs at least 3 dimensions (a power law has two free parameters)")
    samplers = cfg.get("samplers", ["metropolis", "reflected"])
    gamma = cfg.get("gamma", 1e-3)
    results = {}
    for sampler in samplers:
        steps, walls = [], []
        for d in dims:
            m, c = Euclidean(d), Hypercube.symmetric(d)
            rng = stream(cfg["seed"], "scaling", sampler, d)
            # all chains start at the corner region to make mixing visible
            x0 = np.full(d, -0.9)
            s, w = convergence_time(m, c, sampler, d, x0, cfg.get("tv_threshold", 0.2), gamma, rng,
                                    cfg.get("n_chains", 4096), cfg.get("check_every", 50),
                                    cfg.get("bins", 20), cfg.get("max_steps", 10_000_000))
            steps.append(s)
            walls.append(w)
        exp_w, r2 = fit_power_law(dims, walls)
        exp_s, _ = fit_power_law(dims, steps)
        res = ScalingResult(sampler, list(dims), steps, walls, exp_w, r2, exp_s, {"gamma": gamma})
        results[sampler] = res
        # step counts are reproducible; wall-clock seconds are not, so they get their own file
        _write_rows(os.path.join(out, f"scaling_{sampler}.csv"), ["d", "steps"],
                    [[d, s] for d, s in zip(dims, steps)])
        res.to_csv(os.path.join(out, f"timings_{sampler}.csv"))
    with open(os.path.join(out, "scaling_fit.json"), "w") as fh:
        fh.write(json.dumps({k: json.loads(v.to_json()) for k, v in results.items()}, indent=2,
                            sort_keys=True))
    if "metropolis" in results and "reflected" in results:
        if not results["metropolis"].exponent < results["reflected"].exponent:
            return EXIT_MISS
    return EXIT_OK


def _train_dataset(cfg, base):
    ds_cfg = cfg["dataset"]
    if "path" in ds_cfg:
        return Dataset.load(os.path.join(base, ds_cfg["path"]))
    d = ds_cfg.get("d", 2)
    c = constraint_from_json(ds_cfg.get("constraint", {"kind": "hypercube", "params": {"d": d}}))
    return synth_bimodal(Euclidean(d), c, d, ds_cfg.get("n", 10_000), cfg["seed"])


def cmd_train(cfg, out, base):
    data = _train_dataset(cfg, base)
    g = {"beta0": 1e-3, "beta1": 1.0, "T": 1.0, "N": 100, **cfg.get("grid", {})}
    grid = TimeGrid(BetaSchedule(g["beta0"], g["beta1"], g["T"]), g["N"])
    tc = TrainConfig(seed=cfg["seed"], **cfg.get("train", {}))
    result = train(data.manifold, data.constraint, data.train, grid, tc)
    data.save(os.path.join(out, "dataset"))
    header = {"train": train_config_dict(tc), "grid": g, "manifold": data.manifold.to_json(),
              "constraint": data.constraint.to_json()}
    save_checkpoint(os.path.join(out, "checkpoint.bin"), result.params, header)
    result.write_loss_csv(os.path.join(out, "loss.csv"))
    return EXIT_OK


def cmd_sample(cfg, out, base):
    path = os.path.join(base, cfg["checkpoint"])
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint {path} not found")
    params, header = load_checkpoint(path)
    m = manifold_from_json(header["manifold"])
    c = constraint_from_json(header["constraint"])
    g = header["grid"]
    grid = TimeGrid(BetaSchedule(g["beta0"], g["beta1"], g["T"]), g["N"])
    x = reverse_generate(m, c, ScoreModel(params, m), grid, cfg.get("n_samples", 10_000),
                         stream(cfg["seed"], "sample"), eps=header["train"]["eps"])
    _write_rows(os.path.join(out, "samples.csv"), ["t"] + [f"coord_{j}" for j in range(x.shape[1])],
                [["0.0"] + [_fmt(v) for v in row] for row in x])
    return EXIT_OK


def cmd_mmd(cfg, out, base):
    a = _read_points(os.path.join(base, cfg["a"]))
    b = _read_points(os.path.join(base, cfg["b"]))
    if a.shape[1] != b.shape[1]:
        raise ConfigError(f"point sets differ in dimension: {a.shape[1]} vs {b.shape[1]}")
    rng = stream(cfg["seed"], "mmd")
    cap = cfg.get("max_points")
    if cap is not None:
        a = a[rng.permutation(len(a))[:cap]] if len(a) > cap else a
        b = b[rng.permutation(len(b))[:cap]] if len(b) > cap else b
    k = cfg.get("kernel", {"lengthscales": [0.2, 0.2], "weights": [0.5, 0.5]})
    kernel = MmdKernel(k["lengthscales"], k.get("weights"))
    value, raw = mmd(a, b, kernel)
    lo, hi = mmd_bootstrap_ci(a, b, kernel, cfg.get("n_boot", 200), rng=rng)
    _write_rows(os.path.join(out, "mmd.csv"), ["mmd", "mmd2_raw", "ci_low", "ci_high", "n_a", "n_b"],
                [[_fmt(value), _fmt(raw), _fmt(lo), _fmt(hi), len(a), len(b)]])
    return EXIT_OK


def cmd_polycheck(cfg, out, base):
    poly = SphericalPolygon.from_csv(os.path.join(base, cfg["polygon"]))
    ll = _read_points(os.path.join(base, cfg["points"]))
    q = lonlat_to_unit(ll[:, 0], ll[:, 1])
    counts, amb = poly.crossing_counts(q, on_ambiguous="flag")
    inside = (counts % 2 == 0) & ~amb
    header = ["lon_deg", "lat_deg", "inside", "ambiguous"]
    mismatch = 0
    oracle = None
    if cfg.get("oracle", False):
        header.append("oracle")
        oracle = polygon_crossings_bruteforce(poly, q) % 2 == 0
        mismatch = int(np.sum((oracle != inside) & ~amb))
    rows = []
    for i in range(len(q)):
        row = [_fmt(ll[i, 0]), _fmt(ll[i, 1]), int(inside[i]), int(amb[i])]
        if oracle is not None:
            row.append(int(oracle[i]))
        rows.append(row)
    _write_rows(os.path.join(out, "membership.csv"), header, rows)
    return EXIT_MISS if mismatch else EXIT_OK


COMMANDS = {"density1d": cmd_density1d, "scaling": cmd_scaling, "train": cmd_train,
            "sample": cmd_sample, "mmd": cmd_mmd, "polycheck": cmd_polycheck}

_NUMERIC = (ChainError, TrainingError, NonConvergenceError, InitialisationError, TuningError,
            GeneratorMismatchError, FloatingPointError, np.linalg.LinAlgError)


def load_config(command, path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {path}: {where}: {exc.message}") from None
    return cfg


def main(argv=None):
    ap = argparse.ArgumentParser(prog="mrbm", description="Constrained Brownian motion experiments.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", default=".")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.command, args.config)
        os.makedirs(args.out, exist_ok=True)
        base = os.path.dirname(os.path.abspath(args.config))
        with np.errstate(over="ignore", under="ignore"):
            code = COMMANDS[args.command](cfg, args.out, base)
    except (ConfigError, ContractError, InputError, KeyError, TypeError, ValueError, OSError) as exc:
        if isinstance(exc, _NUMERIC):
            print(f"mrbm {args.command}: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"mrbm {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC as exc:
        print(f"mrbm {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if code == EXIT_MISS:
        print(f"mrbm {args.command}: acceptance target missed", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
