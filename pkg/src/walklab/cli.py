"""Command-line entry point: experiment orchestration and artifact emission.

`walklab <experiment-id|center|powers|cache> --config FILE --out DIR
[--seed N] [--threads N] [--budget-mb M]`

Every run writes report.json (the fit report), data.csv (measured grid),
plotdata/*.dat (two-column series), and manifest.json (config hash, tool
version, wall clock, produced file hashes).  Identical (config, seed,
version) produce byte-identical data files.  Exit codes: 0 ok, 1 config
error, 2 budget exceeded, 3 an envelope assertion failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .centering import center_decompose, verify_conjugation
from .density import (
    CACHE_HEADER,
    Density,
    DensitySequence,
    PowerCache,
    _read_cache_file,
    power,
)
from .errors import BudgetExceeded, ConfigError, CorruptCache, WalklabError
from .experiments import (
    DEFAULT_GRIDS,
    Grids,
    Thresholds,
    analyticity_scan,
    davies_gaffney_fit,
    dichotomy_battery,
    difference_regularity,
    gradient_form_suite,
    inhomogeneous_suite,
    offdiagonal_suite,
    pointwise_gaussian,
    semigroup_analyticity,
)
from .groups import growth_fit, make_group

EXPERIMENT_IDS = (
    "growth", "analyticity", "gradient_form", "davies_gaffney", "offdiagonal",
    "pointwise_gaussian", "difference_regularity", "semigroup", "dichotomy",
    "inhomogeneous",
)

_CONFIG_FIELDS = {"group", "density", "densities", "repeat", "experiment",
                  "seed", "budgets", "thresholds"}
_EXPERIMENT_FIELDS = {"id", "n_grid", "r_policy", "lambda_grid", "t_grid",
                      "m_grid", "n_max", "growth_n_max", "tol", "h_list",
                      "tnorm_r", "envelope_c", "d_values", "powers",
                      "chain_lambdas", "chain_r_end"}


def _fail_config(msg, field=None):
    raise ConfigError(msg, field=field)


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        _fail_config(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        _fail_config(f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
    if not isinstance(cfg, dict):
        _fail_config("config must be a JSON object")
    unknown = set(cfg) - _CONFIG_FIELDS
    if unknown:
        _fail_config(f"unknown fields {sorted(unknown)}", field="config")
    if "experiment" in cfg:
        unknown = set(cfg["experiment"]) - _EXPERIMENT_FIELDS
        if unknown:
            _fail_config(f"unknown fields {sorted(unknown)}", field="experiment")
    return cfg


def build_density(cfg, ctx) -> Density:
    spec = cfg.get("density")
    if spec is None:
        _fail_config("missing density", field="density")
    if "preset" in spec:
        name = spec["preset"]
        gens = list(ctx.generators)
        others = [g for g in gens if g != ctx.identity]
        if name == "uniform_generators":
            return Density(ctx, {g: 1.0 / len(gens) for g in gens})
        if name == "lazy_generators":
            w = {ctx.identity: 0.5}
            for g in others:
                w[g] = 0.5 / len(others)
            return Density(ctx, w)
        _fail_config(f"unknown preset {name!r}", field="density.preset")
    entries = spec.get("entries")
    if not entries:
        _fail_config("density needs entries or a preset", field="density")
    return Density(ctx, {ctx.decode(e): float(w) for e, w in entries})


def build_sequence(cfg, ctx) -> DensitySequence:
    specs = cfg.get("densities")
    if not specs:
        _fail_config("inhomogeneous runs need densities", field="densities")
    base = [Density(ctx, {ctx.decode(e): float(w) for e, w in s["entries"]})
            for s in specs]
    return DensitySequence(base * int(cfg.get("repeat", 1)))


def _config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _fmt(x):
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def _atomic_write(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _sanitize(obj):
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_sanitize(v) for v in obj.tolist()]
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    if isinstance(obj, float) and (math.isnan(obj) or math.isinf(obj)):
        return repr(obj)
    return obj


def write_report_files(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    files = []

    report_path = os.path.join(out_dir, "report.json")
    _atomic_write(report_path,
                  json.dumps(_sanitize(report.to_json()), indent=2,
                             sort_keys=True) + "\n")
    files.append(report_path)

    cols = report.columns()
    lines = [",".join(cols)]
    for row in report.measured:
        lines.append(",".join(_fmt(row.get(c, "")) for c in cols))
    csv_path = os.path.join(out_dir, "data.csv")
    _atomic_write(csv_path, "\n".join(lines) + "\n")
    files.append(csv_path)

    plot_dir = os.path.join(out_dir, "plotdata")
    os.makedirs(plot_dir, exist_ok=True)
    xkey = next((k for k in ("n", "t", "lambda", "r", "d") if k in cols), None)
    if xkey:
        for col in cols:
            if col == xkey:
                continue
            pts = [(row[xkey], row[col]) for row in report.measured
                   if isinstance(row.get(col), (int, float))
                   and isinstance(row.get(xkey), (int, float))]
            if len(pts) < 2:
                continue
            path = os.path.join(plot_dir, f"{col}.dat")
            _atomic_write(path, "\n".join(
                f"{_fmt(x)} {_fmt(y)}" for x, y in pts) + "\n")
            files.append(path)
    return files


def write_manifest(out_dir, cfg, files, wall, cache_stats=None):
    entries = []
    for path in sorted(files):
        with open(path, "rb") as fh:
            blob = fh.read()
        entries.append({
            "path": os.path.relpath(path, out_dir),
            "sha256": hashlib.sha256(blob).hexdigest(),
            "bytes": len(blob),
        })
    manifest = {
        "header": "walklab-manifest-1",
        "config_sha256": _config_hash(cfg),
        "version": __version__,
        "wall_clock_s": wall,
        "cache": cache_stats or {},
        "files": entries,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    _atomic_write(os.path.join(out_dir, "manifest.json"),
                  json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _grid_kwargs(exp, keys):
    out = {}
    for key in keys:
        if key in exp and exp[key] is not None:
            val = exp[key]
            out[key] = tuple(val) if isinstance(val, list) else val
    return out


def run_experiment(cfg, seed=None, threads=1):
    exp = cfg.get("experiment")
    if not exp or "id" not in exp:
        _fail_config("missing experiment.id", field="experiment")
    exp_id = exp["id"]
    if exp_id not in EXPERIMENT_IDS:
        _fail_config(f"unknown experiment {exp_id!r}", field="experiment.id")
    ctx = make_group(cfg.get("group") or _fail_config("missing group", "group"))
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if threads and threads > 1:
        overrides["threads"] = threads
    grids = Grids(**{**DEFAULT_GRIDS.__dict__, **overrides}) if overrides \
        else DEFAULT_GRIDS
    thresholds = Thresholds(**cfg.get("thresholds", {})) \
        if cfg.get("thresholds") else Thresholds()

    if exp_id == "growth":
        return growth_fit(ctx, int(exp.get("n_max", 12)))
    if exp_id == "inhomogeneous":
        seq = build_sequence(cfg, ctx)
        kw = _grid_kwargs(exp, ("m_grid", "n_grid", "lambda_grid", "r_policy"))
        return inhomogeneous_suite(seq, grids=grids, thresholds=thresholds, **kw)

    k = build_density(cfg, ctx)
    if exp_id == "analyticity":
        kw = _grid_kwargs(exp, ("n_grid", "r_policy"))
        return analyticity_scan(k, grids=grids, thresholds=thresholds, **kw)
    if exp_id == "gradient_form":
        return gradient_form_suite(k, grids=grids, thresholds=thresholds)
    if exp_id == "davies_gaffney":
        kw = _grid_kwargs(exp, ("lambda_grid", "n_grid", "r_policy"))
        return davies_gaffney_fit(k, grids=grids, thresholds=thresholds, **kw)
    if exp_id == "offdiagonal":
        kw = _grid_kwargs(exp, ("n_grid", "envelope_c"))
        return offdiagonal_suite(k, grids=grids, thresholds=thresholds, **kw)
    if exp_id == "pointwise_gaussian":
        kw = _grid_kwargs(exp, ("n_grid", "growth_n_max", "chain_lambdas",
                                "chain_r_end"))
        return pointwise_gaussian(k, grids=grids, thresholds=thresholds, **kw)
    if exp_id == "difference_regularity":
        kw = _grid_kwargs(exp, ("n_grid", "lambda_grid", "r_policy"))
        return difference_regularity(k, grids=grids, thresholds=thresholds, **kw)
    if exp_id == "semigroup":
        kw = _grid_kwargs(exp, ("t_grid", "r_policy"))
        return semigroup_analyticity(k, grids=grids, thresholds=thresholds, **kw)
    if exp_id == "dichotomy":
        kw = _grid_kwargs(exp, ("n_grid", "r_policy", "lambda_grid", "tnorm_r"))
        return dichotomy_battery(k, grids=grids, thresholds=thresholds, **kw)
    raise AssertionError(exp_id)


def _envelope_violated(report):
    soundness = [v for k, v in report.verdicts.items() if k.endswith("_sound")]
    if any(v is False for v in soundness):
        return True
    fitted = report.fitted or {}
    return any(fitted.get(key, 0) for key in ("violations", "chain_violations"))


def cmd_run(args, exp_id=None):
    cfg = load_config(args.config)
    if exp_id is not None:
        cfg.setdefault("experiment", {})["id"] = exp_id
    seed = args.seed if args.seed is not None else cfg.get("seed")
    _apply_budget(args.budget_mb)
    start = time.time()
    report = run_experiment(cfg, seed=seed, threads=args.threads)
    report.context["seed"] = seed
    report.context["version"] = __version__
    files = write_report_files(report, args.out)
    write_manifest(args.out, cfg, files, round(time.time() - start, 3))
    for name, verdict in sorted(report.verdicts.items()):
        print(f"{report.experiment}: {name} = {verdict}")
    if _envelope_violated(report):
        print("envelope assertion failed", file=sys.stderr)
        return 3
    return 0


def cmd_center(args):
    cfg = load_config(args.config)
    ctx = make_group(cfg.get("group") or _fail_config("missing group", "group"))
    k = build_density(cfg, ctx)
    start = time.time()
    res = center_decompose(k)
    err = verify_conjugation(k, res, n_max=int(
        (cfg.get("experiment") or {}).get("n_max", 8)))
    os.makedirs(args.out, exist_ok=True)
    payload = _sanitize({**res.to_json(), "conjugation_error": err})
    path = os.path.join(args.out, "report.json")
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_manifest(args.out, cfg, [path], round(time.time() - start, 3))
    print(f"center: delta = {res.delta:.9f}, "
          f"v = {[float(x) for x in res.v]}, conjugation error {err:.3e}")
    return 0


def cmd_powers(args):
    cfg = load_config(args.config)
    ctx = make_group(cfg.get("group") or _fail_config("missing group", "group"))
    k = build_density(cfg, ctx)
    ns = (cfg.get("experiment") or {}).get("powers", [2, 4, 8, 16, 32])
    cache = PowerCache(os.environ.get("WALKLAB_CACHE_DIR") or
                       os.path.join(args.out, "cache"))
    os.makedirs(args.out, exist_ok=True)
    start = time.time()
    files = []
    for n in ns:
        kn = power(k, int(n), cache=cache)
        path = os.path.join(args.out, f"power_{n}.json")
        _atomic_write(path, json.dumps(_sanitize(kn.to_json()),
                                       sort_keys=True) + "\n")
        files.append(path)
        print(f"powers: n={n} support={len(kn)} mass={kn.mass():.12f}")
    write_manifest(args.out, cfg, files, round(time.time() - start, 3))
    return 0


def cmd_cache(args):
    cache_dir = os.environ.get("WALKLAB_CACHE_DIR")
    if not cache_dir:
        print("cache: WALKLAB_CACHE_DIR is not set", file=sys.stderr)
        return 1
    sub = args.subcommand
    os.makedirs(cache_dir, exist_ok=True)
    entries = sorted(f for f in os.listdir(cache_dir) if f.endswith(".json"))
    if sub == "list":
        if not entries:
            print("cache: empty")
            return 0
        for name in entries:
            obj = _read_cache_file(os.path.join(cache_dir, name))
            tag = f"n={obj['n']}" if "n" in obj else "base"
            print(f"{name}  {tag}")
        return 0
    if sub == "clear":
        for name in entries:
            os.remove(os.path.join(cache_dir, name))
        print(f"cache: removed {len(entries)} entries")
        return 0
    if sub == "verify":
        bases = {}
        powers_by_base = {}
        for name in entries:
            obj = _read_cache_file(os.path.join(cache_dir, name))
            if name.endswith("_base.json"):
                dens = Density.from_json(obj["density"])
                bases[dens.content_hash()] = dens
            elif "n" in obj:
                powers_by_base.setdefault(obj["base_hash"], []).append(obj)
        rng = np.random.default_rng(args.seed or 0)
        checked = 0
        for base_hash, objs in sorted(powers_by_base.items()):
            base = bases.get(base_hash)
            if base is None:
                raise CorruptCache(f"missing base density for {base_hash}")
            obj = objs[int(rng.integers(len(objs)))]
            fresh = power(base, obj["n"], cache=PowerCache())
            stored = Density.from_json(obj["density"], group=base.group)
            worst = max(abs(fresh[g] - stored[g])
                        for g in set(fresh.weights) | set(stored.weights))
            if worst > 1e-12:
                raise CorruptCache(
                    f"power n={obj['n']} deviates by {worst:.3e}")
            checked += 1
            print(f"cache: verified {base_hash} n={obj['n']} (err {worst:.2e})")
        print(f"cache: {checked} densities verified")
        return 0
    print(f"cache: unknown subcommand {sub!r}", file=sys.stderr)
    return 1


def _apply_budget(budget_mb):
    if not budget_mb:
        return
    # ~100 bytes per stored element is the observed dict overhead
    from . import groups

    groups.DEFAULT_BFS_CAP = int(budget_mb * 1e6 / 100)


def build_parser():
    p = argparse.ArgumentParser(
        prog="walklab",
        description="Measure decay laws of random-walk operators on "
                    "finitely generated groups.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--out", default="walklab-out", help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--budget-mb", type=int, default=None)

    run_p = sub.add_parser("run", help="run the experiment named in the config")
    common(run_p)
    for exp_id in EXPERIMENT_IDS:
        ep = sub.add_parser(exp_id, help=f"run the {exp_id} experiment")
        common(ep)
    center_p = sub.add_parser("center", help="centering decomposition")
    common(center_p)
    powers_p = sub.add_parser("powers", help="convolution powers with caching")
    common(powers_p)
    cache_p = sub.add_parser("cache", help="inspect the power cache")
    cache_p.add_argument("subcommand", choices=["list", "clear", "verify"])
    cache_p.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "cache":
            return cmd_cache(args)
        if args.command == "center":
            return cmd_center(args)
        if args.command == "powers":
            return cmd_powers(args)
        exp_id = None if args.command == "run" else args.command
        return cmd_run(args, exp_id=exp_id)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except BudgetExceeded as e:
        print(f"budget exceeded: {e}", file=sys.stderr)
        return 2
    except CorruptCache as e:
        print(f"corrupt cache: {e}", file=sys.stderr)
        return 1
    except WalklabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
