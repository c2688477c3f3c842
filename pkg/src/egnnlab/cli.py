"""Command-line entry point: generate, train, sweep, profile, fit.

Exit codes: 0 ok, 2 configuration error, 3 runtime error, 4 ``--check`` gate failed.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

from . import __version__
from .config import apply_seed, config_hash, load_config, resolve
from .errors import ConfigError
from .graphdata import dataset_hash, serialize_dataset, summarize_dataset

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _stamp(cfg) -> dict:
    return {"config_hash": config_hash(cfg), "version": __version__}


def _load(args, require=True) -> dict:
    if args.config is None:
        if require:
            raise ConfigError("--config is required for this command")
        cfg = resolve({}, require=False)
    else:
        cfg = load_config(args.config, require)
    if args.seed is not None:
        cfg = apply_seed(cfg, args.seed)
    return cfg


def _out_dir(args, cfg) -> str:
    out = args.out or cfg["output"]["dir"]
    os.makedirs(out, exist_ok=True)
    return out


def cmd_generate(args):
    from .scalelab import load_dataset

    cfg = _load(args)
    out = _out_dir(args, cfg)
    graphs = load_dataset(cfg)
    with open(os.path.join(out, "dataset.json"), "wb") as fh:
        fh.write(serialize_dataset(graphs))
    summary = summarize_dataset(graphs)
    info = {"summary": summary.__dict__, "dataset_hash": dataset_hash(graphs), **_stamp(cfg)}
    _write_json(os.path.join(out, "summary.json"), info)
    print(json.dumps(info, sort_keys=True))
    ok = len(graphs) > 0 and all(
        math.isfinite(g.structure.energy) for g in graphs
    )
    return ok, f"generate n_graphs={summary.n_graphs} dataset_hash={info['dataset_hash']}"


def cmd_train(args):
    from .egnn import save_model
    from .memprof import peak_breakdown
    from .scalelab import train

    cfg = _load(args)
    out = _out_dir(args, cfg)
    rec = train(cfg)
    info = {**rec.to_dict(), **_stamp(cfg), "config": cfg}
    _write_json(os.path.join(out, "run.json"), info)
    _write_json(os.path.join(out, "memory.json"),
                {**peak_breakdown(rec.ledger).to_dict(), **_stamp(cfg)})
    save_model(rec.model, os.path.join(out, "model.bin"))
    ok = rec.status == "ok" and math.isfinite(rec.test_loss_total)
    return ok, (f"train status={rec.status} test_loss_total={rec.test_loss_total:.6g} "
                f"config_hash={info['config_hash']}")


def cmd_sweep(args):
    from .scalelab import median_by, read_results, spearman, sweep

    cfg = _load(args)
    out = _out_dir(args, cfg)
    computed = sweep(cfg, out, resume=args.resume, log=lambda m: print(m, flush=True))
    rows = read_results(os.path.join(out, "results.csv"))
    trends = {}
    for key in ("width", "fraction", "params"):
        xs, ys = median_by(rows, key)
        if len(xs) >= 2:
            trends[key] = spearman(xs, ys)
    _write_json(os.path.join(out, "trends.json"), {"spearman": trends, **_stamp(cfg)})
    failed = sum(r.status != "ok" for r in computed)
    ok = failed == 0 and all(v <= 0 for v in trends.values())
    return ok, f"sweep cells={len(rows)} computed={len(computed)} failed={failed}"


def _profile_config(cfg, explicit: bool) -> dict:
    from .memprof import reference_config

    if not explicit:
        return reference_config()
    d = cfg["data"]
    return reference_config(
        width=cfg["model"]["width"], depth=cfg["model"]["depth"],
        n_structures=cfg["train"]["batch_size"], n_atoms=d["atoms_max"], box_size=d["box_size"],
        cutoff=d["cutoff"], workers=cfg["parallel"]["workers"], seed=d["seed"],
    )


def cmd_profile(args):
    from .memprof import compare_modes

    cfg = _load(args, require=False)
    out = _out_dir(args, cfg)
    pcfg = _profile_config(cfg, args.config is not None)
    comp = compare_modes(pcfg)
    with open(os.path.join(out, "modes.csv"), "w", newline="") as fh:
        fh.write(comp.to_csv())
    _write_json(os.path.join(out, "breakdown.json"),
                {**comp.to_dict(), "profile_config": pcfg, **_stamp(cfg)})
    print(comp.to_csv(), end="")
    van, ck, z = (comp.row(m) for m in ("vanilla", "checkpointing", "zero1"))
    ok = (z.peak_bytes < ck.peak_bytes < van.peak_bytes
          and van.wall_s <= ck.wall_s <= z.wall_s)
    return ok, (f"profile ckpt_peak={ck.rel_peak_pct:.1f}% zero1_peak={z.rel_peak_pct:.1f}% "
                f"ckpt_time={ck.rel_time_pct:.1f}% zero1_time={z.rel_time_pct:.1f}%")


def cmd_fit(args):
    from .scalelab import fit_power_law, median_by, read_results

    if not args.results:
        raise ConfigError("fit needs --results <results.csv>")
    cfg = _load(args, require=False)
    out = _out_dir(args, cfg)
    rows = read_results(args.results)
    if not rows:
        raise ConfigError(f"no rows in {args.results}")
    key = {"params": "params", "bytes": "data_bytes"}[args.x_var]
    xs, ys = median_by(rows, key)
    fit = fit_power_law(list(zip(xs, ys)), x_var=args.x_var)
    info = {**fit.to_dict(), "degenerate": fit.degenerate, **_stamp(cfg),
            "source": os.path.basename(args.results)}
    _write_json(os.path.join(out, f"fit_{args.x_var}.json"), info)
    print(json.dumps(fit.to_dict(), sort_keys=True))
    return not fit.degenerate, f"fit x_var={args.x_var} a={fit.a:.6g} b={fit.b:.6g} c={fit.c:.6g}"


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "profile": cmd_profile,
    "fit": cmd_fit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egnnlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", help="output directory (default: output.dir)")
        p.add_argument("--seed", type=int, help="global seed; overrides every nested seed")
        p.add_argument("--check", action="store_true", help="exit 4 if the command's gate fails")
        if name == "sweep":
            p.add_argument("--resume", action="store_true", help="keep finished cells")
        if name == "fit":
            p.add_argument("--results", help="results CSV from a sweep")
            p.add_argument("--x-var", choices=("params", "bytes"), default="params")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        ok, status = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"status=config_error command={args.command}")
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - uniform runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        print(f"status=runtime_error command={args.command}")
        return EXIT_RUNTIME
    if args.check and not ok:
        print(f"status=check_failed {status}")
        return EXIT_CHECK
    print(f"status=ok {status}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
