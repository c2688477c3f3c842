"""Training runs, resumable sweeps and power-law fits of test loss."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import __version__
from .config import config_hash, resolve
from .egnn import EgnnConfig, EgnnModel, count_params, forward, loss_terms, init_model
from .errors import ConfigError, InputError, ReportError
from .graphdata import (
    batch_graphs,
    generate_synthetic_dataset,
    make_graph,
    parse_extxyz,
    split_indices,
    summarize_dataset,
)
from .optim import data_parallel_step, make_group
from .rng import STREAM_SHUFFLE, stream
from .tape import CheckpointPlan

RESULT_COLUMNS = [
    "config_hash", "width", "depth", "params", "data_graphs", "data_bytes", "fraction", "seed",
    "epochs", "test_loss_energy", "test_loss_force", "test_loss_total", "peak_mem_bytes", "wall_s",
]


# --- data -----------------------------------------------------------------------


def load_dataset(cfg: dict):
    d = cfg["data"]
    if d["source"] == "synthetic":
        return generate_synthetic_dataset(
            d["n_structures"], d["atoms_min"], d["atoms_max"], d["box_size"],
            min_separation=d["min_separation"], cutoff=d["cutoff"],
            epsilon=d["epsilon"], sigma=d["sigma"], seed=d["seed"],
            n_species=cfg["model"]["n_species"],
        )
    try:
        with open(d["path"]) as fh:
            structures = parse_extxyz(fh.read())
    except FileNotFoundError as exc:
        raise InputError(f"dataset file not found: {d['path']}") from exc
    return [make_graph(s, d["cutoff"]) for s in structures]


def checkpoint_plan(cfg: dict) -> CheckpointPlan | None:
    depth, ck = cfg["model"]["depth"], cfg["parallel"]["checkpoint_segments"]
    if ck == "auto":
        return CheckpointPlan.default(depth)
    if ck <= 1:
        return None
    return CheckpointPlan(depth, math.ceil(depth / ck))


def frozen_mask(model: EgnnModel, prefixes) -> np.ndarray | None:
    if not prefixes:
        return None
    mask = np.zeros(model.n_params, dtype=bool)
    hit = set()
    for name in model.layout:
        for p in prefixes:
            if name == p or name.startswith(p + "."):
                mask[model.slice_of(name)] = True
                hit.add(p)
    missing = set(prefixes) - hit
    if missing:
        raise ConfigError(f"train.freeze matches no parameters: {sorted(missing)}")
    return mask


def evaluate(model: EgnnModel, graphs, force_weight=1.0, dtype=np.float64, chunk=64):
    """Exact dataset-level loss terms (energy, force, total), evaluated in chunks."""
    if not graphs:
        raise InputError("cannot evaluate on an empty set")
    e_sum = f_sum = 0.0
    n_graphs = n_comp = 0
    for a in range(0, len(graphs), chunk):
        batch = batch_graphs(graphs[a : a + chunk])
        _, e, f = loss_terms(forward(model, batch, dtype), batch, force_weight, dtype)
        e_sum += e * batch.n_graphs
        f_sum += f * batch.forces.size
        n_graphs += batch.n_graphs
        n_comp += batch.forces.size
    e, f = e_sum / n_graphs, f_sum / n_comp
    return e, f, e + force_weight * f


# --- single runs ----------------------------------------------------------------


@dataclass
class RunRecord:
    config_hash: str
    params: int
    depth: int
    width: int
    data_graphs: int
    data_bytes: int
    fraction: float
    epochs: int
    seed: int
    test_loss_energy: float
    test_loss_force: float
    test_loss_total: float
    peak_mem_bytes: int
    wall_s: float
    trace: list = field(default_factory=list)
    train_loss_initial: float = math.nan
    train_loss_final: float = math.nan
    test_index_hash: str = ""
    status: str = "ok"
    failed_step: int | None = None
    ledger: object = field(default=None, repr=False, compare=False)
    model: object = field(default=None, repr=False, compare=False)

    def csv_row(self) -> list[str]:
        return [_fmt(getattr(self, k)) for k in RESULT_COLUMNS]

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("ledger")
        out.pop("model")
        out["version"] = __version__
        return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _worker_shards(graphs, n_workers):
    bounds = np.linspace(0, len(graphs), n_workers + 1).round().astype(int)
    return [graphs[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def train(cfg: dict, dataset=None, fraction: float | None = None) -> RunRecord:
    """Train one model; ``fraction`` selects the nested training subset
    (defaults to the largest in ``data.fractions``)."""
    cfg = resolve(cfg, require=False)
    t0 = time.perf_counter()
    d, m, t, p = cfg["data"], cfg["model"], cfg["train"], cfg["parallel"]
    if dataset is None:
        dataset = load_dataset(cfg)
    fractions = sorted(d["fractions"])
    fraction = fractions[-1] if fraction is None else fraction
    if fraction not in fractions:
        raise ConfigError(f"fraction {fraction} is not one of data.fractions")
    train_idx, test_idx = split_indices(len(dataset), d["test_fraction"], fractions, d["seed"])
    train_set = [dataset[i] for i in train_idx[fractions.index(fraction)]]
    test_set = [dataset[i] for i in test_idx]
    dtype = np.dtype(t["precision"])
    lam = t["force_weight"]

    model = init_model(EgnnConfig(m["depth"], m["width"], m["n_species"], m["seed"]))
    group = make_group(model, p["workers"], p["zero1"], t["lr"], t["beta1"], t["beta2"], t["eps"],
                       track_memory=True)
    group.frozen = frozen_mask(model, t["freeze"])
    plan = checkpoint_plan(cfg)
    summary = summarize_dataset(train_set)
    record = RunRecord(
        config_hash=config_hash(cfg), params=count_params(model.config), depth=m["depth"],
        width=m["width"], data_graphs=summary.n_graphs, data_bytes=summary.size_bytes,
        fraction=float(fraction), epochs=t["epochs"], seed=m["seed"],
        test_loss_energy=math.nan, test_loss_force=math.nan, test_loss_total=math.nan,
        peak_mem_bytes=0, wall_s=0.0,
        test_index_hash=hashlib.sha256(np.sort(test_idx).astype("<i8").tobytes()).hexdigest()[:16],
    )
    record.train_loss_initial = evaluate(model, train_set, lam, dtype)[2]

    B, step = t["batch_size"], 0
    for epoch in range(t["epochs"]):
        order = stream(m["seed"], STREAM_SHUFFLE + epoch).permutation(len(train_set))
        losses = []
        for a in range(0, len(order), B):
            chunk = [train_set[i] for i in order[a : a + B]]
            if len(chunk) < p["workers"]:
                continue  # a tail smaller than the worker count cannot be sharded
            shards = [batch_graphs(s) for s in _worker_shards(chunk, p["workers"])]
            data_parallel_step(group, shards, force_weight=lam, plan=plan, dtype=dtype)
            step_loss = float(np.mean([terms[0] for terms in group.history[-1]]))
            group.history.clear()
            if not math.isfinite(step_loss) or not np.all(np.isfinite(group.workers[0].theta)):
                record.status, record.failed_step = "failed", step
                break
            losses.append(step_loss)
            step += 1
        if record.status == "failed":
            break
        record.trace.append({"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else math.nan})
    group.close()

    final = group.model(0)
    if record.status == "ok":
        record.train_loss_final = evaluate(final, train_set, lam, dtype)[2]
        e, f, tot = evaluate(final, test_set, lam, dtype)
        record.test_loss_energy, record.test_loss_force, record.test_loss_total = e, f, tot
        if not all(map(math.isfinite, (e, f, tot))):
            record.status, record.failed_step = "failed", step
    record.peak_mem_bytes = max(w.ledger.peak for w in group.workers)
    record.ledger = group.workers[0].ledger
    record.model = EgnnModel(final.config, final.theta.copy())
    record.wall_s = time.perf_counter() - t0
    return record


# --- sweeps ---------------------------------------------------------------------


def sweep_cells(cfg: dict) -> list[dict]:
    """Resolved per-cell configs in grid order (width, depth, fraction, seed)."""
    cells = []
    for w in cfg["sweep"]["widths"]:
        for dpt in cfg["sweep"]["depths"]:
            for frac in sorted(cfg["data"]["fractions"]):
                for seed in cfg["sweep"]["seeds"]:
                    cell = copy.deepcopy(cfg)
                    cell["model"].update(width=w, depth=dpt, seed=seed)
                    cell["data"]["fractions"] = [frac]
                    cell["sweep"] = {"widths": [w], "depths": [dpt], "seeds": [seed]}
                    cells.append(cell)
    return cells


def read_results(path) -> list[dict]:
    if not os.path.exists(path):
        return []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        if list(row) != RESULT_COLUMNS:
            raise InputError(f"{path}: unexpected columns")
    return rows


def write_results(path, rows: list[list[str]]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    w.writerows(rows)
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def sweep(cfg: dict, out_dir, dataset=None, resume: bool = True, cells=None, log=None) -> list[RunRecord]:
    """Run every grid cell not already present in ``out_dir/results.csv``.

    Each finished cell is appended immediately; failed cells go to
    ``failures.jsonl`` and are not retried on resume.  At the end the CSV is
    rewritten in grid order.  Returns the records computed in this call.
    """
    cfg = resolve(cfg, require=False)
    cells = sweep_cells(cfg) if cells is None else cells
    if not cells:
        raise ConfigError("empty sweep grid")
    os.makedirs(out_dir, exist_ok=True)
    results_path = os.path.join(out_dir, "results.csv")
    failures_path = os.path.join(out_dir, "failures.jsonl")
    done = {}
    if resume:
        for row in read_results(results_path):
            done[row["config_hash"]] = [row[k] for k in RESULT_COLUMNS]
        if os.path.exists(failures_path):
            with open(failures_path) as fh:
                for line in fh:
                    done.setdefault(json.loads(line)["config_hash"], None)
    else:
        for path in (results_path, failures_path):
            if os.path.exists(path):
                os.remove(path)
    if not os.path.exists(results_path):
        write_results(results_path, [])

    computed = []
    for cell in cells:
        h = config_hash(cell)
        if h in done:
            continue
        if dataset is None:
            dataset = load_dataset(cfg)
        rec = train(cell, dataset)
        computed.append(rec)
        if rec.status == "ok":
            done[h] = rec.csv_row()
            with open(results_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(done[h])
        else:
            done[h] = None
            with open(failures_path, "a") as fh:
                fh.write(json.dumps({"config_hash": h, "failed_step": rec.failed_step,
                                     "width": rec.width, "depth": rec.depth,
                                     "fraction": rec.fraction, "seed": rec.seed}) + "\n")
        if log is not None:
            log(f"cell {h} width={rec.width} depth={rec.depth} fraction={rec.fraction} "
                f"seed={rec.seed} status={rec.status} test_loss={rec.test_loss_total:.6g}")
    ordered = [done[config_hash(c)] for c in cells if done.get(config_hash(c)) is not None]
    write_results(results_path, ordered)
    with open(os.path.join(out_dir, "sweep.json"), "w") as fh:
        json.dump({"config_hash": config_hash(cfg), "version": __version__, "config": cfg,
                   "n_cells": len(cells)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return computed


# --- trends and fits --------------------------------------------------------------


def median_by(rows, key: str, value: str = "test_loss_total"):
    """Sorted distinct ``key`` values and the median ``value`` at each."""
    groups = {}
    for r in rows:
        r = r if isinstance(r, dict) else asdict_light(r)
        groups.setdefault(float(r[key]), []).append(float(r[value]))
    xs = sorted(groups)
    return np.array(xs), np.array([np.median(groups[x]) for x in xs])


def asdict_light(rec) -> dict:
    return {k: getattr(rec, k) for k in RESULT_COLUMNS}


def spearman(x, y) -> float:
    """Rank correlation; a constant series has no trend and returns 0."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    return float(stats.spearmanr(x, y)[0])


@dataclass
class PowerLawFit:
    a: float
    b: float
    c: float
    rss: float
    n_points: int
    x_var: str = "params"
    degenerate: bool = False

    def predict(self, x):
        return self.a * np.asarray(x, float) ** (-self.b) + self.c

    def to_dict(self) -> dict:
        return {"x_var": self.x_var, "a": self.a, "b": self.b, "c": self.c,
                "rss": self.rss, "n_points": self.n_points}


def _loglinear(lx, L, c):
    """(a, b, rss) of the regression of log(L - c) on log x."""
    ly = np.log(L - c)
    slope, intercept = np.polyfit(lx, ly, 1)
    a, b = math.exp(intercept), -float(slope)
    rss = float(np.sum((L - (a * np.exp(-b * lx) + c)) ** 2))
    return a, b, rss


def fit_power_law(points, x_var: str = "params", tol: float = 1e-15) -> PowerLawFit:
    """Least-squares ``L = a * x**(-b) + c`` with ``c`` searched on [0, min L)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 4:
        raise InputError("need at least 4 (x, L) points")
    x, L = pts[:, 0], pts[:, 1]
    if np.any(x <= 0) or np.any(L <= 0):
        raise InputError("x and L must be positive")
    if len(np.unique(x)) != len(x):
        raise InputError("x values must be distinct")
    n = len(pts)
    lx = np.log(x)
    if np.ptp(L) == 0:
        return PowerLawFit(0.0, 0.0, float(L.mean()), 0.0, n, x_var, degenerate=True)

    hi = float(L.min())

    def rss(c):
        return _loglinear(lx, L, c)[2]

    # coarse scan locates the basin, golden-section refines it
    grid = hi * (1.0 - np.geomspace(1.0, 1e-12, 200))
    vals = [rss(c) for c in grid]
    k = int(np.argmin(vals))
    lo_c, hi_c = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    g = (math.sqrt(5) - 1) / 2
    c1, c2 = hi_c - g * (hi_c - lo_c), lo_c + g * (hi_c - lo_c)
    f1, f2 = rss(c1), rss(c2)
    while hi_c - lo_c > tol * max(1.0, hi):
        if f1 <= f2:
            hi_c, c2, f2 = c2, c1, f1
            c1 = hi_c - g * (hi_c - lo_c)
            f1 = rss(c1)
        else:
            lo_c, c1, f1 = c1, c2, f2
            c2 = lo_c + g * (hi_c - lo_c)
            f2 = rss(c2)
    candidates = [0.0, grid[k], c1, c2]
    best = min(candidates, key=rss)
    a, b, r = _loglinear(lx, L, best)
    if b < 0:
        # loss grows with x: no decaying power law describes it
        return PowerLawFit(0.0, 0.0, float(L.mean()), float(np.sum((L - L.mean()) ** 2)), n, x_var, True)
    return PowerLawFit(a, b, float(best), r, n, x_var)


def depth_vs_width_report(depth_series, width_series) -> list[dict]:
    """Pair depth-scaled and width-scaled runs by nearest log parameter count.

    Each series is a sequence of RunRecords or dicts with ``params``,
    ``depth``, ``width`` and ``test_loss_total``.  Pairing is greedy and
    one-to-one, closest pairs first.  ``delta`` = depth loss - width loss.
    """
    ds = [r if isinstance(r, dict) else asdict_light(r) for r in depth_series]
    ws = [r if isinstance(r, dict) else asdict_light(r) for r in width_series]
    if not ds or not ws:
        raise ReportError("both a depth series and a width series are required")
    dist = [
        (abs(math.log(float(d["params"])) - math.log(float(w["params"]))), i, j)
        for i, d in enumerate(ds)
        for j, w in enumerate(ws)
    ]
    used_i, used_j, rows = set(), set(), []
    for _, i, j in sorted(dist):
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        d, w = ds[i], ws[j]
        rows.append({
            "depth_params": int(d["params"]), "depth": int(d["depth"]), "depth_width": int(d["width"]),
            "width_params": int(w["params"]), "width": int(w["width"]), "width_depth": int(w["depth"]),
            "depth_loss": float(d["test_loss_total"]), "width_loss": float(w["test_loss_total"]),
            "delta": float(d["test_loss_total"]) - float(w["test_loss_total"]),
        })
    rows.sort(key=lambda r: r["depth_params"])
    return rows
