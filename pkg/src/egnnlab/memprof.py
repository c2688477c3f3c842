"""Categorized memory accounting with a high-water mark.

Memory is accounted, not measured: every tensor the training step keeps
alive is reported to a :class:`MemoryLedger` at a fixed element size.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import AccountingError

CATEGORIES = ("weights", "gradients", "activations", "optimizer", "workspace")
PHASES = ("setup", "forward", "backward", "update", "teardown")
ELEMENT_SIZE = 4

# published reference percentages (peak, time), reported beside measured rows and never gated
REFERENCE_TABLE = {
    "vanilla": (100.0, 100.0),
    "checkpointing": (42.0, 110.0),
    "zero1": (27.0, 133.0),
}


@dataclass
class Event:
    kind: str
    category: str
    nbytes: int
    phase: str
    region: str | None


class MemoryLedger:
    def __init__(self, element_size: int = ELEMENT_SIZE, keep_events: bool = False):
        self.element_size = element_size
        self.keep_events = keep_events
        self.live = dict.fromkeys(CATEGORIES, 0)
        self.category_peak = dict.fromkeys(CATEGORIES, 0)
        self.total = 0
        self.peak = 0
        self.peak_live = dict(self.live)
        self.peak_phase = None
        self.peak_region = None
        self.peak_event = -1
        self.n_events = 0
        self.events: list[Event] = []
        self.phase = "setup"
        self.region = None
        # activation bytes live when each phase was last entered
        self.phase_entry_activations = {}
        self.activations_released_in_phase = 0
        self.peak_released_in_phase = 0

    def set_phase(self, phase: str):
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        self.phase = phase
        self.region = None
        self.phase_entry_activations[phase] = self.live["activations"]
        self.activations_released_in_phase = 0

    def nbytes(self, n_elements: int) -> int:
        return int(n_elements) * self.element_size

    def alloc(self, category, nbytes, phase=None, region=None):
        record_event(self, "alloc", category, nbytes, phase, region)

    def free(self, category, nbytes, phase=None, region=None):
        record_event(self, "free", category, nbytes, phase, region)

    def write_events(self, fh):
        for ev in self.events:
            fh.write(json.dumps(ev.__dict__) + "\n")


def record_event(ledger: MemoryLedger, kind, category, nbytes, phase=None, region=None):
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}")
    nbytes = int(nbytes)
    if nbytes <= 0:
        if nbytes == 0:
            return
        raise AccountingError("event size must be positive")
    phase = phase or ledger.phase
    region = region if region is not None else ledger.region
    if kind == "alloc":
        ledger.live[category] += nbytes
        ledger.total += nbytes
        ledger.category_peak[category] = max(ledger.category_peak[category], ledger.live[category])
        if ledger.total > ledger.peak:
            ledger.peak = ledger.total
            ledger.peak_live = dict(ledger.live)
            ledger.peak_phase = phase
            ledger.peak_region = region
            ledger.peak_event = ledger.n_events
            ledger.peak_released_in_phase = ledger.activations_released_in_phase
    elif kind == "free":
        if nbytes > ledger.live[category]:
            raise AccountingError(
                f"free of {nbytes} B exceeds {ledger.live[category]} B live {category}"
            )
        ledger.live[category] -= nbytes
        ledger.total -= nbytes
        if category == "activations":
            ledger.activations_released_in_phase += nbytes
    else:
        raise ValueError(f"unknown event kind {kind!r}")
    ledger.n_events += 1
    if ledger.keep_events:
        ledger.events.append(Event(kind, category, nbytes, phase, region))


@dataclass
class PeakBreakdown:
    total: int
    by_category: dict
    phase: str
    region: str | None
    # fraction of the phase-entry activations already released when the peak hit
    released_fraction: float

    @property
    def largest_category(self) -> str:
        return max(self.by_category, key=self.by_category.get)

    @property
    def at_phase_start(self) -> bool:
        """Peak reached before the phase released a tenth of its entry activations."""
        return self.released_fraction < 0.1

    def fractions(self) -> dict:
        return {k: v / self.total if self.total else 0.0 for k, v in self.by_category.items()}

    def to_dict(self) -> dict:
        return {
            "peak_bytes": self.total,
            "phase": self.phase,
            "region": self.region,
            "at_phase_start": self.at_phase_start,
            "released_fraction": self.released_fraction,
            "by_category": dict(self.by_category),
            "fractions": self.fractions(),
        }


def peak_breakdown(ledger: MemoryLedger) -> PeakBreakdown:
    entry = ledger.phase_entry_activations.get(ledger.peak_phase, 0)
    released = ledger.peak_released_in_phase / entry if entry else 0.0
    return PeakBreakdown(
        total=ledger.peak,
        by_category=dict(ledger.peak_live),
        phase=ledger.peak_phase,
        region=ledger.peak_region,
        released_fraction=released,
    )


def merge_ledgers(ledgers) -> dict:
    """Group report: per-category peaks and global peaks summed over workers."""
    out = dict.fromkeys(CATEGORIES, 0)
    for led in ledgers:
        for k in CATEGORIES:
            out[k] += led.category_peak[k]
    out["peak"] = sum(led.peak for led in ledgers)
    return out


@dataclass
class ModeRow:
    mode: str
    peak_bytes: int
    wall_s: float
    rel_peak_pct: float
    rel_time_pct: float
    breakdown: PeakBreakdown


@dataclass
class ModeComparison:
    rows: list = field(default_factory=list)

    def row(self, mode) -> ModeRow:
        return next(r for r in self.rows if r.mode == mode)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "rel_peak_pct", "rel_time_pct"])
        for r in self.rows:
            w.writerow([r.mode, f"{r.rel_peak_pct:.2f}", f"{r.rel_time_pct:.2f}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "rows": [
                {
                    "mode": r.mode,
                    "peak_bytes": r.peak_bytes,
                    "wall_s": r.wall_s,
                    "rel_peak_pct": r.rel_peak_pct,
                    "rel_time_pct": r.rel_time_pct,
                    "reference_rel_peak_pct": REFERENCE_TABLE[r.mode][0],
                    "reference_rel_time_pct": REFERENCE_TABLE[r.mode][1],
                    "breakdown": r.breakdown.to_dict(),
                }
                for r in self.rows
            ],
            "element_size": ELEMENT_SIZE,
        }


# --- mode comparison on a fixed configuration ---------------------------------

REFERENCE_CONFIG = {
    "width": 64,
    "depth": 6,
    "n_structures": 32,
    "n_atoms": 16,
    "box_size": 3.0,
    "cutoff": 2.5,
    "workers": 4,
    "seed": 0,
    "repeats": 3,
}

MODES = (
    ("vanilla", False, False),
    ("checkpointing", True, False),
    ("zero1", True, True),
)


def reference_config(**overrides) -> dict:
    cfg = dict(REFERENCE_CONFIG)
    unknown = set(overrides) - set(cfg)
    if unknown:
        raise ValueError(f"unknown reference-config keys {sorted(unknown)}")
    cfg.update(overrides)
    return cfg


def reference_batches(config: dict):
    """Equal per-worker shards of the synthetic reference batch."""
    from .graphdata import batch_graphs, generate_synthetic_dataset

    n, N = config["n_structures"], config["workers"]
    graphs = generate_synthetic_dataset(
        n, config["n_atoms"], config["n_atoms"], config["box_size"],
        cutoff=config["cutoff"], seed=config["seed"],
    )
    bounds = np.linspace(0, n, N + 1).round().astype(int)
    return [batch_graphs(graphs[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def profile_step(model, batches, zero1: bool, plan, repeats: int = 1):
    """One instrumented data-parallel step per repeat; (worker-0 ledger, median wall s)."""
    from .optim import data_parallel_step, make_group

    times, ledger = [], None
    for _ in range(max(1, repeats)):
        group = make_group(model, len(batches), zero1, track_memory=True)
        t0 = time.perf_counter()
        data_parallel_step(group, batches, plan=plan)
        times.append(time.perf_counter() - t0)
        group.close()
        ledger = group.workers[0].ledger
    return ledger, float(np.median(times))


def compare_modes(config: dict | None = None, model=None, batches=None) -> ModeComparison:
    """Peak memory and wall time of vanilla / +checkpointing / +zero1 relative to vanilla."""
    from .egnn import EgnnConfig, init_model
    from .tape import CheckpointPlan

    config = reference_config(**(config or {}))
    if model is None:
        model = init_model(EgnnConfig(config["depth"], config["width"], seed=config["seed"]))
    if batches is None:
        batches = reference_batches(config)
    plan = CheckpointPlan.default(model.config.depth)
    measured = []
    for mode, ckpt, zero1 in MODES:
        ledger, wall = profile_step(model, batches, zero1, plan if ckpt else None, config["repeats"])
        measured.append((mode, ledger, wall))
    base_peak, base_wall = measured[0][1].peak, measured[0][2]
    out = ModeComparison()
    for mode, ledger, wall in measured:
        out.rows.append(
            ModeRow(mode, ledger.peak, wall, 100.0 * ledger.peak / base_peak,
                    100.0 * wall / base_wall, peak_breakdown(ledger))
        )
    return out
