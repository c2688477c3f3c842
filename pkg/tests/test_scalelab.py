import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egnnlab import scalelab
from egnnlab.config import config_hash, resolve
from egnnlab.egnn import EgnnConfig, count_params
from egnnlab.errors import ConfigError, InputError, ReportError
from egnnlab.graphdata import generate_synthetic_dataset, write_extxyz
from egnnlab.scalelab import (
    RESULT_COLUMNS,
    depth_vs_width_report,
    fit_power_law,
    read_results,
    spearman,
    sweep,
    sweep_cells,
    train,
)

X5 = np.array([1e2, 1e3, 1e4, 1e5, 1e6])


def tiny_config(**sections):
    raw = {
        "data": {"n_structures": 24, "atoms_min": 3, "atoms_max": 6, "box_size": 2.5,
                 "test_fraction": 0.25, "fractions": [0.5, 1.0]},
        "model": {"depth": 1, "width": 4},
        "train": {"epochs": 2, "batch_size": 6},
        "sweep": {"widths": [4], "depths": [1], "seeds": [0]},
    }
    for k, v in sections.items():
        raw.setdefault(k, {}).update(v)
    return resolve(raw)


# --- fits ---


def test_fit_recovers_closed_form():
    fit = fit_power_law(np.c_[X5, 2 * X5 ** -0.5 + 0.1])
    assert abs(fit.a - 2) < 1e-3 and abs(fit.b - 0.5) < 1e-3 and abs(fit.c - 0.1) < 1e-3
    assert fit.rss >= 0 and not fit.degenerate


def test_fit_exact_log_linear():
    fit = fit_power_law(np.c_[X5, 1 / X5])
    assert abs(fit.b - 1.0) < 1e-6 and fit.c == pytest.approx(0.0, abs=1e-9)


def test_fit_constant_is_degenerate():
    fit = fit_power_law(np.c_[X5, np.full(5, 0.3)])
    assert fit.degenerate and fit.b == 0.0 and fit.c == pytest.approx(0.3)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.5, 5.0), st.floats(0.1, 1.0), st.floats(0.0, 0.5))
def test_fit_reconstruction_is_stable(a, b, c):
    fit = fit_power_law(np.c_[X5, a * X5 ** -b + c])
    again = fit_power_law(np.c_[X5, fit.predict(X5)])
    assert again.a == pytest.approx(fit.a, rel=1e-9, abs=1e-9)
    assert again.b == pytest.approx(fit.b, rel=1e-9, abs=1e-9)
    assert again.c == pytest.approx(fit.c, rel=1e-9, abs=1e-9)


def test_fit_input_checks():
    with pytest.raises(InputError):
        fit_power_law([(1, 1), (2, 1), (3, 1)])
    with pytest.raises(InputError):
        fit_power_law([(1, 1), (2, 1), (3, 1), (0, 1)])
    with pytest.raises(InputError):
        fit_power_law([(1, 1), (2, 1), (2, 0.5), (4, 1)])


def test_fit_json_fields():
    d = fit_power_law(np.c_[X5, 1 / X5], x_var="bytes").to_dict()
    assert set(d) == {"x_var", "a", "b", "c", "rss", "n_points"} and d["x_var"] == "bytes"


# --- reports and trends ---


def rec(params, loss, depth=3, width=8):
    return {"params": params, "test_loss_total": loss, "depth": depth, "width": width}


def test_report_identical_series():
    series = [rec(100, 1.0), rec(1000, 0.5), rec(10000, 0.25)]
    rows = depth_vs_width_report(series, series)
    assert len(rows) == 3 and all(r["delta"] == 0.0 for r in rows)


def test_report_two_point_toy():
    rows = depth_vs_width_report([rec(500, 0.4, depth=5)], [rec(480, 0.3, width=16)])
    assert len(rows) == 1 and rows[0]["delta"] == pytest.approx(0.1)


def test_report_nearest_pairing_and_errors():
    rows = depth_vs_width_report([rec(100, 1), rec(1000, 1)], [rec(900, 2), rec(120, 3)])
    assert [(r["depth_params"], r["width_params"]) for r in rows] == [(100, 120), (1000, 900)]
    with pytest.raises(ReportError):
        depth_vs_width_report([], [rec(1, 1)])


def test_spearman():
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3], [1, 1, 1]) == 0.0


# --- training ---


def test_train_record_contract():
    cfg = tiny_config()
    r = train(cfg)
    assert r.status == "ok" and r.params == count_params(EgnnConfig(1, 4))
    assert r.data_graphs == 18 and r.fraction == 1.0 and len(r.trace) == 2
    for v in (r.test_loss_energy, r.test_loss_force, r.test_loss_total):
        assert math.isfinite(v) and v >= 0
    assert r.peak_mem_bytes == r.ledger.peak > 0
    assert r.config_hash == config_hash(cfg)


def test_train_is_deterministic():
    a, b = train(tiny_config()), train(tiny_config())
    assert a.trace == b.trace and a.test_loss_total == b.test_loss_total
    assert a.model.theta.tobytes() == b.model.theta.tobytes()


def test_held_out_set_shared_across_cells():
    cfg = tiny_config()
    hashes = {train(cfg, fraction=0.5).test_index_hash, train(cfg).test_index_hash,
              train(tiny_config(model={"width": 6})).test_index_hash}
    assert len(hashes) == 1


def test_workers_and_checkpointing_do_not_change_training():
    base = train(tiny_config(model={"depth": 2}))
    other = train(tiny_config(model={"depth": 2}, parallel={"workers": 1, "checkpoint_segments": "auto"}))
    zero1 = train(tiny_config(model={"depth": 2}, parallel={"workers": 2, "zero1": True}))
    rep = train(tiny_config(model={"depth": 2}, parallel={"workers": 2}))
    assert base.model.theta.tobytes() == other.model.theta.tobytes()
    assert zero1.model.theta.tobytes() == rep.model.theta.tobytes()


def test_energy_only_training_with_frozen_force_path():
    L = 2
    frozen = ["embed", "layer0", "layer1.edge", "layer1.coord", "force"]
    cfg = tiny_config(model={"depth": L}, train={"force_weight": 0.0, "freeze": frozen, "epochs": 5, "lr": 1e-2})
    r = train(cfg)
    init = scalelab.init_model(EgnnConfig(L, 4))
    ds = scalelab.load_dataset(cfg)
    train_idx, _ = scalelab.split_indices(len(ds), 0.25, [0.5, 1.0], 0)
    graphs = [ds[i] for i in train_idx[1]]
    e0, f0, _ = scalelab.evaluate(init, graphs, 0.0)
    e1, f1, _ = scalelab.evaluate(r.model, graphs, 0.0)
    assert e1 < e0
    assert f1 == f0


def test_freeze_unknown_prefix():
    with pytest.raises(ConfigError):
        train(tiny_config(train={"freeze": ["nonexistent"]}))


def test_divergence_marks_run_failed(monkeypatch):
    real = scalelab.data_parallel_step

    def poisoned(group, *a, **k):
        real(group, *a, **k)
        for w in group.workers:
            w.theta[:] = np.nan
        group.history[-1] = [(float("nan"),) * 3 for _ in group.workers]

    monkeypatch.setattr(scalelab, "data_parallel_step", poisoned)
    r = train(tiny_config())
    assert r.status == "failed" and r.failed_step == 0


def test_extxyz_source(tmp_path):
    graphs = generate_synthetic_dataset(12, 2, 4, 2.0, seed=3)
    path = tmp_path / "d.xyz"
    path.write_text(write_extxyz([g.structure for g in graphs]))
    cfg = tiny_config(data={"source": "extxyz", "path": str(path), "n_structures": 12})
    r = train(cfg)
    assert r.status == "ok" and r.data_graphs == 9


# --- sweeps ---


def test_one_cell_sweep_is_a_train_run(tmp_path):
    cfg = tiny_config(data={"fractions": [1.0]})
    recs = sweep(cfg, tmp_path)
    rows = read_results(tmp_path / "results.csv")
    assert len(recs) == len(rows) == 1
    direct = train(sweep_cells(cfg)[0])
    assert rows[0]["test_loss_total"] == repr(direct.test_loss_total)
    assert list(rows[0]) == RESULT_COLUMNS


def test_width_sweep_param_counts(tmp_path):
    cfg = tiny_config(data={"fractions": [1.0]}, train={"epochs": 1},
                      sweep={"widths": [8, 16, 32], "depths": [3]})
    sweep(cfg, tmp_path)
    params = [int(r["params"]) for r in read_results(tmp_path / "results.csv")]
    assert len(params) == 3 and params[0] < params[1] < params[2]


def strip_wall(path):
    lines = open(path).read().splitlines()
    return [line.rsplit(",", 1)[0] for line in lines]


def test_sweep_resume(tmp_path):
    cfg = tiny_config(train={"epochs": 1}, sweep={"widths": [2, 3], "seeds": [0, 1]})
    cells = sweep_cells(cfg)
    assert len(cells) == 8
    full, part = tmp_path / "full", tmp_path / "part"
    sweep(cfg, full)
    sweep(cfg, part, cells=cells[:3])
    computed = sweep(cfg, part, resume=True)
    assert len(computed) == 5
    assert strip_wall(full / "results.csv") == strip_wall(part / "results.csv")
    before = (part / "results.csv").read_bytes()
    assert sweep(cfg, part, resume=True) == []
    assert (part / "results.csv").read_bytes() == before


def test_sweep_records_failures_and_continues(tmp_path, monkeypatch):
    cfg = tiny_config(train={"epochs": 1}, sweep={"widths": [2, 3]}, data={"fractions": [1.0]})
    real = scalelab.train

    def flaky(cell, dataset=None, fraction=None):
        r = real(cell, dataset, fraction)
        if cell["model"]["width"] == 2:
            r.status, r.failed_step = "failed", 0
        return r

    monkeypatch.setattr(scalelab, "train", flaky)
    recs = sweep(cfg, tmp_path)
    assert [r.status for r in recs] == ["failed", "ok"]
    assert len(read_results(tmp_path / "results.csv")) == 1
    assert os.path.exists(tmp_path / "failures.jsonl")
    assert sweep(cfg, tmp_path, resume=True) == []


def test_empty_grid_rejected(tmp_path):
    with pytest.raises(ConfigError):
        sweep(tiny_config(), tmp_path, cells=[])
