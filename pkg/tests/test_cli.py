import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from egnnlab.cli import main
from egnnlab.config import apply_seed, resolve
from egnnlab.egnn import load_model
from egnnlab.rng import derive_seed
from egnnlab.scalelab import RESULT_COLUMNS

SMALL = {
    "data": {"n_structures": 16, "atoms_min": 3, "atoms_max": 5, "box_size": 2.5,
             "test_fraction": 0.25, "fractions": [1.0]},
    "model": {"depth": 1, "width": 4},
    "train": {"epochs": 1, "batch_size": 4},
    "sweep": {"widths": [4], "depths": [1], "seeds": [0]},
}


def write_config(tmp_path, cfg=None, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(SMALL if cfg is None else cfg))
    return str(path)


def last_status(capsys):
    return capsys.readouterr().out.strip().splitlines()[-1]


def test_generate_is_reproducible(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    capsys.readouterr()
    sa = json.loads((tmp_path / "a" / "summary.json").read_text())
    sb = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert sa == sb and len(sa["config_hash"]) == 16 and sa["version"]
    assert (tmp_path / "a" / "dataset.json").read_bytes() == (tmp_path / "b" / "dataset.json").read_bytes()
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "7"]) == 0
    sc = json.loads((tmp_path / "c" / "summary.json").read_text())
    assert sc["dataset_hash"] != sa["dataset_hash"]


def test_seed_derivation():
    cfg = apply_seed(resolve(SMALL), 5)
    assert cfg["data"]["seed"] == derive_seed(5, "data.seed")
    assert cfg["model"]["seed"] == derive_seed(5, "model.seed")
    assert cfg["sweep"]["seeds"] == [derive_seed(5, "sweep.seeds.0")]
    assert derive_seed(5, "data.seed") != derive_seed(5, "model.seed")


def test_missing_key_exits_2(tmp_path, capsys):
    bad = json.loads(json.dumps(SMALL))
    del bad["model"]["width"]
    rc = main(["train", "--config", write_config(tmp_path, bad)])
    err = capsys.readouterr()
    assert rc == 2 and "model.width" in err.err and "status=config_error" in err.out


def test_unknown_key_and_bad_type_exit_2(tmp_path, capsys):
    bad = json.loads(json.dumps(SMALL))
    bad["model"]["widht"] = 4
    assert main(["train", "--config", write_config(tmp_path, bad)]) == 2
    bad = json.loads(json.dumps(SMALL))
    bad["train"]["epochs"] = "ten"
    assert main(["train", "--config", write_config(tmp_path, bad)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2


def test_runtime_error_exits_3(tmp_path, capsys):
    cfg = json.loads(json.dumps(SMALL))
    cfg["data"].update(source="extxyz", path=str(tmp_path / "nope.xyz"))
    rc = main(["generate", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path)])
    assert rc == 3 and last_status(capsys).startswith("status=runtime_error")


def test_train_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", write_config(tmp_path), "--out", str(out)]) == 0
    assert last_status(capsys).startswith("status=ok train")
    run = json.loads((out / "run.json").read_text())
    mem = json.loads((out / "memory.json").read_text())
    assert run["status"] == "ok" and run["config_hash"] == mem["config_hash"]
    assert mem["peak_bytes"] == run["peak_mem_bytes"]
    model = load_model(str(out / "model.bin"))
    assert model.n_params == run["params"]


def test_sweep_and_resume(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = str(tmp_path / "sw")
    assert main(["sweep", "--config", cfg, "--out", out]) == 0
    rows = list(csv.DictReader(open(os.path.join(out, "results.csv"))))
    assert len(rows) == 1 and list(rows[0]) == RESULT_COLUMNS
    before = open(os.path.join(out, "results.csv"), "rb").read()
    capsys.readouterr()
    assert main(["sweep", "--config", cfg, "--out", out, "--resume"]) == 0
    assert "computed=0" in last_status(capsys)
    assert open(os.path.join(out, "results.csv"), "rb").read() == before


def write_results(path, xs, ys):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        w.writeheader()
        for x, y in zip(xs, ys):
            row = dict.fromkeys(RESULT_COLUMNS, "0")
            row.update(params=str(x), data_bytes=str(x), test_loss_total=repr(y), seed="0")
            w.writerow(row)


def test_fit_command(tmp_path, capsys):
    xs = [100, 1000, 10000, 100000, 1000000]
    res = tmp_path / "results.csv"
    write_results(res, xs, [2 * x**-0.5 + 0.1 for x in xs])
    assert main(["fit", "--results", str(res), "--out", str(tmp_path), "--check"]) == 0
    fit = json.loads((tmp_path / "fit_params.json").read_text())
    assert abs(fit["b"] - 0.5) < 1e-3 and abs(fit["a"] - 2) < 1e-3 and not fit["degenerate"]


def test_check_failure_exits_4(tmp_path, capsys):
    xs = [100, 1000, 10000, 100000]
    res = tmp_path / "results.csv"
    write_results(res, xs, [0.3] * 4)
    assert main(["fit", "--results", str(res), "--out", str(tmp_path)]) == 0
    assert main(["fit", "--results", str(res), "--out", str(tmp_path), "--check"]) == 4
    assert last_status(capsys).startswith("status=check_failed")


def test_fit_needs_results(tmp_path, capsys):
    assert main(["fit", "--out", str(tmp_path)]) == 2


def test_profile_small(tmp_path, capsys):
    cfg = json.loads(json.dumps(SMALL))
    cfg["model"].update(depth=2, width=8)
    cfg["train"]["batch_size"] = 4
    cfg["parallel"] = {"workers": 2}
    assert main(["profile", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "modes.csv")))
    assert [r["mode"] for r in rows] == ["vanilla", "checkpointing", "zero1"]
    assert rows[0]["rel_peak_pct"] == "100.00" and rows[0]["rel_time_pct"] == "100.00"
    info = json.loads((tmp_path / "breakdown.json").read_text())
    assert info["rows"][1]["reference_rel_peak_pct"] == 42.0


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "egnnlab", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
