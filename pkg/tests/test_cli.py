import csv
import json
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from gnntickets.cli import expand_cells, main, run_experiment, summarize
from gnntickets.config import config_problems, parse_config, parse_config_text
from gnntickets.graph import save_bundle, synth_graph
from gnntickets.search import ConfigError

ROOT = Path(__file__).resolve().parent.parent

SYNTH = """
[data]
format = synth
synth_nodes = 90
synth_classes = 3
synth_features = 6
per_class = 5
n_val = 20
n_test = 30

[model]
arch = GCN
depth = 2
width = 8

[search]
method = {method}
sparsity = 0.5
epochs = 12
n = 6
seeds = {seeds}

[dense]
epochs = 12
"""


def write_cfg(tmp_path, method="dense", seeds="0", extra=""):
    p = tmp_path / "exp.cfg"
    p.write_text(SYNTH.format(method=method, seeds=seeds) + extra)
    return p


def read_summary(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_single_dense_cell(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 0
    out = tmp_path / "o"
    cells = list((out / "cells").glob("*.csv"))
    assert len(cells) == 1
    rows = read_summary(out / "summary.csv")
    assert len(rows) == 1 and rows[0]["method"] == "dense" and rows[0]["n_seeds"] == "1"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["failed_cells"] == [] and manifest["seeds"] == [0]
    assert len(manifest["config_sha256"]) == 64


def test_five_seeds_summary_std(tmp_path):
    cfg = write_cfg(tmp_path, method="ugts", seeds="0, 1, 2, 3, 4")
    out, results = run_experiment(parse_config(cfg), tmp_path / "o")
    row = read_summary(out / "summary.csv")[0]
    assert row["n_seeds"] == "5"
    accs = [r["best_test_acc"] for r in results]
    assert len(accs) == 5
    assert float(row["std_best_test_acc"]) == float(np.std(accs))
    assert float(row["mean_best_test_acc"]) == float(np.mean(accs))


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, method="ugts, dense", seeds="0, 1",
                    extra="\n[analysis]\nmad = true\nmad_every = 3\ngrad_norms = true\n")
    a, _ = run_experiment(parse_config(cfg), tmp_path / "a")
    b, _ = run_experiment(parse_config(cfg), tmp_path / "b", jobs=2)
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    header = (a / "cells" / "ugts_GCN_d2_w8_s0.5_seed0.csv").read_text().splitlines()[0]
    assert header.startswith("epoch,train_loss,val_acc,test_acc,current_sparsity,wall_time")
    assert "mad_l1" in header and "grad_norm_l0" in header


def _run_to(args):
    cfg, out = args
    run_experiment(parse_config(cfg), out)
    return Path(out, "summary.csv").read_bytes()


def test_concurrent_processes_agree(tmp_path):
    cfg = write_cfg(tmp_path, method="ugts", seeds="0, 1")
    with ProcessPoolExecutor(2) as pool:
        a, b = pool.map(_run_to, [(cfg, tmp_path / "p"), (cfg, tmp_path / "q")])
    assert a == b


def test_failed_cell_recorded_and_sweep_continues(tmp_path):
    # an absurd dense learning rate overflows the logits; the search cell is unaffected
    text = SYNTH.format(method="ugts, dense", seeds="0").replace("[dense]\nepochs = 12", "[dense]\nepochs = 12\nlr = 1e200")
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    code = main(["run", str(p), "--out", str(tmp_path / "o")])
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert code == 1
    assert manifest["n_cells"] == 2
    assert [f["cell"] for f in manifest["failed_cells"]] == ["dense_GCN_d2_w8_s0_seed0"]
    assert "NumericFault" in manifest["failed_cells"][0]["error"]
    rows = read_summary(tmp_path / "o" / "summary.csv")
    assert [r["method"] for r in rows] == ["ugts"]


def test_validate_reports(tmp_path, capsys):
    good = write_cfg(tmp_path)
    assert main(["validate", str(good)]) == 0
    assert config_problems(parse_config(good)) == []
    missing = tmp_path / "m.cfg"
    missing.write_text("[data]\nformat = linqs\npath = no/such/dir\n")
    assert main(["validate", str(missing)]) == 2
    assert "no/such/dir" in capsys.readouterr().err
    short = tmp_path / "s.cfg"
    short.write_text(SYNTH.format(method="ugts", seeds="0").replace("epochs = 12\nn = 6", "epochs = 12\nn = 60"))
    probs = config_problems(parse_config(short))
    assert any("shorter than the schedule" in p for p in probs)


def test_invalid_config_exit_code(tmp_path, capsys):
    p = tmp_path / "x.cfg"
    p.write_text("[search]\nbogus = 1\n")
    assert main(["run", str(p)]) == 2
    assert "unknown key" in capsys.readouterr().err
    p.write_text("[model]\narch = MLP\n[data]\nformat = synth\n")
    assert main(["run", str(p)]) == 2


def test_parse_lists_and_sweep():
    cfg = parse_config_text("[model]\narch = gcn, GAT\ndepth = 2, 4\n[search]\nmethod = ugts, dense\n"
                            "sparsity = 0.5, 0.9\nseeds = 1, 2\n[data]\nformat = synth\n")
    assert cfg.archs == ["GCN", "GAT"] and cfg.depths == [2, 4] and cfg.sparsities == [0.5, 0.9]
    cells = expand_cells(cfg)
    # ugts: 2 arch x 2 depth x 2 sparsity x 2 seeds; dense ignores the sparsity axis
    assert len(cells) == 16 + 8
    with pytest.raises(ConfigError):
        parse_config_text("[model]\ndepth = two\n")


def test_bundle_dataset_and_data_dir_env(tmp_path, monkeypatch):
    save_bundle(synth_graph(90, 3, 4, 0.2, 0.02, seed=0), tmp_path / "root" / "toy")
    monkeypatch.setenv("UGT_DATA_DIR", str(tmp_path / "root"))
    p = tmp_path / "cfgs"
    p.mkdir()
    cfg = p / "b.cfg"
    cfg.write_text(SYNTH.format(method="dense", seeds="0").replace("format = synth", "format = bundle\npath = toy"))
    assert main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 0


def test_ood_robustness_embeddings_and_export(tmp_path):
    cfg = write_cfg(tmp_path, method="ugts", seeds="0",
                    extra="\n[analysis]\nood = true\nrobustness = true\nfractions = 0.0, 0.4\n"
                          "embeddings = true\nembedding_layers = 0, 1\n")
    out, results = run_experiment(parse_config(cfg), tmp_path / "o")
    assert all(r["status"] == "ok" for r in results)
    rows = read_summary(out / "summary.csv")
    assert [r["fraction"] for r in rows] == ["0.0", "0.4"]
    assert all(0.0 <= float(r["mean_ood_auc"]) <= 1.0 for r in rows)
    emb = sorted((out / "embeddings").glob("*.csv"))
    assert len(emb) == 4
    ckpt = out / "checkpoints" / "ugts_GCN_d2_w8_s0.5_f0_seed0"
    target = tmp_path / "again.csv"
    assert main(["export-embeddings", str(ckpt), "--layer", "0", "--out", str(target)]) == 0
    lines = target.read_text().splitlines()
    assert len(lines) == 91 and lines[0].startswith("node_id,label,h0")


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "gnntickets", "validate", str(ROOT / "configs" / "table4.cfg")],
                       capture_output=True, text=True)
    assert r.returncode in (0, 2)
    assert "cells" in r.stdout or "invalid config" in r.stderr


@pytest.mark.parametrize("name", ["table1", "table4", "fig4", "fig6", "fig7"])
def test_shipped_configs_parse(name):
    cfg = parse_config(ROOT / "configs" / f"{name}.cfg")
    problems = [p for p in config_problems(cfg) if "dataset path not found" not in p]
    assert problems == []
    assert expand_cells(cfg)


def test_summarize_skips_failed():
    ok = {"method": "ugts", "arch": "GCN", "depth": 2, "width": 8, "sparsity": 0.5, "fraction": None, "seed": 0,
          "status": "ok", "best_test_acc": 0.5, "best_val_acc": 0.4, "final_sparsity": 0.5}
    bad = dict(ok, seed=1, status="failed")
    text = summarize([ok, bad])
    assert text.splitlines()[1].split(",")[6] == "1"
