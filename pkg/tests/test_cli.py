import csv
import json
import math

import numpy as np
import pytest

from loranas.cli import main
from loranas.model import load_checkpoint
from loranas.report import atomic_write_text, load_rank_map

SMALL = ["--vocab-size", "20", "--d-model", "16", "--n-layers", "2", "--n-heads", "2", "--d-mlp", "16",
         "--max-seq-len", "16", "--size", "80", "--length", "4", "--batch-size", "16",
         "--search-epochs", "2", "--finetune-epochs", "1", "--lr-weights", "1e-2", "--lr-alpha", "0.05",
         "--seed", "3"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_count_params_reference(capsys):
    code, out, _ = run(capsys, "count-params", "--descriptor", "llama32-11b-vision.json", "--rank", "64",
                       "--groups", "q,k", "--compare", "103.3M")
    assert code == 0
    assert "total 47.2M (0.4%)" in out
    assert "compression ratio 0.5x" in out
    code, out, _ = run(capsys, "count-params", "--descriptor", "llama32-11b-vision.json", "--rank", "64",
                       "--compare", "103.3M")
    assert "total 268.7M (2.5%)" in out and "compression ratio 2.6x" in out


def test_count_params_json_and_rank_map(capsys, tmp_path):
    js = tmp_path / "c.json"
    code, _, _ = run(capsys, "count-params", "--descriptor", "llama32-11b-vision.json", "--rank", "8",
                     "--json", str(js))
    assert code == 0
    doc = json.loads(js.read_text())
    assert doc["total"] == 268_697_600 // 8
    rm = tmp_path / "rm.json"
    rm.write_text(json.dumps({n: {"rank": 8} for n in doc["per_module"]}))
    code, out, _ = run(capsys, "count-params", "--descriptor", "llama32-11b-vision.json", "--rank-map", str(rm))
    assert code == 0 and "total 33.6M" in out


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["count-params", "--descriptor", "llama32-11b-vision.json"],
    ["count-params", "--descriptor", "llama32-11b-vision.json", "--rank", "x"],
    ["eval"],
    ["search", "--task", "sort"],
])
def test_usage_errors_exit_1(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 1
    assert err


def test_runtime_errors_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "count-params", "--descriptor", str(tmp_path / "missing.json"), "--rank", "4")
    assert code == 2 and "not found" in err
    code, _, err = run(capsys, "search", "--out", str(tmp_path), "--space", "4,7", *SMALL)
    assert code == 2 and "even" in err


def test_unknown_config_key_is_usage_error(capsys, tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"d_modle": 4}))
    code, _, err = run(capsys, "search", "--config", str(p))
    assert code == 1 and "d_modle" in err


@pytest.fixture(scope="module")
def search_runs(tmp_path_factory):
    outs = []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"run{i}")
        assert main(["search", "--out", str(out), "--finetune", *SMALL]) == 0
        outs.append(out)
    return outs


def test_search_writes_artifacts(search_runs):
    out = search_runs[0]
    for name in ("rank_map.json", "metrics.csv", "search.ckpt.npz", "finetuned.ckpt.npz", "manifest.json"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "search" and manifest["seed"] == 3
    assert manifest["config"]["d_model"] == 16
    assert len(manifest["results"]["wall_seconds"]) == 3
    assert math.isfinite(manifest["results"]["eval_perplexity"])


def test_search_is_byte_deterministic(search_runs):
    a, b = search_runs
    for name in ("rank_map.json", "metrics.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_metrics_csv_columns(search_runs):
    rows = list(csv.DictReader((search_runs[0] / "metrics.csv").open()))
    assert list(rows[0]) == ["phase", "epoch", "train_loss", "val_loss", "eval_perplexity", "trainable_params"]
    assert [r["phase"] for r in rows] == ["search", "search", "finetune"]
    assert rows[-1]["val_loss"] == ""
    for r in rows:
        assert float(r["eval_perplexity"]) >= 1.0
    # the supernet trains r_max-wide factors plus one alpha per candidate rank
    assert int(rows[0]["trainable_params"]) > int(rows[-1]["trainable_params"])


def test_timings_column_on_request(capsys, tmp_path):
    code, _, _ = run(capsys, "search", "--out", str(tmp_path), "--timings", *SMALL[:-6], "--search-epochs", "1",
                     "--seed", "3")
    assert code == 0
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header.endswith(",wall_seconds")


def test_export_round_trip(capsys, search_runs, tmp_path):
    out = search_runs[0]
    code, _, _ = run(capsys, "export", str(out / "search.ckpt.npz"), "--rank-map", str(tmp_path / "rm.json"),
                     "--metrics", str(tmp_path / "m.csv"))
    assert code == 0
    assert load_rank_map(tmp_path / "rm.json").ranks == load_rank_map(out / "rank_map.json").ranks
    # the search checkpoint holds only the search epochs
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines == (out / "metrics.csv").read_text().splitlines()[:3]
    code, _, _ = run(capsys, "export", str(out / "search.ckpt.npz"))
    assert code == 1


def test_finetune_and_eval_commands(capsys, search_runs, tmp_path):
    out = search_runs[0]
    code, text, _ = run(capsys, "finetune", "--out", str(tmp_path), "--rank-map", str(out / "rank_map.json"),
                        "--checkpoint", str(out / "search.ckpt.npz"), *SMALL)
    assert code == 0 and "eval perplexity" in text
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    # same warm start, schedule and seed as search --finetune
    ref = json.loads((out / "manifest.json").read_text())
    assert manifest["results"]["eval_perplexity"] == ref["results"]["eval_perplexity"]
    code, text, _ = run(capsys, "eval", str(tmp_path / "finetuned.ckpt.npz"))
    assert code == 0
    assert float(text.split()[-1]) == ref["results"]["eval_perplexity"]


def test_zero_init_checkpoint_evaluates_like_base(capsys, tmp_path):
    # one search epoch with zero learning rates keeps every output factor at zero
    argv = [*SMALL, "--search-epochs", "1", "--lr-weights", "0", "--lr-alpha", "0"]
    assert main(["search", "--out", str(tmp_path), *argv]) == 0
    capsys.readouterr()
    model, _, _ = load_checkpoint(tmp_path / "search.ckpt.npz")
    assert all(np.all(a.W_B.data == 0) for a in model.attachments.values())
    _, a, _ = run(capsys, "eval", str(tmp_path / "search.ckpt.npz"))
    _, b, _ = run(capsys, "eval", "--base", *SMALL[:16], "--seed", "3")
    assert a == b


def test_flags_override_config_file(capsys, tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"d_model": 8, "n_heads": 2, "seed": 1, "space": [2, 4]}))
    argv = [*SMALL, "--search-epochs", "1", "--finetune-epochs", "0"]
    code, _, _ = run(capsys, "search", "--config", str(p), "--out", str(tmp_path / "o"), *argv)
    assert code == 0
    cfg = json.loads((tmp_path / "o" / "manifest.json").read_text())["config"]
    assert cfg["d_model"] == 16 and cfg["seed"] == 3
    assert cfg["space"] == "2,4"


def test_output_dir_from_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("LORANAS_OUTPUT_DIR", str(tmp_path / "env"))
    code, _, _ = run(capsys, "search", *SMALL, "--search-epochs", "1")
    assert code == 0
    assert (tmp_path / "env" / "rank_map.json").exists()


def test_atomic_write_leaves_no_temporaries(tmp_path):
    p = tmp_path / "sub" / "f.txt"
    atomic_write_text(p, "one")
    atomic_write_text(p, "two")
    assert p.read_text() == "two"
    assert [q.name for q in p.parent.iterdir()] == ["f.txt"]
