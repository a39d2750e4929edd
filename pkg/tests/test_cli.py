import csv
import json

import pytest

from recipseq.cli import main

TINY = ["n=4", "d=8", "d_factor=8", "d_ff=16", "layers=1", "heads=1", "max_epochs=1", "batch_size=64",
        "eval_negatives=10"]


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    log = root / "log.tsv"
    assert main(["synth", "--seed", "1", "--n-u", "30", "--n-v", "30", "--clusters", "2", "--events", "8",
                 "--horizon", "1000", "--out", str(log)]) == 0
    assert main(["prepare", "--input", str(log), "--out", str(root / "data"), "--core", "2"]) == 0
    return root


def test_synth_is_deterministic(tmp_path):
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    for out in (a, b):
        main(["synth", "--seed", "3", "--n-u", "10", "--n-v", "10", "--clusters", "2", "--events", "3",
              "--out", str(out)])
    assert a.read_bytes() == b.read_bytes()


def test_prepare_manifest(prepared):
    meta = json.loads((prepared / "data" / "manifest.json").read_text())
    assert sum(meta["counts"].values()) == meta["records_filtered"]
    assert meta["boundaries"][0] <= meta["boundaries"][1]


def test_train_then_eval(prepared, capsys):
    runs = prepared / "runs"
    assert main(["train", "--data", str(prepared / "data"), "--run-root", str(runs), *TINY]) == 0
    ckpt = capsys.readouterr().out.strip().splitlines()[-1]
    run = runs / ckpt.split("/")[-2]
    assert {"config.txt", "run.json", "checkpoint.reseq", "loss_log.csv"} <= {p.name for p in run.iterdir()}
    with (run / "loss_log.csv").open() as fh:
        assert next(csv.reader(fh))[:2] == ["epoch", "loss"]
    assert main(["eval", "--data", str(prepared / "data"), "--checkpoint", ckpt, "--run-root", str(runs),
                 "--negatives", "10"]) == 0
    assert "U ranks V" in capsys.readouterr().out


def test_eval_without_checkpoint(prepared, capsys):
    assert main(["eval", "--data", str(prepared / "data"), "--checkpoint", str(prepared / "nope.reseq")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error code=CHECKPOINT_NOT_FOUND message=checkpoint not found")


def test_unknown_config_key(prepared, capsys):
    assert main(["train", "--data", str(prepared / "data"), "--run-root", str(prepared / "runs"),
                 "learning_rate=0.1"]) == 2
    err = capsys.readouterr().err
    assert "code=CONFIG_INVALID" in err and "learning_rate" in err


def test_missing_prepared_data(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path), "--run-root", str(tmp_path / "runs")]) == 2
    assert "code=DATA_NOT_FOUND" in capsys.readouterr().err


def test_bench_writes_csv(tmp_path, capsys):
    assert main(["bench", "--n", "2", "4", "8", "--d", "8", "--batch", "8", "--reps", "3",
                 "--run-root", str(tmp_path)]) == 0
    (run,) = tmp_path.iterdir()
    lines = (run / "latency.csv").read_text().splitlines()
    assert lines[0] == "n,scorer,median_us,p90_us" and len(lines) == 7
    assert "growth exponent" in capsys.readouterr().out


def test_ablate_table(prepared):
    runs = prepared / "ablate"
    assert main(["ablate", "--data", str(prepared / "data"), "--run-root", str(runs), *TINY]) == 0
    (run,) = runs.iterdir()
    with (run / "ablation.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert [r[0] for r in rows[1:]] == ["full", "w/o DSE", "w/o MASK", "w/o TSA", "w/o SD"]
