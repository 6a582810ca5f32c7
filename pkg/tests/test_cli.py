import csv
import json

import pytest

from nightatlas import cli


def test_no_arguments_prints_help_and_exits_one(capsys):
    assert cli.main([]) == 1
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["synth"], ["train-cnn", "--data", "d", "--run", "r", "--mode", "Z"],
                                  ["synth", "--out", "x", "--seed", "abc"]])
def test_usage_errors_exit_one(argv):
    assert cli.main(argv) == 1


def test_missing_data_exits_two(tmp_path, capsys):
    assert cli.main(["train-cnn", "--data", str(tmp_path / "nope"), "--run", str(tmp_path / "run")]) == 2
    assert "data error" in capsys.readouterr().err
    assert cli.main(["subset", "--manifest", str(tmp_path / "m.csv"), "--bbox", "b.json", "--out", "o"]) == 2


def test_bad_config_file_exits_one(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"no_such_field": 1}))
    assert cli.main(["synth", "--out", str(tmp_path), "--config", str(tmp_path / "c.json")]) == 1
    assert cli.main(["synth", "--out", str(tmp_path), "--config", str(tmp_path / "missing.json")]) == 1


def test_precedence_flag_env_file_default(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"epochs": 7, "batch": 16, "mode": "B"}))
    cfg, src = cli.resolve_config({"epochs": 3}, env={"NIGHTATLAS_BATCH": "32", "NIGHTATLAS_EPOCHS": "5"},
                                  config_path=tmp_path / "c.json")
    assert (cfg.epochs, src["epochs"]) == (3, "flag")
    assert (cfg.batch, src["batch"]) == (32, "env")
    assert (cfg.mode, src["mode"]) == ("B", "config")
    assert (cfg.k, src["k"]) == (6, "default")
    cfg, _ = cli.resolve_config({}, env={"NIGHTATLAS_FLIPS": "off"})
    assert cfg.flips is False
    with pytest.raises(cli.UsageError):
        cli.resolve_config({}, env={"NIGHTATLAS_EPOCHS": "many"})


def test_threshold_specs():
    assert cli.parse_thresholds("0:1:0.05") == [round(0.05 * i, 10) for i in range(21)]
    assert cli.parse_thresholds("0.1,0.5") == [0.1, 0.5]
    for bad in ("1:0:0.1", "0:1:0", "a,b"):
        with pytest.raises(cli.UsageError):
            cli.parse_thresholds(bad)


def test_subset_command(tmp_path):
    (tmp_path / "m.csv").write_text("id,mission,lat,lon\na,ISS,52.5,13.4\nb,ISS,52.6,13.5\nc,ISS,40.4,-3.7\n")
    (tmp_path / "x.txt").write_text("b\n")
    boxes = {"Berlin": {"lat_min": 52, "lat_max": 53, "lon_min": 13, "lon_max": 14, "exclusions_path": "x.txt"}}
    (tmp_path / "b.json").write_text(json.dumps(boxes))
    argv = ["subset", "--manifest", str(tmp_path / "m.csv"), "--bbox", str(tmp_path / "b.json"), "--out", str(tmp_path / "s")]
    assert cli.main(argv) == 0
    first = (tmp_path / "s" / "Berlin.csv").read_text()
    assert first.splitlines()[1:] == ["a,ISS,52.5,13.4"]
    assert cli.main(argv) == 0 and (tmp_path / "s" / "Berlin.csv").read_text() == first


def test_fetch_command(stub_server, tmp_path):
    (tmp_path / "m.csv").write_text("id,mission,lat,lon\nok,ISS,1,1\ngone,ISS,2,2\n")
    stub_server["files"]["ok"] = b"\x89PNG fake"
    argv = ["fetch", "--manifest", str(tmp_path / "m.csv"), "--cache", str(tmp_path / "c"),
            "--url-template", stub_server["url"], "--retries", "0"]
    assert cli.main(argv) == 0
    status = json.loads((tmp_path / "c" / "fetch_status.json").read_text())
    assert status == {"gone": "missing", "ok": "downloaded"}
    assert cli.main(argv[:-4] + ["--retries", "0"]) == 1  # no url template


def test_full_workflow_on_synthetic_data(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("NIGHTATLAS_GEOMETRY", "desk")
    synth, data, run = tmp_path / "synth", tmp_path / "data", tmp_path / "run"
    assert cli.main(["synth", "--out", str(synth), "--classes", "2", "--others", "3", "--seed", "1"]) == 0
    rows = list(csv.DictReader((synth / "labels.csv").open()))
    assert [r["label"] for r in rows] == ["Berlin", "Madrid", "Other", "Other", "Other"]
    (tmp_path / "drop.txt").write_text("Other_00002\n")
    assert cli.main(["augment", "--labels", str(synth / "labels.csv"), "--out", str(data), "--variants", "6",
                     "--other-variants", "2", "--split", "0.5", "--other-exclusions", str(tmp_path / "drop.txt")]) == 0
    manifest = (data / "manifest.jsonl").read_text().splitlines()
    assert len(manifest) == 6 * 2 + 2 * 2
    assert json.loads((data / "run_config.augment.json").read_text())["geometry"] == "desk"

    assert cli.main(["train-pca", "--data", str(data), "--run", str(run), "--k", "2"]) == 0
    assert cli.main(["eval-pca", "--data", str(data), "--run", str(run), "--thresholds", "0,0.5,1"]) == 0
    pca = run / "reports" / "pca"
    assert (pca / "metrics.csv").read_text().startswith("threshold,class,precision,recall,support\n")
    assert {p.name for p in pca.iterdir() if p.is_dir()} == {"threshold_0.0", "threshold_0.5", "threshold_1.0"}

    assert cli.main(["train-cnn", "--data", str(data), "--run", str(run), "--epochs", "2", "--batch", "4",
                     "--scale", "4", "--lr", "1e-3"]) == 0
    assert cli.main(["eval-cnn", "--data", str(data), "--run", str(run), "--top-k", "2"]) == 0
    cnn = run / "reports" / "cnn"
    before = (cnn / "metrics.csv").read_bytes()
    assert len(list(csv.reader((cnn / "summary.csv").open()))) == 3
    assert (run / "predictions" / "epoch_002.csv").exists()
    (cnn / "metrics.csv").unlink()
    assert cli.main(["report", "--run", str(run)]) == 0
    assert (cnn / "metrics.csv").read_bytes() == before
    out = capsys.readouterr().out
    assert "geometry = 'desk' (env)" in out
