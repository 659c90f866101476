import csv

import numpy as np
import pytest

from depthmark.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from depthmark.io import load_depth_image, read_annotation, read_manifest

SMALL = "method=smuf\ndms=1\nn_stages=2\nn_bits=8\njitter_count=2\n"


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(out), "--n", "24", "--seed", "4",
                 "--yaw-range=-30:30", "--test-fraction", "0.25"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    d = tmp_path_factory.mktemp("model")
    cfg = d / "run.cfg"
    cfg.write_text(SMALL + "# comment\n")
    model = d / "m.gmdl"
    assert main(["train", "--manifest", str(corpus / "manifest.tsv"), "--config", str(cfg),
                 "--out", str(model)]) == EXIT_OK
    return model


def test_synth_writes_corpus(corpus):
    rows = read_manifest(corpus / "manifest.tsv")
    assert len(rows) == 24 and sum(r["subset"] == "test" for r in rows) == 6
    img = load_depth_image(corpus / rows[0]["file"])
    shape, head = read_annotation((corpus / rows[0]["file"]).with_suffix(".lmk"))
    assert len(shape) == 22 and float(head["pose_yaw_deg"]) == rows[0]["yaw"]
    assert img.width > 0


def test_synth_deterministic(corpus, tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n", "24", "--seed", "4",
                 "--yaw-range=-30:30", "--test-fraction", "0.25"]) == EXIT_OK
    for f in sorted(corpus.iterdir()):
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()


@pytest.mark.parametrize("argv", [
    ["synth", "--n", "0"],
    ["synth", "--n", "3", "--yaw-range=-100:0"],
    ["synth", "--n", "3", "--test-fraction", "1.0"],
])
def test_synth_usage_errors(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)]) == EXIT_USAGE


def test_unknown_config_key(corpus, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("method=grid\nbogus_key=3\n")
    assert main(["train", "--manifest", str(corpus / "manifest.tsv"), "--config", str(cfg),
                 "--out", str(tmp_path / "m")]) == EXIT_USAGE


def test_key_for_other_method(corpus, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("method=grid\nn_bits=8\n")
    assert main(["train", "--manifest", str(corpus / "manifest.tsv"), "--config", str(cfg),
                 "--out", str(tmp_path / "m")]) == EXIT_USAGE


def test_missing_manifest_is_data_error(tmp_path):
    assert main(["train", "--manifest", str(tmp_path / "none.tsv"),
                 "--out", str(tmp_path / "m")]) == EXIT_DATA


def test_predict_and_eval(corpus, trained, tmp_path):
    pred = tmp_path / "pred"
    assert main(["predict", "--model", str(trained), "--manifest", str(corpus / "manifest.tsv"),
                 "--subset", "test", "--out", str(pred)]) == EXIT_OK
    rows = read_manifest(pred / "predictions.tsv")
    assert len(rows) == 6
    shape, head = read_annotation(pred / rows[0]["file"])
    assert head["selected_subset"] == "0" and len(head["box"].split(",")) == 4
    assert np.all(np.isfinite(shape.points))

    ev = tmp_path / "eval"
    assert main(["eval", "--manifest", str(corpus / "manifest.tsv"), "--subset", "test",
                 "--pred", str(pred), "--out", str(ev), "--bench", "--model", str(trained),
                 "--bench-images", "3"]) == EXIT_OK
    table = {r[0]: r for r in csv.reader((ev / "summary.csv").open())}
    assert float(table["overall"][1]) > 0
    assert float(table["selection_rate_pct"][1]) == 100.0
    for key in ("time_dm_selection_s", "time_feature_extraction_s",
                "time_location_update_s", "time_total_s"):
        assert key in table
    assert (ev / "ced.csv").read_text().startswith("threshold_mm,fraction")


def test_predict_with_box_bypasses_detection(corpus, trained, tmp_path):
    img = corpus / read_manifest(corpus / "manifest.tsv")[0]["file"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["predict", "--model", str(trained), "--image", str(img), "--out", str(a)]) == EXIT_OK
    assert main(["predict", "--model", str(trained), "--image", str(img), "--out", str(b),
                 "--box", "20,20,60,80"]) == EXIT_OK
    sa, ha = read_annotation(a / img.with_suffix(".lmk").name)
    sb, hb = read_annotation(b / img.with_suffix(".lmk").name)
    assert hb["box"] == "20.0,20.0,60.0,80.0" and ha["box"] != hb["box"]
    assert not np.array_equal(sa.points, sb.points)


def test_eval_without_predictions(corpus, tmp_path):
    assert main(["eval", "--manifest", str(corpus / "manifest.tsv"), "--pred", str(tmp_path),
                 "--out", str(tmp_path / "e")]) == EXIT_DATA


def test_bench_needs_model(corpus, trained, tmp_path):
    pred = tmp_path / "pred"
    main(["predict", "--model", str(trained), "--manifest", str(corpus / "manifest.tsv"),
          "--out", str(pred)])
    assert main(["eval", "--manifest", str(corpus / "manifest.tsv"), "--pred", str(pred),
                 "--out", str(tmp_path / "e"), "--bench"]) == EXIT_USAGE


def test_corrupt_model_is_data_error(corpus, tmp_path):
    bad = tmp_path / "bad.gmdl"
    bad.write_bytes(b"nope")
    assert main(["predict", "--model", str(bad), "--manifest", str(corpus / "manifest.tsv"),
                 "--out", str(tmp_path / "p")]) == EXIT_DATA
