import csv
import json
from pathlib import Path

import pytest

from flowdet.cli import main
from flowdet.detector.config import ModelConfig
from flowdet.attention import SaaConfig
from flowdet.gradsuite import REGISTRY

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def small_config(tmp_path):
    cfg = ModelConfig(stage_channels=(8, 8), arb_count=2, query_count=8, decoder_layers=1, decoder_ffn=16,
                      saa=SaaConfig(embed_dim=16, heads=2, ffn_dim=16), batch_size=2)
    path = tmp_path / "small.json"
    path.write_text(cfg.to_json())
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_gradcheck_writes_one_row_per_op(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path), "-q"]) == 0
    rows = read_csv(tmp_path / "gradcheck.csv")
    assert len(rows) - 1 == len(REGISTRY) == 12


def test_gradcheck_sabotage_fails_and_names_op(tmp_path, capsys):
    code = main(["gradcheck", "--out", str(tmp_path), "--ops", "saa_forward", "--sabotage", "sigmoid", "-q"])
    assert code == 1
    assert "saa_forward" in capsys.readouterr().err


def test_train_writes_checkpoint_and_loss_schema(tmp_path, small_config):
    out = tmp_path / "run"
    assert main(["train", "--config", str(small_config), "--iters", "3", "--train-images", "4",
                 "--out", str(out), "-q"]) == 0
    assert (out / "model.fdckpt").exists() and (out / "eval.json").exists()
    rows = read_csv(out / "loss.csv")
    assert rows[0] == ["step", "cls", "l1", "giou", "total", "lr"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3]
    report = json.loads((out / "eval.json").read_text())
    assert {"ap", "ap50", "ap_s", "ap_l", "gate_statistics"} <= set(report)

    resumed = tmp_path / "resumed"
    assert main(["train", "--checkpoint", str(out / "model.fdckpt"), "--iters", "2", "--train-images", "4",
                 "--out", str(resumed), "-q"]) == 0
    assert [int(r[0]) for r in read_csv(resumed / "loss.csv")[1:]] == [4, 5]


def test_train_rejects_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.fdckpt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["train", "--checkpoint", str(bad), "--out", str(tmp_path), "-q"]) == 1


def test_eval_of_checkpoint(tmp_path, small_config):
    assert main(["train", "--config", str(small_config), "--iters", "1", "--train-images", "2",
                 "--out", str(tmp_path), "-q"]) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "model.fdckpt"), "--out", str(tmp_path), "-q"]) == 0
    rep = json.loads((tmp_path / "ap_report.json").read_text())
    assert {"ap", "ap50", "ap_s", "ap_l"} <= set(rep)
    assert (tmp_path / "pr_curves.svg").exists() and (tmp_path / "detections.json").exists()


def test_eval_ground_truth_as_detections_scores_one(tmp_path):
    doc = json.loads((FIXTURES / "eight_categories.json").read_text())
    dets = [{"image_id": a["image_id"], "category_id": a["category_id"], "bbox": a["bbox"], "score": 1.0}
            for a in doc["annotations"]]
    (tmp_path / "dets.json").write_text(json.dumps(dets))
    assert main(["eval", "--data", str(FIXTURES / "eight_categories.json"), "--detections",
                 str(tmp_path / "dets.json"), "--out", str(tmp_path), "-q"]) == 0
    rep = json.loads((tmp_path / "ap_report.json").read_text())
    assert rep["ap"] == 1.0 and rep["ap50"] == 1.0


def test_eval_matches_hand_computed_fixture(tmp_path):
    fx = json.loads((FIXTURES / "ap_fixture.json").read_text())
    doc = {"images": [{"id": i, "file_name": f"{i}.png", "width": 64, "height": 64} for i in (1, 2)],
           "annotations": fx["ground_truth"], "categories": [{"id": 1, "name": "vehicle"}]}
    (tmp_path / "gt.json").write_text(json.dumps(doc))
    (tmp_path / "dets.json").write_text(json.dumps(fx["detections"]))
    assert main(["eval", "--data", str(tmp_path / "gt.json"), "--detections", str(tmp_path / "dets.json"),
                 "--out", str(tmp_path), "-q"]) == 0
    rep = json.loads((tmp_path / "ap_report.json").read_text())
    assert abs(rep["ap50"] - fx["hand_derivation"]["ap50"]) < 1e-12


def test_stats_rows(tmp_path):
    assert main(["stats", "--data", str(FIXTURES / "eight_categories.json"), "--out", str(tmp_path), "-q"]) == 0
    rows = read_csv(tmp_path / "stats.csv")
    assert rows[0] == ["Category", "train", "val", "test", "Total"]
    assert rows[1][0] == "Images" and rows[-1][0] == "Total Objects"
    assert len(rows) == 1 + 1 + 8 + 1


def test_stats_malformed_json_reports_offset(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"images": [1, 2,, 3]}')
    assert main(["stats", "--data", str(bad), "--out", str(tmp_path), "-q"]) == 1
    assert "byte 17" in capsys.readouterr().err


def test_bench_window_sweep_flops_increase(tmp_path):
    assert main(["bench", "--sweep", "window", "--iters", "0", "--out", str(tmp_path), "-q"]) == 0
    rows = read_csv(tmp_path / "bench_window.csv")
    flops = [int(r[rows[0].index("flops")]) for r in rows[1:]]
    assert len(flops) == 4
    assert all(a < b for a, b in zip(flops, flops[1:]))
    assert (tmp_path / "bench_window.svg").exists()


def test_bench_gate_rows(tmp_path):
    assert main(["bench", "--sweep", "gate", "--iters", "0", "--out", str(tmp_path), "-q"]) == 0
    rows = read_csv(tmp_path / "bench_gate.csv")
    labels = [r[1] for r in rows[1:]]
    assert len(labels) == 5
    for value in ("0.3", "0.4", "0.5", "0.6", "0.7"):
        assert any(value in lab for lab in labels)


@pytest.mark.parametrize("argv", [[], ["nope"], ["bench", "--sweep", "bogus", "--iters", "0"],
                                  ["gradcheck", "--ops", "not_an_op"], ["stats"], ["eval"],
                                  ["train", "--iters", "x"]])
def test_usage_errors_exit_two(tmp_path, argv):
    if argv and argv[0] in ("bench", "gradcheck", "stats", "eval"):
        argv = argv + ["--out", str(tmp_path)]
    assert main(argv) == 2


def test_outputs_are_byte_identical_across_runs(tmp_path, small_config):
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(small_config), "--iters", "2", "--train-images", "4",
                     "--out", str(out), "-q"]) == 0
        assert main(["bench", "--sweep", "window", "--iters", "0", "--out", str(out), "-q"]) == 0
        assert main(["stats", "--data", str(FIXTURES / "eight_categories.json"), "--out", str(out), "-q"]) == 0
    for f in ("loss.csv", "model.fdckpt", "eval.json", "loss.svg", "bench_window.csv", "bench_window.svg",
              "stats.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
