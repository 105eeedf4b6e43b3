import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from spotnet.cli import main
from spotnet.videogen import read_sequence

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
TINY_MODEL = {"n_stacks": 1, "base_channels": 16, "hourglass_depth": 2}


def _yaml(path: Path, data: dict) -> str:
    path.write_text(yaml.safe_dump(data))
    return str(path)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    cfg = {"sequences": [
        {"name": "fixed", "scene": {"image_size": [64, 64], "n_frames": 24, "object_size_range": [10, 18]}},
        {"name": "pan", "scene": {"image_size": [64, 64], "n_frames": 6, "camera_pan": [2, 1],
                                  "object_size_range": [10, 18]}},
    ]}
    assert main(["gen-data", "--config", _yaml(out / "g.yaml", cfg), "--out", str(out)]) == 0
    return out


def test_shipped_config_runs(tmp_path):
    assert main(["gen-data", "--config", str(CONFIGS / "gen_data.yaml"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "fixed_000" / "gt.json").exists()
    assert read_sequence(tmp_path / "pan_000").config.camera_pan == (2, 1)
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["input_hash"]


def test_missing_config_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err
    assert main(["gen-data", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_seed_flag_overrides(tmp_path):
    cfg = _yaml(tmp_path / "g.yaml", {"seed": 1, "sequences": [{"name": "s", "scene": {"seed": 1, "n_frames": 3}}]})
    main(["gen-data", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["gen-data", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "7"])
    assert read_sequence(tmp_path / "a" / "s").config.seed == 1
    assert read_sequence(tmp_path / "b" / "s").config.seed == 7
    assert json.loads((tmp_path / "b" / "run_manifest.json").read_text())["seed"] == 7


@pytest.mark.parametrize("name,mode", [("fixed", "fixed"), ("pan", "moving")])
def test_annotate(data_dir, tmp_path, capsys, name, mode):
    out = tmp_path / name
    assert main(["annotate", str(data_dir / name), "--mode", mode, "--out", str(out)]) == 0
    text = capsys.readouterr()
    assert "subset invariant: OK" in text.out and "warning" not in text.err
    assert len(list(out.glob("annot_*.png"))) == len(read_sequence(data_dir / name))
    assert (out / "run_manifest.json").exists()


def test_annotate_mode_mismatch_warns(data_dir, tmp_path, capsys):
    assert main(["annotate", str(data_dir / "fixed"), "--mode", "moving", "--out", str(tmp_path)]) == 0
    assert "warning" in capsys.readouterr().err


def test_annotate_bad_mode(data_dir):
    assert main(["annotate", str(data_dir / "pan")]) == 2


def test_eval_det_perfect(data_dir, tmp_path, capsys):
    gt = json.loads((data_dir / "fixed" / "gt.json").read_text())
    dets = [{"frame": r["frame"], "detections": [{**o, "score": 1.0} for o in r["objects"]]} for r in gt]
    (tmp_path / "d.json").write_text(json.dumps(dets))
    assert main(["eval-det", "--detections", str(tmp_path / "d.json"), "--gt", str(data_dir / "fixed" / "gt.json")]) == 0
    assert "mAP@0.7 1.0000" in capsys.readouterr().out
    assert (tmp_path / "run_manifest.json").exists() and (tmp_path / "pr_curve.png").exists()


def test_train_detect_eval_pipeline(data_dir, tmp_path, capsys):
    cfg = {"data": {"sequences": [str(data_dir / "pan")]},
           "train": {"n_iters": 2, "checkpoint_every": 2, "batch_size": 2,
                     "model": {**TINY_MODEL, "attention_enabled": False, "multitask_enabled": False}}}
    run = tmp_path / "run"
    assert main(["train", "--config", _yaml(tmp_path / "t.yaml", cfg), "--out", str(run), "--seed", "3"]) == 0
    assert json.loads((run / "run_manifest.json").read_text())["seed"] == 3
    assert (run / "metrics.csv").exists()

    det = tmp_path / "det"
    assert main(["detect", str(data_dir / "pan"), "--checkpoint", str(run / "checkpoint.pt"),
                 "--out", str(det), "--score-thresh", "0.0"]) == 0
    records = json.loads((det / "detections.json").read_text())
    assert [r["frame"] for r in records] == list(range(6))
    assert len(list(det.glob("att_*.png"))) == 6

    assert main(["eval-det", "--detections", str(det / "detections.json"),
                 "--gt", str(data_dir / "pan" / "gt.json"), "--out", str(tmp_path / "ev")]) == 0
    assert main(["eval-seg", "--detections", str(det / "detections.json"), "--attention-dir", str(det),
                 "--gt-masks", str(data_dir / "pan"), "--out", str(tmp_path / "seg")]) == 0
    out = capsys.readouterr().out
    assert "mAP@0.7" in out and "F-measure" in out
    for d in ("ev", "seg"):
        assert (tmp_path / d / "run_manifest.json").exists()


def test_train_uses_annotation_masks(data_dir, tmp_path):
    annot = tmp_path / "annot"
    main(["annotate", str(data_dir / "pan"), "--mode", "moving", "--out", str(annot)])
    cfg = {"data": {"sequences": [str(data_dir / "pan")], "annotations_dir": str(annot)},
           "train": {"n_iters": 1, "batch_size": 2, "model": TINY_MODEL}}
    assert main(["train", "--config", _yaml(tmp_path / "t.yaml", cfg), "--out", str(tmp_path / "r")]) == 0
    # multitask without masks is a runtime failure
    cfg["data"].pop("annotations_dir")
    assert main(["train", "--config", _yaml(tmp_path / "t2.yaml", cfg), "--out", str(tmp_path / "r2")]) == 1


def test_ablate_emits_table(tmp_path, capsys):
    cfg = {"data": {"scene": {"image_size": [64, 64], "n_frames": 6, "camera_pan": [1, 0],
                              "object_size_range": [10, 18]},
                    "train_frames": [0, 4], "eval_frames": [4, 6]},
           "train": {"n_iters": 1, "batch_size": 2, "model": TINY_MODEL}}
    assert main(["ablate", "--config", _yaml(tmp_path / "a.yaml", cfg), "--out", str(tmp_path)]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) >= 4
    rows = (tmp_path / "ablation.csv").read_text().strip().splitlines()
    assert len(rows) == 4
    assert (tmp_path / "pr_curves.csv").exists() and (tmp_path / "pr_curves.png").exists()


@pytest.mark.skipif(shutil.which("spotnet") is None, reason="console script not installed")
def test_console_script_help():
    res = subprocess.run(["spotnet", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "annotate", "train", "ablate", "detect", "eval-det", "eval-seg"):
        assert cmd in res.stdout


def test_module_entry_usage_exit_code():
    res = subprocess.run([sys.executable, "-m", "spotnet.cli", "train"], capture_output=True, text=True)
    assert res.returncode == 2
