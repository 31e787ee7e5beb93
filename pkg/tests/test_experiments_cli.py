import csv
import json
import os

import numpy as np
import pytest

from tinydet.cli import main
from tinydet.detector import DetectorConfig
from tinydet.experiments import (
    audit_positive_samples,
    delta_sweep,
    level_subset_ablation,
    run_training,
)
from tinydet.scenes import SceneSpec, generate_scene, write_dataset
from tinydet.training import TrainConfig

FAST_TRAIN = {"epochs": 1, "batch_size": 4}


def small_scenes(n=6, seed=0):
    spec = SceneSpec(seed=seed)
    return [generate_scene(spec, i) for i in range(n)]


def read_file(path):
    with open(path) as f:
        return f.read()


# ---------------------------------------------------------------------------
# experiment helpers


def test_audit_writes_reports(tmp_path):
    scenes = small_scenes()
    stats = audit_positive_samples(scenes, (128, 128), str(tmp_path))
    assert [s.level for s in stats] == ["P2", "P3", "P4", "P5", "P6"]
    payload = json.load(open(tmp_path / "reports" / "level_stats.json"))
    rows = list(csv.DictReader(open(tmp_path / "reports" / "level_stats.csv")))
    for s, rec, row in zip(stats, payload, rows):
        assert rec["positives"] == int(row["positives"]) == s.positives


def test_run_training_artifacts(tmp_path):
    scenes = small_scenes(4)
    result, metrics = run_training(
        scenes, scenes[:2], DetectorConfig(), TrainConfig(epochs=1),
        str(tmp_path), tag="demo")
    assert os.path.isdir(tmp_path / "checkpoint_demo")
    curve = json.load(open(tmp_path / "reports" / "loss_curve_demo.json"))
    assert curve == result.loss_curve
    saved_metrics = json.load(open(tmp_path / "reports" / "metrics_demo.json"))
    assert saved_metrics == metrics
    rows = list(csv.DictReader(open(tmp_path / "reports" / "loss_curve_demo.csv")))
    # repr-formatted floats reload exactly
    assert float(rows[0]["total"]) == curve[0]["total"]


def test_ablation_summary_and_determinism(tmp_path):
    scenes = small_scenes(4)
    kwargs = dict(det_cfg=DetectorConfig(), train_cfg=TrainConfig(epochs=1),
                  subsets=(("P2", "P3"), ("P2", "P3", "P4", "P5", "P6")),
                  n_seeds=2)
    rows, summary = level_subset_ablation(scenes, scenes[:2],
                                          out_dir=str(tmp_path / "a"), **kwargs)
    assert len(rows) == 4  # 2 subsets x 2 seeds
    assert {r["subset"] for r in rows} == {"P2+P3", "P2+P3+P4+P5+P6"}
    for entry in summary:
        assert entry["n_seeds"] == 2
        for metric in ("ap", "ap50", "ap75", "ap_vt", "ap_t"):
            m = entry[metric]
            assert m["ci95"][0] <= m["mean"] <= m["ci95"][1]
    # a rerun reproduces the report files bitwise
    level_subset_ablation(scenes, scenes[:2], out_dir=str(tmp_path / "b"), **kwargs)
    for name in ("ablation.json", "ablation.csv"):
        assert read_file(tmp_path / "a" / "reports" / name) == \
            read_file(tmp_path / "b" / "reports" / name)


def test_delta_sweep_rows_and_determinism(tmp_path):
    scenes = small_scenes(4)
    kwargs = dict(det_cfg=DetectorConfig(), train_cfg=TrainConfig(epochs=1),
                  deltas=(0.1, 0.3))
    rows = delta_sweep(scenes, scenes[:2], out_dir=str(tmp_path / "a"), **kwargs)
    assert [r["delta"] for r in rows] == [0.1, 0.3]
    assert all(r["k"] == 10.0 for r in rows)
    delta_sweep(scenes, scenes[:2], out_dir=str(tmp_path / "b"), **kwargs)
    for name in ("delta_sweep.json", "delta_sweep.csv"):
        assert read_file(tmp_path / "a" / "reports" / name) == \
            read_file(tmp_path / "b" / "reports" / name)
    with pytest.raises(ValueError, match="deltas"):
        delta_sweep(scenes, scenes[:2], DetectorConfig(), TrainConfig(),
                    str(tmp_path), deltas=())


# ---------------------------------------------------------------------------
# CLI


@pytest.fixture()
def dataset(tmp_path):
    path = tmp_path / "data"
    write_dataset(SceneSpec(seed=3), 6, str(path))
    return str(path)


def cli_config(tmp_path, extra=None):
    cfg = {"train": dict(FAST_TRAIN)}
    if extra:
        cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_cli_gen_and_audit(tmp_path, capsys):
    out = str(tmp_path / "gen")
    assert main(["gen", "--count", "5", "--seed", "3", "--out", out]) == 0
    assert "wrote 5 scenes" in capsys.readouterr().out
    assert main(["audit", "--data", out, "--out", str(tmp_path / "audit")]) == 0
    stdout = capsys.readouterr().out
    assert "P2:" in stdout and "P6:" in stdout
    assert os.path.exists(tmp_path / "audit" / "reports" / "level_stats.csv")


def test_cli_gen_matches_library(tmp_path):
    out = str(tmp_path / "gen")
    main(["gen", "--count", "2", "--seed", "3", "--out", out])
    from tinydet.scenes import read_dataset
    scenes, manifest = read_dataset(out)
    fresh = generate_scene(SceneSpec(seed=3), 1)
    assert scenes[1].image.tobytes() == fresh.image.tobytes()


def test_cli_verify_loss(tmp_path, capsys):
    out = str(tmp_path / "v")
    assert main(["verify-loss", "--out", out]) == 0
    stdout = capsys.readouterr().out
    assert "lipschitz_bound" in stdout
    report = json.load(open(os.path.join(out, "reports", "theorem_report.json")))
    assert report["lipschitz_bound"] == pytest.approx(9.32378, abs=1e-4)
    assert any("10.8" in n for n in report["discrepancy_notes"])


def test_cli_train_eval_roundtrip(tmp_path, dataset, capsys):
    out = str(tmp_path / "run")
    cfg = cli_config(tmp_path)
    assert main(["train", "--data", dataset, "--val-data", dataset,
                 "--config", cfg, "--out", out]) == 0
    stdout = capsys.readouterr().out
    assert "training finished" in stdout and '"ap50"' in stdout
    ckpt = os.path.join(out, "checkpoint_train")
    assert main(["eval", "--data", dataset, "--checkpoint", ckpt,
                 "--out", str(tmp_path / "ev")]) == 0
    eval_metrics = json.load(open(tmp_path / "ev" / "reports" / "metrics_eval.json"))
    train_metrics = json.load(open(os.path.join(out, "reports", "metrics_train.json")))
    assert eval_metrics == train_metrics


def test_cli_ablate_and_sweep(tmp_path, dataset, capsys):
    cfg = cli_config(tmp_path, {"subsets": [["P2", "P3"]], "n_seeds": 1,
                                "deltas": [0.15]})
    assert main(["ablate", "--data", dataset, "--val-data", dataset,
                 "--config", cfg, "--out", str(tmp_path / "ab")]) == 0
    assert '"subset"' in capsys.readouterr().out
    assert os.path.exists(tmp_path / "ab" / "reports" / "ablation.csv")
    assert main(["sweep-delta", "--data", dataset, "--val-data", dataset,
                 "--config", cfg, "--out", str(tmp_path / "sw")]) == 0
    rows = json.load(open(tmp_path / "sw" / "reports" / "delta_sweep.json"))
    assert [r["delta"] for r in rows] == [0.15]


def test_cli_error_exit_codes(tmp_path, capsys):
    # missing dataset -> validation error (1)
    assert main(["audit", "--data", str(tmp_path / "nope"),
                 "--out", str(tmp_path / "o")]) == 1
    assert "error:" in capsys.readouterr().err
    # bad config file -> validation error (1)
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["verify-loss", "--config", str(bad),
                 "--out", str(tmp_path / "o")]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_divergence_exit_code(tmp_path, dataset, capsys):
    cfg = cli_config(tmp_path, {"train": {"epochs": 4, "learning_rate": 1e12}})
    assert main(["train", "--data", dataset, "--config", cfg,
                 "--out", str(tmp_path / "run")]) == 2
    assert "numeric failure" in capsys.readouterr().err


def test_console_script_registered():
    import importlib.metadata as md

    eps = md.entry_points(group="console_scripts")
    names = {e.name for e in eps}
    assert "tinydet" in names
