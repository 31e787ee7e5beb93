"""Experiment suite: anchor-starvation audit, level-subset ablation, and the
loss-threshold sweep.  Every experiment emits CSV plus a JSON mirror under
<out>/reports/ and is bitwise-reproducible for a fixed seed.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, replace

import numpy as np

from .anchors import level_stats, write_level_stats_csv, write_level_stats_json
from .detector import DetectorConfig
from .training import TrainConfig, evaluate_model, train

__all__ = [
    "reports_dir",
    "audit_positive_samples",
    "run_training",
    "level_subset_ablation",
    "delta_sweep",
]


def reports_dir(out_dir: str) -> str:
    path = os.path.join(out_dir, "reports")
    os.makedirs(path, exist_ok=True)
    return path


def audit_positive_samples(scenes, image_hw, out_dir: str, base_anchor: float = 2.0,
                           pos_thr: float = 0.5, neg_thr: float = 0.4):
    """Per-level positive/negative anchor counts over a dataset (CSV + JSON)."""
    annotations = [[b for b, _ in s.gts] for s in scenes]
    stats = level_stats(annotations, image_hw, base_anchor, pos_thr, neg_thr)
    rep = reports_dir(out_dir)
    write_level_stats_csv(stats, os.path.join(rep, "level_stats.csv"))
    write_level_stats_json(stats, os.path.join(rep, "level_stats.json"))
    return stats


def _write_json(path: str, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def run_training(train_scenes, val_scenes, det_cfg: DetectorConfig,
                 train_cfg: TrainConfig, out_dir: str, tag: str = "train"):
    """Train, evaluate, and persist checkpoint + loss curve + metrics."""
    result = train(train_scenes, det_cfg, train_cfg)
    rep = reports_dir(out_dir)
    result.model.store.save(os.path.join(out_dir, f"checkpoint_{tag}"))
    _write_json(os.path.join(rep, f"loss_curve_{tag}.json"), result.loss_curve)
    with open(os.path.join(rep, f"loss_curve_{tag}.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "lr", "cls", "reg", "total"])
        for row in result.loss_curve:
            w.writerow([row["epoch"], repr(row["lr"]), repr(row["cls"]),
                        repr(row["reg"]), repr(row["total"])])
    metrics = None
    if val_scenes:
        metrics = evaluate_model(result.model, val_scenes).as_dict()
        _write_json(os.path.join(rep, f"metrics_{tag}.json"), metrics)
    return result, metrics


def level_subset_ablation(train_scenes, val_scenes, det_cfg: DetectorConfig,
                          train_cfg: TrainConfig, out_dir: str,
                          subsets=(("P2", "P3"), ("P2", "P3", "P4", "P5", "P6")),
                          n_seeds: int = 3):
    """Train one detector per (subset, seed) with shared seeds and report
    EvalResults side by side with mean/std and a normal-approximation 95% CI."""
    rows = []
    for subset in subsets:
        name = "+".join(subset)
        for s in range(n_seeds):
            seed = train_cfg.seed + s
            cfg_s = replace(train_cfg, seed=seed)
            det_s = replace(det_cfg, levels=tuple(subset))
            result = train(train_scenes, det_s, cfg_s)
            metrics = evaluate_model(result.model, val_scenes).as_dict()
            rows.append({"subset": name, "seed": seed, **metrics})
    summary = []
    for subset in subsets:
        name = "+".join(subset)
        vals = {k: np.array([r[k] for r in rows if r["subset"] == name])
                for k in ("ap", "ap50", "ap75", "ap_vt", "ap_t")}
        entry = {"subset": name, "n_seeds": n_seeds}
        for k, v in vals.items():
            mean = float(v.mean())
            std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
            half = 1.96 * std / np.sqrt(len(v))
            entry[k] = {"mean": mean, "std": std,
                        "ci95": [mean - half, mean + half]}
        summary.append(entry)
    rep = reports_dir(out_dir)
    _write_json(os.path.join(rep, "ablation.json"),
                {"runs": rows, "summary": summary})
    with open(os.path.join(rep, "ablation.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["subset", "seed", "ap", "ap50", "ap75", "ap_vt", "ap_t"])
        for r in rows:
            w.writerow([r["subset"], r["seed"]] +
                       [repr(r[k]) for k in ("ap", "ap50", "ap75", "ap_vt", "ap_t")])
    return rows, summary


def delta_sweep(train_scenes, val_scenes, det_cfg: DetectorConfig,
                train_cfg: TrainConfig, out_dir: str,
                deltas=(0.05, 0.1, 0.15, 0.3, 0.5), k: float = 10.0):
    """One training run per transition threshold (fixed slope k, shared seed)."""
    if not deltas:
        raise ValueError("deltas must be non-empty")
    rows = []
    for delta in deltas:
        cfg_d = replace(train_cfg, reg_loss="dcloss", dc_k=k, dc_delta=float(delta),
                        dc_learnable=False)
        result = train(train_scenes, det_cfg, cfg_d)
        metrics = evaluate_model(result.model, val_scenes).as_dict()
        rows.append({"delta": float(delta), "k": float(k), **metrics})
    rep = reports_dir(out_dir)
    _write_json(os.path.join(rep, "delta_sweep.json"), rows)
    with open(os.path.join(rep, "delta_sweep.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["delta", "k", "ap", "ap50", "ap75", "ap_vt", "ap_t"])
        for r in rows:
            w.writerow([repr(r["delta"]), repr(r["k"])] +
                       [repr(r[m]) for m in ("ap", "ap50", "ap75", "ap_vt", "ap_t")])
    return rows
