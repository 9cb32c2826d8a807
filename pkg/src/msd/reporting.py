"""Evaluation protocol for a style fine-tuned model and report writing."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetSpec, build_dataset
from .denoiser import DenoiserModel
from .diffusion import DiffusionSchedule
from .errors import IOFailure
from .evaluation import (
    MotionClassifier,
    fmd_between,
    foot_contact_accuracy,
    knn_dtw_baseline,
    pooled_features,
    recognition_accuracy,
    train_classifier,
)
from .motion import motion_from_dict
from .prompts import STYLES, parse_prompt, stylize_prompt
from .transfer import transfer_batch


@dataclass
class EvalKit:
    """Classifiers trained on a balanced synthetic set plus a separate balanced evaluation set."""

    content_classifier: MotionClassifier
    style_classifier: MotionClassifier
    eval_samples: list

    def classifier_accuracy(self) -> dict:
        motions = [s.motion for s in self.eval_samples]
        return {
            "content": recognition_accuracy(self.content_classifier, motions, [s.content for s in self.eval_samples]),
            "style": recognition_accuracy(self.style_classifier, motions, [s.style for s in self.eval_samples]),
        }


def classifier_datasets(seed: int = 0, per_cell: int = 16) -> tuple[list, list]:
    """Balanced (train, held-out) sets for the metric classifiers, disjoint from the model data by seed."""
    train = build_dataset(DatasetSpec.uniform(seed=seed + 1, per_cell=per_cell, train_fraction=1.0))["train"]
    held_out = build_dataset(DatasetSpec.uniform(seed=seed + 2, per_cell=per_cell, train_fraction=0.0))["test"]
    return train, held_out


def build_eval_kit(seed: int = 0, per_cell: int = 16, steps: int = 300) -> EvalKit:
    train, held_out = classifier_datasets(seed, per_cell)
    return EvalKit(train_classifier(train, "content", steps=steps, seed=seed),
                   train_classifier(train, "style", steps=steps, seed=seed), held_out)


def separation_ratio(features: np.ndarray, labels) -> float:
    """Mean distance between class means over mean distance of samples to their class mean."""
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    means = np.stack([features[labels == c].mean(axis=0) for c in classes])
    within = np.mean([np.linalg.norm(features[i] - means[classes.index(labels[i])]) for i in range(len(labels))])
    between = np.mean([np.linalg.norm(means[i] - means[j]) for i in range(len(classes)) for j in range(i + 1, len(classes))])
    return float(between / max(within, 1e-12))


def transfer_metrics(model: DenoiserModel, schedule: DiffusionSchedule, kit: EvalKit, contents, style: str, K: int,
                     style_example=None, warp: bool = False) -> dict:
    """Transfer neutral ``contents`` (MotionSample) to ``style`` and score them."""
    targets = [stylize_prompt(c.text, style) for c in contents]
    outs = transfer_batch(model, schedule, [c.motion for c in contents], targets, K, warp, style_example,
                          [c.text for c in contents])
    true = [s.motion for s in kit.eval_samples if s.style == style]
    return {
        "style": style,
        "n_contents": len(contents),
        "CRA": recognition_accuracy(kit.content_classifier, outs, [c.content for c in contents]),
        "SRA": recognition_accuracy(kit.style_classifier, outs, [style] * len(outs)),
        "FMD_transferred": fmd_between(kit.style_classifier, outs, true),
        "FMD_content": fmd_between(kit.style_classifier, [c.motion for c in contents], true),
        "foot_contact_content_vs_transferred": float(np.mean(
            [foot_contact_accuracy(c.motion, o) for c, o in zip(contents, outs)])),
        "transferred": outs,
    }


def evaluate_style_model(model: DenoiserModel, schedule: DiffusionSchedule, splits, cfg,
                         kit: EvalKit | None = None) -> dict:
    meta = model.checkpoint_meta
    style = meta["style"]
    kit = kit or build_eval_kit(cfg.seed, cfg.per_cell, cfg.classifier_steps)
    contents = [s for s in splits["test"] if s.style == "neutral"]
    metrics = transfer_metrics(model, schedule, kit, contents, style, cfg.K)
    metrics.pop("transferred")
    style_example = motion_from_dict(meta["style_example"])
    neutral = motion_from_dict(meta["neutral"])
    content_label = parse_prompt(meta["style_prompt"])[0]
    knn, _ = knn_dtw_baseline(splits["train"], style_example, content_label)
    feats = pooled_features(kit.style_classifier, [s.motion for s in kit.eval_samples])
    labels = [s.style for s in kit.eval_samples]
    class_means = {c: feats[np.asarray(labels) == c].mean(axis=0).tolist() for c in STYLES if c in labels}
    accuracy = kit.classifier_accuracy()
    report = {
        "metrics": {
            **metrics,
            "classifier_accuracy_content": accuracy["content"],
            "classifier_accuracy_style": accuracy["style"],
            "pair_foot_contact_generated": foot_contact_accuracy(style_example, neutral),
            "pair_foot_contact_knn_dtw": foot_contact_accuracy(style_example, knn),
            "feature_separation_ratio": separation_ratio(feats, labels),
        },
        "metadata": {
            "K": cfg.K,
            "feature_dim": int(feats.shape[1]),
            "n_eval_samples": len(kit.eval_samples),
            "n_true_stylized": sum(1 for s in kit.eval_samples if s.style == style),
            "style_prompt": meta["style_prompt"],
        },
        "class_feature_means": class_means,
        "features": [{"id": s.sample_id, "content": s.content, "style": s.style, "feature": f.tolist()}
                     for s, f in zip(kit.eval_samples, feats)],
    }
    return report


def write_report(report: dict, prefix) -> list[Path]:
    prefix = Path(prefix)
    paths = [prefix.with_name(prefix.name + ".json"), prefix.with_name(prefix.name + ".csv"),
             prefix.with_name(prefix.name + "_features.csv")]
    try:
        prefix.parent.mkdir(parents=True, exist_ok=True)
        body = {k: v for k, v in report.items() if k != "features"}
        paths[0].write_text(json.dumps(body, indent=2, sort_keys=True))
        with paths[1].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for key, value in report["metrics"].items():
                w.writerow([key, f"{value:.10g}" if isinstance(value, float) else value])
        with paths[2].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            dim = len(report["features"][0]["feature"]) if report["features"] else 0
            w.writerow(["id", "content", "style"] + [f"f{i}" for i in range(dim)])
            for row in report["features"]:
                w.writerow([row["id"], row["content"], row["style"]] + [f"{v:.10g}" for v in row["feature"]])
    except OSError as exc:
        raise IOFailure(f"cannot write report {prefix}: {exc}") from exc
    return paths
