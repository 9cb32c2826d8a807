"""Metrics and baselines: motion classifiers, CRA/SRA, FMD, foot contacts, DTW and KNN+DTW."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import nn as dnn
from .encoding import Normalizer, pad_batch
from .errors import (
    CheckpointError,
    DimensionMismatch,
    DivergedTraining,
    EmptyDataset,
    EmptyInput,
    LengthMismatch,
    MatrixSqrtFailure,
    NoCandidates,
)
from .motion import Motion, get_skeleton, globalize
from .prompts import CONTENTS, STYLES

log = logging.getLogger(__name__)

CONTACT_HEIGHT = 0.05  # m
CONTACT_SPEED = 0.05  # m/frame


# ---------------------------------------------------------------------------
# classifiers


class MotionClassifier(nn.Module):
    """Two temporal convolutions, masked mean pooling and a linear head."""

    kind = "classifier"

    def __init__(self, pose_dim: int, labels, hidden: int = 64, kernel: int = 5, seed: int = 0,
                 normalizer: Normalizer | None = None, label_kind: str = "style"):
        super().__init__()
        self.labels = tuple(labels)
        self.label_kind = label_kind
        self.pose_dim, self.hidden, self.kernel, self.seed = pose_dim, hidden, kernel, seed
        self.normalizer = normalizer or Normalizer.identity(pose_dim)
        g = dnn.make_generator(seed)

        def conv_weight(cin, cout):
            bound = np.sqrt(6.0 / ((cin + cout) * kernel))
            return nn.Parameter((torch.rand(cout, cin, kernel, generator=g, dtype=dnn.DTYPE) * 2 - 1) * bound)

        self.conv1 = conv_weight(pose_dim, hidden)
        self.bias1 = nn.Parameter(torch.zeros(hidden, dtype=dnn.DTYPE))
        self.conv2 = conv_weight(hidden, hidden)
        self.bias2 = nn.Parameter(torch.zeros(hidden, dtype=dnn.DTYPE))
        self.head = dnn.Linear(hidden, len(self.labels), g)

    def features(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Pooled features ``(B, hidden)`` from normalised ``(B, f, D)``."""
        w = mask.to(dnn.DTYPE)[:, None, :]
        h = x.transpose(1, 2) * w
        h = dnn.gelu(F.conv1d(h, self.conv1, self.bias1, padding=self.kernel // 2)) * w
        h = dnn.gelu(F.conv1d(h, self.conv2, self.bias2, padding=self.kernel // 2)) * w
        return h.sum(-1) / w.sum(-1)

    def forward(self, x, mask):
        return self.head(self.features(x, mask))

    @torch.no_grad()
    def probabilities(self, motions) -> np.ndarray:
        x, mask = pad_batch(list(motions), self.normalizer)
        return dnn.softmax(self(x, mask), dim=-1).numpy()

    def predict(self, motions) -> list[str]:
        return [self.labels[i] for i in self.probabilities(motions).argmax(axis=1)]

    def save(self, path) -> None:
        tensors = dict(self.state_dict())
        tensors.update(self.normalizer.state())
        meta = {"labels": list(self.labels), "label_kind": self.label_kind, "pose_dim": self.pose_dim,
                "hidden": self.hidden, "kernel": self.kernel, "seed": self.seed}
        dnn.save_checkpoint(path, tensors, self.kind, meta)

    @classmethod
    def load(cls, path) -> MotionClassifier:
        kind, meta, tensors = dnn.load_checkpoint(path)
        if kind != cls.kind:
            raise CheckpointError(f"{path} holds a {kind!r}, expected {cls.kind!r}")
        model = cls(meta["pose_dim"], meta["labels"], meta["hidden"], meta["kernel"], meta["seed"],
                    Normalizer.from_state(tensors), meta["label_kind"])
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("norm.")})
        return model


def _label_of(sample, label_kind: str) -> str:
    return sample.content if label_kind == "content" else sample.style


def train_classifier(samples, label_kind: str, steps: int = 300, batch: int = 32, lr: float = 1e-3,
                     seed: int = 0, hidden: int = 64) -> MotionClassifier:
    samples = list(samples)
    if not samples:
        raise EmptyDataset("cannot train a classifier without samples")
    labels = CONTENTS if label_kind == "content" else STYLES
    sk = samples[0].motion.skeleton_id
    model = MotionClassifier(get_skeleton(sk).pose_dim, labels, hidden, seed=seed,
                             normalizer=Normalizer.fit([s.motion for s in samples]), label_kind=label_kind)
    targets = torch.tensor([labels.index(_label_of(s, label_kind)) for s in samples])
    gen = dnn.make_generator(seed)
    opt = dnn.AdamW(model, lr)
    order: list[int] = []
    for step in range(steps):
        if len(order) < batch:
            order.extend(torch.randperm(len(samples), generator=gen).tolist())
        idx, order = order[:batch], order[batch:]
        x, mask = pad_batch([samples[i].motion for i in idx], model.normalizer)
        loss = F.cross_entropy(model(x, mask), targets[idx])
        if not torch.isfinite(loss):
            raise DivergedTraining(f"classifier loss diverged at step {step}")
        opt.zero_grad()
        dnn.backward(loss)
        opt.step()
    model.eval()
    return model


def recognition_accuracy(classifier: MotionClassifier, motions, expected_labels) -> float:
    """Fraction of motions whose argmax label equals the expected label."""
    motions, expected_labels = list(motions), list(expected_labels)
    if not motions:
        raise EmptyInput("no motions to classify")
    if len(motions) != len(expected_labels):
        raise LengthMismatch("one expected label per motion required")
    pred = classifier.predict(motions)
    return float(np.mean([p == e for p, e in zip(pred, expected_labels)]))


def cra(content_classifier: MotionClassifier, transferred, source_content_labels) -> float:
    return recognition_accuracy(content_classifier, transferred, source_content_labels)


def sra(style_classifier: MotionClassifier, transferred, target_style_labels) -> float:
    return recognition_accuracy(style_classifier, transferred, target_style_labels)


@torch.no_grad()
def pooled_features(classifier: MotionClassifier, motions) -> np.ndarray:
    motions = [motions] if isinstance(motions, Motion) else list(motions)
    x, mask = pad_batch(motions, classifier.normalizer)
    return classifier.features(x, mask).numpy()


# ---------------------------------------------------------------------------
# Frechet motion distance


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        self.cov = 0.5 * (cov + cov.T)

    @classmethod
    def from_features(cls, feats) -> FeatureStats:
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise EmptyInput("need at least two feature vectors for a covariance")
        return cls(feats.mean(axis=0), np.cov(feats, rowvar=False))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    if np.any(vals < -1e-8):
        raise MatrixSqrtFailure(f"matrix has a negative eigenvalue {vals.min():.3g}")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """``Tr((cov_a cov_b)^(1/2))`` via the symmetric form ``A^(1/2) B A^(1/2)``."""
    try:
        root_a = _psd_sqrt(cov_a)
        vals = np.linalg.eigvalsh(0.5 * ((root_a @ cov_b @ root_a) + (root_a @ cov_b @ root_a).T))
    except np.linalg.LinAlgError as exc:
        raise MatrixSqrtFailure(str(exc)) from exc
    if np.any(vals < -1e-8):
        raise MatrixSqrtFailure(f"covariance product has a negative eigenvalue {vals.min():.3g}")
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def fmd(a: FeatureStats, b: FeatureStats) -> float:
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise DimensionMismatch(f"feature dims differ: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    trace = np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt_product(a.cov, b.cov)
    if trace < 0.0:
        trace = 0.0 if trace > -1e-8 else trace
    return float(diff @ diff + max(trace, 0.0))


def fmd_between(classifier: MotionClassifier, motions_a, motions_b) -> float:
    return fmd(FeatureStats.from_features(pooled_features(classifier, motions_a)),
               FeatureStats.from_features(pooled_features(classifier, motions_b)))


# ---------------------------------------------------------------------------
# foot contacts


def foot_contacts(motion: Motion, height: float = CONTACT_HEIGHT, speed: float = CONTACT_SPEED) -> np.ndarray:
    """Boolean contact labels ``(f, 2)`` for (left, right) foot."""
    sj = motion.skeleton.special_joints
    world = globalize(motion).positions[:, [sj["left_foot"], sj["right_foot"]]]
    vel = np.zeros(world.shape[:2])
    if motion.num_frames > 1:
        vel[1:] = np.linalg.norm(np.diff(world, axis=0), axis=-1)
        vel[0] = vel[1]
    return (world[..., 1] < height) & (vel < speed)


def contact_agreement(labels_a, labels_b) -> float:
    labels_a, labels_b = np.asarray(labels_a, dtype=bool), np.asarray(labels_b, dtype=bool)
    if labels_a.shape != labels_b.shape:
        raise LengthMismatch(f"contact label shapes differ: {labels_a.shape} vs {labels_b.shape}")
    return float(np.mean(labels_a == labels_b))


def foot_contact_accuracy(a: Motion, b: Motion, height: float = CONTACT_HEIGHT, speed: float = CONTACT_SPEED) -> float:
    if a.num_frames != b.num_frames:
        raise LengthMismatch(f"frame counts differ: {a.num_frames} vs {b.num_frames}")
    return contact_agreement(foot_contacts(a, height, speed), foot_contacts(b, height, speed))


# ---------------------------------------------------------------------------
# dynamic time warping


def euclidean(x, y) -> float:
    return float(np.linalg.norm(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)))


def dtw(a, b, distance=euclidean) -> tuple[float, list[tuple[int, int]]]:
    """Minimum-cost monotone alignment with steps (1,0), (0,1), (1,1).

    Returns the summed frame distance along the best path and the path itself
    as ``(i, j)`` pairs from ``(0, 0)`` to ``(len(a)-1, len(b)-1)``.
    """
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise EmptyInput("dtw needs non-empty sequences")
    if distance is euclidean:
        fa = np.asarray(a, dtype=np.float64).reshape(n, -1)
        fb = np.asarray(b, dtype=np.float64).reshape(m, -1)
        cost = np.sqrt(np.maximum(((fa[:, None, :] - fb[None, :, :]) ** 2).sum(-1), 0.0))
    else:
        cost = np.array([[distance(x, y) for y in b] for x in a], dtype=np.float64)
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        moves = ((acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1))
        _, i, j = min(moves, key=lambda mv: mv[0])
        path.append((i - 1, j - 1))
    return float(acc[n, m]), path[::-1]


def apply_warp(path, motion: Motion, target_length: int | None = None) -> Motion:
    """Resample ``motion`` (the path's first sequence) onto the second sequence's timeline.

    Each target frame takes the first source frame aligned to it.
    """
    target_length = target_length or (max(j for _, j in path) + 1)
    chosen: dict[int, int] = {}
    for i, j in path:
        chosen.setdefault(j, i)
    idx = [chosen[j] for j in range(target_length)]
    return motion.with_features(motion.features[idx])


def knn_dtw_baseline(samples, style_motion: Motion, content_label: str) -> tuple[Motion, float]:
    """Nearest neutral motion of the same content under DTW, warped onto ``style_motion``.

    Returns ``(aligned_motion, mean_frame_distance)``.
    """
    candidates = [s for s in samples if s.style == "neutral" and s.content == content_label]
    if not candidates:
        raise NoCandidates(f"no neutral {content_label!r} motions to search")
    best = None
    for cand in candidates:
        cost, path = dtw(cand.motion.features, style_motion.features)
        score = cost / len(path)
        if best is None or score < best[0]:
            best = (score, cand.motion, path)
    score, motion, path = best
    return apply_warp(path, motion, style_motion.num_frames), score
