"""Feature normalisation and padded batching shared by the networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .motion import Motion
from .nn import DTYPE

STD_FLOOR = 1e-3


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, motions) -> Normalizer:
        frames = np.concatenate([m.features for m in motions], axis=0)
        return cls(frames.mean(axis=0), np.maximum(frames.std(axis=0), STD_FLOOR))

    @classmethod
    def identity(cls, dim: int) -> Normalizer:
        return cls(np.zeros(dim), np.ones(dim))

    def encode(self, features):
        if isinstance(features, torch.Tensor):
            return (features - self.mean_t) / self.std_t
        return (np.asarray(features) - self.mean) / self.std

    def decode(self, features):
        if isinstance(features, torch.Tensor):
            return features * self.std_t + self.mean_t
        return np.asarray(features) * self.std + self.mean

    @property
    def mean_t(self) -> torch.Tensor:
        return torch.as_tensor(self.mean, dtype=DTYPE)

    @property
    def std_t(self) -> torch.Tensor:
        return torch.as_tensor(self.std, dtype=DTYPE)

    def state(self, prefix: str = "norm.") -> dict[str, torch.Tensor]:
        return {prefix + "mean": self.mean_t, prefix + "std": self.std_t}

    @classmethod
    def from_state(cls, tensors: dict, prefix: str = "norm.") -> Normalizer:
        return cls(tensors[prefix + "mean"].numpy().copy(), tensors[prefix + "std"].numpy().copy())


def pad_batch(motions, normalizer: Normalizer, length: int | None = None):
    """Stack normalised motions into ``(B, L, D)`` plus a validity mask ``(B, L)``."""
    lengths = [m.num_frames for m in motions]
    length = length or max(lengths)
    dim = motions[0].features.shape[1]
    x = torch.zeros(len(motions), length, dim, dtype=DTYPE)
    mask = torch.zeros(len(motions), length, dtype=torch.bool)
    for i, m in enumerate(motions):
        x[i, : m.num_frames] = torch.as_tensor(normalizer.encode(m.features), dtype=DTYPE)
        mask[i, : m.num_frames] = True
    return x, mask


def unpad(x: torch.Tensor, mask: torch.Tensor, normalizer: Normalizer, template: Motion | list[Motion]) -> list[Motion]:
    """Inverse of :func:`pad_batch`: decode rows back into motions."""
    templates = template if isinstance(template, list) else [template] * x.shape[0]
    out = []
    for i in range(x.shape[0]):
        n = int(mask[i].sum())
        feats = normalizer.decode(x[i, :n].detach().cpu().numpy())
        out.append(Motion(feats, templates[i].skeleton_id, templates[i].framerate))
    return out


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over valid frames (all channels)."""
    w = mask.to(DTYPE)[..., None]
    return ((pred - target) ** 2 * w).sum() / (w.sum() * pred.shape[-1])
