"""Motion-semantic discriminator: pools a motion into the text-embedding space.

A trainable semantic token is prepended to the embedded frames; its encoder
output, projected to the text dimension, is the motion feature compared with
text embeddings by cosine similarity.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import nn as dnn
from .encoding import Normalizer, pad_batch
from .errors import CheckpointError, DivergedTraining, EmptyDataset, ShapeMismatch
from .motion import Motion, get_skeleton, pose_dim
from .prompts import all_prompts
from .text import COSINE_DELTA, TextEncoder, embed

log = logging.getLogger(__name__)


@dataclass
class DiscriminatorConfig:
    layers: int = 4
    latent: int = 64
    ff: int = 128
    heads: int = 4
    text_dim: int = 64

    @classmethod
    def profile(cls, name: str, **overrides) -> DiscriminatorConfig:
        base = {"desk": {}, "paper": {"layers": 8, "latent": 512, "ff": 1024}}[name]
        return cls(**{**base, **overrides})


@dataclass
class DisTrainConfig:
    batch: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    steps: int = 1000
    seed: int = 0
    # "positive": the plain cosine pull; "symmetric": adds in-batch InfoNCE negatives
    objective: str = "positive"
    temperature: float = 0.1
    log_every: int = 100


class DiscriminatorModel(nn.Module):
    kind = "discriminator"

    def __init__(self, pose_dim: int, config: DiscriminatorConfig | None = None, seed: int = 0,
                 normalizer: Normalizer | None = None, skeleton_id: str = "desk15"):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        self.pose_dim = pose_dim
        self.seed = seed
        self.skeleton_id = skeleton_id
        self.normalizer = normalizer or Normalizer.identity(pose_dim)
        c = self.config
        g = dnn.make_generator(seed)
        self.input_embedding = dnn.Linear(pose_dim, c.latent, g)
        self.semantic_token = nn.Parameter(0.02 * torch.randn(c.latent, generator=g, dtype=dnn.DTYPE))
        self.encoder = dnn.TransformerEncoder(c.layers, c.latent, c.heads, c.ff, g)
        self.projection = dnn.Linear(c.latent, c.text_dim, g)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Normalised features ``(B, f, D)`` -> pooled feature ``(B, text_dim)``."""
        b, n, d = x.shape
        if d != self.pose_dim:
            raise ShapeMismatch(f"expected pose dim {self.pose_dim}, got {d}")
        token = self.semantic_token.expand(b, 1, -1)
        seq = torch.cat([token, self.input_embedding(x)], dim=1)
        seq = seq + dnn.positional_encoding(n + 1, self.config.latent)
        if mask is not None:
            mask = torch.cat([torch.ones(b, 1, dtype=torch.bool), mask], dim=1)
        return self.projection(self.encoder(seq, mask)[:, 0])

    def embed_motions(self, motions) -> torch.Tensor:
        x, mask = pad_batch(list(motions), self.normalizer)
        return self(x, mask)

    def save(self, path, extra: dict | None = None) -> None:
        tensors = dict(self.state_dict())
        tensors.update(self.normalizer.state())
        meta = {"config": asdict(self.config), "pose_dim": self.pose_dim, "seed": self.seed,
                "skeleton_id": self.skeleton_id, **(extra or {})}
        dnn.save_checkpoint(path, tensors, self.kind, meta)

    @classmethod
    def load(cls, path) -> DiscriminatorModel:
        kind, meta, tensors = dnn.load_checkpoint(path)
        if kind != cls.kind:
            raise CheckpointError(f"{path} holds a {kind!r}, expected {cls.kind!r}")
        model = cls(meta["pose_dim"], DiscriminatorConfig(**meta["config"]), meta["seed"],
                    Normalizer.from_state(tensors), meta.get("skeleton_id", "desk15"))
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("norm.")})
        return model


def new_discriminator(samples, config: DiscriminatorConfig | None = None, seed: int = 0) -> DiscriminatorModel:
    motions = [s.motion for s in samples]
    sk = motions[0].skeleton_id
    return DiscriminatorModel(pose_dim(get_skeleton(sk).num_joints), config, seed, Normalizer.fit(motions), sk)


def cosine_loss(features: torch.Tensor, text_emb: torch.Tensor, delta: float = COSINE_DELTA) -> torch.Tensor:
    """Mean of ``1 - a.b / max(|a||b|, delta)`` over the batch."""
    num = (features * text_emb).sum(-1)
    den = torch.clamp(features.norm(dim=-1) * text_emb.norm(dim=-1), min=delta)
    return (1.0 - num / den).mean()


def pool_motion(model: DiscriminatorModel, motion: Motion) -> np.ndarray:
    with torch.no_grad():
        return model.embed_motions([motion])[0].numpy()


def dis_loss(model: DiscriminatorModel, motion: Motion, text: str, encoder: TextEncoder | None = None) -> torch.Tensor:
    enc = encoder or embed
    feat = model.embed_motions([motion])
    return cosine_loss(feat, torch.as_tensor(enc(text).values, dtype=dnn.DTYPE)[None])


def _texts(texts, encoder) -> torch.Tensor:
    enc = encoder or embed
    return torch.as_tensor(np.stack([enc(t).values for t in texts]), dtype=dnn.DTYPE)


def pretrain_discriminator(model: DiscriminatorModel, samples, config: DisTrainConfig,
                           encoder: TextEncoder | None = None) -> list[float]:
    samples = list(samples)
    if not samples:
        raise EmptyDataset("cannot pre-train the discriminator on an empty dataset")
    gen = dnn.make_generator(config.seed)
    opt = dnn.AdamW(model, config.lr, (config.beta1, config.beta2), config.weight_decay)
    texts = _texts([s.text for s in samples], encoder)
    curve: list[float] = []
    order: list[int] = []
    model.train()
    for step in range(config.steps):
        if len(order) < config.batch:
            order.extend(torch.randperm(len(samples), generator=gen).tolist())
        idx, order = order[: config.batch], order[config.batch :]
        x, mask = pad_batch([samples[i].motion for i in idx], model.normalizer)
        feat = model(x, mask)
        loss = cosine_loss(feat, texts[idx])
        if config.objective == "symmetric":
            loss = loss + _info_nce(feat, texts[idx], [samples[i].text for i in idx], config.temperature)
        if not torch.isfinite(loss):
            raise DivergedTraining(f"non-finite discriminator loss at step {step}")
        opt.zero_grad()
        dnn.backward(loss)
        opt.step()
        curve.append(float(loss.detach()))
        if config.log_every and step % config.log_every == 0:
            log.info("dis step %d loss %.5f", step, curve[-1])
    model.eval()
    return curve


def _info_nce(feat, text_emb, texts, temperature):
    a = feat / feat.norm(dim=-1, keepdim=True).clamp(min=COSINE_DELTA)
    logits = a @ text_emb.T / temperature
    same = torch.tensor([[ti == tj for tj in texts] for ti in texts])
    logits = logits.masked_fill(same & ~torch.eye(len(texts), dtype=torch.bool), float("-inf"))
    target = torch.arange(len(texts))
    return 0.5 * (torch.nn.functional.cross_entropy(logits, target) + torch.nn.functional.cross_entropy(logits.T, target))


@torch.no_grad()
def mean_dis_loss(model: DiscriminatorModel, samples, encoder: TextEncoder | None = None) -> float:
    feat = model.embed_motions([s.motion for s in samples])
    return float(cosine_loss(feat, _texts([s.text for s in samples], encoder)))


@torch.no_grad()
def retrieval_top1(model: DiscriminatorModel, samples, encoder: TextEncoder | None = None) -> float:
    """Fraction of motions whose own prompt ranks first among all template prompts."""
    prompts = all_prompts()
    bank = _texts(prompts, encoder)
    bank = bank / bank.norm(dim=-1, keepdim=True)
    feat = model.embed_motions([s.motion for s in samples])
    best = (feat @ bank.T).argmax(dim=1).tolist()
    return float(np.mean([prompts[b] == s.text for b, s in zip(best, samples)]))
