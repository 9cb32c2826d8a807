"""Text-conditioned x0-predicting transformer and its pre-training."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import nn as dnn
from .diffusion import DiffusionSchedule, ddpm_sample, forward_sample
from .encoding import Normalizer, masked_mse, pad_batch, unpad
from .errors import CheckpointError, DivergedTraining, EmptyDataset, ShapeMismatch
from .motion import Motion, get_skeleton, pose_dim
from .text import TextEncoder, embed

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    layers: int = 4
    latent: int = 64
    ff: int = 128
    heads: int = 4
    text_dim: int = 64
    T: int = 1000

    @classmethod
    def profile(cls, name: str, **overrides) -> ModelConfig:
        base = {"desk": {}, "paper": {"layers": 8, "latent": 512, "ff": 1024}}[name]
        return cls(**{**base, **overrides})


@dataclass
class TrainConfig:
    batch: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    steps: int = 2000
    seed: int = 0
    log_every: int = 100


class DenoiserModel(nn.Module):
    """``x0_hat = model(m_t, t, text)`` on normalised pose features.

    The condition token (projected text embedding plus a time embedding) is
    prepended to the embedded frames; only frame outputs are decoded.
    """

    kind = "denoiser"

    def __init__(self, pose_dim: int, config: ModelConfig | None = None, seed: int = 0,
                 normalizer: Normalizer | None = None, skeleton_id: str = "desk15"):
        super().__init__()
        self.config = config or ModelConfig()
        self.pose_dim = pose_dim
        self.seed = seed
        self.skeleton_id = skeleton_id
        self.normalizer = normalizer or Normalizer.identity(pose_dim)
        c = self.config
        g = dnn.make_generator(seed)
        self.input_embedding = dnn.Linear(pose_dim, c.latent, g)
        self.time_mlp1 = dnn.Linear(c.latent, c.latent, g)
        self.time_mlp2 = dnn.Linear(c.latent, c.latent, g)
        self.text_proj = dnn.Linear(c.text_dim, c.latent, g)
        self.encoder = dnn.TransformerEncoder(c.layers, c.latent, c.heads, c.ff, g)
        self.output = dnn.Linear(c.latent, pose_dim, g)
        self.register_buffer("time_table", dnn.positional_encoding(c.T + 1, c.latent), persistent=False)

    def forward(self, x_t: torch.Tensor, t, text_emb: torch.Tensor, mask: torch.Tensor | None = None):
        b, n, d = x_t.shape
        if d != self.pose_dim:
            raise ShapeMismatch(f"expected pose dim {self.pose_dim}, got {d}")
        if text_emb.shape != (b, self.config.text_dim):
            raise ShapeMismatch(f"text embedding must be ({b}, {self.config.text_dim}), got {tuple(text_emb.shape)}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(b)
        temb = self.time_mlp2(dnn.gelu(self.time_mlp1(self.time_table[t])))
        cond = (self.text_proj(text_emb) + temb)[:, None]
        seq = torch.cat([cond, self.input_embedding(x_t)], dim=1)
        seq = seq + dnn.positional_encoding(n + 1, self.config.latent)
        if mask is not None:
            mask = torch.cat([torch.ones(b, 1, dtype=torch.bool), mask], dim=1)
        h = self.encoder(seq, mask)
        return self.output(h[:, 1:])

    # -- persistence -------------------------------------------------------
    def meta(self) -> dict:
        return {"config": asdict(self.config), "pose_dim": self.pose_dim, "seed": self.seed,
                "skeleton_id": self.skeleton_id}

    def save(self, path, extra: dict | None = None) -> None:
        tensors = {k: v for k, v in self.state_dict().items()}
        tensors.update(self.normalizer.state())
        dnn.save_checkpoint(path, tensors, self.kind, {**self.meta(), **(extra or {})})

    @classmethod
    def load(cls, path) -> DenoiserModel:
        kind, meta, tensors = dnn.load_checkpoint(path)
        if kind != cls.kind:
            raise CheckpointError(f"{path} holds a {kind!r}, expected {cls.kind!r}")
        model = cls(meta["pose_dim"], ModelConfig(**meta["config"]), meta["seed"],
                    Normalizer.from_state(tensors), meta.get("skeleton_id", "desk15"))
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("norm.")})
        model.checkpoint_meta = meta
        return model

    def clone(self) -> DenoiserModel:
        return copy.deepcopy(self)


def new_denoiser(samples, config: ModelConfig | None = None, seed: int = 0) -> DenoiserModel:
    motions = [s.motion for s in samples]
    sk = motions[0].skeleton_id
    return DenoiserModel(pose_dim(get_skeleton(sk).num_joints), config, seed, Normalizer.fit(motions), sk)


def text_batch(texts, encoder: TextEncoder | None = None) -> torch.Tensor:
    enc = encoder or embed
    return torch.as_tensor(np.stack([enc(t).values for t in texts]), dtype=dnn.DTYPE)


def predict_x0(model: DenoiserModel, m_t: torch.Tensor, t: int, text_embedding, mask=None) -> torch.Tensor:
    """x0 prediction for normalised ``m_t`` of shape (f, D) or (B, f, D)."""
    single = m_t.dim() == 2
    x = m_t[None] if single else m_t
    emb = torch.as_tensor(getattr(text_embedding, "values", text_embedding), dtype=dnn.DTYPE)
    if emb.dim() == 1:
        emb = emb[None].expand(x.shape[0], -1)
    out = model(x, t, emb, mask)
    return out[0] if single else out


def pretrain_prior(model: DenoiserModel, samples, schedule: DiffusionSchedule, config: TrainConfig,
                   encoder: TextEncoder | None = None) -> list[float]:
    """Minimise ``E ||m0 - model(m_t, t, d)||^2`` with t uniform on [1, T]. Returns the loss curve."""
    samples = list(samples)
    if not samples:
        raise EmptyDataset("cannot pre-train on an empty dataset")
    gen = dnn.make_generator(config.seed)
    opt = dnn.AdamW(model, config.lr, (config.beta1, config.beta2), config.weight_decay)
    texts = text_batch([s.text for s in samples], encoder)
    curve: list[float] = []
    order: list[int] = []
    model.train()
    for step in range(config.steps):
        if len(order) < config.batch:
            order.extend(torch.randperm(len(samples), generator=gen).tolist())
        idx, order = order[: config.batch], order[config.batch :]
        x0, mask = pad_batch([samples[i].motion for i in idx], model.normalizer)
        t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=dnn.DTYPE)
        ab = torch.as_tensor(schedule.alpha_bar, dtype=dnn.DTYPE)[t][:, None, None]
        x_t = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
        loss = masked_mse(model(x_t, t, texts[idx], mask), x0, mask)
        if not torch.isfinite(loss):
            raise DivergedTraining(f"non-finite prior loss at step {step}")
        opt.zero_grad()
        dnn.backward(loss)
        opt.step()
        curve.append(float(loss.detach()))
        if config.log_every and step % config.log_every == 0:
            log.info("prior step %d loss %.5f", step, curve[-1])
    model.eval()
    return curve


@torch.no_grad()
def reconstruction_error(model: DenoiserModel, samples, schedule: DiffusionSchedule, t: int, seed: int = 0,
                         encoder: TextEncoder | None = None) -> float:
    """Mean ``||x0_hat - x0||^2`` (normalised space) for samples noised to step ``t``."""
    gen = dnn.make_generator(seed)
    x0, mask = pad_batch([s.motion for s in samples], model.normalizer)
    eps = torch.randn(x0.shape, generator=gen, dtype=dnn.DTYPE)
    x_t = forward_sample(schedule, x0, t, eps)
    pred = model(x_t, t, text_batch([s.text for s in samples], encoder), mask)
    return float(masked_mse(pred, x0, mask))


@torch.no_grad()
def generate_from_text(model: DenoiserModel, schedule: DiffusionSchedule, text: str, frames: int, seed: int,
                       encoder: TextEncoder | None = None, framerate: float = 20.0) -> Motion:
    """Sample a motion from noise with the full DDPM chain."""
    return generate_batch(model, schedule, [text], frames, [seed], encoder, framerate)[0]


@torch.no_grad()
def generate_batch(model: DenoiserModel, schedule: DiffusionSchedule, texts, frames: int, seeds,
                   encoder: TextEncoder | None = None, framerate: float = 20.0) -> list[Motion]:
    gens = [dnn.make_generator(s) for s in seeds]
    shape = (frames, model.pose_dim)

    def noise(_t):
        return torch.stack([torch.randn(shape, generator=g, dtype=dnn.DTYPE) for g in gens])

    emb = text_batch(texts, encoder)
    x_T = noise(schedule.T)
    x0 = ddpm_sample(schedule, lambda m, t: model(m, t, emb), x_T, schedule.T, noise)
    mask = torch.ones(len(texts), frames, dtype=torch.bool)
    template = Motion(np.zeros(shape), model.skeleton_id, framerate)
    return unpad(x0, mask, model.normalizer, template)
