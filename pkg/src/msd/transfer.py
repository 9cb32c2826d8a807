"""Few-shot style transfer: neutral pair generation, style fine-tuning and inference."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import nn as dnn
from .denoiser import DenoiserModel, text_batch
from .diffusion import DiffusionSchedule, ddim_invert, ddim_sample, ddpm_sample, forward_sample
from .discriminator import DiscriminatorModel, cosine_loss
from .encoding import masked_mse, pad_batch, unpad
from .errors import (
    ConfigInvalid,
    DivergedTraining,
    EmptyDataset,
    MissingStyleVocabulary,
    PromptRewriteFailed,
    UnknownTemplate,
    ZeroVelocityContent,
)
from .evaluation import foot_contact_accuracy
from .motion import (
    O_X,
    O_Z,
    Motion,
    extract_horizontal_root_track,
    velocity_vector_U,
    warp_global_velocity,
    write_horizontal_root_track,
)
from .prompts import neutralize_prompt, parse_prompt, stylize_prompt
from .text import TextEncoder, cosine_similarity, embed

log = logging.getLogger(__name__)

HORIZONTAL = [O_X, O_Z]
MIN_CONTENT_SPEED = 1e-8


@dataclass
class StyleNeutralPair:
    style_example: Motion
    neutral: Motion
    style_prompt: str
    neutral_prompt: str

    @property
    def style(self) -> str:
        return parse_prompt(self.style_prompt)[1]


@dataclass
class FinetuneConfig:
    G: int = 950
    K: int = 300
    lambda_sr: float = 1.0
    lambda_s: float = 0.1
    epochs: int = 1
    seed: int = 0
    batch: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    max_steps: int | None = None

    def validate(self, T: int | None = None) -> FinetuneConfig:
        top = T if T is not None else self.G
        if not 1 <= self.K <= self.G <= top:
            raise ConfigInvalid(f"need 1 <= K <= G <= T, got K={self.K}, G={self.G}, T={top}")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigInvalid("epochs and batch must be positive")
        return self


# ---------------------------------------------------------------------------
# pair generation


def _denoiser_fn(model: DenoiserModel, emb: torch.Tensor, mask=None):
    def denoise(m, t):
        return model(m, t, emb, mask)

    return denoise


def _neutral_prompt(text: str) -> str:
    try:
        return neutralize_prompt(text)
    except UnknownTemplate as exc:
        raise PromptRewriteFailed(str(exc)) from exc


@torch.no_grad()
def neutralize_content(prior: DenoiserModel, schedule: DiffusionSchedule, motion: Motion, text: str,
                       G: int = 950, seed: int = 0, encoder: TextEncoder | None = None) -> Motion:
    """DDPM re-generation of ``motion`` under its neutral prompt with the root track inpainted.

    The motion is noised to step ``G`` and denoised with the prior; every x0
    estimate has its horizontal root velocities replaced by the input's, and
    the final motion carries the input's track exactly.
    """
    neutral_text = _neutral_prompt(text)
    if G == 0:
        return motion.copy()
    if not 1 <= G <= schedule.T:
        raise ConfigInvalid(f"G must lie in [0, {schedule.T}], got {G}")
    gen = dnn.make_generator(seed)
    x_s = torch.as_tensor(prior.normalizer.encode(motion.features), dtype=dnn.DTYPE)[None]
    known = x_s[..., HORIZONTAL]

    def noise(_t):
        return torch.randn(x_s.shape, generator=gen, dtype=dnn.DTYPE)

    def inpaint(x0_hat):
        x0_hat = x0_hat.clone()
        x0_hat[..., HORIZONTAL] = known
        return x0_hat

    m_G = forward_sample(schedule, x_s, G, noise(G))
    emb = text_batch([neutral_text], encoder)
    x0 = ddpm_sample(schedule, _denoiser_fn(prior, emb), m_G, G, noise, inpaint)
    out = Motion(prior.normalizer.decode(x0[0].numpy()), motion.skeleton_id, motion.framerate)
    return write_horizontal_root_track(out, extract_horizontal_root_track(motion))


def generate_neutral_pair(prior: DenoiserModel, schedule: DiffusionSchedule, style_example: Motion,
                          style_prompt: str, G: int = 950, seed: int = 0,
                          encoder: TextEncoder | None = None) -> StyleNeutralPair:
    neutral = neutralize_content(prior, schedule, style_example, style_prompt, G, seed, encoder)
    return StyleNeutralPair(style_example.copy(), neutral, style_prompt, _neutral_prompt(style_prompt))


# ---------------------------------------------------------------------------
# fine-tuning


def total_loss(l_sr, l_s, lambda_sr: float, lambda_s: float):
    return lambda_sr * l_sr + lambda_s * l_s


def _encode(model: DenoiserModel, motion: Motion) -> torch.Tensor:
    return torch.as_tensor(model.normalizer.encode(motion.features), dtype=dnn.DTYPE)[None]


def reconstruction_chain_loss(model: DenoiserModel, schedule: DiffusionSchedule, pair: StyleNeutralPair, K: int,
                              encoder: TextEncoder | None = None) -> torch.Tensor:
    """Style reconstruction loss averaged over every x0 prediction of the K-step DDIM chain.

    The neutral motion is inverted without gradients under the neutral
    prompt; the reverse chain under the style prompt is differentiable.
    """
    x_sn = _encode(model, pair.neutral)
    x_s = _encode(model, pair.style_example)
    with torch.no_grad():
        latent = ddim_invert(schedule, _denoiser_fn(model, text_batch([pair.neutral_prompt], encoder)), x_sn, K)
    _, preds = ddim_sample(schedule, _denoiser_fn(model, text_batch([pair.style_prompt], encoder)), latent, K,
                           return_predictions=True)
    if not preds:
        return ((latent - x_s) ** 2).mean()
    return torch.stack([((p - x_s) ** 2).mean() for p in preds]).mean()


def stylize_batch(model: DenoiserModel, schedule: DiffusionSchedule, x: torch.Tensor, mask: torch.Tensor,
                  source_texts, target_texts, K: int, encoder: TextEncoder | None = None) -> torch.Tensor:
    """Invert normalised motions K steps under ``source_texts`` and regenerate under ``target_texts``."""
    with torch.no_grad():
        latent = ddim_invert(schedule, _denoiser_fn(model, text_batch(source_texts, encoder), mask), x, K)
    return ddim_sample(schedule, _denoiser_fn(model, text_batch(target_texts, encoder), mask), latent, K)


def semantic_loss(model: DenoiserModel, dis: DiscriminatorModel, schedule: DiffusionSchedule, contents, style: str,
                  K: int, encoder: TextEncoder | None = None) -> torch.Tensor:
    """``1 - cos(Dis(stylised content), E(stylised prompt))`` averaged over the batch."""
    try:
        targets = [stylize_prompt(s.text, style) for s in contents]
    except UnknownTemplate as exc:
        raise MissingStyleVocabulary(str(exc)) from exc
    x, mask = pad_batch([s.motion for s in contents], model.normalizer)
    out = stylize_batch(model, schedule, x, mask, [s.text for s in contents], targets, K, encoder)
    raw = model.normalizer.decode(out)
    feat = dis(dis.normalizer.encode(raw), mask)
    return cosine_loss(feat, text_batch(targets, encoder))


def finetune_style(prior: DenoiserModel, dis: DiscriminatorModel, neutral_samples, pair: StyleNeutralPair,
                   config: FinetuneConfig, schedule: DiffusionSchedule,
                   encoder: TextEncoder | None = None) -> tuple[DenoiserModel, list[dict]]:
    """Copy the prior and adapt it to the pair's style. Returns ``(model, history)``."""
    config.validate(schedule.T)
    neutral_samples = [s for s in neutral_samples if s.style == "neutral"]
    if not neutral_samples and config.lambda_s:
        raise EmptyDataset("no neutral motions for the semantic loss")
    try:
        stylize_prompt(pair.neutral_prompt, pair.style)
    except UnknownTemplate as exc:
        raise MissingStyleVocabulary(str(exc)) from exc
    model = prior.clone()
    model.train()
    for p in dis.parameters():
        p.requires_grad_(False)
    dis.eval()
    opt = dnn.AdamW(model, config.lr, (config.beta1, config.beta2), config.weight_decay)
    gen = dnn.make_generator(config.seed)
    steps_per_epoch = max(1, math.ceil(len(neutral_samples) / config.batch))
    history: list[dict] = []
    try:
        for epoch in range(config.epochs):
            order = torch.randperm(len(neutral_samples), generator=gen).tolist() if neutral_samples else []
            for i in range(steps_per_epoch):
                if config.max_steps is not None and len(history) >= config.max_steps:
                    break
                l_sr = reconstruction_chain_loss(model, schedule, pair, config.K, encoder)
                if config.lambda_s:
                    batch = [neutral_samples[j] for j in order[i * config.batch : (i + 1) * config.batch]]
                    l_s = semantic_loss(model, dis, schedule, batch, pair.style, config.K, encoder)
                else:
                    l_s = torch.zeros((), dtype=dnn.DTYPE)
                loss = total_loss(l_sr, l_s, config.lambda_sr, config.lambda_s)
                if not torch.isfinite(loss):
                    raise DivergedTraining(f"non-finite fine-tuning loss at epoch {epoch} step {i}")
                opt.zero_grad()
                dnn.backward(loss)
                opt.step()
                history.append({"epoch": epoch, "step": i, "L_sr": float(l_sr.detach()),
                                "L_s": float(l_s.detach()), "total": float(loss.detach())})
                log.debug("finetune %d/%d L_sr %.5f L_s %.5f", epoch, i, history[-1]["L_sr"], history[-1]["L_s"])
    finally:
        for p in dis.parameters():
            p.requires_grad_(True)
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# inference


def velocity_factor(style_example: Motion, content: Motion) -> float:
    u_c = velocity_vector_U(content)
    if u_c < MIN_CONTENT_SPEED:
        raise ZeroVelocityContent(f"content motion is static (U = {u_c:.3g}); the warp factor is undefined")
    return velocity_vector_U(style_example) / u_c


@torch.no_grad()
def transfer_batch(model: DenoiserModel, schedule: DiffusionSchedule, contents, target_texts, K: int,
                   warp: bool = False, style_example: Motion | None = None, source_texts=None,
                   encoder: TextEncoder | None = None) -> list[Motion]:
    """Transfer several content motions at once; see :func:`transfer`."""
    contents = list(contents)
    if K == 0:
        return [m.copy() for m in contents]
    if source_texts is None:
        source_texts = [_neutral_prompt(t) for t in target_texts]
    factors = [velocity_factor(style_example, m) for m in contents] if warp else None
    x, mask = pad_batch(contents, model.normalizer)
    out = stylize_batch(model, schedule, x, mask, list(source_texts), list(target_texts), K, encoder)
    motions = unpad(out, mask, model.normalizer, contents)
    if warp:
        motions = [warp_global_velocity(m, f) for m, f in zip(motions, factors)]
    return motions


def transfer(model: DenoiserModel, schedule: DiffusionSchedule, content: Motion, target_text: str, K: int = 300,
             warp: bool = True, style_example: Motion | None = None, source_text: str | None = None,
             encoder: TextEncoder | None = None) -> Motion:
    """Deterministic K-step inversion of ``content`` then regeneration under ``target_text``.

    With ``warp`` the root velocities are rescaled by ``U(style) / U(content)``.
    ``K == 0`` returns the input unchanged.
    """
    if warp and style_example is None:
        raise ConfigInvalid("velocity warping needs the style example")
    sources = None if source_text is None else [source_text]
    return transfer_batch(model, schedule, [content], [target_text], K, warp, style_example, sources, encoder)[0]


# ---------------------------------------------------------------------------
# G / K sweep


@torch.no_grad()
def dis_cosine(dis: DiscriminatorModel, motion: Motion, text: str, encoder: TextEncoder | None = None) -> float:
    feat = dis.embed_motions([motion])[0].numpy()
    return cosine_similarity(feat, (encoder or embed)(text).values)


@dataclass
class SweepSetup:
    style_examples: list  # MotionSample
    neutral_contents: list  # MotionSample, used for transfer in the K sweep
    neutral_pool: list  # MotionSample, semantic-loss batches
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seed: int = 0


def sweep_GK(prior: DenoiserModel, dis: DiscriminatorModel, schedule: DiffusionSchedule, setup: SweepSetup,
             G_list, K_list, encoder: TextEncoder | None = None) -> list[dict]:
    """One row per G (pair alignment and neutrality) then one row per K (transfer alignment and style)."""
    rows: list[dict] = []
    if not setup.style_examples:
        raise EmptyDataset("the sweep needs at least one style example")
    for G in G_list:
        fca, cos = [], []
        for i, s in enumerate(setup.style_examples):
            pair = generate_neutral_pair(prior, schedule, s.motion, s.text, G, setup.seed + i, encoder)
            fca.append(foot_contact_accuracy(pair.style_example, pair.neutral))
            cos.append(dis_cosine(dis, pair.neutral, pair.neutral_prompt, encoder))
        rows.append({"param": "G", "value": G, "foot_contact_accuracy": float(np.mean(fca)),
                     "clip_score": float(np.mean(cos))})
    base = setup.style_examples[0]
    pair = generate_neutral_pair(prior, schedule, base.motion, base.text, setup.finetune.G, setup.seed, encoder)
    for K in K_list:
        targets = [stylize_prompt(c.text, pair.style) for c in setup.neutral_contents]
        if K == 0:
            outs = [c.motion.copy() for c in setup.neutral_contents]
        else:
            cfg = FinetuneConfig(**{**setup.finetune.__dict__, "K": K, "G": max(K, setup.finetune.G)})
            model, _ = finetune_style(prior, dis, setup.neutral_pool, pair, cfg, schedule, encoder)
            outs = transfer_batch(model, schedule, [c.motion for c in setup.neutral_contents], targets, K,
                                  source_texts=[c.text for c in setup.neutral_contents], encoder=encoder)
        fca = [foot_contact_accuracy(c.motion, o) for c, o in zip(setup.neutral_contents, outs)]
        cos = [dis_cosine(dis, o, t, encoder) for o, t in zip(outs, targets)]
        rows.append({"param": "K", "value": K, "foot_contact_accuracy": float(np.mean(fca)) if fca else float("nan"),
                     "clip_score": float(np.mean(cos)) if cos else float("nan")})
    return rows


SWEEP_FIELDS = ("param", "value", "foot_contact_accuracy", "clip_score")


def write_rows_csv(rows, path, fields=SWEEP_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
