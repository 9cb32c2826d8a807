"""Minimal differentiable substrate on top of torch tensors (float64).

Torch supplies storage and reverse-mode gradients; the layers, the optimizer
and the checkpoint format live here so their exact definitions are pinned.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import torch
from torch import nn

from .errors import CheckpointError, NonScalarLoss, ShapeMismatch

DTYPE = torch.float64

CKPT_MAGIC = b"MSDCKPT\x00"
CKPT_VERSION = 1


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.as_tensor(data, dtype=DTYPE).clone().requires_grad_(requires_grad)


def make_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def gelu(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def positional_encoding(length: int, dim: int) -> torch.Tensor:
    """Sinusoidal table ``(length, dim)``."""
    pos = torch.arange(length, dtype=DTYPE)[:, None]
    i = torch.arange(0, dim, 2, dtype=DTYPE)
    freq = torch.exp(-math.log(10000.0) * i / dim)
    table = torch.zeros(length, dim, dtype=DTYPE)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return table


class Linear(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, generator: torch.Generator, bias: bool = True):
        super().__init__()
        bound = math.sqrt(6.0 / (in_dim + out_dim))
        w = (torch.rand(out_dim, in_dim, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(out_dim, dtype=DTYPE)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeMismatch(f"linear expects last dim {self.weight.shape[1]}, got {x.shape[-1]}")
        y = x @ self.weight.T
        return y + self.bias if self.bias is not None else y


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.shift = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.gain.shape[0]:
            raise ShapeMismatch(f"layer_norm expects last dim {self.gain.shape[0]}, got {x.shape[-1]}")
        mu = x.mean(dim=-1, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps) * self.gain + self.shift


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, generator: torch.Generator):
        super().__init__()
        if dim % heads:
            raise ShapeMismatch(f"latent {dim} not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(dim, dim, generator)
        self.key = Linear(dim, dim, generator)
        self.value = Linear(dim, dim, generator)
        self.out = Linear(dim, dim, generator)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``x``: (B, L, d). ``mask``: (B, L) bool, True where the token is valid."""
        b, n, d = x.shape
        h = self.heads
        split = lambda t: t.reshape(b, n, h, d // h).transpose(1, 2)  # noqa: E731
        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if mask is not None:
            if mask.shape != (b, n):
                raise ShapeMismatch(f"mask {tuple(mask.shape)} does not match tokens {(b, n)}")
            scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        att = softmax(scores, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class TransformerEncoderLayer(nn.Module):
    """Pre-norm encoder block: attention and GELU feed-forward, each residual."""

    def __init__(self, dim: int, heads: int, ff_dim: int, generator: torch.Generator):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, generator)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(dim, ff_dim, generator)
        self.ff2 = Linear(ff_dim, dim, generator)

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask)
        return x + self.ff2(gelu(self.ff1(self.norm2(x))))


class TransformerEncoder(nn.Module):
    def __init__(self, num_layers: int, dim: int, heads: int, ff_dim: int, generator: torch.Generator):
        super().__init__()
        self.layers = nn.ModuleList(TransformerEncoderLayer(dim, heads, ff_dim, generator) for _ in range(num_layers))
        self.norm = LayerNorm(dim)

    def forward(self, x, mask=None):
        for layer in self.layers:
            x = layer(x, mask)
        return self.norm(x)


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.numel() != 1:
        raise NonScalarLoss(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.requires_grad:
        loss.reshape(()).backward()


def zero_grad(module: nn.Module) -> None:
    for p in module.parameters():
        p.grad = None


class AdamW:
    """Decoupled-weight-decay Adam over a module's named parameters.

    ``state`` holds the per-parameter first/second moments keyed by name, plus
    the shared step count.
    """

    def __init__(self, module: nn.Module, lr: float = 1e-4, betas=(0.9, 0.999), weight_decay: float = 0.01,
                 eps: float = 1e-8):
        self.params = dict(module.named_parameters())
        self.lr = lr
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.exp_avg = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.exp_avg_sq = {k: torch.zeros_like(p) for k, p in self.params.items()}

    @torch.no_grad()
    def step(self) -> None:
        adamw_step(self, self.lr, self.betas[0], self.betas[1], self.weight_decay, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@torch.no_grad()
def adamw_step(opt: AdamW, lr: float, beta1: float, beta2: float, weight_decay: float, eps: float) -> None:
    opt.step_count += 1
    t = opt.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in opt.params.items():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        m, v = opt.exp_avg[name], opt.exp_avg_sq[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.mul_(1.0 - lr * weight_decay)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC(8) | version u32 | header_len u64 | header JSON (utf-8) | float64 LE data
# header: {"version", "kind", "meta": {...}, "tensors": [{"name", "shape", "offset"}]}


def save_checkpoint(path, tensors: dict[str, torch.Tensor], kind: str, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().to(DTYPE).contiguous().cpu()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        raw = t.numpy().astype("<f8").tobytes()
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": CKPT_VERSION, "kind": kind, "meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[str, dict, dict[str, torch.Tensor]]:
    """Returns ``(kind, meta, tensors)``."""
    import numpy as np

    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20 : 20 + hlen])
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return header["kind"], header["meta"], tensors
