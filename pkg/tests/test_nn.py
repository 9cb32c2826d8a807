import math
import struct

import pytest
import torch

from fdcheck import check_input, check_module
from msd import nn as dnn
from msd.denoiser import DenoiserModel, ModelConfig
from msd.diffusion import ddim_sample, make_schedule
from msd.discriminator import DiscriminatorConfig, DiscriminatorModel, cosine_loss
from msd.errors import CheckpointError, NonScalarLoss, ShapeMismatch
from msd.motion import pose_dim

TOL = 1e-4


def g(seed=0):
    return dnn.make_generator(seed)


def rand(*shape, seed=1):
    return torch.randn(*shape, generator=g(seed), dtype=dnn.DTYPE)


# -- forward definitions -----------------------------------------------------------


def test_linear_identity():
    lin = dnn.Linear(3, 3, g())
    with torch.no_grad():
        lin.weight.copy_(torch.eye(3, dtype=dnn.DTYPE))
    x = rand(4, 3)
    assert torch.equal(lin(x), x)
    with pytest.raises(ShapeMismatch):
        lin(rand(4, 2))


def test_softmax_uniform():
    out = dnn.softmax(torch.zeros(2, 5, dtype=dnn.DTYPE))
    assert torch.allclose(out, torch.full((2, 5), 0.2, dtype=dnn.DTYPE))


def test_gelu_reference_points():
    x = torch.tensor([-1.0, 0.0, 2.0], dtype=dnn.DTYPE)
    want = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in (-1.0, 0.0, 2.0)]
    assert torch.allclose(dnn.gelu(x), torch.tensor(want, dtype=dnn.DTYPE), atol=1e-15)


def test_layer_norm_statistics():
    ln = dnn.LayerNorm(6)
    y = ln(rand(3, 6) * 5 + 2)
    assert torch.allclose(y.mean(-1), torch.zeros(3, dtype=dnn.DTYPE), atol=1e-12)
    assert torch.allclose(y.var(-1, unbiased=False), torch.ones(3, dtype=dnn.DTYPE), atol=1e-4)


def test_single_token_attention_is_value_projection():
    att = dnn.MultiHeadSelfAttention(8, 2, g())
    x = rand(2, 1, 8)
    assert torch.allclose(att(x), att.out(att.value(x)), atol=1e-14)


def test_attention_mask_hides_padding():
    att = dnn.MultiHeadSelfAttention(8, 2, g())
    x = rand(1, 4, 8)
    mask = torch.tensor([[True, True, False, False]])
    y1 = att(x, mask)
    x2 = x.clone()
    x2[0, 2:] = 99.0
    assert torch.allclose(att(x2, mask)[0, :2], y1[0, :2], atol=1e-12)
    with pytest.raises(ShapeMismatch):
        att(x, torch.ones(1, 3, dtype=torch.bool))


def test_heads_must_divide():
    with pytest.raises(ShapeMismatch):
        dnn.MultiHeadSelfAttention(10, 3, g())


def test_positional_encoding_shape_and_range():
    pe = dnn.positional_encoding(7, 6)
    assert pe.shape == (7, 6)
    assert float(pe.abs().max()) <= 1.0
    assert torch.allclose(pe[0, 0::2], torch.zeros(3, dtype=dnn.DTYPE))


# -- gradients ---------------------------------------------------------------------


def weighted(y, seed=7):
    return (y * rand(*y.shape, seed=seed)).sum()


def test_grad_sum_of_squares():
    w = rand(5).requires_grad_(True)
    dnn.backward((w**2).sum())
    assert torch.allclose(w.grad, 2 * w.detach())


def test_constant_loss_gives_zero_grads():
    lin = dnn.Linear(2, 2, g())
    dnn.backward((lin(rand(1, 2)) * 0.0).sum())
    assert all(float(p.grad.abs().sum()) == 0.0 for p in lin.parameters())


def test_non_scalar_loss():
    with pytest.raises(NonScalarLoss):
        dnn.backward(rand(3).requires_grad_(True))


@pytest.mark.parametrize("fn", [dnn.gelu, lambda x: dnn.softmax(x, -1)])
def test_elementwise_gradcheck(fn):
    assert check_input(lambda x: weighted(fn(x)), rand(3, 4)) < TOL


@pytest.mark.parametrize("make", [
    lambda: dnn.Linear(5, 3, g()),
    lambda: dnn.LayerNorm(5),
    lambda: dnn.MultiHeadSelfAttention(4, 2, g()),
    lambda: dnn.TransformerEncoderLayer(4, 2, 6, g()),
    lambda: dnn.TransformerEncoder(2, 4, 2, 6, g()),
])
def test_layer_gradcheck(make):
    layer = make()
    width = 5 if isinstance(layer, (dnn.Linear, dnn.LayerNorm)) else 4
    x = rand(2, 3, width)
    if isinstance(layer, dnn.LayerNorm):
        with torch.no_grad():
            layer.gain.copy_(rand(5, seed=3))
            layer.shift.copy_(rand(5, seed=4))
    mask = torch.tensor([[True, True, True], [True, True, False]])
    takes_mask = isinstance(layer, (dnn.MultiHeadSelfAttention, dnn.TransformerEncoderLayer, dnn.TransformerEncoder))

    def loss():
        y = layer(x, mask) if takes_mask else layer(x)
        return weighted(y)

    assert check_module(layer, loss) < TOL
    assert check_input(lambda xi: weighted(layer(xi, mask) if takes_mask else layer(xi)), x) < TOL


def toy_denoiser():
    return DenoiserModel(pose_dim(3), ModelConfig(layers=1, latent=8, ff=12, heads=2, text_dim=6), seed=0)


def test_denoiser_loss_gradcheck_toy_input():
    model = toy_denoiser()
    x0 = rand(1, 2, pose_dim(3))
    xt = rand(1, 2, pose_dim(3), seed=2)
    emb = rand(1, 6, seed=3)
    assert check_module(model, lambda: ((model(xt, 10, emb) - x0) ** 2).mean()) < TOL


def test_discriminator_loss_gradcheck():
    dis = DiscriminatorModel(pose_dim(3), DiscriminatorConfig(layers=1, latent=8, ff=12, heads=2, text_dim=6), seed=0)
    x = rand(2, 3, pose_dim(3))
    emb = rand(2, 6, seed=5)
    assert check_module(dis, lambda: cosine_loss(dis(x), emb)) < TOL


def test_six_step_ddim_chain_gradcheck():
    model = toy_denoiser()
    sched = make_schedule()
    assert sched.num_ddim_steps(300) == 6
    latent = rand(1, 2, pose_dim(3))
    target = rand(1, 2, pose_dim(3), seed=9)
    emb = rand(1, 6, seed=3)

    def loss():
        _, preds = ddim_sample(sched, lambda m, t: model(m, t, emb), latent, 300, return_predictions=True)
        return torch.stack([((p - target) ** 2).mean() for p in preds]).mean()

    assert check_module(model, loss, max_entries=6) < TOL
    assert check_input(lambda z: ((ddim_sample(sched, lambda m, t: model(m, t, emb), z, 300) - target) ** 2).mean(),
                       latent) < TOL


# -- AdamW -------------------------------------------------------------------------


class Scalar(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor([value], dtype=dnn.DTYPE))


def test_adamw_first_step_hand_value():
    m = Scalar(1.0)
    opt = dnn.AdamW(m, lr=0.1, betas=(0.9, 0.999), weight_decay=0.0)
    m.w.grad = torch.tensor([1.0], dtype=dnn.DTYPE)
    opt.step()
    assert abs(float(m.w.detach()) - 0.9) < 1e-7


def test_adamw_zero_grad_no_decay_is_noop():
    m = Scalar(0.37)
    opt = dnn.AdamW(m, lr=0.1, weight_decay=0.0)
    m.w.grad = torch.zeros(1, dtype=dnn.DTYPE)
    opt.step()
    assert float(m.w.detach()) == 0.37


def test_adamw_decoupled_decay():
    m = Scalar(2.0)
    opt = dnn.AdamW(m, lr=0.1, weight_decay=0.01)
    m.w.grad = torch.zeros(1, dtype=dnn.DTYPE)
    opt.step()
    assert abs(float(m.w.detach()) - 2.0 * (1 - 0.1 * 0.01)) < 1e-15


def test_adamw_moment_shapes():
    lin = dnn.Linear(3, 2, g())
    opt = dnn.AdamW(lin)
    assert {k: tuple(v.shape) for k, v in opt.exp_avg.items()} == {k: tuple(p.shape) for k, p in lin.named_parameters()}


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    tensors = {"b": rand(2, 3), "a": rand(4), "s": torch.tensor(1.5, dtype=dnn.DTYPE)}
    dnn.save_checkpoint(tmp_path / "x.ckpt", tensors, "toy", {"k": 1})
    kind, meta, back = dnn.load_checkpoint(tmp_path / "x.ckpt")
    assert kind == "toy" and meta == {"k": 1}
    assert all(torch.equal(back[k], tensors[k]) for k in tensors)
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:8] == dnn.CKPT_MAGIC
    assert struct.unpack("<I", raw[8:12])[0] == dnn.CKPT_VERSION


def test_checkpoint_bytes_deterministic(tmp_path):
    tensors = {"w": rand(3, 3)}
    dnn.save_checkpoint(tmp_path / "a", tensors, "toy")
    dnn.save_checkpoint(tmp_path / "b", tensors, "toy")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        dnn.load_checkpoint(tmp_path / "bad")
    with pytest.raises(CheckpointError):
        dnn.load_checkpoint(tmp_path / "missing")
