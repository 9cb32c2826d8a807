import numpy as np
import pytest
import torch

from fdcheck import check_module
from msd.dataset import generate_sample
from msd.denoiser import text_batch
from msd.diffusion import ddim_invert, ddim_sample, make_schedule
from msd.errors import (
    ConfigInvalid,
    EmptyDataset,
    MissingStyleVocabulary,
    PromptRewriteFailed,
    ZeroVelocityContent,
)
from msd.evaluation import foot_contact_accuracy
from msd.motion import extract_horizontal_root_track, velocity_vector_U
from msd.prompts import parse_prompt, render_prompt
from msd.transfer import (
    FinetuneConfig,
    StyleNeutralPair,
    SweepSetup,
    finetune_style,
    generate_neutral_pair,
    neutralize_content,
    reconstruction_chain_loss,
    semantic_loss,
    sweep_GK,
    total_loss,
    transfer,
    transfer_batch,
    velocity_factor,
    write_rows_csv,
)

# a short schedule keeps DDPM pair generation cheap in unit tests
SHORT = make_schedule("cosine", 100, 10)


def neutral_pool(n=4, length=20):
    return [generate_sample(c, "neutral", length, seed=40 + i) for i, c in enumerate(["walk", "run", "jump", "wave"][:n])]


# -- pair generation ---------------------------------------------------------------


@pytest.mark.parametrize("content,style", [("walk", "old"), ("run", "angry"), ("jump", "proud")])
def test_pair_root_track_is_bitwise_equal(tiny_prior, content, style):
    s = generate_sample(content, style, 20, seed=3)
    pair = generate_neutral_pair(tiny_prior, SHORT, s.motion, s.text, G=95, seed=1)
    assert np.array_equal(extract_horizontal_root_track(pair.neutral), extract_horizontal_root_track(pair.style_example))
    assert pair.neutral.num_frames == s.motion.num_frames
    assert parse_prompt(pair.neutral_prompt) == (content, "neutral")
    assert pair.style == style


def test_pair_is_deterministic_under_seed(tiny_prior, walk_old):
    a = generate_neutral_pair(tiny_prior, SHORT, walk_old.motion, walk_old.text, G=60, seed=2)
    b = generate_neutral_pair(tiny_prior, SHORT, walk_old.motion, walk_old.text, G=60, seed=2)
    c = generate_neutral_pair(tiny_prior, SHORT, walk_old.motion, walk_old.text, G=60, seed=3)
    np.testing.assert_array_equal(a.neutral.features, b.neutral.features)
    assert not np.array_equal(a.neutral.features, c.neutral.features)


def test_zero_noise_pair_is_the_input(tiny_prior, walk_old):
    pair = generate_neutral_pair(tiny_prior, SHORT, walk_old.motion, walk_old.text, G=0)
    np.testing.assert_array_equal(pair.neutral.features, walk_old.motion.features)
    assert foot_contact_accuracy(pair.style_example, pair.neutral) == 1.0


def test_pair_errors(tiny_prior, walk_old):
    with pytest.raises(PromptRewriteFailed):
        generate_neutral_pair(tiny_prior, SHORT, walk_old.motion, "somebody does a thing", G=10)
    with pytest.raises(ConfigInvalid):
        neutralize_content(tiny_prior, SHORT, walk_old.motion, walk_old.text, G=500)


# -- losses ------------------------------------------------------------------------


def test_total_loss_is_exact_weighted_sum():
    assert total_loss(0.25, 3.0, 1.0, 0.1) == 0.25 + 0.1 * 3.0
    l = total_loss(torch.tensor(2.0, dtype=torch.float64), torch.tensor(5.0, dtype=torch.float64), 0.5, 0.2)
    assert float(l) == 0.5 * 2.0 + 0.2 * 5.0


def test_two_step_chain_gradcheck(tiny_prior, walk_old, schedule):
    pair = StyleNeutralPair(walk_old.motion, generate_sample("walk", "neutral", 24, seed=8).motion,
                            walk_old.text, "a person is walking neutrally")
    assert schedule.num_ddim_steps(100) == 2
    norm = tiny_prior.normalizer
    x_s = torch.as_tensor(norm.encode(pair.style_example.features))[None]
    x_sn = torch.as_tensor(norm.encode(pair.neutral.features))[None]
    neutral_emb, style_emb = text_batch([pair.neutral_prompt]), text_batch([pair.style_prompt])
    with torch.no_grad():
        latent = ddim_invert(schedule, lambda m, t: tiny_prior(m, t, neutral_emb), x_sn, 100)

    def chain_loss():
        _, preds = ddim_sample(schedule, lambda m, t: tiny_prior(m, t, style_emb), latent, 100, return_predictions=True)
        return torch.stack([((p - x_s) ** 2).mean() for p in preds]).mean()

    assert check_module(tiny_prior, chain_loss, max_entries=4) < 1e-4
    # the inversion is gradient-free, so the full loss has exactly the fixed-latent gradient
    tiny_prior.zero_grad()
    reconstruction_chain_loss(tiny_prior, schedule, pair, 100).backward()
    full = [p.grad.clone() for p in tiny_prior.parameters()]
    tiny_prior.zero_grad()
    chain_loss().backward()
    assert all(torch.allclose(a, p.grad, rtol=1e-12, atol=1e-15) for a, p in zip(full, tiny_prior.parameters()))


def test_semantic_loss_range_and_vocabulary(tiny_prior, tiny_dis, schedule):
    contents = neutral_pool(2)
    loss = semantic_loss(tiny_prior, tiny_dis, schedule, contents, "old", 100)
    assert 0.0 <= float(loss.detach()) <= 2.0
    with pytest.raises(MissingStyleVocabulary):
        semantic_loss(tiny_prior, tiny_dis, schedule, contents, "sleepy", 100)


# -- fine-tuning -------------------------------------------------------------------


def test_identity_pair_loss_starts_at_prior_error_and_decreases(tiny_prior, tiny_dis, walk_old, schedule):
    pair = StyleNeutralPair(walk_old.motion, walk_old.motion.copy(), walk_old.text, "a person is walking neutrally")
    start = float(reconstruction_chain_loss(tiny_prior, schedule, pair, 100).detach())
    cfg = FinetuneConfig(K=100, lambda_s=0.0, lr=3e-3, batch=1, epochs=7, max_steps=25)
    model, history = finetune_style(tiny_prior, tiny_dis, neutral_pool(), pair, cfg, schedule)
    assert history[0]["L_sr"] == pytest.approx(start, rel=1e-12)
    losses = [h["L_sr"] for h in history]
    assert np.mean(losses[-5:]) < np.mean(losses[:5]) and losses[-1] < losses[0]
    assert all(h["L_s"] == 0.0 for h in history)


def test_finetune_leaves_prior_and_dis_untouched(tiny_prior, tiny_dis, walk_old, schedule):
    prior_before = [p.detach().clone() for p in tiny_prior.parameters()]
    dis_before = [p.detach().clone() for p in tiny_dis.parameters()]
    pair = StyleNeutralPair(walk_old.motion, walk_old.motion.copy(), walk_old.text, "a person is walking neutrally")
    model, history = finetune_style(tiny_prior, tiny_dis, neutral_pool(), pair,
                                    FinetuneConfig(K=100, batch=2, lr=1e-3), schedule)
    assert len(history) == 2  # one epoch of 4 neutrals at batch 2
    assert all(torch.equal(a, b) for a, b in zip(prior_before, tiny_prior.parameters()))
    assert all(torch.equal(a, b) for a, b in zip(dis_before, tiny_dis.parameters()))
    assert all(p.requires_grad for p in tiny_dis.parameters())
    assert not all(torch.equal(a, b) for a, b in zip(prior_before, model.parameters()))
    for h in history:
        assert h["total"] == pytest.approx(h["L_sr"] + 0.1 * h["L_s"], rel=1e-12)


def test_finetune_is_deterministic(tiny_prior, tiny_dis, walk_old, schedule, tmp_path):
    pair = StyleNeutralPair(walk_old.motion, generate_sample("walk", "neutral", 24, seed=8).motion,
                            walk_old.text, "a person is walking neutrally")
    blobs = []
    for run in range(2):
        model, _ = finetune_style(tiny_prior, tiny_dis, neutral_pool(), pair,
                                  FinetuneConfig(K=100, batch=2, lr=1e-3, seed=7), schedule)
        model.save(tmp_path / f"{run}.ckpt")
        blobs.append((tmp_path / f"{run}.ckpt").read_bytes())
    assert blobs[0] == blobs[1]


def test_finetune_errors(tiny_prior, tiny_dis, walk_old, schedule):
    pair = StyleNeutralPair(walk_old.motion, walk_old.motion.copy(), walk_old.text, "a person is walking neutrally")
    with pytest.raises(EmptyDataset):
        finetune_style(tiny_prior, tiny_dis, [walk_old], pair, FinetuneConfig(K=100), schedule)
    with pytest.raises(ConfigInvalid):
        finetune_style(tiny_prior, tiny_dis, neutral_pool(), pair, FinetuneConfig(K=0), schedule)
    with pytest.raises(ConfigInvalid):
        FinetuneConfig(G=100, K=300).validate(1000)
    odd = StyleNeutralPair(walk_old.motion, walk_old.motion, "a person is walking sleepily", "a person is walking neutrally")
    with pytest.raises(MissingStyleVocabulary):
        finetune_style(tiny_prior, tiny_dis, neutral_pool(), odd, FinetuneConfig(K=100), schedule)


# -- transfer ----------------------------------------------------------------------


def test_k_zero_returns_input(tiny_prior, walk_neutral, walk_old, schedule):
    out = transfer(tiny_prior, schedule, walk_neutral.motion, walk_old.text, K=0, style_example=walk_old.motion)
    np.testing.assert_array_equal(out.features, walk_neutral.motion.features)
    assert out is not walk_neutral.motion


def test_transfer_preserves_shape_and_is_deterministic(tiny_prior, walk_neutral, walk_old, schedule):
    a = transfer(tiny_prior, schedule, walk_neutral.motion, walk_old.text, K=300, warp=False)
    b = transfer(tiny_prior, schedule, walk_neutral.motion, walk_old.text, K=300, warp=False)
    np.testing.assert_array_equal(a.features, b.features)
    assert a.num_frames == walk_neutral.motion.num_frames and a.skeleton_id == walk_neutral.motion.skeleton_id


def test_batched_transfer_matches_single(tiny_prior, schedule):
    contents = [generate_sample("walk", "neutral", n, seed=n) for n in (20, 26)]
    texts = [render_prompt("walk", "old")] * 2
    batch = transfer_batch(tiny_prior, schedule, [c.motion for c in contents], texts, 100)
    for c, b in zip(contents, batch):
        single = transfer(tiny_prior, schedule, c.motion, texts[0], K=100, warp=False)
        np.testing.assert_allclose(b.features, single.features, atol=1e-9)


def test_warp_uses_style_velocity(tiny_prior, walk_neutral, walk_old, schedule):
    plain = transfer(tiny_prior, schedule, walk_neutral.motion, walk_old.text, K=100, warp=False)
    warped = transfer(tiny_prior, schedule, walk_neutral.motion, walk_old.text, K=100, style_example=walk_old.motion)
    factor = velocity_factor(walk_old.motion, walk_neutral.motion)
    np.testing.assert_allclose(warped.features[:, 1:3], factor * plain.features[:, 1:3], rtol=1e-12)


def test_self_transfer_factor(walk_old):
    assert abs(velocity_factor(walk_old.motion, walk_old.motion.copy()) - 1.0) < 1e-9


def test_transfer_errors(tiny_prior, walk_old, schedule):
    still = walk_old.motion.with_features(np.repeat(walk_old.motion.features[:1], 10, axis=0))
    still.features[:, 0:3] = 0.0
    assert velocity_vector_U(still) < 1e-8
    with pytest.raises(ZeroVelocityContent):
        transfer(tiny_prior, schedule, still, walk_old.text, K=100, style_example=walk_old.motion)
    with pytest.raises(ConfigInvalid):
        transfer(tiny_prior, schedule, walk_old.motion, walk_old.text, K=100, warp=True)


# -- sweep -------------------------------------------------------------------------


def test_sweep_rows(tiny_prior, tiny_dis, tmp_path):
    style = [generate_sample("walk", "old", 16, seed=1)]
    setup = SweepSetup(style, neutral_pool(2, 16), neutral_pool(2, 16),
                       FinetuneConfig(G=60, K=30, batch=2, lr=1e-3, max_steps=1))
    rows = sweep_GK(tiny_prior, tiny_dis, SHORT, setup, [0, 60], [0, 30])
    assert len(rows) == 4
    assert [(r["param"], r["value"]) for r in rows] == [("G", 0), ("G", 60), ("K", 0), ("K", 30)]
    assert rows[0]["foot_contact_accuracy"] == 1.0 and rows[2]["foot_contact_accuracy"] == 1.0
    assert all(-1.0 <= r["clip_score"] <= 1.0 for r in rows)
    write_rows_csv(rows, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "param,value,foot_contact_accuracy,clip_score" and len(lines) == 5
    assert lines[1].startswith("G,0,1,")
