"""Adversarial losses against numpy oracles, plus trainer mechanics."""

import math

import numpy as np
import pytest
import torch

from srlab.gan import (
    ADV_LOSS_BOUND,
    PROB_EPS,
    FixedConvFeatureExtractor,
    GanTrainConfig,
    GanTrainer,
    TrainingDiverged,
    d_adv_loss,
    g_adv_loss,
    image_logits,
    l1_loss,
    perceptual_loss,
    upscale_with_gan,
    warmup_lr,
)
from srlab.nets import DiscriminatorConfig, UNetBackbone, UNetConfig, UNetDiscriminator


def tiny_generator(seed=0) -> UNetBackbone:
    torch.manual_seed(seed)
    return UNetBackbone(
        UNetConfig(mode="generator", width_multiplier=1 / 16, res_blocks=(1, 1, 1, 1))
    )


def tiny_discriminator(seed=0) -> UNetDiscriminator:
    torch.manual_seed(seed)
    return UNetDiscriminator(DiscriminatorConfig(base_channels=8))


# ---------------------------------------------------------------------------
# Loss oracles


def oracle_adv_losses(real, fake):
    """Direct numpy evaluation of both adversarial losses."""

    def sig(x):
        return 1.0 / (1.0 + np.exp(-x))

    def ilog(p):
        return np.log(np.clip(p, PROB_EPS, 1.0 - PROB_EPS))

    m_real = real.reshape(real.shape[0], -1).mean(axis=1)
    m_fake = fake.reshape(fake.shape[0], -1).mean(axis=1)
    d = -(ilog(sig(m_real)).mean() + ilog(1.0 - sig(m_fake)).mean())
    g = -ilog(sig(m_fake)).mean()
    return d, g


def test_l1_matches_numpy():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3, 5, 5))
    b = rng.normal(size=(3, 3, 5, 5))
    got = l1_loss(torch.from_numpy(a), torch.from_numpy(b))
    assert got.item() == pytest.approx(np.abs(a - b).mean(), abs=1e-12)
    with pytest.raises(ValueError, match="shape"):
        l1_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 5, 5))


def test_image_logits_means_over_pixels():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(4, 1, 6, 6))
    got = image_logits(torch.from_numpy(logits)).numpy()
    assert np.allclose(got, logits.reshape(4, -1).mean(axis=1), atol=1e-12)
    with pytest.raises(ValueError, match="batched"):
        image_logits(torch.zeros(5))


def test_adv_losses_match_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        real = rng.normal(scale=3.0, size=(5, 1, 4, 4))
        fake = rng.normal(scale=3.0, size=(5, 1, 4, 4))
        d_ref, g_ref = oracle_adv_losses(real, fake)
        d_got = d_adv_loss(torch.from_numpy(real), torch.from_numpy(fake)).item()
        g_got = g_adv_loss(torch.from_numpy(fake)).item()
        assert d_got == pytest.approx(d_ref, abs=1e-9)
        assert g_got == pytest.approx(g_ref, abs=1e-9)


def test_adv_losses_saturate_at_bound():
    huge = torch.full((2, 1, 4, 4), 1e4, dtype=torch.float64)
    # Worst case for D: reals scored all-fake, fakes scored all-real.
    d = d_adv_loss(-huge, huge).item()
    assert d == pytest.approx(2 * ADV_LOSS_BOUND, rel=1e-9)
    g = g_adv_loss(-huge).item()
    assert g == pytest.approx(ADV_LOSS_BOUND, rel=1e-9)
    assert math.isfinite(d) and math.isfinite(g)
    assert ADV_LOSS_BOUND == pytest.approx(-math.log(1e-12))


def test_adv_loss_gradients_finite_everywhere():
    for scale in (0.1, 10.0, 1e4):
        fake = torch.full((2, 1, 3, 3), scale, requires_grad=True)
        g_adv_loss(fake).backward()
        assert torch.isfinite(fake.grad).all()


def test_perceptual_matches_manual_sum():
    extractor = FixedConvFeatureExtractor(seed=4)
    rng = np.random.default_rng(5)
    a = torch.from_numpy(rng.normal(size=(2, 3, 32, 32))).float()
    b = torch.from_numpy(rng.normal(size=(2, 3, 32, 32))).float()
    weights = (0.1, 0.1, 1.0, 1.0, 1.0)
    fa = extractor(a)
    fb = extractor(b)
    manual = sum(
        w * ((x - y) ** 2).mean().item() for w, x, y in zip(weights, fa, fb)
    )
    got = perceptual_loss(a, b, extractor, weights).item()
    assert got == pytest.approx(manual, rel=1e-6)
    assert perceptual_loss(a, a, extractor, weights).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError, match="layers"):
        perceptual_loss(a, b, extractor, weights=(1.0, 2.0))


def test_feature_extractor_seeded_and_frozen():
    a = FixedConvFeatureExtractor(seed=9)
    b = FixedConvFeatureExtractor(seed=9)
    c = FixedConvFeatureExtractor(seed=10)
    x = torch.randn(1, 3, 32, 32)
    feats_a = a(x)
    assert len(feats_a) == 5
    assert all(not p.requires_grad for p in a.parameters())
    for fa, fb in zip(feats_a, b(x)):
        assert torch.equal(fa, fb)
    assert not torch.equal(feats_a[0], c(x)[0])
    # Strided layers halve the resolution each time.
    assert [f.shape[-1] for f in feats_a] == [16, 8, 4, 2, 1]


def test_warmup_schedule_shape():
    assert warmup_lr(2e-4, 0, 1000) == pytest.approx(2e-7)
    assert warmup_lr(2e-4, 499, 1000) == pytest.approx(1e-4)
    assert warmup_lr(2e-4, 999, 1000) == pytest.approx(2e-4)
    assert warmup_lr(2e-4, 5000, 1000) == pytest.approx(2e-4)
    with pytest.raises(ValueError):
        warmup_lr(1e-4, -1, 1000)


# ---------------------------------------------------------------------------
# Trainer behavior


def make_batch(seed=0, n=2, size=32):
    rng = np.random.default_rng(seed)
    lr_up = torch.from_numpy(rng.uniform(-1, 1, (n, 3, size, size))).float()
    hr = torch.from_numpy(rng.uniform(-1, 1, (n, 3, size, size))).float()
    return lr_up, hr


def test_l1_training_is_deterministic():
    runs = []
    for _ in range(2):
        trainer = GanTrainer(tiny_generator(seed=1))
        losses = [trainer.l1_step(*make_batch(s))["l1"] for s in range(4)]
        runs.append(losses)
    assert runs[0] == runs[1]


def test_l1_training_reduces_loss():
    cfg = GanTrainConfig(lr_pretrain=1e-3, warmup_steps=5)
    trainer = GanTrainer(tiny_generator(seed=2), cfg)
    lr_up, hr = make_batch(3)
    losses = [trainer.l1_step(lr_up, hr)["l1"] for _ in range(40)]
    assert losses[-1] < losses[0] * 0.8


def test_warmup_applied_to_optimizer():
    cfg = GanTrainConfig(warmup_steps=100)
    trainer = GanTrainer(tiny_generator(), cfg)
    trainer.l1_step(*make_batch())
    assert trainer.opt_g.param_groups[0]["lr"] == pytest.approx(
        warmup_lr(cfg.lr_pretrain, 0, 100)
    )
    trainer.l1_step(*make_batch())
    assert trainer.opt_g.param_groups[0]["lr"] == pytest.approx(
        warmup_lr(cfg.lr_pretrain, 1, 100)
    )


def test_adversarial_requires_begin():
    trainer = GanTrainer(tiny_generator())
    with pytest.raises(RuntimeError, match="begin_adversarial"):
        trainer.adversarial_step(*make_batch())


def test_adversarial_step_updates_both_nets():
    trainer = GanTrainer(tiny_generator(seed=5))
    trainer.begin_adversarial(tiny_discriminator(seed=6))
    g_before = [p.detach().clone() for p in trainer.generator.parameters()]
    d_before = [p.detach().clone() for p in trainer.discriminator.parameters()]
    metrics = trainer.adversarial_step(*make_batch(7))
    assert set(metrics) == {"d_loss", "g_l1", "g_adv", "g_total"}
    assert any(
        not torch.equal(a, b) for a, b in zip(g_before, trainer.generator.parameters())
    )
    assert any(
        not torch.equal(a, b)
        for a, b in zip(d_before, trainer.discriminator.parameters())
    )
    assert trainer.adv_steps == 1


def test_adversarial_metrics_include_perceptual_when_enabled():
    trainer = GanTrainer(
        tiny_generator(seed=5), feature_extractor=FixedConvFeatureExtractor(seed=0)
    )
    trainer.begin_adversarial(tiny_discriminator(seed=6))
    metrics = trainer.adversarial_step(*make_batch(7))
    assert "g_perceptual" in metrics
    assert metrics["g_total"] >= metrics["g_l1"]


def test_begin_adversarial_resets_counter_and_rates():
    cfg = GanTrainConfig(warmup_steps=10)
    trainer = GanTrainer(tiny_generator(), cfg)
    for s in range(3):
        trainer.l1_step(*make_batch(s))
    trainer.begin_adversarial(tiny_discriminator())
    assert trainer.adv_steps == 0
    trainer.adversarial_step(*make_batch(9))
    assert trainer.opt_g.param_groups[0]["lr"] == pytest.approx(
        warmup_lr(cfg.lr_adv_generator, 0, 10)
    )
    assert trainer.opt_d.param_groups[0]["lr"] == pytest.approx(
        warmup_lr(cfg.lr_adv_discriminator, 0, 10)
    )


def test_finetune_mode_uses_lower_rates():
    cfg = GanTrainConfig(warmup_steps=1)
    trainer = GanTrainer(tiny_generator(), cfg)
    trainer.begin_adversarial(tiny_discriminator(), finetune=True)
    trainer.adversarial_step(*make_batch())
    assert trainer.opt_g.param_groups[0]["lr"] == pytest.approx(cfg.lr_finetune_generator)
    assert trainer.opt_d.param_groups[0]["lr"] == pytest.approx(
        cfg.lr_finetune_discriminator
    )


def test_nan_weights_halt_training():
    trainer = GanTrainer(tiny_generator())
    with torch.no_grad():
        next(trainer.generator.parameters()).mul_(float("nan"))
    with pytest.raises(TrainingDiverged) as err:
        trainer.l1_step(*make_batch())
    assert err.value.stage == "l1"
    assert err.value.step == 0
    assert "l1" in err.value.metrics


def test_trainer_state_round_trip_resumes_identically():
    def fresh():
        t = GanTrainer(tiny_generator(seed=11))
        t.begin_adversarial(tiny_discriminator(seed=12))
        return t

    a = fresh()
    for s in range(3):
        a.adversarial_step(*make_batch(s))
    state = a.state_dict()
    after_a = [a.adversarial_step(*make_batch(10 + s))["g_total"] for s in range(2)]

    b = fresh()
    b.load_state_dict(state)
    assert b.adv_steps == 3
    after_b = [b.adversarial_step(*make_batch(10 + s))["g_total"] for s in range(2)]
    assert after_a == after_b


def test_ema_shadow_lags_parameters():
    trainer = GanTrainer(tiny_generator(seed=13), GanTrainConfig(ema_decay=0.5))
    lr_up, hr = make_batch(14)
    for _ in range(5):
        trainer.l1_step(lr_up, hr)
    name, param = next(iter(trainer.generator.named_parameters()))
    assert not torch.equal(trainer.ema.shadow[name], param)


def test_upscale_with_gan_shape_range_and_ema_restore():
    gen = tiny_generator(seed=15)
    trainer = GanTrainer(gen)
    trainer.l1_step(*make_batch(16))
    before = {n: p.detach().clone() for n, p in gen.named_parameters()}
    img = np.random.default_rng(17).uniform(0, 1, (3, 8, 8))
    out = upscale_with_gan(gen, img, scale=4, ema=trainer.ema)
    assert out.shape == (3, 32, 32)
    assert out.min() >= 0.0 and out.max() <= 1.0
    for n, p in gen.named_parameters():
        assert torch.equal(before[n], p)
    # EMA weights differ from live weights, so outputs should differ too.
    out_live = upscale_with_gan(gen, img, scale=4)
    assert not np.array_equal(out, out_live)


def test_config_validation():
    with pytest.raises(ValueError, match="lr_pretrain"):
        GanTrainConfig(lr_pretrain=0.0)
    with pytest.raises(ValueError, match="ema_decay"):
        GanTrainConfig(ema_decay=1.0)
    with pytest.raises(ValueError):
        GanTrainConfig(adam_betas=(0.99, 0.9))
