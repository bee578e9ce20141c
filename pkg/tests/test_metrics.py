"""Metric and SbS protocol tests with brute-force and exact-arithmetic oracles."""

import fractions
import math

import numpy as np
import pytest
import scipy.stats

from srlab.metrics import (
    BETTER,
    EQUAL,
    WORSE,
    EarlyStopState,
    MetricDeltaJudge,
    MetricReport,
    PsnrPairJudge,
    SbsTally,
    binom_sbs_test,
    checkpoint_grid,
    early_stop_update,
    evaluate_pair,
    format_metric_table,
    format_win_matrix,
    metric_registry,
    psnr,
    register_metric,
    significance,
    ssim,
    win_rate,
)


def rand_image(seed, c=3, h=24, w=24):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(c, h, w))


# ---------------------------------------------------------------------------
# PSNR


def test_psnr_known_values():
    a = np.full((3, 8, 8), 0.5)
    b = np.full((3, 8, 8), 0.6)
    # mse = 0.01 -> 20 dB
    assert abs(psnr(a, b) - 20.0) < 1e-12
    c = np.full((3, 8, 8), 0.53)
    # mse = 9e-4 -> 10*log10(1/9e-4)
    assert abs(psnr(a, c) - 10 * math.log10(1 / 9e-4)) < 1e-9


def test_psnr_identical_is_inf():
    a = rand_image(0)
    assert psnr(a, a) == math.inf


def test_psnr_symmetric_and_shape_checked():
    a, b = rand_image(1), rand_image(2)
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(a, rand_image(3, h=12))


def test_psnr_matches_brute_force():
    for seed in range(10):
        a, b = rand_image(seed), rand_image(seed + 100)
        ref = 10 * math.log10(1.0 / np.mean((a - b) ** 2))
        assert abs(psnr(a, b) - ref) < 1e-9


# ---------------------------------------------------------------------------
# SSIM


def oracle_ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Sliding-window SSIM computed window by window from the definition."""
    half = window // 2
    g = np.exp(-0.5 * ((np.arange(window) - half) / sigma) ** 2)
    w2 = np.outer(g, g)
    w2 /= w2.sum()
    c1, c2 = k1 * k1, k2 * k2
    chans = []
    _, h, w = a.shape
    for c in range(a.shape[0]):
        vals = []
        for i in range(h - window + 1):
            for j in range(w - window + 1):
                x = a[c, i : i + window, j : j + window]
                y = b[c, i : i + window, j : j + window]
                mx = (w2 * x).sum()
                my = (w2 * y).sum()
                vx = (w2 * x * x).sum() - mx * mx
                vy = (w2 * y * y).sum() - my * my
                cv = (w2 * x * y).sum() - mx * my
                vals.append(
                    ((2 * mx * my + c1) * (2 * cv + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2))
                )
        chans.append(np.mean(vals))
    return float(np.mean(chans))


def test_ssim_matches_brute_force():
    for seed in range(5):
        a = rand_image(seed, h=16, w=16)
        b = np.clip(a + 0.1 * np.random.default_rng(seed + 50).normal(size=a.shape), 0, 1)
        assert abs(ssim(a, b) - oracle_ssim(a, b)) < 1e-10


def test_ssim_identical_is_one():
    a = rand_image(7)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetric():
    a, b = rand_image(8), rand_image(9)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_constant_images_closed_form():
    a = np.full((3, 16, 16), 0.5)
    b = np.full((3, 16, 16), 0.25)
    # mu terms only: (2*0.5*0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4)
    expect = (0.25 + 1e-4) / (0.3125 + 1e-4)
    assert abs(ssim(a, b) - expect) < 1e-12
    assert abs(ssim(a, b) - 0.8002) < 1e-3


def test_ssim_decreases_with_noise():
    a = rand_image(10, h=32, w=32)
    rng = np.random.default_rng(11)
    noise = rng.normal(size=a.shape)
    s_small = ssim(a, np.clip(a + 0.02 * noise, 0, 1))
    s_big = ssim(a, np.clip(a + 0.2 * noise, 0, 1))
    assert s_big < s_small < 1.0


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(rand_image(12, h=8, w=8), rand_image(13, h=8, w=8))


# ---------------------------------------------------------------------------
# Binomial test


def oracle_binom_two_sided(t1, t2):
    """Min-likelihood two-sided p at p=0.5, in exact rational arithmetic."""
    n = t1 + t2
    pk = fractions.Fraction(math.comb(n, t1), 2**n)
    acc = fractions.Fraction(0)
    for i in range(n + 1):
        pi = fractions.Fraction(math.comb(n, i), 2**n)
        if pi <= pk:
            acc += pi
    return float(min(acc, fractions.Fraction(1)))


def test_binom_matches_fraction_oracle():
    for t1, t2, ties in [(0, 0, 2), (5, 0, 0), (0, 5, 0), (3, 3, 0), (10, 3, 2),
                         (7, 7, 3), (91, 9, 0), (60, 40, 0), (1, 0, 0), (100, 100, 0)]:
        tally = SbsTally(t1, t2, ties)
        mine = binom_sbs_test(tally)
        ref = oracle_binom_two_sided(t1 + ties // 2, t2 + ties // 2)
        assert abs(mine - ref) < 1e-12, (t1, t2, ties)


def test_binom_matches_scipy():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 120))
        k = int(rng.integers(0, n + 1))
        mine = binom_sbs_test(SbsTally(k, n - k, 0))
        ref = scipy.stats.binomtest(k, n, 0.5).pvalue
        assert abs(mine - ref) < 1e-9, (k, n)


def test_binom_properties():
    # symmetric in the two sides
    assert binom_sbs_test(SbsTally(8, 3, 1)) == binom_sbs_test(SbsTally(3, 8, 1))
    # balanced tally -> p = 1
    assert binom_sbs_test(SbsTally(6, 6, 0)) == 1.0
    # more lopsided -> smaller p
    assert binom_sbs_test(SbsTally(10, 2, 0)) < binom_sbs_test(SbsTally(8, 4, 0))
    # odd tie is dropped
    assert binom_sbs_test(SbsTally(5, 2, 3)) == binom_sbs_test(SbsTally(5, 2, 2))
    with pytest.raises(ValueError):
        binom_sbs_test(SbsTally(0, 0, 1))  # one tie floors to zero trials
    with pytest.raises(ValueError):
        SbsTally(-1, 0, 0)


# ---------------------------------------------------------------------------
# Win rate and significance


def test_win_rate_values():
    assert win_rate(SbsTally(91, 9, 0)) == pytest.approx(91.0)
    assert win_rate(SbsTally(0, 0, 10)) == pytest.approx(50.0)
    assert win_rate(SbsTally(3, 1, 2)) == pytest.approx(100 * 4 / 6)
    with pytest.raises(ValueError):
        win_rate(SbsTally(0, 0, 0))


def test_win_rate_complementary():
    t = SbsTally(13, 6, 5)
    flipped = SbsTally(6, 13, 5)
    assert win_rate(t) + win_rate(flipped) == pytest.approx(100.0)


def test_significance_boundaries():
    t_up = SbsTally(9, 1, 0)
    t_down = SbsTally(1, 9, 0)
    assert significance(t_up, p_value=0.04) == BETTER
    assert significance(t_down, p_value=0.04) == WORSE
    assert significance(t_up, p_value=0.05) == EQUAL
    assert significance(t_up, p_value=0.051) == EQUAL


def test_significance_computes_p_when_missing():
    # 10-0: p = 2/1024 < 0.05
    assert significance(SbsTally(10, 0, 0)) == BETTER
    assert significance(SbsTally(0, 10, 0)) == WORSE
    assert significance(SbsTally(6, 4, 0)) == EQUAL


# ---------------------------------------------------------------------------
# Checkpoint grid and early stopping


def test_checkpoint_grid_reference_values():
    assert checkpoint_grid(10) == [10, 20, 40, 60, 100, 140, 220, 300, 460, 620]


def test_checkpoint_grid_interval_doubling_property():
    g = checkpoint_grid(14, initial=5)
    gaps = np.diff([0] + g)
    # every interval size appears exactly twice before doubling
    for i in range(0, len(gaps) - 1, 2):
        assert gaps[i] == gaps[i + 1]
        if i + 2 < len(gaps):
            assert gaps[i + 2] == 2 * gaps[i]
    assert gaps[0] == 5


def test_checkpoint_grid_validation():
    with pytest.raises(ValueError):
        checkpoint_grid(0)
    with pytest.raises(ValueError):
        checkpoint_grid(5, initial=0)


def test_early_stop_three_strikes():
    s = EarlyStopState()
    s = early_stop_update(s, WORSE)
    s = early_stop_update(s, EQUAL)
    assert not s.decided and s.strikes == 2
    s = early_stop_update(s, WORSE)
    assert s.decided and s.strikes == 3


def test_early_stop_better_resets():
    s = EarlyStopState()
    s = early_stop_update(s, WORSE)
    s = early_stop_update(s, WORSE)
    s = early_stop_update(s, BETTER)
    assert s.strikes == 0 and not s.decided
    for _ in range(2):
        s = early_stop_update(s, EQUAL)
    assert not s.decided
    s = early_stop_update(s, EQUAL)
    assert s.decided


def test_early_stop_decided_is_final():
    s = EarlyStopState(strikes=3, decided=True)
    with pytest.raises(ValueError):
        early_stop_update(s, BETTER)
    with pytest.raises(ValueError):
        early_stop_update(EarlyStopState(), "maybe")


# ---------------------------------------------------------------------------
# Reports, registry, and judges


def test_evaluate_pair_and_registry():
    a, b = rand_image(20), rand_image(21)
    rep = evaluate_pair(a, b)
    assert rep.psnr_db == pytest.approx(psnr(a, b))
    assert rep.ssim == pytest.approx(ssim(a, b))

    register_metric("mae", lambda x, y: float(np.mean(np.abs(x - y))))
    assert "mae" in metric_registry()
    rep2 = evaluate_pair(a, b, extra_metrics=["mae"])
    assert rep2.extras["mae"] == pytest.approx(float(np.mean(np.abs(a - b))))
    with pytest.raises(KeyError):
        evaluate_pair(a, b, extra_metrics=["nope"])


def test_format_metric_table():
    cols = {
        "gan": MetricReport(psnr_db=26.003, ssim=0.7701),
        "diff": MetricReport(psnr_db=26.664, ssim=0.7078),
    }
    txt = format_metric_table(cols)
    lines = txt.splitlines()
    assert "gan" in lines[0] and "diff" in lines[0]
    assert lines[1].startswith("psnr_db") and "26.0030" in lines[1]
    assert lines[2].startswith("ssim")


def test_format_win_matrix():
    tallies = {("gan", "diff"): SbsTally(91, 9, 0)}
    txt = format_win_matrix(["gan", "diff"], tallies)
    assert "91.0*" in txt
    assert "9.0*" in txt  # derived transpose entry
    assert "-" in txt


def test_metric_delta_judge():
    j = MetricDeltaJudge(dead_band=0.1)
    base = MetricReport(psnr_db=25.0, ssim=0.7)
    assert j.verdict(base, MetricReport(psnr_db=25.2, ssim=0.7)) == BETTER
    assert j.verdict(base, MetricReport(psnr_db=24.7, ssim=0.7)) == WORSE
    assert j.verdict(base, MetricReport(psnr_db=25.05, ssim=0.7)) == EQUAL


def test_psnr_pair_judge():
    ref = rand_image(30)
    noisy1 = np.clip(ref + 0.01 * np.random.default_rng(31).normal(size=ref.shape), 0, 1)
    noisy2 = np.clip(ref + 0.1 * np.random.default_rng(32).normal(size=ref.shape), 0, 1)
    j = PsnrPairJudge()
    assert j.verdict(noisy1, noisy2, ref) == "1"
    assert j.verdict(noisy2, noisy1, ref) == "2"
    assert j.verdict(noisy1, noisy1, ref) == "tie"
    assert j.verdict(ref, ref, ref) == "tie"
