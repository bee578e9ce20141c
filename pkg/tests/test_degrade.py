"""Degradation pipeline tests: oracles for the primitives, trace replay, ranges."""

import importlib.resources

import numpy as np
import pytest

from srlab.configio import config_hash, from_dict, load_yaml, to_dict
from srlab.degrade import (
    BlurConfig,
    CompressionConfig,
    DegradationConfig,
    DegradationError,
    DegradationTrace,
    NoiseConfig,
    ResizeConfig,
    add_noise,
    apply_trace,
    build_gaussian_kernel,
    degrade,
    gaussian_blur,
    jpeg_compress,
)
from srlab.images import resize_area


def rand_image(seed, c=3, h=24, w=24):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(c, h, w))


def degenerate_config():
    """All randomness off: identity blur/resize/noise, near-lossless JPEG."""
    return DegradationConfig(
        rounds=2,
        blur=BlurConfig(kernel_size=3, sigma_range=(0.0, 0.0), anisotropy_prob=0.0),
        resize=ResizeConfig(modes=("bilinear",), scale_range=(1.0, 1.0)),
        noise=NoiseConfig(
            gaussian_sigma_range=(0.0, 0.0),
            poisson_prob=0.0,
            gray_prob=0.0,
        ),
        compression=CompressionConfig(quality_range=(100, 100)),
        final_scale=4,
    )


# ---------------------------------------------------------------------------
# Blur


def oracle_convolve_reflect(chan, kernel):
    """Direct convolution (kernel flipped) over a reflect-padded channel."""
    kh, kw = kernel.shape
    py, px = kh // 2, kw // 2
    padded = np.pad(chan, ((py, py), (px, px)), mode="reflect")
    out = np.zeros_like(chan)
    h, w = chan.shape
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(kh):
                for b in range(kw):
                    acc += kernel[a, b] * padded[i + py - (a - py), j + px - (b - px)]
            out[i, j] = acc
    return out


def test_blur_matches_direct_convolution():
    img = rand_image(0, c=3, h=12, w=10)
    kernel = build_gaussian_kernel(5, 1.2, 0.7, theta=0.6)
    out = gaussian_blur(img, kernel)
    for c in range(3):
        ref = oracle_convolve_reflect(img[c], kernel)
        assert np.allclose(out[c], ref, atol=1e-12)


def test_gaussian_kernel_properties():
    k = build_gaussian_kernel(7, 1.5, 1.5)
    assert abs(k.sum() - 1.0) < 1e-12
    # isotropic kernel is the separable outer product of the 1-D gaussian
    half = 3
    g = np.exp(-0.5 * (np.arange(-half, half + 1) / 1.5) ** 2)
    sep = np.outer(g, g)
    sep /= sep.sum()
    assert np.allclose(k, sep, atol=1e-12)
    # rotating the swapped-sigma kernel by 90 degrees reproduces the original
    ka = build_gaussian_kernel(7, 2.0, 0.5, theta=0.0)
    kb = build_gaussian_kernel(7, 0.5, 2.0, theta=np.pi / 2)
    assert np.allclose(ka, kb, atol=1e-9)
    # axis swap is a transpose
    kc = build_gaussian_kernel(7, 0.5, 2.0, theta=0.0)
    assert np.allclose(ka, kc.T, atol=1e-12)


def test_zero_sigma_kernel_is_identity():
    img = rand_image(1)
    k = build_gaussian_kernel(5, 0.0, 0.0)
    assert np.array_equal(gaussian_blur(img, k), img)


def test_blur_rejects_bad_kernels():
    img = rand_image(2)
    with pytest.raises(ValueError):
        gaussian_blur(img, np.ones((4, 4)) / 16)  # even size
    with pytest.raises(ValueError):
        gaussian_blur(img, np.ones((3, 3)))  # not normalized
    with pytest.raises(ValueError):
        gaussian_blur(rand_image(3, h=2, w=2), np.ones((5, 5)) / 25)  # too small


def test_blur_preserves_constant():
    img = np.full((3, 16, 16), 0.5)
    k = build_gaussian_kernel(9, 2.0, 1.0, theta=1.0)
    assert np.allclose(gaussian_blur(img, k), 0.5, atol=1e-12)


# ---------------------------------------------------------------------------
# Noise


def test_gaussian_noise_stats_and_determinism():
    img = np.full((3, 64, 64), 0.5)
    out = add_noise(img, "gaussian", sigma=0.05, seed=7)
    delta = out - img
    assert abs(delta.mean()) < 0.005
    assert abs(delta.std() - 0.05) < 0.005
    again = add_noise(img, "gaussian", sigma=0.05, seed=7)
    assert np.array_equal(out, again)
    other = add_noise(img, "gaussian", sigma=0.05, seed=8)
    assert not np.array_equal(out, other)


def test_gray_noise_identical_across_channels():
    img = np.full((3, 32, 32), 0.5)
    out = add_noise(img, "gaussian", sigma=0.05, gray=True, seed=1)
    delta = out - img
    assert np.array_equal(delta[0], delta[1]) and np.array_equal(delta[1], delta[2])


def test_poisson_noise_variance_scales():
    img = np.full((1, 128, 128), 0.5)
    out = add_noise(img, "poisson", scale=500.0, seed=3)
    delta = out - img
    assert abs(delta.mean()) < 0.01
    # var of poisson(p*s)/s is p/s
    assert abs(delta.var() - 0.5 / 500.0) < 2e-4


def test_noise_rejects_unknown_kind():
    with pytest.raises(ValueError):
        add_noise(rand_image(0), "salt")


# ---------------------------------------------------------------------------
# JPEG


def test_jpeg_quality_bounds():
    img = rand_image(0)
    with pytest.raises(ValueError):
        jpeg_compress(img, 0)
    with pytest.raises(ValueError):
        jpeg_compress(img, 101)


def test_jpeg_high_quality_close_on_smooth_image():
    xx = np.linspace(0.2, 0.8, 32)
    img = np.tile(xx, (3, 32, 1))
    out = jpeg_compress(img, 95)
    assert np.max(np.abs(out - img)) < 0.03


def test_jpeg_low_quality_much_worse_on_texture():
    img = rand_image(4, h=32, w=32)
    e95 = np.mean((jpeg_compress(img, 95) - img) ** 2)
    e30 = np.mean((jpeg_compress(img, 30) - img) ** 2)
    assert e30 > 3 * e95


def test_jpeg_deterministic_and_gray_supported():
    img = rand_image(5, c=1, h=20, w=20)
    a = jpeg_compress(img, 50)
    b = jpeg_compress(img, 50)
    assert np.array_equal(a, b)
    assert a.shape == img.shape


# ---------------------------------------------------------------------------
# Full pipeline


def test_degrade_shape_and_determinism():
    hr = rand_image(10, h=32, w=32)
    cfg = DegradationConfig()
    lr1, tr1 = degrade(hr, cfg, seed=42)
    lr2, tr2 = degrade(hr, cfg, seed=42)
    assert lr1.shape == (3, 8, 8)
    assert np.array_equal(lr1, lr2)
    assert tr1 == tr2
    lr3, _ = degrade(hr, cfg, seed=43)
    assert not np.array_equal(lr1, lr3)


def test_trace_replay_bit_exact():
    hr = rand_image(11, h=32, w=32)
    cfg = DegradationConfig()
    for seed in range(5):
        lr, trace = degrade(hr, cfg, seed=seed)
        replay = apply_trace(hr, trace)
        assert np.array_equal(lr, replay), seed


def test_trace_json_round_trip():
    hr = rand_image(12, h=32, w=32)
    _, trace = degrade(hr, DegradationConfig(), seed=9)
    back = DegradationTrace.from_json(trace.to_json())
    assert back == trace
    assert np.array_equal(apply_trace(hr, back), apply_trace(hr, trace))


def test_sampled_parameters_stay_in_ranges():
    cfg = DegradationConfig(
        blur=BlurConfig(kernel_size=7, sigma_range=(0.3, 1.7), anisotropy_prob=0.5),
        resize=ResizeConfig(scale_range=(0.7, 1.3)),
        noise=NoiseConfig(
            gaussian_sigma_range=(0.01, 0.05),
            poisson_scale_range=(300.0, 900.0),
            poisson_prob=0.5,
            gray_prob=0.3,
        ),
        compression=CompressionConfig(quality_range=(40, 90)),
    )
    from srlab.degrade import _sample_ops

    seen_modes = set()
    seen_kinds = set()
    for seed in range(100_000):
        rng = np.random.default_rng(seed)
        ops = _sample_ops(cfg, (32, 32), rng)
        assert ops[-1].name == "final_resize" and ops[-1].params == {"height": 8, "width": 8}
        for op in ops[:-1]:
            p = op.params
            if op.name == "blur":
                assert 0.3 <= p["sigma_y"] <= 1.7 and 0.3 <= p["sigma_x"] <= 1.7
                assert 0.0 <= p["theta"] <= np.pi
            elif op.name == "resize":
                seen_modes.add(p["mode"])
                # two rounds compound: at most 32 * 1.3^2 = 54.08
                assert 8 <= p["height"] <= 55 and 8 <= p["width"] <= 55
            elif op.name == "noise":
                seen_kinds.add(p["kind"])
                if p["kind"] == "gaussian":
                    assert 0.01 <= p["sigma"] <= 0.05
                else:
                    assert 300.0 <= p["scale"] <= 900.0
            elif op.name == "jpeg":
                assert 40 <= p["quality"] <= 90
    assert seen_modes == {"area", "bilinear", "bicubic"}
    assert seen_kinds == {"gaussian", "poisson"}


def test_degenerate_config_approximates_clean_downscale():
    hr = rand_image(13, h=32, w=32)
    lr, trace = degrade(hr, degenerate_config(), seed=0)
    clean = resize_area(hr, (8, 8))
    assert np.max(np.abs(lr - clean)) <= 2.0 / 255.0
    # trace still records every op
    assert [op.name for op in trace.ops] == [
        "blur", "resize", "noise", "jpeg",
        "blur", "resize", "noise", "jpeg",
        "final_resize",
    ]


def test_degrade_rejects_indivisible_size():
    hr = rand_image(14, h=30, w=32)
    with pytest.raises((ValueError, DegradationError)):
        degrade(hr, DegradationConfig(final_scale=4), seed=0)


def test_failing_op_reports_partial_trace():
    hr = rand_image(15, h=32, w=32)
    _, trace = degrade(hr, DegradationConfig(), seed=1)
    trace.ops[2] = DegradationTrace.from_json(trace.to_json()).ops[2]
    trace.ops[2].name = "warp"  # unknown op
    with pytest.raises(DegradationError) as exc:
        apply_trace(hr, trace)
    assert exc.value.partial_trace is not None
    assert len(exc.value.partial_trace.ops) == 2


# ---------------------------------------------------------------------------
# Config serialization


def test_default_yaml_matches_defaults():
    path = importlib.resources.files("srlab") / "configs" / "degradation_default.yaml"
    cfg = load_yaml(DegradationConfig, path)
    assert cfg == DegradationConfig()


def test_config_dict_round_trip_and_hash():
    cfg = DegradationConfig(rounds=3, blur=BlurConfig(kernel_size=7))
    back = from_dict(DegradationConfig, to_dict(cfg))
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)
    assert config_hash(cfg) != config_hash(DegradationConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        BlurConfig(kernel_size=4)
    with pytest.raises(ValueError):
        BlurConfig(sigma_range=(2.0, 1.0))
    with pytest.raises(ValueError):
        NoiseConfig(poisson_prob=1.5)
    with pytest.raises(ValueError):
        CompressionConfig(quality_range=(0, 95))
    with pytest.raises(ValueError):
        ResizeConfig(modes=("nearest",))
