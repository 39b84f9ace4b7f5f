import numpy as np
import pytest

from spinseg.gradcheck import REL_FLOOR, gradcheck
from spinseg.losses import bce_loss
from spinseg.model import ModelConfig, SpinModel, count_parameters, forward_full
from spinseg.subpixel import space_to_depth
from spinseg.tensor import Tensor, no_grad

SMALL = (4, 8)


def conv_count(cin, cout, k):
    return cin * cout * k * k + cout


def spg_oracle(c):
    return (
        conv_count(c, 16, 3) + conv_count(16, 16, 3) + conv_count(c, 16, 1)  # residual block 1
        + 2 * conv_count(16, 16, 3)  # residual block 2
        + conv_count(4, 8, 1) + conv_count(8, 8, 3)  # after depth-to-space
        + conv_count(32, 8, 3) + conv_count(8, 8, 3)  # skip projections
    )


LD_ORACLE = conv_count(100, 16, 3) + conv_count(16, 16, 3) + conv_count(16, 4, 1)


def test_spg_shapes():
    m = SpinModel(ModelConfig())
    with no_grad():
        e, s1, s2 = m.spg_forward(Tensor(np.random.default_rng(0).random((1, 5, 16, 16))))
    assert e.shape == (1, 8, 32, 32)
    assert s1.shape == (1, 8, 16, 16)
    assert s2.shape == (1, 8, 32, 32)


def test_spg_zero_input_zero_output():
    m = SpinModel(ModelConfig())
    outs = m.spg_forward(Tensor(np.zeros((1, 5, 8, 8))))
    for t in outs:
        assert not t.data.any()


def test_spg_rejects_small_or_odd():
    m = SpinModel(ModelConfig())
    with pytest.raises(ValueError):
        m.spg_forward(Tensor(np.zeros((1, 5, 2, 2))))
    with pytest.raises(ValueError):
        m.spg_forward(Tensor(np.zeros((1, 5, 6, 5))))


def test_spg_count_matches_oracle():
    for c in (1, 3, 5, 7):
        counts = SpinModel(ModelConfig(input_slices=c)).count_parameters()
        assert counts["spg"] == spg_oracle(c)
    assert spg_oracle(5) == 11312
    assert SpinModel(ModelConfig(), seed=1).count_parameters() == SpinModel(ModelConfig(), seed=2).count_parameters()


def test_ld_count_matches_oracle():
    assert count_parameters(SpinModel(ModelConfig()))["downsampler"] == LD_ORACLE == 16804


def test_encoder_decoder_latent_channels():
    x = Tensor(np.random.default_rng(0).random((1, 5, 16, 16)))
    m = SpinModel(ModelConfig())
    with no_grad():
        _, s1, s2 = m.spg_forward(x)
        assert m.encoder_decoder_forward(x, s1, s2).shape == (1, 24, 32, 32)
    m0 = SpinModel(ModelConfig(guidance_mode="none"))
    with no_grad():
        assert m0.encoder_decoder_forward(x).shape == (1, 16, 32, 32)


def test_encoder_decoder_divisor_message():
    m = SpinModel(ModelConfig(guidance_mode="none"))
    with pytest.raises(ValueError, match="divisible by 8"):
        m.encoder_decoder_forward(Tensor(np.zeros((1, 5, 12, 12))))


def test_head():
    m = SpinModel(ModelConfig())
    for k in ("head.weight", "head.bias"):
        m.params[k].data[:] = 0
    f0 = m.subpixel_head(Tensor(np.zeros((1, 24, 32, 32))))
    assert f0.shape == (1, 1, 32, 32)
    assert (f0.data == 0.5).all()
    m2 = SpinModel(ModelConfig(), seed=5)
    f0 = m2.subpixel_head(Tensor(np.random.default_rng(1).normal(size=(1, 24, 8, 8))))
    assert f0.data.min() > 0 and f0.data.max() < 1


def _ld_model():
    return SpinModel(ModelConfig(encoder_channels=SMALL), seed=2, dtype=np.float64)


def test_ld_uniform_weights_give_block_mean(rng):
    m = _ld_model()
    m.params["ld.conv3.weight"].data[:] = 0
    m.params["ld.conv3.bias"].data[:] = 0
    f0 = rng.random((1, 1, 8, 8))
    h, f = m.learnable_downsampler(Tensor(rng.normal(size=(1, 24, 8, 8)), dtype=np.float64), Tensor(f0, dtype=np.float64))
    np.testing.assert_allclose(h.data, 0.25)
    np.testing.assert_allclose(f.data[0, 0], f0[0, 0].reshape(4, 2, 4, 2).mean(axis=(1, 3)), atol=1e-12)


def test_ld_constant_f0(rng):
    m = _ld_model()
    h, f = m.learnable_downsampler(Tensor(rng.normal(size=(2, 24, 6, 6)), dtype=np.float64),
                                   Tensor(np.full((2, 1, 6, 6), 0.3), dtype=np.float64))
    np.testing.assert_allclose(f.data, 0.3, atol=1e-12)


def test_ld_block_bounds_bruteforce(rng):
    m = _ld_model()
    for _ in range(5):
        f0 = rng.random((1, 1, 8, 10))
        _, f = m.learnable_downsampler(Tensor(rng.normal(size=(1, 24, 8, 10)) * 3, dtype=np.float64), Tensor(f0, dtype=np.float64))
        for i in range(4):
            for j in range(5):
                block = [f0[0, 0, 2 * i + a, 2 * j + b] for a in range(2) for b in range(2)]
                assert min(block) - 1e-12 <= f.data[0, 0, i, j] <= max(block) + 1e-12


def test_ld_shape_mismatch():
    m = _ld_model()
    with pytest.raises(ValueError):
        m.learnable_downsampler(Tensor(np.zeros((1, 24, 8, 8))), Tensor(np.zeros((1, 1, 6, 6))))


def test_forward_full_shapes_and_range(rng):
    m = SpinModel(ModelConfig(encoder_channels=(8, 16)))
    with no_grad():
        out = forward_full(m, rng.random((2, 5, 16, 16)))
    assert out.f.shape == (2, 1, 16, 16)
    assert out.f0.shape == (2, 1, 32, 32)
    assert out.h.shape == (2, 4, 16, 16)
    assert out.g.shape == (2, 24, 32, 32)
    assert out.f.data.min() > 0 and out.f.data.max() < 1
    np.testing.assert_allclose(out.h.data.sum(axis=1), 1.0, atol=1e-6)


def test_forward_arbitrary_extent_is_padded(rng):
    m = SpinModel(ModelConfig(encoder_channels=(4, 8, 16)))
    with no_grad():
        out = m(rng.random((1, 5, 13, 7)))
    assert out.f.shape == (1, 1, 13, 7)


def test_bilinear_downsampler_constant():
    m = SpinModel(ModelConfig(encoder_channels=SMALL, downsampler_mode="bilinear"))
    h, f = m.fixed_downsampler(Tensor(np.full((1, 1, 8, 8), 0.7)), "bilinear")
    np.testing.assert_allclose(f.data, 0.7, atol=1e-12)


def test_nearest_downsampler_selects_top_left(rng):
    m = SpinModel(ModelConfig(encoder_channels=SMALL, downsampler_mode="nearest"))
    f0 = rng.random((1, 1, 4, 4))
    _, f = m.fixed_downsampler(Tensor(f0), "nearest")
    np.testing.assert_array_equal(f.data[0, 0], f0[0, 0, ::2, ::2])


def test_determinism(rng):
    x = rng.random((1, 5, 16, 16)).astype(np.float32)
    a = SpinModel(ModelConfig(encoder_channels=(8, 16)), seed=4)
    b = SpinModel(ModelConfig(encoder_channels=(8, 16)), seed=4)
    with no_grad():
        oa, ob = a(x), b(x)
        oa2 = a(x)
    for u, v, w in zip(oa[:4], ob[:4], oa2[:4]):
        assert np.array_equal(u.data, v.data) and np.array_equal(u.data, w.data)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(input_slices=4)
    with pytest.raises(ValueError):
        ModelConfig(guidance_mode="bogus")
    with pytest.raises(ValueError):
        ModelConfig(guidance_mode="none", spg_enabled=True)
    with pytest.raises(ValueError):
        ModelConfig(encoder_channels=(8,))
    with pytest.raises(ValueError):
        ModelConfig(output_classes=2)
    assert ModelConfig(spg_enabled=False).guidance_mode == "none"
    cfg = ModelConfig(encoder_channels=(8, 16), guidance_mode="nearest_input")
    text = dict(line.split("=") for line in cfg.to_text().split())
    assert ModelConfig.from_dict(text) == cfg


def test_variants_without_spg_have_no_spg_params():
    for mode in ("none", "bilinear_input", "nearest_input"):
        for ds in ("learnable", "bilinear"):
            m = SpinModel(ModelConfig(guidance_mode=mode, downsampler_mode=ds))
            assert m.count_parameters()["spg"] == 0
            assert not any(k.startswith("spg.") for k in m.params)
    with pytest.raises(ValueError):
        SpinModel(ModelConfig(guidance_mode="none")).spg_forward(Tensor(np.zeros((1, 5, 8, 8))))


def test_parameter_count_relations():
    full = SpinModel(ModelConfig()).count_parameters()
    no_spg = SpinModel(ModelConfig(spg_enabled=False)).count_parameters()
    assert no_spg["total"] < full["total"]
    # the SPG branch plus the extra input channels it feeds into dec0.conv1, head and ld.conv1
    ch0 = 32
    widening = 8 * ch0 * 9 + 8 * 9 + 4 * 8 * 16 * 9
    assert full["total"] - no_spg["total"] == full["spg"] + widening
    wide = SpinModel(ModelConfig(encoder_channels=(64, 128, 256, 512))).count_parameters()
    assert wide["total"] > full["total"]
    assert full["total"] == sum(v for k, v in full.items() if k != "total")


def test_state_dict_roundtrip():
    a = SpinModel(ModelConfig(encoder_channels=SMALL), seed=1)
    b = SpinModel(ModelConfig(encoder_channels=SMALL), seed=2)
    b.load_state_dict(a.state_dict())
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
    bad = a.state_dict()
    bad.pop("head.bias")
    with pytest.raises(KeyError):
        b.load_state_dict(bad)


@pytest.mark.parametrize(
    "guidance,ds",
    [("spg", "learnable"), ("none", "learnable"), ("bilinear_input", "learnable"),
     ("nearest_input", "learnable"), ("none", "bilinear"), ("spg", "nearest")],
)
def test_variant_gradcheck(guidance, ds):
    rng = np.random.default_rng(7)
    m = SpinModel(ModelConfig(encoder_channels=SMALL, guidance_mode=guidance, downsampler_mode=ds), seed=3, dtype=np.float64)
    for k, p in m.params.items():
        if k.endswith(".bias"):
            p.data[:] = rng.normal(0, 0.1, size=p.shape)
    x = Tensor(rng.random((1, 5, 8, 8)), dtype=np.float64)
    y = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64)
    rep = gradcheck(lambda: bce_loss(m(x).f, y), m.params, tolerance=1e-5, max_checks=4, rng=rng)
    assert rep.passed, rep.format()


def test_float32_gradients_against_float64_reference():
    # float32 central differences are roundoff-bound, so the 64-bit gradient
    # (itself checked against differences here) serves as the reference
    rng = np.random.default_rng(8)
    x = rng.random((1, 5, 8, 8))
    y = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64)
    m64 = SpinModel(ModelConfig(encoder_channels=SMALL), seed=3, dtype=np.float64)
    rep = gradcheck(lambda: bce_loss(m64(Tensor(x, dtype=np.float64)).f, y), m64.params,
                    tolerance=1e-5, max_checks=4, rng=rng)
    assert rep.passed, rep.format()
    m32 = SpinModel(ModelConfig(encoder_channels=SMALL), seed=3, dtype=np.float32)
    bce_loss(m32(x.astype(np.float32)).f, y.astype(np.float32)).backward()
    for k, p in m64.params.items():
        ref, got = p.grad, m32.params[k].grad.astype(np.float64)
        floor = REL_FLOOR * max(1.0, float(np.abs(ref).max()))
        err = np.abs(got - ref) / np.maximum(np.maximum(np.abs(got), np.abs(ref)), floor)
        assert err.max() < 1e-3 - 1e-5, k


def test_space_to_depth_of_f0_alignment(rng):
    # f(b,0,i,j) = sum_k h_k * s2d(f0)_k, checked element by element
    m = _ld_model()
    g = Tensor(rng.normal(size=(1, 24, 4, 4)), dtype=np.float64)
    f0 = Tensor(rng.random((1, 1, 4, 4)), dtype=np.float64)
    h, f = m.learnable_downsampler(g, f0)
    s = space_to_depth(f0).data
    for i in range(2):
        for j in range(2):
            assert f.data[0, 0, i, j] == pytest.approx(sum(h.data[0, k, i, j] * s[0, k, i, j] for k in range(4)))
