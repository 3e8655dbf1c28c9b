import numpy as np
import pytest
import torch
from torch.nn import functional as fn

from conftest import central_difference_check, rng_tensor
from sepreformer.separator import (
    PRESETS, DecoderUnit, Downsample, InputProjection, ModelConfig, OutputLayer, Separator, SpeakerSplit,
    build, preset, upsample2,
)
from sepreformer.signal_codec import ShapeError, padded_length

TINY = dict(F=8, F_o=12, L=8, H=4, R=2, B_E=1, B_D=1, K=3, n_heads=2, dropout_p=0.0)


def tiny(**kw):
    return ModelConfig(**{**TINY, **kw})


def test_input_projection_oracle():
    proj = InputProjection(6, 4).double()
    x = rng_tensor(2, 5, 6)
    with torch.no_grad():
        y = x @ proj.linear.weight.T + proj.linear.bias
        want = (y - y.mean(-1, keepdim=True)) / torch.sqrt(y.var(-1, unbiased=False, keepdim=True) + 1e-5)
        torch.testing.assert_close(proj(x), want)
    with pytest.raises(ShapeError):
        proj(torch.randn(1, 5, 7))


def test_speaker_split_oracle():
    torch.manual_seed(0)
    split = SpeakerSplit(4, 3).double()
    x = rng_tensor(2, 5, 4)
    with torch.no_grad():
        h = x @ split.fc1.weight.T + split.fc1.bias             # [B, T, 2JF]
        a, g = h[..., :12], h[..., 12:]
        glu = a * torch.sigmoid(g)
        outs = []
        for j in range(3):
            z = glu[..., 4 * j:4 * (j + 1)] @ split.weight2[j].T + split.bias2[j]
            outs.append(fn.layer_norm(z, (4,), split.norm.weight, split.norm.bias))
        torch.testing.assert_close(split(x), torch.stack(outs, 1))


def test_output_layer_and_upsample():
    out = OutputLayer(4, 6).double()
    x = rng_tensor(1, 3, 4)
    with torch.no_grad():
        torch.testing.assert_close(out(x), out.fc2(fn.glu(out.fc1(x), -1)))
    u = upsample2(torch.arange(3.0)[None, :, None])
    assert u.flatten().tolist() == [0, 0, 1, 1, 2, 2]


def test_downsample_halves_and_rejects_odd():
    d = Downsample(4)
    assert d(torch.randn(2, 10, 4)).shape == (2, 5, 4)
    with pytest.raises(ShapeError):
        d(torch.randn(1, 9, 4))


@pytest.mark.parametrize("name", ["T", "S", "B", "M", "L"])
def test_preset_frame_law(name):
    cfg = PRESETS[name]
    for n in (cfg.L, 8000, 16000, 32001):
        m = padded_length(n, cfg.L, cfg.H, cfg.R)
        frames = (m - cfg.L) // cfg.H + 1
        assert frames % 2 ** cfg.R == 0 and m >= n
        for r in range(cfg.R + 1):
            # every stage length is an exact halving, and divisible by its EGA pool factor
            assert (frames // 2 ** r) % 2 ** (cfg.R - r) == 0


def test_preset_overrides_and_validation():
    assert preset("B", J=3).J == 3
    with pytest.raises(ValueError):
        preset("nope")
    with pytest.raises(ValueError):
        tiny(decoder_mode="wrong")
    with pytest.raises(ValueError):
        tiny(F=9, n_heads=2)


@pytest.mark.parametrize("mode", ["late_split", "early_split_multi_dec", "essd", "sepre"])
@pytest.mark.parametrize("n", [8, 101, 333])
def test_output_shape_is_exact(mode, n):
    torch.manual_seed(0)
    model = build(tiny(decoder_mode=mode, J=3)).eval()
    with torch.no_grad():
        out = model(torch.randn(2, n))
    assert out.estimates.shape == (2, 3, n)
    assert torch.isfinite(out.estimates).all()


@pytest.mark.parametrize("aux,shape", [("time", lambda n: (1, 2, n)), ("stft_mag", lambda n: (1, 2, 129, 1 + (n - 256) // 128))])
def test_aux_outputs(aux, shape):
    model = build(tiny(aux=aux)).train()
    out = model(torch.randn(1, 900))
    assert out.aux_stages == [1, 0]
    assert all(a.shape == shape(900) for a in out.aux)
    model.eval()
    assert model(torch.randn(1, 900)).aux == []


@pytest.mark.parametrize("mode,split_mode", [("essd", "shared"), ("sepre", "shared"), ("sepre", "multiple")])
def test_speaker_permutation_equivariance(mode, split_mode):
    torch.manual_seed(0)
    model = build(tiny(decoder_mode=mode, split_mode=split_mode, J=3, layerscale_init=0.3)).eval()
    mix = torch.randn(2, 400)
    with torch.no_grad():
        base = model(mix).estimates
        for perm in [(1, 0, 2), (2, 0, 1)]:
            got = model(mix, speaker_perm=perm).estimates
            torch.testing.assert_close(got, base[:, list(perm)], atol=1e-4, rtol=0)


def test_cs_placement_counts():
    unit_cs = lambda m: sum(u.cs is not None for st in m.dec_stages for u in st.units)
    assert unit_cs(build(tiny(B_D=3, decoder_mode="sepre"))) == 3 * 2
    assert unit_cs(build(tiny(B_D=3, decoder_mode="sepre", cs_placement="per_stage"))) == 2
    assert unit_cs(build(tiny(B_D=3, decoder_mode="essd"))) == 0


def test_late_split_and_essd_match_in_size():
    count = lambda m: sum(p.numel() for p in m.parameters())
    late, essd = build(tiny(decoder_mode="late_split")), build(tiny(decoder_mode="essd"))
    assert count(late) == count(essd)
    assert count(build(tiny(decoder_mode="sepre"))) > count(essd)


def test_taps_recorded_per_unit():
    model = build(tiny(B_D=2)).eval()
    with torch.no_grad():
        out = model(torch.randn(1, 300), record_taps=True)
    assert len(out.taps) == 2 * 2
    for z in out.taps[0]:
        assert z.shape[:2] == (1, 2)


def test_decoder_unit_gradients():
    torch.manual_seed(0)
    unit = DecoderUnit(tiny(layerscale_init=0.7), pool_factor=2, with_cs=True)
    err = central_difference_check(unit, [rng_tensor(1, 2, 8, 8, seed=2)])
    assert err < 1e-4


def test_layerscale_zero_unit_identity():
    unit = DecoderUnit(tiny(layerscale_init=0.0), pool_factor=2, with_cs=True).train()
    s = torch.randn(2, 2, 8, 8)
    assert torch.equal(unit(s), s)


def test_string_build_and_frames():
    model = build("tiny-desk")
    assert model.frames(8000) % 2 ** model.cfg.R == 0
    assert isinstance(model, Separator)
    assert np.isclose(sum(p.numel() for p in model.parameters()) / 1e6, 0.233, atol=0.01)
