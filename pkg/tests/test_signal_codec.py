import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sepreformer.signal_codec import (
    AudioDecoder, AudioEncoder, SampleRateError, ShapeError, Waveform, decode, encode,
    num_frames, pad_for_depth, padded_length, read_wav, write_wav,
)


def sliding_window_oracle(x, weight, bias, stride):
    """Explicit frame-by-frame conv: out[f, t] = w[f] . x[t*H : t*H+L] + b[f]."""
    n_filters, _, kernel = weight.shape
    frames = (len(x) - kernel) // stride + 1
    out = np.zeros((n_filters, frames))
    for t in range(frames):
        out[:, t] = weight[:, 0] @ x[t * stride:t * stride + kernel] + bias
    return out


def overlap_add_oracle(y, weight, bias, stride, length):
    """Transposed conv by explicit overlap-add of weighted basis functions."""
    _, _, kernel = weight.shape
    frames = y.shape[1]
    out = np.zeros((frames - 1) * stride + kernel)
    for t in range(frames):
        out[t * stride:t * stride + kernel] += y[:, t] @ weight[:, 0]
    return (out + bias[0])[:length]


@pytest.mark.parametrize("n,kernel,stride,depth,frames", [(16000, 16, 4, 4, 4000), (32000, 8, 2, 5, 16000)])
def test_padding_worked_examples(n, kernel, stride, depth, frames):
    m = padded_length(n, kernel, stride, depth)
    assert (m - kernel) // stride + 1 == frames
    assert (m - kernel) % stride == 0


@settings(max_examples=300, deadline=None)
@given(n=st.integers(1, 50000), kernel=st.sampled_from([2, 4, 8, 16, 32]), depth=st.integers(0, 5),
       ratio=st.sampled_from([1, 2, 4]))
def test_padding_law(n, kernel, depth, ratio):
    stride = max(1, kernel // ratio)
    m = padded_length(n, kernel, stride, depth)
    frames = (m - kernel) // stride + 1
    assert m >= n and m >= kernel
    assert (m - kernel) % stride == 0
    assert frames % 2 ** depth == 0
    # minimality: one block fewer would not cover n
    if frames > 2 ** depth:
        assert (frames - 2 ** depth - 1) * stride + kernel < n


def test_pad_for_depth_types():
    x = np.arange(100.0)
    p, n = pad_for_depth(x, 16, 4, 2)
    assert n == 100 and np.array_equal(p[:100], x) and not p[100:].any()
    t, _ = pad_for_depth(torch.ones(3, 100), 16, 4, 2)
    assert t.shape == (3, len(p))
    w, _ = pad_for_depth(Waveform(x, 16000), 16, 4, 2)
    assert w.sample_rate == 16000 and len(w) == len(p)


def test_encoder_matches_sliding_window():
    torch.manual_seed(0)
    enc = AudioEncoder(6, 8, 3, activation=False).double()
    x = np.random.default_rng(0).standard_normal(50)
    got = enc(torch.from_numpy(x)[None])[0].detach().numpy()
    w, b = enc.conv.weight.detach().numpy(), enc.conv.bias.detach().numpy()
    want = sliding_window_oracle(x, w, b, 3)
    assert got.shape == (6, num_frames(50, 8, 3))
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_encoder_gelu_and_short_input():
    enc = AudioEncoder(4, 8, 4)
    assert (enc(torch.randn(2, 40)) > -0.2).all()   # GELU lower bound is about -0.17
    with pytest.raises(ShapeError):
        enc(torch.randn(1, 7))


def test_decoder_matches_overlap_add():
    torch.manual_seed(1)
    dec = AudioDecoder(5, 8, 4).double()
    y = np.random.default_rng(1).standard_normal((5, 12))
    got = dec(torch.from_numpy(y)[None], 45)[0].detach().numpy()
    want = overlap_add_oracle(y, dec.conv.weight.detach().numpy(), dec.conv.bias.detach().numpy(), 4, 45)
    assert got.shape == (45,)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_encode_decode_lengths():
    enc, dec = AudioEncoder(8, 16, 4), AudioDecoder(8, 16, 4)
    w = Waveform(np.random.default_rng(0).standard_normal(1001))
    padded, n = pad_for_depth(w, 16, 4, 2)
    out = decode(encode(padded, enc), dec, n)
    assert len(out) == 1001 and out.sample_rate == 8000


def test_waveform_validation():
    with pytest.raises(ShapeError):
        Waveform(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        Waveform(np.zeros(0))
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]))


def test_wav_roundtrip(tmp_path):
    x = 0.5 * np.sin(np.linspace(0, 40, 800))
    write_wav(tmp_path / "a.wav", Waveform(x, 8000))
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 8000
    np.testing.assert_allclose(back.samples, x, atol=1 / 32767)
    with pytest.raises(SampleRateError):
        read_wav(tmp_path / "a.wav", 16000)
