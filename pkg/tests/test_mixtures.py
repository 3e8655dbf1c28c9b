import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from sepreformer.mixtures import (
    DataError, Manifest, ManifestDataset, ManifestRow, PairDataset, collate, desk_corpus, desk_corpus_specs,
    dynamic_mix, mix_at_snr, segment, synth_source,
)
from sepreformer.signal_codec import Waveform, write_wav


def band_energy_fraction(x, rate, lo, hi):
    """Naive 64-bit DFT (no FFT) energy fraction inside [lo, hi]."""
    n = len(x)
    k = np.arange(n // 2 + 1)
    spec = np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n) @ x
    freqs = k * rate / n
    energy = np.abs(spec) ** 2
    return energy[(freqs >= lo) & (freqs <= hi)].sum() / energy.sum()


def test_band_noise_confined_to_band():
    w = synth_source("band_noise", 0.25, 8000, seed=3, band=(200, 800))
    assert band_energy_fraction(w.samples, 8000, 200, 800) >= 0.95


@pytest.mark.parametrize("kind", ["band_noise", "harmonic", "am_tone"])
def test_synth_unit_rms_and_deterministic(kind):
    a = synth_source(kind, 0.5, seed=11)
    b = synth_source(kind, 0.5, seed=11)
    assert np.array_equal(a.samples, b.samples)
    assert abs(np.sqrt(np.mean(a.samples ** 2)) - 1) < 1e-6
    assert not np.array_equal(a.samples, synth_source(kind, 0.5, seed=12).samples)


def test_harmonic_partials():
    w = synth_source("harmonic", 1.0, 8000, seed=0, f0=1000)
    spec = np.abs(np.fft.rfft(w.samples))
    peaks = set(np.flatnonzero(spec > 0.01 * spec.max()))
    assert peaks == {1000, 2000, 3000}   # 1 Hz bins; 4000 Hz is Nyquist and excluded


@pytest.mark.parametrize("band", [(0, 100), (300, 200), (100, 4000)])
def test_band_outside_nyquist_rejected(band):
    with pytest.raises(ValueError):
        synth_source("band_noise", 0.1, 8000, band=band)


def test_mix_at_snr_closed_forms():
    s = synth_source("band_noise", 0.2, seed=1)
    t = synth_source("band_noise", 0.2, seed=2)
    assert np.allclose(mix_at_snr(s, t, 0.0).sources[1].samples, t.samples)
    half = mix_at_snr(s, t, 20 * np.log10(2))   # 6.0206 dB
    assert np.allclose(half.sources[1].samples, 0.5 * t.samples)


@settings(max_examples=50, deadline=None)
@given(snr=st.floats(-20, 20), seed=st.integers(0, 10000), g1=st.floats(0.01, 10), g2=st.floats(0.01, 10))
def test_snr_law_and_mixture_identity(snr, seed, g1, g2):
    rng = np.random.default_rng(seed)
    s1, s2 = Waveform(g1 * rng.standard_normal(300)), Waveform(g2 * rng.standard_normal(300))
    ex = mix_at_snr(s1, s2, snr)
    a, b = ex.sources[0].samples, ex.sources[1].samples
    assert abs(10 * np.log10(np.mean(a * a) / np.mean(b * b)) - snr) < 1e-6
    assert np.array_equal(ex.mixture.samples, a + b)


def test_mix_errors():
    with pytest.raises(DataError):
        mix_at_snr(Waveform(np.zeros(10)), Waveform(np.ones(10)), 0)
    with pytest.raises(DataError):
        mix_at_snr(Waveform(np.ones(10)), Waveform(np.ones(11)), 0)


def test_segment_policies():
    five = Waveform(np.arange(40000.0))
    out, valid = segment(five, 4.0)
    assert len(out) == 32000 and valid == 32000
    three = Waveform(np.ones(24000))
    out, valid = segment(three, 4.0)
    assert len(out) == 32000 and valid == 24000 and not out.samples[24000:].any()
    assert np.array_equal(segment(five, 4.0, policy="eval")[0].samples, segment(five, 4.0, policy="eval")[0].samples)
    rnd, _ = segment(five, 4.0, policy="random", rng=np.random.default_rng(0))
    assert len(rnd) == 32000


def test_dynamic_mix_pool_of_two_and_determinism():
    pool = [synth_source("band_noise", 1.0, seed=s) for s in (1, 2)]
    for k in range(5):
        ex = dynamic_mix(pool, np.random.default_rng(k), seconds=0.5)
        assert set(ex.source_ids) == {0, 1}
        assert len(ex.mixture) == 4000
    a = [dynamic_mix(pool, np.random.default_rng(7), 0.5).mixture.samples for _ in range(2)]
    assert np.array_equal(a[0], a[1])
    with pytest.raises(DataError):
        dynamic_mix(pool[:1], np.random.default_rng(0))


def test_dynamic_mix_snr_is_uniform():
    pool = [Waveform(np.random.default_rng(s).standard_normal(80)) for s in range(4)]
    rng = np.random.default_rng(2024)
    snrs = [dynamic_mix(pool, rng, seconds=0.005).snr_db for _ in range(10000)]
    ks = stats.kstest(snrs, stats.uniform(loc=-5, scale=10).cdf).statistic
    assert ks < 0.02


def test_desk_corpus_is_speaker_disjoint():
    specs = desk_corpus_specs(64, seed=0)
    splits = {s: [x for x in specs if x.split == s] for s in ("train", "val", "test")}
    assert [len(splits[s]) for s in ("train", "val", "test")] == [48, 8, 8]
    bands = sorted(x.band for x in specs)
    assert all(a[1] < b[0] for a, b in zip(bands, bands[1:]))
    assert bands[0][0] >= 100 and bands[-1][1] <= 3900
    pools = desk_corpus(8, seed=1, seconds=0.1)
    assert sum(len(v) for v in pools.values()) == 8


def test_pair_dataset_is_pure_function_of_seed_and_index():
    pool = [synth_source("band_noise", 0.5, seed=s) for s in range(5)]
    ds = PairDataset(pool, 10, seed=3, seconds=0.25)
    fwd = [ds[i].mixture.samples for i in range(10)]
    back = [ds[i].mixture.samples for i in reversed(range(10))][::-1]
    assert all(np.array_equal(a, b) for a, b in zip(fwd, back))
    dyn = PairDataset(pool, 4, seed=3, seconds=0.25, dynamic=True)
    e0 = dyn[0].mixture.samples
    dyn.set_epoch(1)
    assert not np.array_equal(e0, dyn[0].mixture.samples)
    mix, src = collate([ds[0], ds[1]])
    assert mix.shape == (2, 2000) and src.shape == (2, 2, 2000)


def test_manifest_roundtrip_and_dataset(tmp_path):
    for k in range(2):
        write_wav(tmp_path / f"s{k}.wav", Waveform(0.1 * synth_source("band_noise", 1.0, seed=k).samples))
    m = Manifest([ManifestRow("s0.wav", "s1.wav", 0.25, 0.5, 2.0), ManifestRow("s1.wav", "s0.wav", 0.0, 0.5, None)])
    m.write(tmp_path / "m.txt")
    back = Manifest.read(tmp_path / "m.txt")
    assert back.rows == m.rows
    ds = ManifestDataset(back, seed=5)
    ex = ds[0]
    assert len(ex.mixture) == 4000 and ex.snr_db == 2.0
    assert ds[1].snr_db == ManifestDataset(back, seed=5)[1].snr_db
    assert -5 <= ds[1].snr_db <= 5
    with pytest.raises(DataError):
        ManifestDataset(back, min_seconds=4.0)


def test_manifest_errors(tmp_path):
    (tmp_path / "bad.txt").write_text("a.wav b.wav 0 1\n")
    with pytest.raises(DataError):
        Manifest.read(tmp_path / "bad.txt")
    (tmp_path / "missing.txt").write_text("a.wav b.wav 0 1 0\n")
    with pytest.raises(DataError):
        ManifestDataset(Manifest.read(tmp_path / "missing.txt"))
    with pytest.raises(DataError):
        Manifest.read(tmp_path / "nope.txt")
