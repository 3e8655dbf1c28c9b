"""Two-speaker mixture generation: synthetic stand-in sources, SNR-controlled
mixing, segmentation, dynamic mixing and manifest ingestion.

Every random draw derives from an explicit seed; per-example generators are
seeded with ``(seed, index)`` so that iteration order never changes the data.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .signal_codec import Waveform, read_wav

SOURCE_KINDS = ("band_noise", "harmonic", "am_tone")


class DataError(ValueError):
    pass


@dataclass
class MixtureExample:
    mixture: Waveform
    sources: list
    snr_db: float
    seed: int | None = None
    source_ids: tuple = ()
    valid_length: int | None = None

    def __post_init__(self):
        n = len(self.mixture)
        if any(len(s) != n for s in self.sources):
            raise DataError("mixture and sources must share one length")

    def arrays(self, dtype=np.float32):
        return (self.mixture.samples.astype(dtype),
                np.stack([s.samples for s in self.sources]).astype(dtype))


def _unit_rms(x: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x * x))
    if rms == 0:
        raise DataError("cannot normalise a silent source")
    return x / rms


def synth_source(kind: str, duration: float, sample_rate: int = 8000, seed: int = 0,
                 band=(200.0, 800.0), f0: float = 150.0, mod_rate: float = 4.0,
                 mod_depth: float = 0.8) -> Waveform:
    """Deterministic unit-RMS synthetic source.

    ``band_noise``: white Gaussian noise with every DFT bin outside ``band``
    zeroed. ``harmonic``: partials of ``f0`` up to Nyquist with 1/k
    amplitudes and random phases. ``am_tone``: a tone at ``f0`` under a
    raised-sine envelope of rate ``mod_rate``.
    """
    if kind not in SOURCE_KINDS:
        raise ValueError(f"unknown source kind {kind!r}")
    nyq = sample_rate / 2
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    if n < 1:
        raise ValueError("duration too short")
    t = np.arange(n) / sample_rate
    if kind == "band_noise":
        lo, hi = band
        if not 0 < lo < hi < nyq:
            raise ValueError(f"band {band} outside (0, {nyq})")
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1 / sample_rate)
        spec[(freqs < lo) | (freqs > hi)] = 0
        x = np.fft.irfft(spec, n)
    elif kind == "harmonic":
        if not 0 < f0 < nyq:
            raise ValueError(f"f0 {f0} outside (0, {nyq})")
        k = np.arange(1, int(nyq // f0) + 1)
        k = k[k * f0 < nyq]
        phases = rng.uniform(0, 2 * np.pi, size=k.size)
        x = np.sum(np.sin(2 * np.pi * f0 * k[:, None] * t + phases[:, None]) / k[:, None], axis=0)
    else:
        if not 0 < f0 < nyq:
            raise ValueError(f"f0 {f0} outside (0, {nyq})")
        phase = rng.uniform(0, 2 * np.pi)
        env = 1 + mod_depth * np.sin(2 * np.pi * mod_rate * t + rng.uniform(0, 2 * np.pi))
        x = env * np.sin(2 * np.pi * f0 * t + phase)
    return Waveform(_unit_rms(x), sample_rate)


def mix_at_snr(s1: Waveform, s2: Waveform, snr_db: float, seed: int | None = None, source_ids=()) -> MixtureExample:
    """Rescale ``s2`` so that ``10 log10(P(s1) / P(c s2)) == snr_db`` and sum.

    The stored sources are ``(s1, c * s2)``, i.e. what actually went into the mixture.
    """
    a = np.asarray(s1.samples, dtype=np.float64)
    b = np.asarray(s2.samples, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"source lengths differ: {a.size} vs {b.size}")
    p1, p2 = np.mean(a * a), np.mean(b * b)
    if p1 == 0 or p2 == 0:
        raise DataError("zero-power source")
    c = np.sqrt(p1 / p2 * 10 ** (-snr_db / 10))
    b = c * b
    rate = s1.sample_rate
    return MixtureExample(Waveform(a + b, rate), [Waveform(a, rate), Waveform(b, rate)],
                          float(snr_db), seed, tuple(source_ids))


def segment(w: Waveform, seconds: float = 4.0, sample_rate: int = 8000, policy: str = "leading", rng=None):
    """Crop (random for ``policy="random"``, leading otherwise) or zero-pad to
    exactly ``seconds * sample_rate`` samples. Returns ``(waveform, valid_length)``."""
    if w.sample_rate != sample_rate:
        raise DataError(f"sample rate {w.sample_rate} != {sample_rate}")
    n = int(round(seconds * sample_rate))
    x = np.asarray(w.samples)
    if x.size <= n:
        return Waveform(np.pad(x, (0, n - x.size)), sample_rate), x.size
    if policy == "random":
        if rng is None:
            raise ValueError("random segmentation needs an rng")
        start = int(rng.integers(0, x.size - n + 1))
    elif policy in ("leading", "eval"):
        start = 0
    else:
        raise ValueError(f"unknown policy {policy!r}")
    return Waveform(x[start:start + n], sample_rate), n


def dynamic_mix(pool, rng: np.random.Generator, seconds: float = 4.0, sample_rate: int = 8000,
                snr_range=(-5.0, 5.0), gain_db=(-3.0, 3.0)) -> MixtureExample:
    """Draw two distinct sources, random-crop each, apply a random gain and
    mix at a uniform random SNR. Fully determined by ``rng``'s state."""
    if len(pool) < 2:
        raise DataError("dynamic mixing needs at least two sources")
    i, j = rng.choice(len(pool), size=2, replace=False)
    s1, _ = segment(pool[i], seconds, sample_rate, "random", rng)
    s2, _ = segment(pool[j], seconds, sample_rate, "random", rng)
    gain = 10 ** (rng.uniform(*gain_db) / 20)
    snr = float(rng.uniform(*snr_range))
    s1 = Waveform(s1.samples * gain, sample_rate)
    return mix_at_snr(s1, s2, snr, source_ids=(int(i), int(j)))


# -- desk-scale corpus --------------------------------------------------------

@dataclass
class SourceSpec:
    source_id: str
    band: tuple
    split: str
    seed: int


def desk_corpus_specs(n_sources: int = 64, seed: int = 0, sample_rate: int = 8000,
                      f_range=(100.0, 3900.0), guard: float = 0.1, split_fractions=(0.75, 0.125)) -> list:
    """Band-noise "speakers" on disjoint, equally wide bands, assigned to
    speaker-disjoint train/val/test pools by a seeded shuffle."""
    if n_sources < 6:
        raise ValueError("need at least 6 sources for three speaker-disjoint pools")
    lo, hi = f_range
    if not 0 < lo < hi < sample_rate / 2:
        raise ValueError("frequency range outside Nyquist")
    edges = np.linspace(lo, hi, n_sources + 1)
    width = edges[1] - edges[0]
    rng = np.random.default_rng([seed, 0x5EED])
    order = rng.permutation(n_sources)
    # every pool keeps at least two speakers so that it can form pairs
    n_val = max(2, int(round(split_fractions[1] * n_sources)))
    n_train = min(int(round(split_fractions[0] * n_sources)), n_sources - n_val - 2)
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[int(idx)] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    specs = []
    for k in range(n_sources):
        band = (float(edges[k] + guard * width), float(edges[k + 1] - guard * width))
        specs.append(SourceSpec(f"src{k:03d}", band, split_of[k], int(rng.integers(2**31))))
    return specs


def desk_corpus(n_sources: int = 64, seed: int = 0, seconds: float = 4.0, sample_rate: int = 8000) -> dict:
    """``{split: [(spec, waveform), ...]}`` for the synthetic corpus."""
    pools = {"train": [], "val": [], "test": []}
    for spec in desk_corpus_specs(n_sources, seed, sample_rate):
        w = synth_source("band_noise", seconds, sample_rate, spec.seed, band=spec.band)
        pools[spec.split].append((spec, w))
    return pools


def pair_rows(n_pool: int, n_rows: int, rng: np.random.Generator, snr_range=(-5.0, 5.0)):
    """``n_rows`` random ``(i, j, snr)`` pairs of distinct pool indices."""
    rows = []
    for _ in range(n_rows):
        i, j = rng.choice(n_pool, size=2, replace=False)
        rows.append((int(i), int(j), float(rng.uniform(*snr_range))))
    return rows


class PairDataset:
    """Fixed (static) or dynamically remixed mixtures drawn from a source pool.

    Static examples depend only on ``(seed, index)``; with ``dynamic=True``
    they also depend on the epoch set through :meth:`set_epoch`.
    """

    def __init__(self, pool, n_examples: int, seed: int = 0, seconds: float = 4.0,
                 sample_rate: int = 8000, dynamic: bool = False, policy: str = "random"):
        if len(pool) < 2:
            raise DataError("pool needs at least two sources")
        self.pool = [w for _, w in pool] if isinstance(pool[0], tuple) else list(pool)
        self.n_examples = n_examples
        self.seed = seed
        self.seconds = seconds
        self.sample_rate = sample_rate
        self.dynamic = dynamic
        self.policy = policy
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return self.n_examples

    def __getitem__(self, idx: int) -> MixtureExample:
        if not 0 <= idx < self.n_examples:
            raise IndexError(idx)
        key = [self.seed, self.epoch, idx] if self.dynamic else [self.seed, idx]
        rng = np.random.default_rng(key)
        if self.dynamic:
            ex = dynamic_mix(self.pool, rng, self.seconds, self.sample_rate)
        else:
            i, j = rng.choice(len(self.pool), size=2, replace=False)
            snr = float(rng.uniform(-5, 5))
            s1, _ = segment(self.pool[i], self.seconds, self.sample_rate, self.policy, rng)
            s2, _ = segment(self.pool[j], self.seconds, self.sample_rate, self.policy, rng)
            ex = mix_at_snr(s1, s2, snr, source_ids=(int(i), int(j)))
        ex.seed = self.seed
        return ex


# -- manifests ----------------------------------------------------------------

MANIFEST_COLUMNS = ("source_path_1", "source_path_2", "offset", "duration", "snr_db")


@dataclass
class ManifestRow:
    source_path_1: str
    source_path_2: str
    offset: float
    duration: float
    snr_db: float | None   # None means "random"


@dataclass
class Manifest:
    rows: list = field(default_factory=list)
    root: Path = Path(".")

    def write(self, path) -> None:
        lines = ["# " + " ".join(MANIFEST_COLUMNS) + "  (offset/duration in seconds; paths relative to this file)"]
        for r in self.rows:
            snr = "random" if r.snr_db is None else f"{r.snr_db:.6f}"
            lines.append(f"{r.source_path_1} {r.source_path_2} {r.offset:.6f} {r.duration:.6f} {snr}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        rows = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cols = line.split()
            if len(cols) != len(MANIFEST_COLUMNS):
                raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns, got {len(cols)}")
            try:
                snr = None if cols[4] == "random" else float(cols[4])
                rows.append(ManifestRow(cols[0], cols[1], float(cols[2]), float(cols[3]), snr))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
        return cls(rows, path.parent)


class ManifestDataset:
    """Mixtures described by a manifest; ``random`` SNRs draw from ``(seed, index)``."""

    def __init__(self, manifest: Manifest, sample_rate: int = 8000, seed: int = 0, min_seconds: float | None = None):
        self.manifest = manifest
        self.sample_rate = sample_rate
        self.seed = seed
        self._cache = {}
        for k, row in enumerate(manifest.rows):
            for p in (row.source_path_1, row.source_path_2):
                if not (manifest.root / p).is_file():
                    raise DataError(f"row {k}: source not found: {manifest.root / p}")
            if min_seconds is not None and row.duration < min_seconds:
                raise DataError(f"row {k}: duration {row.duration}s shorter than segment {min_seconds}s")

    def __len__(self):
        return len(self.manifest.rows)

    def _load(self, rel):
        if rel not in self._cache:
            self._cache[rel] = read_wav(self.manifest.root / rel, self.sample_rate)
        return self._cache[rel]

    def __getitem__(self, idx: int) -> MixtureExample:
        row = self.manifest.rows[idx]
        a, b = self._load(row.source_path_1), self._load(row.source_path_2)
        start = int(round(row.offset * self.sample_rate))
        n = int(round(row.duration * self.sample_rate))
        if start + n > min(len(a), len(b)):
            raise DataError(f"row {idx}: offset+duration exceeds source length")
        snr = row.snr_db
        if snr is None:
            snr = float(np.random.default_rng([self.seed, idx]).uniform(-5, 5))
        return mix_at_snr(Waveform(a.samples[start:start + n], self.sample_rate),
                          Waveform(b.samples[start:start + n], self.sample_rate),
                          snr, self.seed, (row.source_path_1, row.source_path_2))


def collate(examples, dtype=np.float32):
    """Stack examples into ``(mixtures [B, N], sources [B, J, N])`` arrays."""
    mixes, srcs = zip(*(ex.arrays(dtype) for ex in examples))
    return np.stack(mixes), np.stack(srcs)
