"""Learnable time-domain audio encoder/decoder and the padding arithmetic
that keeps the U-Net's ``R`` halvings exact.

Shapes follow the TasNet convention: waveforms are ``[B, N]`` and encoded
features are ``[B, F_o, T]``.
"""
from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn


class ShapeError(ValueError):
    pass


class SampleRateError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ShapeError(f"waveform must be 1-D with length >= 1, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.shape[0]


def num_frames(n: int, kernel: int, stride: int) -> int:
    """Frames produced by a valid (unpadded) strided conv over ``n`` samples."""
    if n < kernel:
        return 0
    return (n - kernel) // stride + 1


def padded_length(n: int, kernel: int, stride: int, depth: int) -> int:
    """Least ``n' >= n`` with ``(n'-kernel)/stride + 1`` an integer multiple of ``2**depth``."""
    if kernel < stride or stride < 1:
        raise ValueError(f"need kernel >= stride >= 1, got L={kernel}, H={stride}")
    block = 2 ** depth
    raw = max(1, math.ceil(max(n - kernel, 0) / stride) + 1)
    frames = math.ceil(raw / block) * block
    return (frames - 1) * stride + kernel


def pad_for_depth(x, kernel: int, stride: int, depth: int):
    """Trailing-zero pad ``x`` (Waveform, ndarray or tensor; time on the last
    axis) for an exact ``depth``-fold halving. Returns ``(padded, original_length)``."""
    if isinstance(x, Waveform):
        padded, n = pad_for_depth(x.samples, kernel, stride, depth)
        return Waveform(padded, x.sample_rate), n
    n = x.shape[-1]
    extra = padded_length(n, kernel, stride, depth) - n
    if isinstance(x, torch.Tensor):
        return nn.functional.pad(x, (0, extra)), n
    widths = [(0, 0)] * (np.ndim(x) - 1) + [(0, extra)]
    return np.pad(np.asarray(x), widths), n


class AudioEncoder(nn.Module):
    """1-D conv (kernel L, stride H) to ``F_o`` filters followed by GELU."""

    def __init__(self, n_filters: int = 256, kernel: int = 16, stride: int = 4, activation: bool = True):
        super().__init__()
        if kernel < stride or stride < 1 or n_filters < 1:
            raise ValueError("need L >= H >= 1 and F_o >= 1")
        self.kernel = kernel
        self.stride = stride
        self.conv = nn.Conv1d(1, n_filters, kernel, stride=stride)
        # test hook: identity in place of GELU isolates the linear stage
        self.act = nn.GELU() if activation else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] < self.kernel:
            raise ShapeError(f"input length {x.shape[-1]} shorter than encoder kernel {self.kernel}")
        if x.dim() == 1:
            x = x[None]
        return self.act(self.conv(x.unsqueeze(1)))


class AudioDecoder(nn.Module):
    """Transposed 1-D conv from ``F_o`` channels back to one waveform (overlap-add)."""

    def __init__(self, n_filters: int = 256, kernel: int = 16, stride: int = 4, bias: bool = True):
        super().__init__()
        self.n_filters = n_filters
        self.conv = nn.ConvTranspose1d(n_filters, 1, kernel, stride=stride, bias=bias)

    def forward(self, y: torch.Tensor, length: int | None = None) -> torch.Tensor:
        if y.shape[-2] != self.n_filters:
            raise ShapeError(f"decoder expects {self.n_filters} channels, got {y.shape[-2]}")
        lead = y.shape[:-2]
        out = self.conv(y.reshape(-1, *y.shape[-2:])).squeeze(-2)
        out = out.reshape(*lead, out.shape[-1])
        if length is not None:
            out = out[..., :length]
        return out


def encode(x: Waveform, encoder: AudioEncoder) -> torch.Tensor:
    """Encode one waveform; returns ``[F_o, T]``."""
    t = torch.as_tensor(x.samples, dtype=encoder.conv.weight.dtype)
    with torch.no_grad():
        return encoder(t[None])[0]


def decode(features: torch.Tensor, decoder: AudioDecoder, original_length: int, sample_rate: int = 8000) -> Waveform:
    with torch.no_grad():
        out = decoder(features[None], original_length)[0]
    return Waveform(out.cpu().numpy(), sample_rate)


def read_wav(path, sample_rate: int | None = 8000) -> Waveform:
    """Read 16-bit PCM mono. A rate mismatch raises rather than resampling."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ShapeError(f"{path}: expected mono, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        if sample_rate is not None and rate != sample_rate:
            raise SampleRateError(f"{path}: sample rate {rate} != expected {sample_rate}")
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(np.asarray(w.samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())
