"""Sequence-processing unit blocks.

All blocks here take time-major features ``[B, T, F]`` (frames, then
channels) so that LayerNorm and linear layers act per frame; convolutions
transpose locally. The cross-speaker block takes ``[B, J, T, F]``.
"""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as fn

EGA_MODES = ("full", "plain_ds_us", "mul_no_gate")


def sinusoid_table(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos encodings of (possibly negative) relative distances, ``[len, dim]``."""
    half = dim // 2
    inv_freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    angles = positions.to(torch.float64)[:, None] * inv_freq[None]
    table = torch.cat([angles.sin(), angles.cos()], dim=-1)
    if table.shape[-1] < dim:
        table = fn.pad(table, (0, dim - table.shape[-1]))
    return table


class MultiHeadAttention(nn.Module):
    """Multi-head scaled dot-product self-attention along axis 1 of ``[B, T, F]``.

    With ``relative=True`` the logits use the content/position decomposition
    of Transformer-XL: for query ``i`` and key ``j``,

        ((q_i + u) . k_j + (q_i + v) . W_r r_{j-i}) / sqrt(d)

    where ``r`` is a sinusoidal table of relative distances clipped to
    ``max_rel`` and ``u``, ``v`` are learned per-head biases. With
    ``relative=False`` this is plain MHSA (no positional information), which
    makes it permutation-equivariant over axis 1.
    """

    def __init__(self, dim: int, n_heads: int, relative: bool = True, max_rel: int | None = None):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"model dim {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.relative = relative
        self.max_rel = max_rel
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        if relative:
            self.pos_proj = nn.Linear(dim, dim, bias=False)
            self.content_bias = nn.Parameter(torch.zeros(n_heads, self.head_dim))
            self.position_bias = nn.Parameter(torch.zeros(n_heads, self.head_dim))

    def relative_table(self, length: int, dtype, device) -> torch.Tensor:
        """Projected encodings for distances ``-(T-1) .. T-1``, shape ``[H, 2T-1, d]``."""
        dist = torch.arange(-(length - 1), length, device=device)
        if self.max_rel is not None:
            dist = dist.clamp(-self.max_rel, self.max_rel)
        table = sinusoid_table(dist, self.dim).to(dtype=dtype, device=device)
        r = self.pos_proj(table)
        return r.view(2 * length - 1, self.n_heads, self.head_dim).transpose(0, 1)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        b, t, _ = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        if self.relative:
            logits = (q + self.content_bias[:, None]) @ k.transpose(-1, -2)
            r = self.relative_table(t, x.dtype, x.device)
            pos = (q + self.position_bias[:, None]) @ r.transpose(-1, -2)  # [B, H, T, 2T-1]
            idx = torch.arange(t, device=x.device)
            rel_idx = (idx[None, :] - idx[:, None]) + (t - 1)
            logits = logits + pos.gather(-1, rel_idx.expand(b, self.n_heads, t, t))
        else:
            logits = q @ k.transpose(-1, -2)
        weights = torch.softmax(logits / math.sqrt(self.head_dim), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, t, self.dim)
        out = self.proj(out)
        if return_weights:
            return out, weights
        return out


class GCFN(nn.Module):
    """Gated convolutional feed-forward: Linear F->6F, GLU to 3F, depthwise
    kernel-3 temporal conv, Linear 3F->F."""

    def __init__(self, dim: int, kernel: int = 3):
        super().__init__()
        hidden = 3 * dim
        self.fc1 = nn.Linear(dim, 2 * hidden)
        self.dconv = nn.Conv1d(hidden, hidden, kernel, padding=kernel // 2, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = fn.glu(self.fc1(x), dim=-1)
        h = self.dconv(h.transpose(1, 2)).transpose(1, 2)
        return self.fc2(h)


class FFN(nn.Module):
    """Conventional 4F-hidden feed-forward, kept for the channel-mixing ablation."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x):
        return self.fc2(fn.gelu(self.fc1(x)))


class EGA(nn.Module):
    """Efficient global attention: average-pool by ``pool_factor``, relative
    MHSA on the short sequence, nearest (repeat) upsampling, then a per-frame
    sigmoid gate computed from the block input.

    ``mode="plain_ds_us"`` drops the gate; ``"mul_no_gate"`` multiplies by the
    input itself instead of a learned gate.
    """

    def __init__(self, dim: int, n_heads: int, pool_factor: int, mode: str = "full", max_rel: int | None = None):
        super().__init__()
        if mode not in EGA_MODES:
            raise ValueError(f"unknown ega_mode {mode!r}")
        if pool_factor < 1:
            raise ValueError("pool_factor must be >= 1")
        self.pool_factor = pool_factor
        self.mode = mode
        self.attn = MultiHeadAttention(dim, n_heads, relative=True, max_rel=max_rel)
        if mode == "full":
            self.gate = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = self.pool_factor
        if x.shape[1] % p:
            raise ValueError(f"pool factor {p} does not divide sequence length {x.shape[1]}")
        y = fn.avg_pool1d(x.transpose(1, 2), p).transpose(1, 2) if p > 1 else x
        a = self.attn(y)
        if p > 1:
            a = a.repeat_interleave(p, dim=1)
        if self.mode == "full":
            return a * torch.sigmoid(self.gate(x))
        if self.mode == "mul_no_gate":
            return a * x
        return a


class CLA(nn.Module):
    """Convolutional local attention: Pconv F->2F + GLU, depthwise conv of
    kernel K, Pconv F->2F + BN + GELU, Pconv 2F->F."""

    def __init__(self, dim: int, kernel: int = 65):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("CLA kernel must be odd")
        self.pw1 = nn.Conv1d(dim, 2 * dim, 1)
        self.dconv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.pw2 = nn.Conv1d(dim, 2 * dim, 1)
        self.bn = nn.BatchNorm1d(2 * dim, momentum=0.1)
        self.pw3 = nn.Conv1d(2 * dim, dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = fn.glu(self.pw1(x.transpose(1, 2)), dim=1)
        h = self.dconv(h)
        h = fn.gelu(self.bn(self.pw2(h)))
        return self.pw3(h).transpose(1, 2)


class LayerScale(nn.Module):
    def __init__(self, dim: int, init: float):
        super().__init__()
        if init < 0:
            raise ValueError("layerscale init must be non-negative")
        self.scale = nn.Parameter(torch.full((dim,), float(init)))

    def forward(self, x):
        return x * self.scale


def make_ffn(dim: int, kind: str) -> nn.Module:
    if kind == "gcfn":
        return GCFN(dim)
    if kind == "ffn":
        return FFN(dim)
    raise ValueError(f"unknown ffn kind {kind!r}")


class _TransformerBlock(nn.Module):
    """Two pre-norm residual sub-layers, each ``x + dropout(scale * f(LN(x)))``."""

    def __init__(self, dim: int, mixer: nn.Module, dropout: float, layerscale_init: float, ffn: str):
        super().__init__()
        if not 0 <= dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        self.norm1 = nn.LayerNorm(dim)
        self.mixer = mixer
        self.scale1 = LayerScale(dim, layerscale_init)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = make_ffn(dim, ffn)
        self.scale2 = LayerScale(dim, layerscale_init)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.scale1(self.mixer(self.norm1(x))))
        return x + self.drop(self.scale2(self.ffn(self.norm2(x))))


class GlobalBlock(_TransformerBlock):
    def __init__(self, dim, n_heads, pool_factor, dropout=0.1, layerscale_init=1e-4,
                 ega_mode="full", ffn="gcfn", max_rel=None):
        super().__init__(dim, EGA(dim, n_heads, pool_factor, ega_mode, max_rel), dropout, layerscale_init, ffn)


class LocalBlock(_TransformerBlock):
    def __init__(self, dim, kernel=65, dropout=0.1, layerscale_init=1e-4, ffn="gcfn"):
        super().__init__(dim, CLA(dim, kernel), dropout, layerscale_init, ffn)


class CrossSpeakerBlock(nn.Module):
    """Attention across the speaker axis, frame by frame, with no positional
    encoding, followed (when ``ffn`` is on) by a residual GCFN applied to each
    speaker's sequence. Input and output are ``[B, J, T, F]``."""

    def __init__(self, dim, n_heads, dropout=0.1, layerscale_init=1e-4, ffn=True):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, relative=False)
        self.scale1 = LayerScale(dim, layerscale_init)
        self.drop = nn.Dropout(dropout)
        if ffn:
            self.norm2 = nn.LayerNorm(dim)
            self.ffn = GCFN(dim)
            self.scale2 = LayerScale(dim, layerscale_init)
        else:
            self.ffn = None

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        b, j, t, f = s.shape
        z = s.permute(0, 2, 1, 3).reshape(b * t, j, f)
        z = z + self.drop(self.scale1(self.attn(self.norm1(z))))
        z = z.view(b, t, j, f).permute(0, 2, 1, 3)
        if self.ffn is None:
            return z.contiguous()
        z = z.reshape(b * j, t, f)
        z = z + self.drop(self.scale2(self.ffn(self.norm2(z))))
        return z.view(b, j, t, f)
