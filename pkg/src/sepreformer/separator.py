"""Full separator: audio codec, separation encoder, speaker split,
weight-shared reconstruction decoder with cross-speaker blocks, output
layers and the auxiliary mask heads used by the multi-loss.

Internally the separator is time-major: ``[B, T, F]`` for single sequences
and ``[B, J, T, F]`` after the speaker split.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as fn

from .signal_codec import AudioDecoder, AudioEncoder, ShapeError, pad_for_depth, padded_length
from .unit_blocks import EGA_MODES, CrossSpeakerBlock, GlobalBlock, LocalBlock

DECODER_MODES = ("late_split", "early_split_multi_dec", "essd", "sepre")
SPLIT_MODES = ("shared", "multiple")
CS_PLACEMENTS = ("per_unit", "per_stage")
AUX_KINDS = ("none", "time", "stft_mag")


@dataclass
class ModelConfig:
    F: int = 128
    F_o: int = 256
    L: int = 16
    H: int = 4
    R: int = 4
    B_E: int = 2
    B_D: int = 3
    K: int = 65
    n_heads: int = 8
    J: int = 2
    dropout_p: float = 0.1
    layerscale_init: float = 1e-4
    split_mode: str = "shared"
    decoder_mode: str = "sepre"
    ega_mode: str = "full"
    cs_ffn: bool = True
    cs_placement: str = "per_unit"
    ffn: str = "gcfn"
    aux: str = "time"
    stft_bins: int = 129
    stft_hop: int = 128
    stft_fft: int = 256
    decoder_bias: bool = True
    max_rel: int = 2048
    sample_rate: int = 8000

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.F % self.n_heads:
            raise ValueError(f"F={self.F} not divisible by n_heads={self.n_heads}")
        if self.K % 2 == 0:
            raise ValueError(f"K={self.K} must be odd")
        if not self.L >= self.H >= 1:
            raise ValueError(f"need L >= H >= 1, got L={self.L} H={self.H}")
        if self.R < 0 or self.B_E < 1 or self.B_D < 1 or self.F_o < 1:
            raise ValueError("R >= 0, B_E >= 1, B_D >= 1, F_o >= 1 required")
        if self.J < 1:
            raise ValueError("J must be >= 1")
        for name, allowed in (("split_mode", SPLIT_MODES), ("decoder_mode", DECODER_MODES),
                              ("ega_mode", EGA_MODES), ("cs_placement", CS_PLACEMENTS), ("aux", AUX_KINDS)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name}={getattr(self, name)!r} not in {allowed}")
        if self.ffn not in ("gcfn", "ffn"):
            raise ValueError(f"ffn={self.ffn!r} not in ('gcfn', 'ffn')")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @property
    def uses_cs(self) -> bool:
        return self.decoder_mode == "sepre"


PRESETS: dict[str, ModelConfig] = {
    "T": ModelConfig(F=64, F_o=256, L=16, H=4, R=4),
    "S": ModelConfig(F=64, F_o=256, L=8, H=2, R=5),
    "B": ModelConfig(F=128, F_o=256, L=16, H=4, R=4),
    "M": ModelConfig(F=128, F_o=256, L=8, H=2, R=5),
    "L": ModelConfig(F=256, F_o=256, L=16, H=4, R=4),
    # desk-scale configuration for CPU training
    "tiny-desk": ModelConfig(F=32, F_o=64, L=16, H=8, R=2, B_E=1, B_D=1, K=65, n_heads=4),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides)


class InputProjection(nn.Module):
    """Per-frame Linear F_o -> F followed by LayerNorm."""

    def __init__(self, in_dim: int, dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.linear = nn.Linear(in_dim, dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"input projection expects {self.in_dim} channels, got {x.shape[-1]}")
        return self.norm(self.linear(x))


class Downsample(nn.Module):
    """Depthwise stride-2 conv (kernel 5) + BN + GELU; halves the frame count."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, 5, stride=2, padding=2, groups=dim)
        self.bn = nn.BatchNorm1d(dim)

    def forward(self, x):
        if x.shape[1] % 2:
            raise ShapeError(f"downsample needs an even frame count, got {x.shape[1]}")
        return fn.gelu(self.bn(self.conv(x.transpose(1, 2)))).transpose(1, 2)


class SpeakerSplit(nn.Module):
    """Linear F -> 2JF, GLU to JF, then J independent F -> F maps, LN per
    speaker per frame. ``[B, T, F] -> [B, J, T, F]``."""

    def __init__(self, dim: int, n_spk: int):
        super().__init__()
        self.dim = dim
        self.n_spk = n_spk
        self.fc1 = nn.Linear(dim, 2 * n_spk * dim)
        self.weight2 = nn.Parameter(torch.empty(n_spk, dim, dim))
        self.bias2 = nn.Parameter(torch.empty(n_spk, dim))
        bound = dim ** -0.5
        nn.init.uniform_(self.weight2, -bound, bound)
        nn.init.uniform_(self.bias2, -bound, bound)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        b, t, _ = x.shape
        h = fn.glu(self.fc1(x), dim=-1).view(b, t, self.n_spk, self.dim)
        h = torch.einsum("btjf,jgf->btjg", h, self.weight2) + self.bias2
        return self.norm(h).permute(0, 2, 1, 3)


class OutputLayer(nn.Module):
    """Two linears with GLU between them: F -> 2F, GLU, F -> F_o."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, 2 * dim)
        self.fc2 = nn.Linear(dim, out_dim)

    def forward(self, x):
        return self.fc2(fn.glu(self.fc1(x), dim=-1))


def upsample2(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Nearest-neighbour upsampling along the frame axis (axis -2)."""
    return x.repeat_interleave(factor, dim=-2)


def _block_pair(cfg: ModelConfig, pool_factor: int):
    g = GlobalBlock(cfg.F, cfg.n_heads, pool_factor, cfg.dropout_p, cfg.layerscale_init,
                    cfg.ega_mode, cfg.ffn, cfg.max_rel)
    loc = LocalBlock(cfg.F, cfg.K, cfg.dropout_p, cfg.layerscale_init, cfg.ffn)
    return g, loc


class EncoderStage(nn.Module):
    def __init__(self, cfg: ModelConfig, r: int):
        super().__init__()
        self.pool_factor = 2 ** (cfg.R - r)
        blocks = []
        for _ in range(cfg.B_E):
            blocks.extend(_block_pair(cfg, self.pool_factor))
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x):
        return self.blocks(x)


class DecoderUnit(nn.Module):
    """(global, local[, cross-speaker]) on a speaker stack; the global and
    local blocks see every speaker with the same weights."""

    def __init__(self, cfg: ModelConfig, pool_factor: int, with_cs: bool):
        super().__init__()
        self.glob, self.loc = _block_pair(cfg, pool_factor)
        self.cs = CrossSpeakerBlock(cfg.F, cfg.n_heads, cfg.dropout_p, cfg.layerscale_init, cfg.cs_ffn) if with_cs else None

    def forward(self, s, taps=None):
        b, j, t, f = s.shape
        z1 = s
        z = s.reshape(b * j, t, f)
        z2 = self.glob(z)
        z3 = self.loc(z2)
        z3 = z3.view(b, j, t, f)
        z4 = self.cs(z3) if self.cs is not None else z3
        if taps is not None:
            taps.append((z1, z2.view(b, j, t, f), z3, z4))
        return z4


class SharedDecoderStage(nn.Module):
    """Upsample x2, concat with the split skip, Linear 2F -> F, then B_D
    weight-shared units (with CS blocks in sepre mode)."""

    def __init__(self, cfg: ModelConfig, r: int, with_cs: bool):
        super().__init__()
        self.pool_factor = 2 ** (cfg.R - r)
        self.merge = nn.Linear(2 * cfg.F, cfg.F)
        units = []
        for u in range(cfg.B_D):
            has_cs = with_cs and (cfg.cs_placement == "per_unit" or u == cfg.B_D - 1)
            units.append(DecoderUnit(cfg, self.pool_factor, has_cs))
        self.units = nn.ModuleList(units)

    def forward(self, s, skip, taps=None):
        s = upsample2(s)
        if s.shape[-2] != skip.shape[-2]:
            raise ShapeError(f"skip length {skip.shape[-2]} != upsampled length {s.shape[-2]}")
        d = self.merge(torch.cat([s, skip], dim=-1))
        for unit in self.units:
            d = unit(d, taps)
        return d


class SingleDecoderStage(nn.Module):
    """Decoder stage over one sequence ``[B, T, F]`` (no speaker axis)."""

    def __init__(self, cfg: ModelConfig, r: int):
        super().__init__()
        self.pool_factor = 2 ** (cfg.R - r)
        self.merge = nn.Linear(2 * cfg.F, cfg.F)
        blocks = []
        for _ in range(cfg.B_D):
            blocks.extend(_block_pair(cfg, self.pool_factor))
        self.blocks = nn.Sequential(*blocks)

    def forward(self, s, skip, taps=None):
        s = upsample2(s)
        if s.shape[-2] != skip.shape[-2]:
            raise ShapeError(f"skip length {skip.shape[-2]} != upsampled length {s.shape[-2]}")
        return self.blocks(self.merge(torch.cat([s, skip], dim=-1)))


class MultiDecoderStage(nn.Module):
    """Early split with J independent (non-shared) decoders."""

    def __init__(self, cfg: ModelConfig, r: int):
        super().__init__()
        self.pool_factor = 2 ** (cfg.R - r)
        self.branches = nn.ModuleList(SingleDecoderStage(cfg, r) for _ in range(cfg.J))

    def forward(self, s, skip, taps=None):
        outs = [branch(s[:, j], skip[:, j]) for j, branch in enumerate(self.branches)]
        return torch.stack(outs, dim=1)


@dataclass
class SeparatorOutput:
    estimates: torch.Tensor                      # [B, J, N]
    aux: list = field(default_factory=list)      # per decoder stage: [B, J, N] or [B, J, bins, frames]
    aux_stages: list = field(default_factory=list)
    taps: list = field(default_factory=list)     # (Z1, Z2, Z3, Z4) per decoder unit, in execution order
    features: torch.Tensor | None = None         # encoder output X, [B, F_o, T]


class Separator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = AudioEncoder(cfg.F_o, cfg.L, cfg.H)
        self.decoder = AudioDecoder(cfg.F_o, cfg.L, cfg.H, bias=cfg.decoder_bias)
        self.input_layer = InputProjection(cfg.F_o, cfg.F)
        self.enc_stages = nn.ModuleList(EncoderStage(cfg, r) for r in range(cfg.R + 1))
        self.downsample = nn.ModuleList(Downsample(cfg.F) for _ in range(cfg.R))

        if cfg.split_mode == "shared" or cfg.decoder_mode == "late_split":
            self.split = SpeakerSplit(cfg.F, cfg.J)
        else:
            self.splits = nn.ModuleList(SpeakerSplit(cfg.F, cfg.J) for _ in range(cfg.R + 1))

        if cfg.decoder_mode == "late_split":
            stages = [SingleDecoderStage(cfg, r) for r in range(cfg.R)]
        elif cfg.decoder_mode == "early_split_multi_dec":
            stages = [MultiDecoderStage(cfg, r) for r in range(cfg.R)]
        else:
            stages = [SharedDecoderStage(cfg, r, cfg.uses_cs) for r in range(cfg.R)]
        # indexed by stage r, i.e. dec_stages[r] runs at length T / 2**r
        self.dec_stages = nn.ModuleList(stages)
        self.output_layer = OutputLayer(cfg.F, cfg.F_o)

        if cfg.aux != "none":
            self.aux_heads = nn.ModuleList(OutputLayer(cfg.F, cfg.F_o) for _ in range(cfg.R))
            if cfg.aux == "time":
                self.aux_decoders = nn.ModuleList(
                    AudioDecoder(cfg.F_o, cfg.L, cfg.H, bias=cfg.decoder_bias) for _ in range(cfg.R))
            else:
                self.aux_mag_heads = nn.ModuleList(nn.Linear(cfg.F_o, cfg.stft_bins) for _ in range(cfg.R))

    def split_at(self, x: torch.Tensor, tap: int) -> torch.Tensor:
        if hasattr(self, "split"):
            return self.split(x)
        return self.splits[tap](x)

    def frames(self, n_samples: int) -> int:
        c = self.cfg
        return (padded_length(n_samples, c.L, c.H, c.R) - c.L) // c.H + 1

    def encode_stages(self, mix: torch.Tensor):
        """Audio encoder, input layer and separation encoder.
        Returns ``(X, bottleneck, skips)``."""
        c = self.cfg
        x, _ = pad_for_depth(mix, c.L, c.H, c.R)
        feats = self.encoder(x)
        h = self.input_layer(feats.transpose(1, 2))
        skips = []
        for r in range(c.R + 1):
            h = self.enc_stages[r](h)
            if r < c.R:
                skips.append(h)
                h = self.downsample[r](h)
        return feats, h, skips

    def forward(self, mix: torch.Tensor, with_aux: bool | None = None, record_taps: bool = False,
                speaker_perm=None) -> SeparatorOutput:
        """Separate ``mix`` of shape ``[B, N]`` (or ``[N]``) into ``[B, J, N]``.

        ``speaker_perm`` permutes the speaker axis right after every split
        tap; it exists to probe decoder equivariance.
        """
        c = self.cfg
        if mix.dim() == 1:
            mix = mix[None]
        n = mix.shape[-1]
        if with_aux is None:
            with_aux = self.training and c.aux != "none"
        taps = [] if record_taps else None

        def split(x, tap):
            s = self.split_at(x, tap)
            return s[:, list(speaker_perm)] if speaker_perm is not None else s

        feats, h, skips = self.encode_stages(mix)
        stage_feats = []
        if c.decoder_mode == "late_split":
            d = h
            for r in reversed(range(c.R)):
                d = self.dec_stages[r](d, skips[r])
                if with_aux:
                    stage_feats.append((r, split(d, r)))
            d = split(d, 0)
        else:
            d = split(h, c.R)
            for r in reversed(range(c.R)):
                d = self.dec_stages[r](d, split(skips[r], r), taps)
                if with_aux:
                    stage_feats.append((r, d))

        y = self.output_layer(d).transpose(-1, -2)
        est = self.decoder(y, n)
        out = SeparatorOutput(estimates=est, taps=taps or [], features=feats)
        if with_aux:
            for r, feat in stage_feats:
                out.aux.append(self.aux_output(feats, feat, r, n))
                out.aux_stages.append(r)
        return out

    def aux_output(self, feats: torch.Tensor, stage_feat: torch.Tensor, r: int, n: int) -> torch.Tensor:
        """Mask the encoder output with the stage-``r`` head (nearest-upsampled
        to T) and map it to a waveform or a magnitude spectrogram."""
        c = self.cfg
        mask = self.aux_heads[r](stage_feat)
        if r:
            mask = upsample2(mask, 2 ** r)
        masked = feats[:, None] * mask.transpose(-1, -2)    # [B, J, F_o, T]
        if c.aux == "time":
            return self.aux_decoders[r](masked, n)
        mag = self.aux_mag_heads[r](masked.transpose(-1, -2)).transpose(-1, -2)  # [B, J, bins, T]
        n_frames = 1 + max(n - c.stft_fft, 0) // c.stft_hop
        b, j, bins, t = mag.shape
        mag = fn.adaptive_avg_pool1d(mag.reshape(b * j, bins, t), n_frames)
        return mag.view(b, j, bins, n_frames)


def build(cfg: ModelConfig | str, **overrides) -> Separator:
    if isinstance(cfg, str):
        cfg = preset(cfg, **overrides)
    elif overrides:
        cfg = cfg.replace(**overrides)
    return Separator(cfg)
