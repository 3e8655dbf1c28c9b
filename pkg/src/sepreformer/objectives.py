"""Clipped SI-SNR, permutation-invariant training, auxiliary stage losses
and the multi-loss combination."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import torch


@dataclass
class LossConfig:
    tau: float = 30.0
    alpha0: float = 0.4
    alpha_start: int = 100
    alpha_factor: float = 0.8
    alpha_every: int = 5
    aux_domain: str = "time"        # time | stft_mag | none
    stft_fft: int = 256
    stft_hop: int = 128
    eps: float = 1e-8
    pit_coupling: str = "final"     # final | joint

    def __post_init__(self):
        if self.tau <= 0 or self.eps < 0:
            raise ValueError("tau must be > 0 and eps >= 0")
        if not 0 <= self.alpha0 <= 1:
            raise ValueError("alpha0 must lie in [0, 1]")
        if self.aux_domain not in ("time", "stft_mag", "none"):
            raise ValueError(f"unknown aux_domain {self.aux_domain!r}")
        if self.pit_coupling not in ("final", "joint"):
            raise ValueError(f"unknown pit_coupling {self.pit_coupling!r}")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    final_loss: torch.Tensor
    aux_losses: list = field(default_factory=list)
    permutation: torch.Tensor | None = None     # [B, J]; ref j <- estimate permutation[j]
    per_speaker_si_snr: torch.Tensor | None = None  # [B, J] in dB, aligned to refs
    alpha: float = 0.0

    def as_floats(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "final": float(self.final_loss.detach()),
            "aux": [float(a.detach()) for a in self.aux_losses],
            "alpha": self.alpha,
        }


def si_snr(ref: torch.Tensor, est: torch.Tensor, tau: float | None = 30.0, eps: float = 1e-8) -> torch.Tensor:
    """Clipped scale-invariant SNR in dB over the last axis.

    ``gamma = <est, ref> / |ref|^2``;
    ``min(20 log10((|gamma ref| + eps) / (|gamma ref - est| + eps)), tau)``.
    No mean removal is applied. ``tau=None`` disables the clip.
    """
    ref = torch.as_tensor(ref)
    est = torch.as_tensor(est)
    if ref.shape[-1] != est.shape[-1]:
        raise ValueError(f"length mismatch: ref {ref.shape[-1]} vs est {est.shape[-1]}")
    energy = (ref * ref).sum(-1, keepdim=True)
    if bool((energy == 0).any()):
        raise ValueError("reference signal is identically zero; SI-SNR undefined")
    gamma = (est * ref).sum(-1, keepdim=True) / energy
    target = gamma * ref
    value = 20 * torch.log10((target.norm(dim=-1) + eps) / ((target - est).norm(dim=-1) + eps))
    if tau is not None:
        value = value.clamp(max=tau)
    return value


@lru_cache(maxsize=None)
def permutations_of(n: int) -> tuple:
    return tuple(itertools.permutations(range(n)))


def pairwise_si_snr(refs, ests, tau=30.0, eps=1e-8) -> torch.Tensor:
    """``[..., J, N] x [..., J, N] -> [..., J(ref), J(est)]``."""
    return si_snr(refs.unsqueeze(-2), ests.unsqueeze(-3), tau, eps)


def pit_loss(refs: torch.Tensor, ests: torch.Tensor, tau: float = 30.0, eps: float = 1e-8):
    """Permutation-invariant negative SI-SNR sum.

    Returns ``(loss, permutation)`` with ``loss`` of shape ``[...]`` and the
    arg-min ``permutation`` of shape ``[..., J]``, where reference ``j`` is
    matched to estimate ``permutation[j]``. Ties go to the lexicographically
    smallest permutation.
    """
    if refs.shape[-2] != ests.shape[-2]:
        raise ValueError(f"speaker count mismatch: {refs.shape[-2]} refs vs {ests.shape[-2]} estimates")
    j = refs.shape[-2]
    if j > 4:
        raise ValueError("exhaustive PIT limited to J <= 4")
    scores = pairwise_si_snr(refs, ests, tau, eps)
    perms = torch.tensor(permutations_of(j), device=refs.device)     # [P, J]
    rows = torch.arange(j, device=refs.device)
    per_perm = -scores[..., rows, perms].sum(-1)                      # [..., P]
    loss, best = per_perm.min(dim=-1)
    return loss, perms[best]


def align(ests: torch.Tensor, perm: torch.Tensor) -> torch.Tensor:
    """Reorder the speaker axis (-2 for waveforms) so row ``j`` holds ``ests[perm[j]]``."""
    idx = perm.reshape(*perm.shape, *([1] * (ests.dim() - perm.dim()))).expand_as(ests)
    return ests.gather(perm.dim() - 1, idx)


def stft_magnitude(x: torch.Tensor, n_fft: int = 256, hop: int = 128) -> torch.Tensor:
    """``[..., N] -> [..., n_fft//2+1, frames]`` magnitude with a periodic Hann
    window and no centering, so ``frames = 1 + (N - n_fft) // hop``."""
    if x.shape[-1] < n_fft:
        raise ValueError(f"signal length {x.shape[-1]} shorter than FFT size {n_fft}")
    lead = x.shape[:-1]
    window = torch.hann_window(n_fft, dtype=x.dtype, device=x.device)
    spec = torch.stft(x.reshape(-1, x.shape[-1]), n_fft, hop_length=hop, window=window,
                      center=False, return_complex=True)
    return spec.abs().reshape(*lead, *spec.shape[-2:])


def aux_stage_loss(refs: torch.Tensor, aux_est: torch.Tensor, perm: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Negative clipped SI-SNR summed over speakers for one decoder stage.

    ``aux_est`` is a waveform stack ``[B, J, N]`` (time domain) or a
    magnitude stack ``[B, J, bins, frames]`` (stft_mag); in the latter case
    references are turned into STFT magnitudes and both are flattened.
    """
    if cfg.aux_domain == "stft_mag":
        target = stft_magnitude(refs, cfg.stft_fft, cfg.stft_hop)
        if target.shape != aux_est.shape:
            raise ValueError(f"magnitude shape mismatch: {tuple(target.shape)} vs {tuple(aux_est.shape)}")
        target = target.flatten(-2)
        est = align(aux_est.flatten(-2), perm)
    else:
        target, est = refs, align(aux_est, perm)
    return -si_snr(target, est, cfg.tau, cfg.eps).sum(-1)


def alpha_at(epoch: int, cfg: LossConfig | None = None) -> float:
    """Multi-loss weight: constant ``alpha0`` through ``alpha_start``, then
    multiplied by ``alpha_factor`` every ``alpha_every`` epochs."""
    cfg = cfg or LossConfig()
    if epoch <= cfg.alpha_start:
        return cfg.alpha0
    return cfg.alpha0 * cfg.alpha_factor ** ((epoch - cfg.alpha_start) // cfg.alpha_every)


def combine(final: torch.Tensor, aux: list, alpha: float) -> torch.Tensor:
    """``(1 - alpha) * final + alpha * mean(aux)``; with no aux terms, ``final``."""
    if not aux:
        return final
    return (1 - alpha) * final + alpha * torch.stack(list(aux)).mean(0)


def multi_loss(refs: torch.Tensor, estimates: torch.Tensor, aux: list, alpha: float,
               cfg: LossConfig | None = None) -> LossBreakdown:
    """Batch-mean multi-loss for a ``[B, J, N]`` batch of references.

    Under ``pit_coupling="final"`` the permutation that minimises the
    final-output loss is reused for every auxiliary stage. ``"joint"``
    picks the permutation minimising the combined loss instead.
    """
    cfg = cfg or LossConfig()
    use_aux = bool(aux) and cfg.aux_domain != "none"
    final, perm = pit_loss(refs, estimates, cfg.tau, cfg.eps)
    if use_aux and cfg.pit_coupling == "joint":
        j = refs.shape[-2]
        cands = torch.tensor(permutations_of(j), device=refs.device)
        totals, finals = [], []
        for p in cands:
            pb = p.expand(refs.shape[0], j)
            f = -si_snr(refs, align(estimates, pb), cfg.tau, cfg.eps).sum(-1)
            a = [aux_stage_loss(refs, est, pb, cfg) for est in aux]
            totals.append(combine(f, a, alpha))
            finals.append(f)
        best = torch.stack(totals, -1).argmin(-1)
        perm = cands[best]
        final = torch.stack(finals, -1).gather(-1, best[:, None])[:, 0]
    aux_losses = [aux_stage_loss(refs, est, perm, cfg).mean() for est in aux] if use_aux else []
    final_mean = final.mean()
    total = combine(final_mean, aux_losses, alpha) if use_aux else final_mean
    with torch.no_grad():
        per_spk = si_snr(refs, align(estimates, perm), cfg.tau, cfg.eps)
    return LossBreakdown(total=total, final_loss=final_mean, aux_losses=aux_losses, permutation=perm,
                         per_speaker_si_snr=per_spk, alpha=alpha if use_aux else 0.0)

