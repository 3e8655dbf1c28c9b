"""Separation metrics, parameter/MAC accounting and the decoder
cosine-similarity probe."""
from __future__ import annotations

import itertools
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import torch

from .objectives import align, pit_loss, si_snr
from .separator import ModelConfig, Separator, padded_length
from .unit_blocks import FFN, GCFN


@dataclass
class SeparationMetrics:
    si_snri: float
    sdri: float | None
    si_snr: list
    si_snr_mixture: list
    permutation: tuple
    sdr: list = field(default_factory=list)
    regularized: bool = False


def _f64(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.detach().to(torch.float64).cpu()
    return torch.as_tensor(np.ascontiguousarray(x, dtype=np.float64))


def si_snri(mixture, refs, ests, tau: float | None = 30.0, eps: float = 1e-8) -> SeparationMetrics:
    """SI-SNR improvement under the best assignment.

    ``mixture`` is ``[N]``, ``refs``/``ests`` are ``[J, N]``.
    """
    mixture, refs, ests = _f64(mixture), _f64(refs), _f64(ests)
    if not (mixture.shape[-1] == refs.shape[-1] == ests.shape[-1]):
        raise ValueError("mixture, refs and estimates must share one length")
    _, perm = pit_loss(refs, ests, tau if tau is not None else float("inf"), eps)
    est_vals = si_snr(refs, align(ests, perm), tau, eps)
    mix_vals = si_snr(refs, mixture.expand_as(refs), tau, eps)
    return SeparationMetrics(
        si_snri=float(est_vals.mean() - mix_vals.mean()), sdri=None,
        si_snr=est_vals.tolist(), si_snr_mixture=mix_vals.tolist(), permutation=tuple(perm.tolist()))


def projection_sdr(ref, est, filter_len: int = 512, ridge: float = 1e-8):
    """SDR (dB) of ``est`` against the best ``filter_len``-tap time-invariant
    filtering of ``ref``.

    The allowed-distortion subspace is spanned by ``ref`` delayed by
    ``0 .. filter_len-1`` samples (full convolution, so the normal matrix is
    the Toeplitz autocorrelation of ``ref``). Returns ``(sdr_db, regularized)``.
    """
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    n = ref.size
    if est.size != n:
        raise ValueError("length mismatch")
    if n < filter_len:
        raise ValueError(f"signals shorter than the {filter_len}-tap filter")
    nfft = 1 << int(np.ceil(np.log2(n + filter_len)))
    r_f = np.fft.rfft(ref, nfft)
    auto = np.fft.irfft(r_f * np.conj(r_f), nfft)[:filter_len]
    cross = np.fft.irfft(np.fft.rfft(est, nfft) * np.conj(r_f), nfft)[:filter_len]
    gram = scipy.linalg.toeplitz(auto)
    eig = np.linalg.eigvalsh(gram)
    regularized = bool(eig[0] <= 1e-10 * eig[-1])
    if regularized:
        gram = gram + ridge * max(auto[0], 1e-300) * np.eye(filter_len)
    coef = scipy.linalg.solve(gram, cross, assume_a="pos")
    target = np.convolve(ref, coef)
    est_pad = np.concatenate([est, np.zeros(filter_len - 1)])
    err = est_pad - target
    tiny = np.finfo(np.float64).tiny
    return float(10 * np.log10((target @ target + tiny) / (err @ err + tiny))), regularized


def sdri(mixture, refs, ests, filter_len: int = 512):
    """Mean SDR improvement over the mixture under the SDR-best assignment.
    Returns ``(sdri_db, per_speaker_sdr, regularized)``."""
    mixture = np.asarray(_f64(mixture))
    refs = np.asarray(_f64(refs))
    ests = np.asarray(_f64(ests))
    j = refs.shape[0]
    table = np.empty((j, j))
    flag = False
    for a in range(j):
        for b in range(j):
            table[a, b], reg = projection_sdr(refs[a], ests[b], filter_len)
            flag |= reg
    best = max(itertools.permutations(range(j)), key=lambda p: sum(table[k, p[k]] for k in range(j)))
    est_sdr = [table[k, best[k]] for k in range(j)]
    base = []
    for k in range(j):
        v, reg = projection_sdr(refs[k], mixture, filter_len)
        base.append(v)
        flag |= reg
    return float(np.mean(est_sdr) - np.mean(base)), est_sdr, flag


def separation_metrics(mixture, refs, ests, filter_len: int = 512, with_sdr: bool = True) -> SeparationMetrics:
    m = si_snri(mixture, refs, ests)
    if with_sdr:
        m.sdri, m.sdr, m.regularized = sdri(mixture, refs, ests, filter_len)
    return m


# -- accounting -------------------------------------------------------------------

@dataclass
class CostReport:
    param_count: int = 0
    macs_per_window: int = 0
    params: "OrderedDict[str, int]" = field(default_factory=OrderedDict)
    macs: "OrderedDict[str, int]" = field(default_factory=OrderedDict)
    kinds: "OrderedDict[str, int]" = field(default_factory=OrderedDict)
    notes: list = field(default_factory=list)

    def lines(self) -> list:
        out = [f"params_total {self.param_count}", f"macs_total {self.macs_per_window}"]
        out += [f"params.{k} {v}" for k, v in self.params.items()]
        out += [f"macs.{k} {v}" for k, v in self.macs.items()]
        out += [f"note {n}" for n in self.notes]
        return out


MODULE_GROUPS = OrderedDict([
    ("encoder", "audio_encoder"),
    ("input_layer", "input_layer"),
    ("enc_stages", "separation_encoder"),
    ("downsample", "separation_encoder"),
    ("split", "speaker_split"),
    ("splits", "speaker_split"),
    ("dec_stages", "reconstruction_decoder"),
    ("output_layer", "output_layer"),
    ("decoder", "audio_decoder"),
    ("aux_heads", "aux_heads"),
    ("aux_decoders", "aux_heads"),
    ("aux_mag_heads", "aux_heads"),
])


def count_params(cfg: ModelConfig | Separator, include_aux: bool = False, reference_millions: float | None = None) -> CostReport:
    """Exact parameter count of an instantiated separator, attributed to the
    top-level modules. Auxiliary heads (training only) are excluded unless
    ``include_aux``."""
    if isinstance(cfg, Separator):
        model = cfg
    else:
        model = Separator(cfg if include_aux else cfg.replace(aux="none"))
    rep = CostReport()
    for name, p in model.named_parameters():
        group = MODULE_GROUPS[name.split(".", 1)[0]]
        if group == "aux_heads" and not include_aux:
            continue
        rep.params[group] = rep.params.get(group, 0) + p.numel()
    rep.param_count = sum(rep.params.values())
    if reference_millions is not None:
        ref = reference_millions * 1e6
        rep.notes.append(f"reference {reference_millions}M; ratio {rep.param_count / ref:.4f}; "
                         f"difference {rep.param_count - ref:+.0f}")
        for k, v in rep.params.items():
            rep.notes.append(f"share {k} {v / rep.param_count:.4f}")
    return rep


def gcfn_linear_weights(dim: int) -> int:
    m = GCFN(dim)
    return m.fc1.weight.numel() + m.fc2.weight.numel()


def ffn_linear_weights(dim: int) -> int:
    m = FFN(dim)
    return m.fc1.weight.numel() + m.fc2.weight.numel()


class _Macs:
    def __init__(self):
        self.by_group = OrderedDict()
        self.by_kind = OrderedDict()

    def add(self, group: str, kind: str, n: int):
        n = int(n)
        self.by_group[group] = self.by_group.get(group, 0) + n
        self.by_kind[kind] = self.by_kind.get(kind, 0) + n


def _attention_macs(m: _Macs, group: str, dim: int, t: int, relative: bool, copies: int = 1):
    m.add(group, "linear", copies * 4 * dim * dim * t)         # qkv + output projection
    m.add(group, "attention", copies * 2 * t * t * dim)        # scores + weighted sum
    if relative:
        # the projected distance table is shared by every sequence in the call
        m.add(group, "linear", dim * dim * (2 * t - 1))
        m.add(group, "attention", copies * t * (2 * t - 1) * dim)  # position scores


def _gcfn_macs(m, group, cfg, t, copies):
    f = cfg.F
    if cfg.ffn == "gcfn":
        m.add(group, "linear", copies * 9 * f * f * t)
        m.add(group, "conv", copies * 3 * f * 3 * t)
    else:
        m.add(group, "linear", copies * 8 * f * f * t)


def _block_pair_macs(m: _Macs, group: str, cfg: ModelConfig, t: int, pool: int, copies: int = 1):
    f = cfg.F
    tp = t // pool
    _attention_macs(m, group, f, tp, True, copies)
    if cfg.ega_mode == "full":
        m.add(group, "linear", copies * f * f * t)      # gate
    _gcfn_macs(m, group, cfg, t, copies)
    # local block: CLA + channel mixer
    m.add(group, "conv", copies * (2 * f * f + 2 * f * f + 2 * f * f) * t)
    m.add(group, "conv", copies * f * cfg.K * t)
    _gcfn_macs(m, group, cfg, t, copies)


def count_macs(cfg: ModelConfig, n_samples: int = 16000) -> CostReport:
    """Analytic multiply-accumulate count of one inference pass over
    ``n_samples`` (padded as the model pads). Nonlinearities, normalisation,
    softmax and elementwise products are not counted."""
    c = cfg
    n_pad = padded_length(n_samples, c.L, c.H, c.R)
    t0 = (n_pad - c.L) // c.H + 1
    m = _Macs()
    f, j = c.F, c.J
    m.add("audio_encoder", "conv", c.F_o * c.L * t0)
    m.add("input_layer", "linear", c.F_o * f * t0)
    for r in range(c.R + 1):
        t = t0 // 2 ** r
        for _ in range(c.B_E):
            _block_pair_macs(m, "separation_encoder", c, t, 2 ** (c.R - r))
        if r < c.R:
            m.add("separation_encoder", "conv", f * 5 * (t // 2))

    def split_macs(t):
        m.add("speaker_split", "linear", (f * 2 * j * f + j * f * f) * t)

    late = c.decoder_mode == "late_split"
    if not late:
        split_macs(t0 // 2 ** c.R)
    for r in reversed(range(c.R)):
        t = t0 // 2 ** r
        pool = 2 ** (c.R - r)
        streams = 1 if late else j
        if not late:
            split_macs(t)
        m.add("reconstruction_decoder", "linear", streams * 2 * f * f * t)
        for u in range(c.B_D):
            _block_pair_macs(m, "reconstruction_decoder", c, t, pool, streams)
            if c.decoder_mode == "sepre" and (c.cs_placement == "per_unit" or u == c.B_D - 1):
                _attention_macs(m, "reconstruction_decoder", f, j, False, t)
                if c.cs_ffn:
                    _gcfn_macs(m, "reconstruction_decoder", c, t, j)
    if late:
        split_macs(t0)
    m.add("output_layer", "linear", j * (2 * f * f + f * c.F_o) * t0)
    m.add("audio_decoder", "conv", j * c.F_o * c.L * t0)
    rep = CostReport(macs=m.by_group, kinds=m.by_kind)
    rep.macs_per_window = sum(m.by_group.values())
    rep.notes.append(f"frames {t0} (padded samples {n_pad}); by kind " +
                     " ".join(f"{k}={v}" for k, v in m.by_kind.items()))
    return rep


def cost_report(cfg: ModelConfig, n_samples: int = 16000, reference_millions: float | None = None) -> CostReport:
    rep = count_params(cfg, reference_millions=reference_millions)
    macs = count_macs(cfg, n_samples)
    rep.macs = macs.macs
    rep.kinds = macs.kinds
    rep.macs_per_window = macs.macs_per_window
    rep.notes = macs.notes + rep.notes
    return rep


# -- cosine-similarity probe ---------------------------------------------------------

TAP_NAMES = ("Z1", "Z2", "Z3", "Z4")


def frame_cosine(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Per-frame cosine similarity of ``[T, F]`` features, clamped to [-1, 1]."""
    a = a.to(torch.float64)
    b = b.to(torch.float64)
    num = (a * b).sum(-1)
    den = a.norm(dim=-1) * b.norm(dim=-1)
    return (num / den.clamp_min(eps)).clamp(-1.0, 1.0)


@torch.no_grad()
def cosine_probe(model: Separator, mixture) -> list:
    """Cosine similarity between the two speakers' features at taps Z1..Z4
    (unit input, after global, after local, after cross-speaker) of every
    decoder unit. Returns rows ``(stage, unit, tap, frame, value)``; the first
    executed decoder stage is ``R-1``."""
    if model.cfg.J != 2:
        raise ValueError("probe defined for two speakers")
    if model.cfg.decoder_mode == "late_split":
        raise ValueError("probe needs a split decoder (essd or sepre)")
    model.eval()
    x = _f64(mixture).to(next(model.parameters()).dtype)
    out = model(x[None] if x.dim() == 1 else x, record_taps=True)
    rows = []
    units = [(r, u) for r in reversed(range(model.cfg.R)) for u in range(model.cfg.B_D)]
    for (stage, unit), taps in zip(units, out.taps):
        for name, z in zip(TAP_NAMES, taps):
            cos = frame_cosine(z[0, 0], z[0, 1])
            rows.extend((stage, unit, name, t, float(v)) for t, v in enumerate(cos))
    return rows


def probe_means(rows, stage: int | None = None, unit: int = 0) -> dict:
    """Mean similarity per tap for one decoder unit (default: first executed stage)."""
    if stage is None:
        stage = max(r[0] for r in rows)
    acc = {}
    for s, u, tap, _, v in rows:
        if s == stage and u == unit:
            acc.setdefault(tap, []).append(v)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def write_probe_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("stage,unit,tap,frame,cosine\n")
        for s, u, tap, t, v in rows:
            fh.write(f"{s},{u},{tap},{t},{v:.8f}\n")
