"""Training recipe: warm-up + plateau learning-rate schedule, AdamW with
selective weight decay, global-norm gradient clipping, PIT multi-loss
steps, validation and version-tagged checkpoints.
"""
from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, TrainConfig
from .mixtures import collate
from .objectives import LossBreakdown, LossConfig, align, alpha_at, multi_loss, pit_loss, si_snr
from .separator import Separator

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sepreformer-checkpoint/1"


class NumericFailure(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class PlateauState:
    decays: int = 0
    best: float = math.inf
    bad_epochs: int = 0


def lr_at(step: int, epoch: int, steps_per_epoch: int, state: PlateauState, cfg: TrainConfig) -> float:
    """Learning rate for ``step`` (0-based, within ``epoch``).

    Linear ramp from 0 to the initial rate over the warm-up epochs, then the
    initial rate times ``plateau_factor ** decays``.
    """
    base = cfg.initial_lr
    if epoch < cfg.warmup_epochs:
        done = epoch * steps_per_epoch + step
        return base * done / (cfg.warmup_epochs * steps_per_epoch)
    return base * cfg.plateau_factor ** state.decays


def observe_validation(state: PlateauState, val_loss: float, epoch: int, cfg: TrainConfig) -> bool:
    """Update the plateau counter after ``epoch``; returns True if the rate decayed.

    In dynamic-mixing mode the rate is held for ``dm_hold_epochs`` before
    plateau logic activates (the best loss is still tracked).
    """
    if val_loss < state.best:
        state.best = val_loss
        state.bad_epochs = 0
        return False
    if cfg.dm and epoch < cfg.dm_hold_epochs:
        return False
    state.bad_epochs += 1
    if state.bad_epochs >= cfg.plateau_patience:
        state.decays += 1
        state.bad_epochs = 0
        return True
    return False


def clip_gradients(params, max_norm: float = 5.0) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm; raises :class:`NumericFailure` on a non-finite norm.
    """
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g.detach(), dtype=torch.float64) for g in grads]))
    norm = float(norm)
    if not math.isfinite(norm):
        raise NumericFailure(f"non-finite gradient norm {norm}")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


def no_decay(name: str, p: torch.nn.Parameter) -> bool:
    return p.ndim <= 1 or name.endswith(("bias", "bias2"))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, plain = [], []
    for name, p in model.named_parameters():
        (plain if no_decay(name, p) else decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": plain, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.initial_lr, betas=(0.9, 0.999), eps=1e-8)


def to_batch(examples, device="cpu"):
    mix, src = collate(examples)
    return torch.from_numpy(mix).to(device), torch.from_numpy(src).to(device)


def train_step(model: Separator, optimizer, mix, refs, lr: float, alpha: float,
               loss_cfg: LossConfig, grad_clip: float = 5.0) -> LossBreakdown:
    """One optimisation step; raises :class:`NumericFailure` (leaving
    parameters untouched) if the loss or gradient is not finite."""
    model.train()
    out = model(mix, with_aux=loss_cfg.aux_domain != "none" and model.cfg.aux != "none")
    br = multi_loss(refs, out.estimates, out.aux, alpha, loss_cfg)
    if not torch.isfinite(br.total):
        raise NumericFailure(f"non-finite loss {br.total.item()}")
    optimizer.zero_grad(set_to_none=True)
    br.total.backward()
    clip_gradients(model.parameters(), grad_clip)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return br


@torch.no_grad()
def evaluate_loss(model: Separator, dataset, batch_size: int, loss_cfg: LossConfig) -> float:
    """Mean final-output PIT loss over ``dataset`` in inference mode."""
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        exs = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        mix, refs = to_batch(exs)
        est = model(mix).estimates
        loss, _ = pit_loss(refs, est, loss_cfg.tau, loss_cfg.eps)
        total += float(loss.sum())
        count += len(exs)
    return total / max(count, 1)


class Trainer:
    """Single-stream trainer owning the model, optimizer, schedule and RNG state."""

    def __init__(self, run: RunConfig, train_data=None, val_data=None, out_dir=None):
        self.run = run
        self.cfg = run.train
        self.loss_cfg = run.loss
        torch.manual_seed(self.cfg.seed)
        self.model = Separator(run.model)
        self.optimizer = make_optimizer(self.model, self.cfg)
        self.plateau = PlateauState()
        self.epoch = 0
        self.global_step = 0
        self.train_data = train_data
        self.val_data = val_data
        self.out_dir = Path(out_dir) if out_dir else None
        self.failures = 0
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.train_data) // self.cfg.batch_size)

    def log_line(self, **fields) -> str:
        parts = []
        for k, v in fields.items():
            parts.append(f"{k}={v:.9g}" if isinstance(v, float) else f"{k}={v}")
        line = " ".join(parts)
        if self.out_dir:
            with open(self.out_dir / "metrics.log", "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        log.info(line)
        return line

    def batch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.train_data))

    def run_epoch(self) -> dict:
        if hasattr(self.train_data, "set_epoch"):
            self.train_data.set_epoch(self.epoch)
        order = self.batch_order(self.epoch)
        n = self.steps_per_epoch
        alpha = alpha_at(self.epoch, self.loss_cfg)
        totals, finals = [], []
        for step in range(n):
            idx = order[step * self.cfg.batch_size:(step + 1) * self.cfg.batch_size]
            mix, refs = to_batch([self.train_data[int(i)] for i in idx])
            lr = lr_at(step, self.epoch, n, self.plateau, self.cfg)
            try:
                br = train_step(self.model, self.optimizer, mix, refs, lr, alpha, self.loss_cfg, self.cfg.grad_clip)
            except NumericFailure as exc:
                self.failures += 1
                self.log_line(kind="skip", epoch=self.epoch, step=self.global_step, reason=str(exc).replace(" ", "_"))
                if self.failures >= self.cfg.max_consecutive_failures:
                    raise
                continue
            self.failures = 0
            self.global_step += 1
            totals.append(float(br.total.detach()))
            finals.append(float(br.final_loss.detach()))
            aux = ",".join(f"{float(a.detach()):.9g}" for a in br.aux_losses) or "-"
            self.log_line(kind="step", epoch=self.epoch, step=self.global_step, lr=lr, alpha=br.alpha,
                          total=float(br.total.detach()), final=float(br.final_loss.detach()), aux=aux)
        summary = {"train_total": float(np.mean(totals)) if totals else math.nan,
                   "train_final": float(np.mean(finals)) if finals else math.nan}
        if self.val_data is not None and len(self.val_data):
            val = evaluate_loss(self.model, self.val_data, self.cfg.batch_size, self.loss_cfg)
            decayed = observe_validation(self.plateau, val, self.epoch, self.cfg)
            summary.update(val_loss=val, lr_decayed=int(decayed))
        self.log_line(kind="epoch", epoch=self.epoch, step=self.global_step,
                      lr=lr_at(0, self.epoch + 1, n, self.plateau, self.cfg), **summary)
        self.epoch += 1
        return summary

    def fit(self, epochs: int | None = None, checkpoint: bool = True) -> list:
        target = self.epoch + epochs if epochs is not None else self.cfg.max_epochs
        history = []
        while self.epoch < min(target, self.cfg.max_epochs):
            history.append(self.run_epoch())
            if checkpoint and self.out_dir and self.epoch % self.cfg.checkpoint_every == 0:
                self.save(self.out_dir / "last.ckpt")
        return history

    # -- checkpoints --------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.run, self.optimizer,
                        {"epoch": self.epoch, "global_step": self.global_step, "plateau": asdict(self.plateau)})

    @classmethod
    def resume(cls, path, train_data=None, val_data=None, out_dir=None) -> "Trainer":
        ckpt = read_checkpoint(path)
        trainer = cls(ckpt.run, train_data, val_data, out_dir)
        trainer.model.load_state_dict(ckpt.model_state)
        if ckpt.optimizer_state is None:
            raise CheckpointError("checkpoint has no optimizer state; cannot resume training")
        trainer.optimizer.load_state_dict(ckpt.optimizer_state)
        trainer.epoch = ckpt.schedule["epoch"]
        trainer.global_step = ckpt.schedule["global_step"]
        trainer.plateau = PlateauState(**ckpt.schedule["plateau"])
        if ckpt.torch_rng is not None:
            torch.set_rng_state(ckpt.torch_rng)
        return trainer


# -- checkpoint archive ---------------------------------------------------------
#
# A zip archive (numpy .npz layout) with members:
#   format                      text, CHECKPOINT_FORMAT
#   config                      text, the RunConfig "key = value" record
#   param/<name>                every model parameter and buffer (state_dict names)
#   optim/<i>/exp_avg, optim/<i>/exp_avg_sq, optim/<i>/step
#                               AdamW moments, <i> = index into named_parameters()
#   optim/param_groups          JSON text of the optimizer hyperparameters
#   schedule                    JSON text: epoch, global_step, plateau state
#   rng/torch                   uint8 torch CPU generator state


@dataclass
class Checkpoint:
    run: RunConfig
    model_state: dict
    optimizer_state: dict | None
    schedule: dict
    torch_rng: torch.Tensor | None


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8)


def save_checkpoint(path, model: Separator, run: RunConfig, optimizer=None, schedule=None) -> None:
    arrays = {"format": _text(CHECKPOINT_FORMAT), "config": _text(run.to_text())}
    for name, t in model.state_dict().items():
        arrays[f"param/{name}"] = t.detach().cpu().numpy()
    if optimizer is not None:
        sd = optimizer.state_dict()
        for i, st in sd["state"].items():
            for key, val in st.items():
                arrays[f"optim/{i}/{key}"] = torch.as_tensor(val).cpu().numpy()
        arrays["optim/param_groups"] = _text(json.dumps(sd["param_groups"]))
    arrays["schedule"] = _text(json.dumps(schedule or {"epoch": 0, "global_step": 0, "plateau": asdict(PlateauState())}))
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path) -> Checkpoint:
    """Read and fully validate a checkpoint before anything is applied."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            members = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if "format" not in members:
        raise CheckpointError(f"{path}: missing format tag")
    fmt = members["format"].tobytes().decode("utf-8")
    if fmt != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint version {fmt!r} (expected {CHECKPOINT_FORMAT!r})")
    run = RunConfig.from_text(members["config"].tobytes().decode("utf-8"))
    model_state = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in members.items() if k.startswith("param/")}
    optimizer_state = None
    if "optim/param_groups" in members:
        state = {}
        for k, v in members.items():
            parts = k.split("/")
            if parts[0] == "optim" and len(parts) == 3:
                state.setdefault(int(parts[1]), {})[parts[2]] = torch.from_numpy(v.copy())
        groups = json.loads(members["optim/param_groups"].tobytes().decode("utf-8"))
        optimizer_state = {"state": state, "param_groups": groups}
    schedule = json.loads(members["schedule"].tobytes().decode("utf-8"))
    rng = torch.from_numpy(members["rng/torch"].copy()) if "rng/torch" in members else None
    return Checkpoint(run, model_state, optimizer_state, schedule, rng)


def load_model(path) -> Separator:
    ckpt = read_checkpoint(path)
    model = Separator(ckpt.run.model)
    missing, unexpected = model.load_state_dict(ckpt.model_state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"parameter mismatch: missing={missing[:3]} unexpected={unexpected[:3]}")
    model.eval()
    return model


def fit_single_example(model: Separator, mix: torch.Tensor, refs: torch.Tensor, max_steps: int = 2000,
                       target_db: float = 20.0, lr: float = 1e-3, loss_cfg: LossConfig | None = None,
                       check_every: int = 10, train_cfg: TrainConfig | None = None):
    """Overfit one example. Returns ``(steps_taken, per_speaker_si_snr)``;
    ``steps_taken`` is the first checked step where every speaker's
    inference-mode SI-SNR reaches ``target_db`` (or ``None``)."""
    loss_cfg = loss_cfg or LossConfig()
    cfg = train_cfg or TrainConfig(lr0=lr)
    opt = make_optimizer(model, cfg)
    best = None
    for step in range(1, max_steps + 1):
        train_step(model, opt, mix, refs, lr, loss_cfg.alpha0, loss_cfg, cfg.grad_clip)
        if step % check_every == 0:
            with torch.no_grad():
                model.eval()
                est = model(mix).estimates
                _, perm = pit_loss(refs, est, loss_cfg.tau)
                best = si_snr(refs, align(est, perm), None)
            if bool((best >= target_db).all()):
                return step, best
    return None, best
