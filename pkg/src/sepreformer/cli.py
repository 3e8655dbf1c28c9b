"""Command-line interface: make-data, train, separate, evaluate, count, probe.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
Failures print one line ``error code=<n> kind=<kind> reason=<text>`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig
from .evaluation import cosine_probe, cost_report, probe_means, separation_metrics, write_probe_csv
from .mixtures import DataError, Manifest, ManifestDataset, PairDataset, desk_corpus_specs, synth_source
from .signal_codec import SampleRateError, ShapeError, Waveform, read_wav, write_wav
from .training import CheckpointError, NumericFailure, Trainer, load_model, read_checkpoint

DATA_ROOT_ENV = "SEPREFORMER_DATA_ROOT"
WAV_RMS = 0.1
EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("sepreformer")


class CliError(Exception):
    def __init__(self, code: int, kind: str, reason: str):
        super().__init__(reason)
        self.code, self.kind, self.reason = code, kind, reason


def fail(code, kind, reason):
    raise CliError(code, kind, reason)


# -- make-data -------------------------------------------------------------------

def cmd_make_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rate = args.sample_rate
    specs = desk_corpus_specs(args.n_sources, args.seed, rate)
    pools = {"train": [], "val": [], "test": []}
    listing = ["# source_id split f_lo f_hi seed"]
    for spec in specs:
        w = synth_source("band_noise", args.source_seconds, rate, spec.seed, band=spec.band)
        rel = f"sources/{spec.source_id}.wav"
        write_wav(out / rel, Waveform(w.samples * WAV_RMS, rate))
        pools[spec.split].append(rel)
        listing.append(f"{spec.source_id} {spec.split} {spec.band[0]:.3f} {spec.band[1]:.3f} {spec.seed}")
    (out / "sources.txt").write_text("\n".join(listing) + "\n", encoding="utf-8")
    counts = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
    max_offset = args.source_seconds - args.segment_seconds
    if max_offset < 0:
        fail(EXIT_CONFIG, "config", "segment_seconds exceeds source_seconds")
    for k, split in enumerate(("train", "val", "test")):
        rng = np.random.default_rng([args.seed, 101 + k])
        pool = pools[split]
        rows = []
        for _ in range(counts[split]):
            i, j = rng.choice(len(pool), size=2, replace=False)
            offset = round(float(rng.uniform(0, max_offset)) * rate) / rate if split == "train" else 0.0
            rows.append(f"{pool[i]} {pool[j]} {offset:.6f} {args.segment_seconds:.6f} {rng.uniform(-5, 5):.6f}")
        header = "# source_path_1 source_path_2 offset duration snr_db  (seconds; paths relative to this file)"
        (out / f"{split}.txt").write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
    (out / "make_data_args.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in sorted(vars(args).items()) if k != "func"), encoding="utf-8")
    print(f"wrote {len(specs)} sources and train/val/test manifests to {out}")
    return 0


# -- configuration ---------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    """defaults < preset < config file < flags."""
    run = RunConfig.from_preset(args.preset) if getattr(args, "preset", None) else RunConfig()
    if getattr(args, "config", None):
        run = RunConfig.read(args.config, run)
    pairs = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            fail(EXIT_CONFIG, "config", f"--set expects key=value, got {item!r}")
        pairs[key.strip()] = value.strip()
    flag_map = {"seed": "train.seed", "epochs": "train.max_epochs", "decoder_mode": "model.decoder_mode",
                "batch_size": "train.batch_size", "data_root": "data.root"}
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            pairs[key] = str(v)
    run = run.updated(pairs)
    if not run.data.root:
        env = os.environ.get(DATA_ROOT_ENV)
        if env:
            run = run.updated({"data.root": env})
    return run


def _manifest_dataset(run: RunConfig, name: str) -> ManifestDataset:
    root = Path(run.data.root or ".")
    path = Path(name) if Path(name).is_absolute() else root / name
    return ManifestDataset(Manifest.read(path), run.data.sample_rate, run.train.seed, run.data.segment_seconds)


def _train_sources(ds: ManifestDataset) -> list:
    seen = []
    for row in ds.manifest.rows:
        for p in (row.source_path_1, row.source_path_2):
            if p not in seen:
                seen.append(p)
    return [ds._load(p) for p in seen]


def cmd_train(args) -> int:
    run = resolve_config(args)
    out = Path(args.out)
    train = _manifest_dataset(run, run.data.train_manifest)
    val = _manifest_dataset(run, run.data.val_manifest)
    if run.train.dm:
        train = PairDataset(_train_sources(train), len(train), run.train.seed, run.data.segment_seconds,
                            run.data.sample_rate, dynamic=True)
    out.mkdir(parents=True, exist_ok=True)
    run.write(out / "resolved_config.txt")
    ckpt = out / "last.ckpt"
    if args.resume and ckpt.exists():
        trainer = Trainer.resume(ckpt, train, val, out)
        # the checkpoint's config wins, except for how far to train
        trainer.run = trainer.run.updated({"train.max_epochs": run.train.max_epochs})
        trainer.cfg = trainer.run.train
        trainer.run.write(out / "resolved_config.txt")
        _trim_log(out / "metrics.log", trainer.epoch)
        trainer.log_line(kind="resume", epoch=trainer.epoch, step=trainer.global_step, discontinuity=0)
    else:
        if (out / "metrics.log").exists():
            (out / "metrics.log").unlink()
        trainer = Trainer(run, train, val, out)
    trainer.fit(None if args.epochs is None else max(0, args.epochs - trainer.epoch))
    trainer.save(ckpt)
    print(f"trained to epoch {trainer.epoch}; checkpoint {ckpt}")
    return 0


def _trim_log(path: Path, epoch: int) -> None:
    """Drop log lines from epochs that the checkpoint does not cover."""
    if not path.exists():
        return
    keep = []
    for line in path.read_text(encoding="utf-8").splitlines():
        fields = dict(p.split("=", 1) for p in line.split() if "=" in p)
        if fields.get("kind") == "resume" or int(fields.get("epoch", -1)) < epoch:
            keep.append(line)
    path.write_text("".join(x + "\n" for x in keep), encoding="utf-8")


# -- inference commands ------------------------------------------------------------------

def _load(checkpoint):
    torch.manual_seed(0)
    return load_model(checkpoint)


def cmd_separate(args) -> int:
    model = _load(args.checkpoint)
    w = read_wav(args.input, model.cfg.sample_rate)
    with torch.no_grad():
        est = model(torch.as_tensor(w.samples, dtype=torch.float32)[None]).estimates[0].double().numpy()
    if not np.all(np.isfinite(est)):
        fail(EXIT_NUMERIC, "numeric", "non-finite separated output")
    peak = float(np.abs(est).max())
    scale = 0.99 / peak if peak > 0.99 else 1.0
    out = Path(args.out)
    for j, e in enumerate(est):
        write_wav(out / f"{Path(args.input).stem}_spk{j + 1}.wav", Waveform(e * scale, w.sample_rate))
    print(f"wrote {len(est)} estimates to {out}" + (f" (scaled by {scale:.4f} to avoid clipping)" if scale != 1 else ""))
    return 0


def cmd_evaluate(args) -> int:
    model = None if args.oracle else _load(args.checkpoint)
    if model is None and not args.oracle:
        fail(EXIT_CONFIG, "config", "--checkpoint or --oracle required")
    rate = model.cfg.sample_rate if model else args.sample_rate
    ds = ManifestDataset(Manifest.read(args.manifest), rate, args.seed)
    examples = [ds[i] for i in range(len(ds))]
    ests = []
    for ex in examples:
        mix, refs = ex.arrays(np.float32)
        if model is None:
            ests.append(refs.astype(np.float64))
        else:
            with torch.no_grad():
                ests.append(model(torch.from_numpy(mix)[None]).estimates[0].double().numpy())

    def one(k):
        mix, refs = examples[k].arrays(np.float64)
        return separation_metrics(mix, refs, ests[k], with_sdr=not args.no_sdr)

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        metrics = list(pool.map(one, range(len(examples))))
    if any(not np.isfinite(m.si_snri) for m in metrics):
        fail(EXIT_NUMERIC, "numeric", "non-finite metric")
    si = float(np.mean([m.si_snri for m in metrics]))
    lines = [f"examples {len(metrics)}", f"si_snri_mean {si:.6f}"]
    if not args.no_sdr:
        lines.append(f"sdri_mean {float(np.mean([m.sdri for m in metrics])):.6f}")
        if any(m.regularized for m in metrics):
            lines.append("note ridge-regularized SDR normal equations on some examples")
    for k, m in enumerate(metrics):
        sd = "" if m.sdri is None else f" sdri={m.sdri:.6f}"
        lines.append(f"example {k} si_snri={m.si_snri:.6f}{sd} perm={','.join(map(str, m.permutation))}")
    _emit(lines, args.out, "evaluate", {"examples": len(metrics), "si_snri_mean": si,
                                        **({} if args.no_sdr else {"sdri_mean": float(np.mean([m.sdri for m in metrics]))})})
    return 0


def cmd_count(args) -> int:
    run = resolve_config(args)
    ref = args.reference if args.reference is not None else {"B": 14.2, "T": 3.5}.get(args.preset or "")
    rep = cost_report(run.model, args.samples, reference_millions=ref)
    _emit(rep.lines(), args.out, "count", {"params_total": rep.param_count, "macs_total": rep.macs_per_window,
                                           **{f"params.{k}": v for k, v in rep.params.items()},
                                           **{f"macs.{k}": v for k, v in rep.macs.items()}})
    return 0


def cmd_probe(args) -> int:
    model = _load(args.checkpoint)
    w = read_wav(args.input, model.cfg.sample_rate)
    rows = cosine_probe(model, torch.as_tensor(w.samples, dtype=torch.float32))
    out = Path(args.out) if args.out else None
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_probe_csv(rows, out)
    else:
        sys.stdout.write("stage,unit,tap,frame,cosine\n")
        for s, u, tap, t, v in rows:
            sys.stdout.write(f"{s},{u},{tap},{t},{v:.8f}\n")
    means = probe_means(rows)
    log.info("first-stage means %s", json.dumps(means))
    return 0


def _emit(lines, out, name, kv):
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if out:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{name}_report.txt").write_text(text, encoding="utf-8")
        (d / f"{name}_report.kv").write_text("".join(f"{k}={v}\n" for k, v in kv.items()), encoding="utf-8")


# -- entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sepreformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--preset", help="model preset: T, S, B, M, L, tiny-desk")
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    m = sub.add_parser("make-data", help="synthesize the band-noise corpus and manifests")
    m.add_argument("--out", required=True)
    m.add_argument("--n-sources", type=int, default=64)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--source-seconds", type=float, default=4.0)
    m.add_argument("--segment-seconds", type=float, default=4.0)
    m.add_argument("--sample-rate", type=int, default=8000)
    m.add_argument("--n-train", type=int, default=256)
    m.add_argument("--n-val", type=int, default=32)
    m.add_argument("--n-test", type=int, default=64)
    m.set_defaults(func=cmd_make_data)

    t = sub.add_parser("train", help="train a separator")
    with_config(t)
    t.add_argument("--out", required=True)
    t.add_argument("--data-root")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--decoder-mode", choices=["late_split", "early_split_multi_dec", "essd", "sepre"])
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", help="separate one WAV file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_separate)

    e = sub.add_parser("evaluate", help="SI-SNRi / SDRi over a manifest")
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="use the references as estimates")
    e.add_argument("--manifest", required=True)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--sample-rate", type=int, default=8000)
    e.add_argument("--no-sdr", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("count", help="parameter and MAC accounting")
    with_config(c)
    c.add_argument("--samples", type=int, default=16000)
    c.add_argument("--reference", type=float, help="reference parameter count in millions")
    c.add_argument("--out")
    c.set_defaults(func=cmd_count)

    pr = sub.add_parser("probe", help="decoder cosine-similarity table")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("--out", help="CSV path (stdout if omitted)")
    pr.set_defaults(func=cmd_probe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        code, kind, reason = exc.code, exc.kind, exc.reason
    except ConfigError as exc:
        code, kind, reason = EXIT_CONFIG, "config", str(exc)
    except (DataError, SampleRateError, ShapeError, FileNotFoundError) as exc:
        code, kind, reason = EXIT_DATA, "data", str(exc)
    except CheckpointError as exc:
        code, kind, reason = EXIT_DATA, "checkpoint", str(exc)
    except NumericFailure as exc:
        code, kind, reason = EXIT_NUMERIC, "numeric", str(exc)
    except ValueError as exc:
        code, kind, reason = EXIT_CONFIG, "config", str(exc)
    reason = " ".join(reason.split())
    sys.stderr.write(f"error code={code} kind={kind} reason={reason}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
