"""Command-line interface: ``nlvc <subcommand> ...``.

Every checkpoint written by the CLI gets a JSON sidecar ``<checkpoint>.json``
holding the model config, so ``predict``/``ensemble`` can rebuild the model.

Real YouTube-8M TFRecord ingestion is not provided; a converter would only
need to emit the Y8MF dataset format described in ``nlvc.data``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckio
from .checkpoint import Checkpoint, CheckpointFormatError, SchemaMismatchError
from .data import Dataset, DatasetFormatError, SyntheticSpec, gen_synthetic, load_dataset, save_dataset
from .ensemble import EnsembleModel, dequantize_checkpoint, predict_dataset, quantize_checkpoint
from .metrics import evaluate, top_k
from .models import FAMILIES, ModelConfig, VideoModel, build_model
from .numerics import derive_seed, make_rng
from .training import NonFiniteGradientError, TrainConfig, average_checkpoints, load_into, train


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: {self.prog}: {message}\n")


def _emit(**kv) -> None:
    print(" ".join(f"{k}={v}" for k, v in kv.items()), flush=True)


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def _write_checkpoint(ck: Checkpoint, path: Path, cfg: ModelConfig) -> None:
    ckio.save_checkpoint(ck, path)
    _sidecar(path).write_text(json.dumps({"config": cfg.to_dict(), "step": ck.step}, indent=2))


def _read_config(path) -> ModelConfig:
    side = _sidecar(path)
    if not side.exists():
        raise CliError(f"missing model config sidecar {side}")
    return ModelConfig.from_dict(json.loads(side.read_text())["config"])


def load_model(path) -> VideoModel:
    cfg = _read_config(path)
    model = build_model(cfg, make_rng(0))
    return load_into(model, ckio.load_checkpoint(path))


def _select(ds: Dataset, split: str, holdout: float) -> Dataset:
    if split == "all":
        return ds
    tr, te = ds.split(holdout)
    return tr if split == "train" else te


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(a) -> None:
    spec = SyntheticSpec(videos=a.videos, classes=a.classes, frames_min=a.frames_min,
                         frames_max=a.frames_max, d_visual=a.dim_visual, d_audio=a.dim_audio,
                         clusters_per_class=a.clusters_per_class, noise=a.noise, seed=a.seed)
    ds = gen_synthetic(spec)
    save_dataset(ds, a.out, a.format)
    _emit(videos=len(ds), classes=ds.num_classes, d_visual=ds.d_visual, d_audio=ds.d_audio, out=a.out)


def _model_config(a, ds: Dataset) -> ModelConfig:
    return ModelConfig(family=a.model_family, num_classes=ds.num_classes, d_visual=ds.d_visual,
                       d_audio=ds.d_audio, k_visual=a.clusters, k_audio=a.audio_clusters,
                       hidden=a.hidden, experts=a.experts, video_gate=a.video_gate)


def cmd_train(a) -> None:
    ds = _select(load_dataset(a.data), a.split, a.holdout)
    cfg = _model_config(a, ds)
    model = build_model(cfg, make_rng(derive_seed(a.seed, 0x6D6F)))
    tcfg = TrainConfig(steps=a.steps, batch_size=a.batch_size, frames=a.frames, seed=a.seed,
                       checkpoint_every=a.checkpoint_every, lr=a.lr)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    _emit(family=cfg.family, params=model.params.num_elements(), videos=len(ds), steps=a.steps)
    res = train(model, ds.videos, tcfg)
    every = max(1, a.log_every)
    for i in range(every, len(res.losses) + 1, every):
        _emit(step=i, loss=f"{np.mean(res.losses[i - every:i]):.6f}")
    for ck in res.checkpoints:
        path = out / f"ckpt-{ck.step:07d}.nlvc"
        _write_checkpoint(ck, path, cfg)
        _emit(checkpoint=path, step=ck.step)


def cmd_avg(a) -> None:
    paths = sorted(a.checkpoints) if a.sort else list(a.checkpoints)
    if a.every > 1:
        paths = paths[::-1][::a.every][::-1]
    if a.last:
        paths = paths[-a.last:]
    if not paths:
        raise CliError("no checkpoints selected")
    cfg = _read_config(paths[0])
    cks = [ckio.load_checkpoint(p) for p in paths]
    avg = average_checkpoints(cks)
    _write_checkpoint(avg, Path(a.out), cfg)
    _emit(averaged=len(cks), out=a.out, step=avg.step)


def cmd_quantize(a) -> None:
    ck = ckio.load_checkpoint(a.checkpoint)
    cfg = _read_config(a.checkpoint)
    q = dequantize_checkpoint(ck) if a.dequantize else quantize_checkpoint(ck)
    _write_checkpoint(q, Path(a.out), cfg)
    _emit(in_bytes=ck.payload_bytes(), out_bytes=q.payload_bytes(), out=a.out)


def _predict(a, checkpoints, weights=None) -> None:
    ds = _select(load_dataset(a.data), a.split, a.holdout)
    models = [load_model(p) for p in checkpoints]
    for p, m in zip(checkpoints, models):
        if (m.config.d_visual, m.config.d_audio) != (ds.d_visual, ds.d_audio):
            raise CliError(f"{p}: model dims ({m.config.d_visual}, {m.config.d_audio}) do not match "
                           f"dataset dims ({ds.d_visual}, {ds.d_audio})")
    ens = EnsembleModel(models, weights or [])
    probs = predict_dataset(ens, ds.videos, runs=a.runs, frames=a.frames, seed=a.seed)
    with open(a.out, "w") as fh:
        for v, p in zip(ds.videos, probs):
            fh.write(json.dumps({"id": v.id, "labels": list(v.labels),
                                 "predictions": [[c, s] for c, s in top_k(p, a.top_k)]}) + "\n")
    _emit(videos=len(ds), models=len(models), runs=a.runs, out=a.out)


def cmd_predict(a) -> None:
    _predict(a, [a.checkpoint])


def cmd_ensemble(a) -> None:
    _predict(a, a.checkpoints, a.weights)


def read_predictions(path):
    preds, labels = [], []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                preds.append([(int(c), float(s)) for c, s in r["predictions"]])
                labels.append(tuple(r.get("labels", ())))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CliError(f"{path}:{n}: malformed prediction record ({exc})") from None
    return preds, labels


def cmd_eval(a) -> None:
    preds, labels = read_predictions(a.predictions)
    if not preds:
        raise CliError("no prediction records")
    res = evaluate(preds, labels, a.top_k)
    for line in res.report_lines():
        print(line)
    if a.report_json:
        Path(a.report_json).write_text(res.to_json())


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_data_args(p) -> None:
    p.add_argument("--data", required=True, help="dataset file (Y8MF binary or JSON lines)")
    p.add_argument("--split", choices=("all", "train", "test"), default="all")
    p.add_argument("--holdout", type=float, default=0.2, help="test fraction for --split")


def _add_predict_args(p) -> None:
    _add_data_args(p)
    p.add_argument("--runs", type=int, default=1, help="repeated subsampling runs R")
    p.add_argument("--frames", type=int, default=30, help="frames per subsample M")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="nlvc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--videos", type=int, default=2000)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--frames-min", type=int, default=20)
    p.add_argument("--frames-max", type=int, default=60)
    p.add_argument("--dim-visual", type=int, default=64)
    p.add_argument("--dim-audio", type=int, default=16)
    p.add_argument("--clusters-per-class", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("binary", "jsonl"), default="binary")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model, writing checkpoints")
    _add_data_args(p)
    p.add_argument("--model-family", default="LFNL-NetVLAD",
                   help=f"one of {', '.join(FAMILIES)} (or M1..M6)")
    p.add_argument("--clusters", type=int, default=None, help="visual (or fused) cluster count")
    p.add_argument("--audio-clusters", type=int, default=None)
    p.add_argument("--experts", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--video-gate", choices=("input", "output"), default="input")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--frames", type=int, default=30, help="frames per training subsample M")
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("avg-checkpoints", help="element-wise mean of checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--every", type=int, default=1, help="keep every n-th checkpoint, counting back from the last")
    p.add_argument("--last", type=int, default=0, help="keep only the last k selected checkpoints")
    p.add_argument("--no-sort", dest="sort", action="store_false", help="keep argument order")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_avg)

    p = sub.add_parser("quantize", help="convert a checkpoint to bfloat16")
    p.add_argument("checkpoint")
    p.add_argument("--dequantize", action="store_true", help="bf16 -> f32 instead")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("predict", help="score a dataset with one checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_predict_args(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="score a dataset with an averaged ensemble")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--weights", type=float, nargs="+", default=None)
    _add_predict_args(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("eval", help="GAP@k and Hit@1 of a predictions file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--report-json", default=None)
    p.set_defaults(func=cmd_eval)
    return ap


_EXPECTED = (CliError, ValueError, KeyError, OSError, CheckpointFormatError, DatasetFormatError,
             SchemaMismatchError, NonFiniteGradientError)


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except _EXPECTED as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
