"""Command-line entry point.

Exit codes: 0 ok, 2 usage/config/format/data errors, 3 I/O errors,
4 numeric abort (non-finite gradient).  Reports go to stdout as ``key=value``
lines; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import AFCK_MAGIC, decode_checkpoint, load_checkpoint
from .config import build_config, read_config_file
from .data.dataset import load_dataset, load_features
from .data.formats import (
    AFSQ_MAGIC,
    EXPR_NAMES,
    LABEL_HEADER,
    LabelSet,
    decode_feature_file,
    parse_label_file,
    read_manifest,
    write_label_file,
)
from .data.synth import SynthSpec, synthesize_dataset
from .data.windows import make_windows
from .errors import AffectError
from .training import check_params, evaluate, fit, predict_frames

log = logging.getLogger("affectformer")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(AffectError):
    pass


def _out(line: str):
    sys.stdout.write(line + "\n")


def _err(msg: str):
    sys.stderr.write(msg + "\n")


def _default_seed() -> int | None:
    raw = os.environ.get("AFFECT_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"AFFECT_SEED must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_text = ""
    if args.spec:
        p = Path(args.spec)
        spec_text = p.read_text(encoding="utf-8") if p.is_file() else args.spec
    spec = SynthSpec.parse(spec_text)
    seed = args.seed if args.seed is not None else _default_seed()
    if seed is not None:
        spec = SynthSpec(**{**spec.__dict__, "seed": seed})
    manifests = synthesize_dataset(spec, args.out)
    for split, m in manifests.items():
        _out(f"manifest_{split}={m.path}")
    for split, m in manifests.items():
        videos = load_dataset(m)
        frames = sum(v.features.T for v in videos)
        hist = np.zeros(len(EXPR_NAMES), dtype=np.int64)
        for v in videos:
            e = v.labels.expr[v.labels.valid("expr")]
            hist += np.bincount(e, minlength=len(EXPR_NAMES))
        _out(f"{split}.videos={len(videos)}")
        _out(f"{split}.frames={frames}")
        _out(f"{split}.d_v={spec.d_v}")
        for name, n in zip(EXPR_NAMES, hist):
            _out(f"{split}.class.{name}={n}")
    return EXIT_OK


def _require_file(path, what):
    if path is None or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def cmd_train(args) -> int:
    _require_file(args.train_manifest, "train manifest")
    _require_file(args.val_manifest, "validation manifest")
    values = read_config_file(args.config) if args.config else {}
    env_seed = _default_seed()
    if "model.seed" not in values and env_seed is not None:
        values["model.seed"] = str(env_seed)
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.task is not None:
        values["train.task"] = args.task
    if args.epochs is not None:
        values["train.epochs"] = str(args.epochs)
    if args.seed is not None:
        values["model.seed"] = str(args.seed)
    manifest = read_manifest(args.train_manifest)
    if not manifest.records:
        raise UsageError(f"train manifest lists no videos: {args.train_manifest}")
    cfg = build_config(values, d_v=sum(manifest.stream_dims))
    text = cfg.to_text()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(text, encoding="utf-8")
    for line in text.splitlines():
        _err(f"config {line}")
    result = fit(cfg, manifest, args.val_manifest, out, resume=args.resume, on_epoch=_out)
    best = result.best
    _out(f"best_epoch={best.best_epoch}")
    _out(f"best_{best.metric}={best.best_score:.6f}")
    _out(f"checkpoint={out / 'best.afck'}")
    return EXIT_OK


def _load_model(path):
    ck = load_checkpoint(path)
    params = ck.tensors()
    check_params(ck.config.model, params)
    return ck, params


def cmd_eval(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.manifest, "manifest")
    ck, params = _load_model(args.checkpoint)
    videos = load_dataset(args.manifest)
    for v in videos:
        if v.features.dim != ck.config.model.d_v:
            raise UsageError(
                f"feature dim {v.features.dim} of {v.video_id} does not match checkpoint "
                f"d_v={ck.config.model.d_v}")
    report, _ = evaluate(ck.config, params, videos)
    _out(report.to_flat())
    _out(f"score={report.score(ck.config.train.task):.6f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    paths = [p for p in args.features.split(",") if p]
    if not paths:
        raise UsageError("--features needs at least one path")
    for p in paths:
        _require_file(p, "feature file")
    ck, params = _load_model(args.checkpoint)
    seq = load_features(paths)
    if seq.dim != ck.config.model.d_v:
        raise UsageError(f"features have dim {seq.dim} but the checkpoint expects "
                         f"d_v={ck.config.model.d_v}")
    t = ck.config.train
    windows = make_windows(seq, None, t.win_len, t.stride)
    fp = predict_frames(ck.config.model, params, seq.features, seq.frame_ids, windows,
                        t.eval_batch_size)
    labels = LabelSet(seq.frame_ids, fp.va, fp.expr, fp.au_bits, np.ones(seq.T, bool), seq.video_id)
    write_label_file(args.out, labels)
    _out(f"video_id={seq.video_id}")
    _out(f"frames={seq.T}")
    _out(f"out={args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.file)
    if not path.is_file():
        raise OSError(f"file not found: {path}")
    buf = path.read_bytes()
    if buf[:4] == AFSQ_MAGIC:
        seq = decode_feature_file(buf, path=path)
        f = seq.features
        for k, v in (("format", "AFSQ"), ("version", 1), ("video_id", seq.video_id),
                     ("T", seq.T), ("d", seq.dim),
                     ("first_frame", int(seq.frame_ids[0])), ("last_frame", int(seq.frame_ids[-1])),
                     ("min", f"{f.min():.6f}"), ("max", f"{f.max():.6f}"), ("mean", f"{f.mean():.6f}")):
            _out(f"{k}={v}")
        return EXIT_OK
    if buf[:4] == AFCK_MAGIC:
        ck = decode_checkpoint(buf, path=path)
        _out("format=AFCK")
        _out("version=1")
        _out(f"epoch={ck.epoch}")
        _out(f"best_epoch={ck.best_epoch}")
        _out(f"best_score={ck.best_score:.6f}")
        _out(f"metric={ck.metric}")
        _out(f"adam_step={ck.adam.t}")
        _out(f"num_params={sum(a.size for a in ck.params.values())}")
        for name, a in ck.params.items():
            _out(f"param.{name}={'x'.join(map(str, a.shape))}")
        return EXIT_OK
    if buf.startswith(LABEL_HEADER.encode()):
        labels = parse_label_file(buf.decode("utf-8"), path=path)
        _out("format=labels")
        _out("version=1")
        _out(f"frames={labels.T}")
        for task in ("va", "expr", "au"):
            _out(f"valid_{task}={int(labels.valid(task).sum())}")
        e = labels.expr[labels.valid("expr")]
        hist = np.bincount(e, minlength=len(EXPR_NAMES))
        for name, n in zip(EXPR_NAMES, hist):
            _out(f"class.{name}={n}")
        va = labels.va[labels.valid("va")]
        if len(va):
            _out(f"valence_mean={va[:, 0].mean():.6f}")
            _out(f"arousal_mean={va[:, 1].mean():.6f}")
        return EXIT_OK
    raise UsageError(f"unknown file format: {path}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="affectformer", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset and manifests")
    p.add_argument("--spec", help="key=value[,key=value...] or a file of such lines")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a model, keeping the best validation checkpoint")
    p.add_argument("--config")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--task", choices=("va", "expr", "au", "multi"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.afck")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write per-frame predictions as a label file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="A[,B] feature files, merged in order")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", help="describe an AFSQ, AFCK or label file")
    p.add_argument("--file", required=True)
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except AffectError as exc:
        _err(f"error: {exc}")
        return exc.exit_code
    except OSError as exc:
        _err(f"I/O error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
