"""Epoch loop, evaluation with window de-duplication, best-on-validation fit.

A batch is processed window by window: each window gets its own tape, leaf
gradients accumulate across the windows, and the sum is divided by the
number of windows that produced a loss before one Adam step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autograd import Tape
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, with_overrides
from .data.augment import augment_window
from .data.dataset import Video, load_dataset, valid_frame_count
from .data.sampling import BalancedSampler
from .data.windows import Window, make_windows
from .errors import ConfigError, DimensionError, FormatError, SkipBatch
from .model import (
    NUM_AUS,
    NUM_EXPR_CLASSES,
    ModelConfig,
    init_params,
    model_forward,
    param_specs,
)
from .objectives import (
    MetricReport,
    au_pos_weights,
    bce_multilabel,
    ccc_loss,
    inverse_frequency_weights,
    weighted_cross_entropy,
)
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

TRACKED_METRIC = {"va": "ccc_mean", "expr": "expr_macro_f1", "au": "au_f1_mean", "multi": "multi_mean"}
BEST_NAME = "best.afck"
LAST_NAME = "last.afck"
LOG_NAME = "epochs.log"


@dataclass
class EpochStats:
    epoch: int
    losses: dict[str, float]
    windows: int
    skipped: int
    steps: int

    def to_flat(self, sep=" "):
        parts = [f"loss_{k}={v:.6f}" for k, v in self.losses.items()]
        parts += [f"windows={self.windows}", f"skipped={self.skipped}", f"steps={self.steps}"]
        return sep.join(parts)


def task_list(task: str) -> tuple[str, ...]:
    return ("va", "expr", "au") if task == "multi" else (task,)


def check_params(cfg: ModelConfig, params) -> None:
    expected = {name: shape for name, shape, *_ in param_specs(cfg)}
    if list(expected) != list(params):
        raise FormatError("parameter names do not match the model configuration")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise FormatError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")


class Trainer:
    """Mutable training state: parameters, Adam moments, sampling streams."""

    def __init__(self, cfg: RunConfig, train_videos: Sequence[Video], params=None, adam=None):
        self.cfg = cfg
        m, t = cfg.model, cfg.train
        self.tasks = task_list(t.task)
        self.params = params if params is not None else init_params(m)
        self.adam = adam if adam is not None else AdamState.for_params(
            self.params, lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps)
        self.windows: list[Window] = [
            w for v in train_videos for w in make_windows(v.features, v.labels, t.win_len, t.stride)
        ]
        if not self.windows:
            raise ConfigError("training split yields no windows")
        expr_frames = np.concatenate(
            [v.labels.expr[v.labels.valid("expr")] for v in train_videos])
        if t.class_weights == "inverse_freq" and expr_frames.size:
            self.class_weights = inverse_frequency_weights(expr_frames, NUM_EXPR_CLASSES)
        else:
            self.class_weights = np.ones(NUM_EXPR_CLASSES)
        if t.au_pos_weight == "balanced":
            bits = np.concatenate([v.labels.au for v in train_videos])
            mask = np.concatenate([v.labels.valid("au") for v in train_videos])
            self.pos_weights = au_pos_weights(bits, mask)
        else:
            self.pos_weights = np.ones(NUM_AUS)
        seed = m.seed
        self.sampler = BalancedSampler.from_windows(self.windows, [seed, 1]) if t.balanced else None
        self.shuffle_rng = np.random.default_rng([seed, 2])
        self.augment_rng = np.random.default_rng([seed, 3])
        self.epoch = 0

    # -- state for checkpoints ------------------------------------------------

    def rng_states(self) -> dict[str, dict]:
        states = {"shuffle": self.shuffle_rng.bit_generator.state,
                  "augment": self.augment_rng.bit_generator.state}
        if self.sampler is not None:
            states["sampler"] = self.sampler.rng.bit_generator.state
        return states

    def restore(self, ck: Checkpoint):
        check_params(self.cfg.model, ck.params)
        for name, arr in ck.params.items():
            self.params[name].data = arr.copy()
        self.adam = ck.adam
        self.shuffle_rng.bit_generator.state = ck.rng_states["shuffle"]
        self.augment_rng.bit_generator.state = ck.rng_states["augment"]
        if self.sampler is not None:
            self.sampler.rng.bit_generator.state = ck.rng_states["sampler"]
        self.epoch = ck.epoch

    def snapshot(self, epoch, best_epoch, best_score, metric) -> Checkpoint:
        return Checkpoint(
            self.cfg,
            {k: p.data.copy() for k, p in self.params.items()},
            AdamState(self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps, self.adam.t,
                      {k: v.copy() for k, v in self.adam.m.items()},
                      {k: v.copy() for k, v in self.adam.v.items()}),
            epoch, best_epoch, best_score, metric, self.rng_states(),
        )

    # -- losses and gradients -------------------------------------------------

    def window_loss(self, w: Window, dropout_key=(), mode="train"):
        """Total loss of one window and its per-task parts.

        Raises SkipBatch when no task has enough valid frames.
        """
        out = model_forward(w.features, self.cfg.model, self.params, mode, dropout_key)
        lab = w.labels
        terms = {}
        for task in self.tasks:
            try:
                if task == "va":
                    terms[task] = ccc_loss(out.va, lab.va, lab.valid("va"))
                elif task == "expr":
                    terms[task] = weighted_cross_entropy(
                        out.expr_logits, lab.expr, self.class_weights, lab.valid("expr"),
                        frame_ids=lab.frame_ids)
                else:
                    terms[task] = bce_multilabel(out.au_logits, lab.au, self.pos_weights,
                                                 lab.valid("au"))
            except SkipBatch:
                pass
        if not terms:
            raise SkipBatch(f"window {w.video_id}@{w.start} has no usable labels")
        total = None
        for v in terms.values():
            total = v if total is None else total + v
        return total, {k: v.item() for k, v in terms.items()}

    def batch_gradient(self, windows: Sequence[Window], step: int | None = None):
        """Mean gradient over the windows that produce a loss.

        Returns ``(grads, per_task_losses, used, skipped)``.
        """
        step = self.adam.t if step is None else step
        for p in self.params.values():
            p.zero_grad()
        sums: dict[str, list[float]] = {}
        used = skipped = 0
        for i, w in enumerate(windows):
            with Tape() as tape:
                try:
                    loss, parts = self.window_loss(w, dropout_key=(step, i))
                except SkipBatch:
                    skipped += 1
                    continue
                tape.backward(loss)
            used += 1
            for k, v in parts.items():
                sums.setdefault(k, []).append(v)
        grads = {}
        if used:
            for name, p in self.params.items():
                grads[name] = (p.grad / used) if p.grad is not None else np.zeros(p.shape)
        for p in self.params.values():
            p.zero_grad()
        return grads, sums, used, skipped

    def epoch_order(self) -> list[int]:
        n = len(self.windows)
        if self.sampler is not None:
            return self.sampler.draw(n)
        return [int(i) for i in self.shuffle_rng.permutation(n)]

    def train_epoch(self) -> EpochStats:
        bs = self.cfg.train.batch_size
        order = self.epoch_order()
        losses: dict[str, list[float]] = {}
        skipped = steps = 0
        for b in range(0, len(order), bs):
            batch = [augment_window(self.windows[i], self.cfg.augment, self.augment_rng)
                     for i in order[b:b + bs]]
            grads, parts, used, sk = self.batch_gradient(batch)
            skipped += sk
            if not used:
                continue
            adam_step(self.params, grads, self.adam)
            steps += 1
            for k, v in parts.items():
                losses.setdefault(k, []).extend(v)
        self.epoch += 1
        mean = {k: float(np.mean(losses[k])) for k in self.tasks if k in losses}
        return EpochStats(self.epoch, mean, len(order), skipped, steps)


def train_epoch(trainer: Trainer) -> EpochStats:
    return trainer.train_epoch()


# ---------------------------------------------------------------------------
# inference and evaluation


@dataclass
class FramePredictions:
    """Per-frame outputs assembled from (possibly overlapping) windows."""

    frame_ids: np.ndarray
    va: np.ndarray
    expr_logits: np.ndarray
    au_logits: np.ndarray
    covered: np.ndarray

    @property
    def expr(self):
        return self.expr_logits.argmax(axis=1)

    @property
    def au_bits(self):
        # sigmoid(z) >= 0.5  <=>  z >= 0
        return (self.au_logits >= 0).astype(np.int64)


def predict_frames(cfg: ModelConfig, params, features: np.ndarray, frame_ids, windows,
                   batch_size: int = 16) -> FramePredictions:
    """Run inference on each window; a frame keeps the output of the window
    whose centre is nearest (earliest window on ties)."""
    t = len(frame_ids)
    va = np.zeros((t, 2))
    expr = np.zeros((t, NUM_EXPR_CLASSES))
    au = np.zeros((t, NUM_AUS))
    best = np.full(t, np.inf)
    for b in range(0, len(windows), batch_size):
        for w in windows[b:b + batch_size]:
            out = model_forward(w.features, cfg, params, mode="infer")
            pos = np.arange(w.start, w.start + w.length)
            dist = np.abs(pos - w.center)
            take = dist < best[pos]
            rows = pos[take]
            best[rows] = dist[take]
            va[rows] = out.va.data[take]
            expr[rows] = out.expr_logits.data[take]
            au[rows] = out.au_logits.data[take]
    return FramePredictions(np.asarray(frame_ids), va, expr, au, np.isfinite(best))


def evaluate(cfg: RunConfig, params, videos: Sequence[Video], batch_size: int | None = None):
    """Inference over every video, then all metrics on the valid covered frames.

    Returns ``(MetricReport, {video_id: FramePredictions})``.
    """
    t = cfg.train
    batch_size = batch_size or t.eval_batch_size
    gathered = {k: ([], []) for k in ("va", "expr", "au")}
    preds = {}
    for v in videos:
        windows = make_windows(v.features, v.labels, t.win_len, t.stride)
        fp = predict_frames(cfg.model, params, v.features.features, v.features.frame_ids,
                            windows, batch_size)
        preds[v.video_id] = fp
        lab = v.labels
        for task, p, g in (("va", fp.va, lab.va), ("expr", fp.expr, lab.expr),
                           ("au", fp.au_bits, lab.au)):
            ok = lab.valid(task) & fp.covered
            gathered[task][0].append(p[ok])
            gathered[task][1].append(g[ok])
    tracks = {}
    for task, (ps, gs) in gathered.items():
        g = np.concatenate(gs) if gs else np.empty(0)
        tracks[task] = (np.concatenate(ps), g) if len(g) else None
    return MetricReport.compute(**tracks), preds


# ---------------------------------------------------------------------------
# fit


def _check_data(cfg: RunConfig, videos, split):
    for v in videos:
        if v.features.dim != cfg.model.d_v:
            raise DimensionError(
                f"{split} video {v.video_id}: feature dim {v.features.dim} "
                f"does not match model d_v={cfg.model.d_v}")


def _check_task_labels(cfg: RunConfig, videos, split):
    tasks = task_list(cfg.train.task)
    counts = {task: valid_frame_count(videos, task) for task in tasks}
    if not any(counts.values()) or (cfg.train.task != "multi" and not counts[tasks[0]]):
        raise ConfigError(
            f"task/label mismatch: task {cfg.train.task!r} but the {split} split has no "
            f"annotated frames for it")


@dataclass
class FitResult:
    best: Checkpoint
    history: list[tuple[EpochStats | None, MetricReport, float]] = field(default_factory=list)


def format_log_line(epoch: int, report: MetricReport, score: float, stats: EpochStats | None) -> str:
    parts = [f"epoch={epoch}", report.to_flat(" "), f"score={score:.6f}"]
    if stats is not None:
        parts.append(stats.to_flat(" "))
    return " ".join(parts)


def fit(cfg: RunConfig, train_manifest, val_manifest, out_dir, resume: bool = False,
        on_epoch: Callable[[str], None] | None = None) -> FitResult:
    """Train for ``cfg.train.epochs`` epochs keeping the best validation checkpoint.

    Writes ``best.afck`` whenever the tracked score strictly improves,
    ``last.afck`` after every epoch (the resume point) and ``epochs.log``.
    With ``resume`` the run continues from ``last.afck`` in ``out_dir``.
    """
    out_dir = Path(out_dir)
    train_videos = load_dataset(train_manifest)
    val_videos = load_dataset(val_manifest)
    _check_data(cfg, train_videos, "train")
    _check_data(cfg, val_videos, "val")
    _check_task_labels(cfg, train_videos, "train")
    out_dir.mkdir(parents=True, exist_ok=True)

    task = cfg.train.task
    metric = TRACKED_METRIC[task]
    trainer = Trainer(cfg, train_videos)
    best_path, last_path, log_path = out_dir / BEST_NAME, out_dir / LAST_NAME, out_dir / LOG_NAME
    best_score, best_epoch = -math.inf, -1
    log_lines: list[str] = []
    result = FitResult(best=None)

    if resume:
        ck = load_checkpoint(last_path)
        _check_resume_config(cfg, ck.config)
        trainer.restore(ck)
        best_score, best_epoch = ck.best_score, ck.best_epoch
        if log_path.exists():
            log_lines = log_path.read_text(encoding="utf-8").splitlines()[:ck.epoch]
        if best_path.exists():
            # re-stamp with the current config so the file matches a straight run
            best = load_checkpoint(best_path)
            best.config = cfg
            save_checkpoint(best_path, best)

    def emit(line):
        log_lines.append(line)
        log_path.write_text("\n".join(log_lines) + "\n", encoding="utf-8")
        if on_epoch is not None:
            on_epoch(line)

    if cfg.train.epochs == 0 and not resume:
        report, _ = evaluate(cfg, trainer.params, val_videos)
        score = report.score(task)
        emit(format_log_line(0, report, score, None))
        snap = trainer.snapshot(0, 0, score, metric)
        save_checkpoint(best_path, snap)
        save_checkpoint(last_path, snap)
        result.history.append((None, report, score))
        result.best = snap
        return result

    for epoch in range(trainer.epoch + 1, cfg.train.epochs + 1):
        stats = trainer.train_epoch()
        report, _ = evaluate(cfg, trainer.params, val_videos)
        score = report.score(task)
        emit(format_log_line(epoch, report, score, stats))
        result.history.append((stats, report, score))
        if score > best_score:
            best_score, best_epoch = score, epoch
            save_checkpoint(best_path, trainer.snapshot(epoch, best_epoch, best_score, metric))
        save_checkpoint(last_path, trainer.snapshot(epoch, best_epoch, best_score, metric))
        log.info("epoch %d %s=%.6f best=%.6f", epoch, metric, score, best_score)
    result.best = load_checkpoint(best_path)
    return result


def _check_resume_config(cfg: RunConfig, saved: RunConfig):
    if with_overrides(saved, train={"epochs": cfg.train.epochs}) != cfg:
        raise ConfigError("resume config differs from the checkpoint's (only train.epochs may change)")
