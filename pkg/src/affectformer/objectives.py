"""Training losses (on-tape) and challenge metrics (plain numpy)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DataError, EvaluationError, SkipBatch
from .model import NUM_AUS, NUM_EXPR_CLASSES

# keeps the on-tape CCC finite when prediction and target are both constant
_CCC_DENOM_FLOOR = 1e-12


def ccc(pred, gold) -> float:
    """Concordance correlation coefficient with population moments."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gold, dtype=np.float64).ravel()
    if p.size == 0 or g.size == 0:
        raise EvaluationError("ccc of an empty sequence")
    if p.size != g.size:
        raise EvaluationError(f"ccc length mismatch: {p.size} vs {g.size}")
    mp, mg = p.mean(), g.mean()
    # a constant sequence has exactly zero covariance; rounding in the mean would say otherwise
    cov = 0.0 if np.ptp(p) == 0 or np.ptp(g) == 0 else np.mean((p - mp) * (g - mg))
    denom = np.var(p) + np.var(g) + (mp - mg) ** 2
    if denom == 0.0:
        return 1.0  # both constant and equal
    return float(2.0 * cov / denom)


def _valid_index(mask, n):
    if mask is None:
        return np.arange(n)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise DataError(f"mask has shape {mask.shape}, expected ({n},)")
    return np.flatnonzero(mask)


def _rows(x: Tensor, idx):
    return x if idx.size == x.shape[0] else ag.index_rows(x, idx)


def ccc_loss(va_pred: Tensor, va_gold, mask=None) -> Tensor:
    """1 - mean(CCC_valence, CCC_arousal) over the valid frames."""
    gold = np.asarray(va_gold, dtype=np.float64)
    idx = _valid_index(mask, va_pred.shape[0])
    if idx.size < 2:
        raise SkipBatch(f"ccc_loss needs at least 2 valid frames, got {idx.size}")
    p = _rows(va_pred, idx)
    g = gold[idx]
    mp = ag.mean_axis(p, 0)
    mg = g.mean(axis=0)
    gc = g - mg
    pc = p - mp
    cov = ag.mean_axis(pc * gc, 0)
    var_p = ag.mean_axis(pc * pc, 0)
    diff = mp - mg
    denom = var_p + (gc * gc).mean(axis=0) + diff * diff + _CCC_DENOM_FLOOR
    return 1.0 - ag.mean_all(ag.scale(cov / denom, 2.0))


def inverse_frequency_weights(labels, num_classes=NUM_EXPR_CLASSES) -> np.ndarray:
    """Inverse class frequency, normalised to mean 1 over the classes present.

    Classes that never occur get weight 1; they contribute no loss terms.
    """
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes)[:num_classes].astype(np.float64)
    w = np.ones(num_classes)
    present = counts > 0
    if present.any():
        raw = 1.0 / counts[present]
        w[present] = raw / raw.mean()
    return w


def weighted_cross_entropy(logits: Tensor, labels, class_weights=None, mask=None,
                           frame_ids=None) -> Tensor:
    """Mean over valid frames of ``w[y] * -log softmax(logits)[y]``."""
    t, k = logits.shape
    labels = np.asarray(labels)
    idx = _valid_index(mask, t)
    if idx.size == 0:
        raise SkipBatch("no valid expression frames")
    y = labels[idx]
    bad = (y < 0) | (y >= k) | (y != np.round(y))
    if bad.any():
        j = idx[np.argmax(bad)]
        fid = frame_ids[j] if frame_ids is not None else j
        raise DataError(f"expression label {labels[j]} out of range 0..{k - 1} at frame {fid}")
    y = y.astype(np.int64)
    w = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if w.shape != (k,) or np.any(w <= 0):
        raise DataError("class weights must be positive, one per class")
    coef = np.zeros((idx.size, k))
    coef[np.arange(idx.size), y] = w[y] / idx.size
    return -ag.sum_all(ag.log_softmax_lastdim(_rows(logits, idx)) * coef)


def au_pos_weights(bits, mask=None, clip=(0.1, 10.0)) -> np.ndarray:
    """Per-unit negative/positive ratio for the BCE positive term."""
    bits = np.asarray(bits, dtype=np.float64)
    if mask is not None:
        bits = bits[np.asarray(mask, dtype=bool)]
    pos = bits.sum(axis=0)
    neg = bits.shape[0] - pos
    ratio = np.where(pos > 0, neg / np.maximum(pos, 1.0), 1.0)
    return np.clip(ratio, *clip)


def bce_multilabel(logits: Tensor, labels, pos_weights=None, mask=None) -> Tensor:
    """Mean over valid cells of ``pw*y*softplus(-z) + (1-y)*softplus(z)``."""
    t, u = logits.shape
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (t, u):
        raise DataError(f"AU labels have shape {y.shape}, expected {(t, u)}")
    idx = _valid_index(mask, t)
    if idx.size == 0:
        raise SkipBatch("no valid AU frames")
    y = y[idx]
    if not np.all((y == 0) | (y == 1)):
        raise DataError("AU labels must be 0 or 1")
    pw = np.ones(u) if pos_weights is None else np.asarray(pos_weights, dtype=np.float64)
    if pw.shape != (u,) or np.any(pw <= 0):
        raise DataError("AU positive weights must be positive, one per unit")
    n = y.size
    z = _rows(logits, idx)
    return ag.sum_all(ag.softplus(-z) * (pw * y / n) + ag.softplus(z) * ((1.0 - y) / n))


def _f1_from_counts(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0).astype(np.float64)


def per_class_f1(pred, gold, num_classes=NUM_EXPR_CLASSES) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gold = np.asarray(gold, dtype=np.int64).ravel()
    if pred.size == 0:
        raise EvaluationError("F1 of an empty prediction set")
    if pred.size != gold.size:
        raise EvaluationError(f"F1 length mismatch: {pred.size} vs {gold.size}")
    for arr in (pred, gold):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise EvaluationError(f"labels outside 0..{num_classes - 1}")
    tp = np.bincount(gold[pred == gold], minlength=num_classes)
    pred_n = np.bincount(pred, minlength=num_classes)
    gold_n = np.bincount(gold, minlength=num_classes)
    return _f1_from_counts(tp, pred_n - tp, gold_n - tp)


def macro_f1(pred, gold, num_classes=NUM_EXPR_CLASSES) -> float:
    """Unweighted mean of per-class F1; classes absent everywhere score 0."""
    return math.fsum(per_class_f1(pred, gold, num_classes)) / num_classes


def au_f1(pred_bits, gold_bits):
    """Per-unit binary F1 (0/0 -> 0) and their mean."""
    p = np.asarray(pred_bits).astype(bool)
    g = np.asarray(gold_bits).astype(bool)
    if p.shape != g.shape or p.ndim != 2:
        raise EvaluationError(f"AU bit matrices differ in shape: {p.shape} vs {g.shape}")
    if p.shape[0] == 0:
        raise EvaluationError("AU F1 of an empty prediction set")
    tp = (p & g).sum(axis=0)
    fp = (p & ~g).sum(axis=0)
    fn = (~p & g).sum(axis=0)
    per_unit = _f1_from_counts(tp, fp, fn)
    return per_unit, math.fsum(per_unit) / per_unit.size


@dataclass
class MetricReport:
    ccc_valence: float | None = None
    ccc_arousal: float | None = None
    ccc_mean: float | None = None
    expr_macro_f1: float | None = None
    au_f1_per_unit: list[float] | None = None
    au_f1_mean: float | None = None
    counts: dict[str, int] = field(default_factory=lambda: {"va": 0, "expr": 0, "au": 0})
    omitted: tuple[str, ...] = ()

    @classmethod
    def compute(cls, va=None, expr=None, au=None):
        """Each argument is ``(pred, gold)`` for its track, or None when unannotated."""
        rep = cls()
        omitted = []
        if va is not None and len(va[1]):
            p, g = np.asarray(va[0]), np.asarray(va[1])
            rep.ccc_valence = ccc(p[:, 0], g[:, 0])
            rep.ccc_arousal = ccc(p[:, 1], g[:, 1])
            rep.ccc_mean = (rep.ccc_valence + rep.ccc_arousal) / 2
            rep.counts["va"] = len(g)
        else:
            omitted.append("va")
        if expr is not None and len(expr[1]):
            rep.expr_macro_f1 = macro_f1(expr[0], expr[1])
            rep.counts["expr"] = len(expr[1])
        else:
            omitted.append("expr")
        if au is not None and len(au[1]):
            per_unit, mean = au_f1(au[0], au[1])
            rep.au_f1_per_unit = [float(v) for v in per_unit]
            rep.au_f1_mean = mean
            rep.counts["au"] = len(au[1])
        else:
            omitted.append("au")
        rep.omitted = tuple(omitted)
        return rep

    def score(self, task: str) -> float:
        """Scalar tracked for best-checkpoint selection."""
        if task == "va":
            return self._need(self.ccc_mean, "va")
        if task == "expr":
            return self._need(self.expr_macro_f1, "expr")
        if task == "au":
            return self._need(self.au_f1_mean, "au")
        if task == "multi":
            vals = [v for v in (self.ccc_mean, self.expr_macro_f1, self.au_f1_mean) if v is not None]
            if not vals:
                raise EvaluationError("no annotated track to score")
            return sum(vals) / len(vals)
        raise ValueError(f"unknown task {task!r}")

    @staticmethod
    def _need(value, track):
        if value is None:
            raise EvaluationError(f"track {track!r} has no annotated frames")
        return value

    def items(self):
        out = []
        if self.ccc_mean is not None:
            out += [("ccc_valence", self.ccc_valence), ("ccc_arousal", self.ccc_arousal),
                    ("ccc_mean", self.ccc_mean)]
        if self.expr_macro_f1 is not None:
            out.append(("expr_macro_f1", self.expr_macro_f1))
        if self.au_f1_mean is not None:
            out += [(f"au_f1_{i:02d}", v) for i, v in enumerate(self.au_f1_per_unit)]
            out.append(("au_f1_mean", self.au_f1_mean))
        out += [(f"count_{k}", self.counts[k]) for k in ("va", "expr", "au")]
        if self.omitted:
            out.append(("omitted", ",".join(self.omitted)))
        return out

    def to_flat(self, sep="\n") -> str:
        """``name=value`` pairs, floats at 6 decimals."""
        parts = []
        for k, v in self.items():
            parts.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
        return sep.join(parts)

    @classmethod
    def from_flat(cls, text: str):
        kv = {}
        for line in text.replace(" ", "\n").splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        rep = cls()
        if "ccc_mean" in kv:
            rep.ccc_valence = float(kv["ccc_valence"])
            rep.ccc_arousal = float(kv["ccc_arousal"])
            rep.ccc_mean = float(kv["ccc_mean"])
        if "expr_macro_f1" in kv:
            rep.expr_macro_f1 = float(kv["expr_macro_f1"])
        if "au_f1_mean" in kv:
            rep.au_f1_per_unit = [float(kv[f"au_f1_{i:02d}"]) for i in range(NUM_AUS)]
            rep.au_f1_mean = float(kv["au_f1_mean"])
        for k in ("va", "expr", "au"):
            rep.counts[k] = int(kv.get(f"count_{k}", 0))
        if kv.get("omitted"):
            rep.omitted = tuple(kv["omitted"].split(","))
        return rep
