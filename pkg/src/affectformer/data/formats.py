"""On-disk formats: AFSQ feature files, text label files, TSV manifests.

AFSQ layout (little-endian)::

    b"AFSQ" | u32 version=1 | u32 T | u32 d | u16 id_len | id (UTF-8)
    | T x u64 frame_id | T*d x f32 features (row-major)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import AlignmentError, DataError, FormatError
from ..model import NUM_AUS, NUM_EXPR_CLASSES

AFSQ_MAGIC = b"AFSQ"
AFSQ_VERSION = 1
_AFSQ_HEAD = struct.Struct("<4sIII")
_U16 = struct.Struct("<H")

LABEL_HEADER = "#affectlabels v1"
SENTINEL = -5
EXPR_NAMES = ("Neutral", "Anger", "Disgust", "Fear", "Happiness", "Sadness", "Surprise", "Other")
TASKS = ("va", "expr", "au")


@dataclass
class FeatureSequence:
    video_id: str
    frame_ids: np.ndarray  # int64, strictly increasing
    features: np.ndarray   # T x d float64 (values representable in float32)

    def __post_init__(self):
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError(f"features must be a T x d matrix, got shape {self.features.shape}")
        t = len(self.frame_ids)
        if t < 1 or self.features.shape[0] != t:
            raise DataError(
                f"{self.video_id}: {t} frame ids but {self.features.shape[0]} feature rows"
            )
        if t > 1 and np.any(np.diff(self.frame_ids) <= 0):
            raise DataError(f"{self.video_id}: frame ids are not strictly increasing")
        if np.any(self.frame_ids < 0):
            raise DataError(f"{self.video_id}: negative frame id")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"{self.video_id}: non-finite feature values")

    @property
    def T(self):
        return len(self.frame_ids)

    @property
    def dim(self):
        return self.features.shape[1]


def encode_feature_file(seq: FeatureSequence) -> bytes:
    vid = seq.video_id.encode("utf-8")
    if len(vid) > 0xFFFF:
        raise DataError("video id longer than 65535 bytes")
    return b"".join((
        _AFSQ_HEAD.pack(AFSQ_MAGIC, AFSQ_VERSION, seq.T, seq.dim),
        _U16.pack(len(vid)),
        vid,
        seq.frame_ids.astype("<u8").tobytes(),
        seq.features.astype("<f4").tobytes(),
    ))


def write_feature_file(path, seq: FeatureSequence):
    Path(path).write_bytes(encode_feature_file(seq))


def decode_feature_file(buf: bytes, path=None) -> FeatureSequence:
    def need(offset, n, what):
        if len(buf) < offset + n:
            raise FormatError(f"truncated {what}: need {n} bytes, {len(buf) - offset} left",
                              offset=offset, path=path)

    need(0, 4, "magic")
    if buf[:4] != AFSQ_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {AFSQ_MAGIC!r}", offset=0, path=path)
    need(0, _AFSQ_HEAD.size, "header")
    _, version, t, d = _AFSQ_HEAD.unpack_from(buf, 0)
    if version != AFSQ_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4, path=path)
    if t < 1 or d < 1:
        raise FormatError(f"empty shape T={t}, d={d}", offset=8, path=path)
    off = _AFSQ_HEAD.size
    need(off, 2, "video id length")
    (n,) = _U16.unpack_from(buf, off)
    off += 2
    need(off, n, "video id")
    try:
        video_id = buf[off:off + n].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"video id is not UTF-8: {exc}", offset=off, path=path) from None
    off += n
    need(off, 8 * t, "frame ids")
    frame_ids = np.frombuffer(buf, dtype="<u8", count=t, offset=off)
    if np.any(frame_ids > np.iinfo(np.int64).max):
        raise DataError("frame id does not fit in 63 bits")
    off += 8 * t
    need(off, 4 * t * d, "feature payload")
    feats = np.frombuffer(buf, dtype="<f4", count=t * d, offset=off).reshape(t, d)
    off += 4 * t * d
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", offset=off, path=path)
    if not np.all(np.isfinite(feats)):
        row = int(np.argmax(~np.isfinite(feats).all(axis=1)))
        raise DataError(f"non-finite feature value in {video_id!r} at frame {int(frame_ids[row])}")
    return FeatureSequence(video_id, frame_ids.astype(np.int64), feats.astype(np.float64))


def read_feature_file(path) -> FeatureSequence:
    return decode_feature_file(Path(path).read_bytes(), path=path)


def merge_streams(a: FeatureSequence, b: FeatureSequence) -> FeatureSequence:
    """Concatenate two aligned feature streams along the feature axis."""
    if a.video_id != b.video_id:
        raise AlignmentError(f"video ids differ: {a.video_id!r} vs {b.video_id!r}")
    if a.T != b.T or not np.array_equal(a.frame_ids, b.frame_ids):
        n = min(a.T, b.T)
        diff = np.flatnonzero(a.frame_ids[:n] != b.frame_ids[:n])
        i = int(diff[0]) if diff.size else n
        fa = int(a.frame_ids[i]) if i < a.T else None
        fb = int(b.frame_ids[i]) if i < b.T else None
        raise AlignmentError(
            f"{a.video_id}: streams misaligned at position {i} (frame {fa} vs {fb})"
        )
    return FeatureSequence(a.video_id, a.frame_ids.copy(), np.concatenate([a.features, b.features], axis=1))


# ---------------------------------------------------------------------------
# labels


@dataclass
class LabelTrack:
    task: str
    payload: np.ndarray  # va: T x 2 float, expr: T int, au: T x 12 int
    mask: np.ndarray     # T bool

    def __len__(self):
        return len(self.mask)


@dataclass
class LabelSet:
    """All per-frame labels of one video, as stored in one label file."""

    frame_ids: np.ndarray
    va: np.ndarray       # T x 2, SENTINEL where unannotated
    expr: np.ndarray     # T int, SENTINEL where unannotated
    au: np.ndarray       # T x 12 int, SENTINEL where unannotated
    mask: np.ndarray     # T bool, the file's mask column
    video_id: str = ""

    def __post_init__(self):
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)
        self.va = np.asarray(self.va, dtype=np.float64).reshape(-1, 2)
        self.expr = np.asarray(self.expr, dtype=np.int64)
        self.au = np.asarray(self.au, dtype=np.int64).reshape(-1, NUM_AUS)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def T(self):
        return len(self.frame_ids)

    def valid(self, task: str) -> np.ndarray:
        if task == "va":
            ok = np.all(self.va != SENTINEL, axis=1)
        elif task == "expr":
            ok = self.expr != SENTINEL
        elif task == "au":
            ok = np.all(self.au != SENTINEL, axis=1)
        else:
            raise ValueError(f"unknown task {task!r}")
        return ok & self.mask

    def any_valid(self) -> np.ndarray:
        return self.valid("va") | self.valid("expr") | self.valid("au")

    def track(self, task: str) -> LabelTrack:
        payload = {"va": self.va, "expr": self.expr, "au": self.au}[task]
        return LabelTrack(task, payload, self.valid(task))

    def slice(self, start: int, stop: int) -> "LabelSet":
        return LabelSet(self.frame_ids[start:stop], self.va[start:stop], self.expr[start:stop],
                        self.au[start:stop], self.mask[start:stop], self.video_id)

    def take(self, idx) -> "LabelSet":
        return LabelSet(self.frame_ids[idx], self.va[idx], self.expr[idx], self.au[idx],
                        self.mask[idx], self.video_id)

    @classmethod
    def unannotated(cls, frame_ids, video_id=""):
        t = len(frame_ids)
        return cls(frame_ids, np.full((t, 2), SENTINEL), np.full(t, SENTINEL),
                   np.full((t, NUM_AUS), SENTINEL), np.zeros(t, bool), video_id)


def _fmt_float(v: float) -> str:
    return str(SENTINEL) if v == SENTINEL else repr(float(v))


def format_label_file(labels: LabelSet) -> str:
    lines = [LABEL_HEADER]
    for i in range(labels.T):
        row = [str(int(labels.frame_ids[i])),
               _fmt_float(labels.va[i, 0]), _fmt_float(labels.va[i, 1]),
               str(int(labels.expr[i]))]
        row += [str(int(b)) for b in labels.au[i]]
        row.append("1" if labels.mask[i] else "0")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_label_file(path, labels: LabelSet):
    Path(path).write_bytes(format_label_file(labels).encode("utf-8"))


def parse_label_file(text: str, path=None, video_id="") -> LabelSet:
    lines = text.splitlines()
    if not lines or lines[0].strip() != LABEL_HEADER:
        raise FormatError(f"missing header line {LABEL_HEADER!r}", offset=0, path=path)
    n_cols = 4 + NUM_AUS + 1
    fids, va, expr, au, mask = [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split(",")
        if len(cols) != n_cols:
            raise FormatError(f"line {lineno}: expected {n_cols} fields, got {len(cols)}", path=path)
        try:
            fid = int(cols[0])
            v, a = float(cols[1]), float(cols[2])
            e = int(cols[3])
            bits = [int(c) for c in cols[4:4 + NUM_AUS]]
            m = int(cols[-1])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}", path=path) from None
        for val in (v, a):
            if val != SENTINEL and not (math.isfinite(val) and -1.0 <= val <= 1.0):
                raise DataError(f"frame {fid}: valence/arousal {val} outside [-1, 1]")
        if (v == SENTINEL) != (a == SENTINEL):
            raise DataError(f"frame {fid}: only one of valence/arousal is annotated")
        if e != SENTINEL and not 0 <= e < NUM_EXPR_CLASSES:
            raise DataError(f"frame {fid}: expression id {e} outside 0..{NUM_EXPR_CLASSES - 1}")
        if any(b not in (0, 1, SENTINEL) for b in bits):
            raise DataError(f"frame {fid}: AU bits must be 0, 1 or {SENTINEL}")
        if (SENTINEL in bits) and any(b != SENTINEL for b in bits):
            raise DataError(f"frame {fid}: partially annotated AU vector")
        if m not in (0, 1):
            raise DataError(f"frame {fid}: mask must be 0 or 1")
        fids.append(fid)
        va.append((v, a))
        expr.append(e)
        au.append(bits)
        mask.append(bool(m))
    if not fids:
        raise DataError("label file holds no frames")
    if len(fids) > 1 and np.any(np.diff(fids) <= 0):
        raise DataError("label frame ids are not strictly increasing")
    return LabelSet(fids, va, expr, au, mask, video_id)


def read_label_file(path, video_id="") -> LabelSet:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"label file is not UTF-8: {exc}", offset=exc.start, path=path) from None
    return parse_label_file(text, path=path, video_id=video_id)


def check_alignment(seq: FeatureSequence, labels: LabelSet):
    if seq.T != labels.T or not np.array_equal(seq.frame_ids, labels.frame_ids):
        n = min(seq.T, labels.T)
        diff = np.flatnonzero(seq.frame_ids[:n] != labels.frame_ids[:n])
        i = int(diff[0]) if diff.size else n
        raise AlignmentError(
            f"{seq.video_id}: features ({seq.T} frames) and labels ({labels.T} frames) "
            f"disagree at position {i}"
        )


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestRecord:
    video_id: str
    feature_paths: tuple[Path, ...]
    label_path: Path


@dataclass
class DatasetManifest:
    split: str
    records: list[ManifestRecord] = field(default_factory=list)
    stream_dims: tuple[int, ...] = ()
    path: Path | None = None


def format_manifest(manifest: DatasetManifest, base: Path | None = None) -> str:
    def rel(p):
        return Path(p).relative_to(base).as_posix() if base is not None else Path(p).as_posix()

    lines = [f"#split {manifest.split}"]
    for r in manifest.records:
        lines.append("\t".join([r.video_id, *(rel(p) for p in r.feature_paths), rel(r.label_path)]))
    return "\n".join(lines) + "\n"


def write_manifest(path, manifest: DatasetManifest):
    path = Path(path)
    path.write_text(format_manifest(manifest, base=path.parent), encoding="utf-8")


def read_manifest(path, validate: bool = True) -> DatasetManifest:
    """Parse a manifest; relative paths resolve against its directory.

    With ``validate`` every referenced file is opened and format-checked.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    split = path.stem
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("#split "):
                split = line[len("#split "):].strip()
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise FormatError(f"manifest line {lineno}: expected 3 or 4 tab-separated fields",
                              path=path)
        paths = [Path(c) if Path(c).is_absolute() else path.parent / c for c in cols[1:]]
        records.append(ManifestRecord(cols[0], tuple(paths[:-1]), paths[-1]))
    manifest = DatasetManifest(split, records, path=path)
    if validate:
        dims = None
        for r in records:
            seqs = [read_feature_file(p) for p in r.feature_paths]
            rdims = tuple(s.dim for s in seqs)
            if dims is None:
                dims = rdims
            elif rdims != dims:
                raise DataError(f"{r.video_id}: stream dims {rdims} differ from {dims}")
            read_label_file(r.label_path)
        manifest.stream_dims = dims or ()
    return manifest
