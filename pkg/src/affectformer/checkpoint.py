"""AFCK checkpoint files.

Layout, all little-endian::

    b"AFCK" | u32 version=1
    config   : u32 len | UTF-8 ``section.key = value`` text
    meta     : u32 epoch | i32 best_epoch | f64 best_score | u16 len | metric name
    params   : u32 count | { u16 len | name | u8 ndim | u32 dims... | f64 payload }
    optimizer: u64 t | f64 lr | f64 beta1 | f64 beta2 | f64 eps | u32 count
               | { u16 len | name | u8 ndim | u32 dims... | f64 m | f64 v }
    rng      : u32 count | { u16 len | name | u32 len | UTF-8 JSON state }
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .config import RunConfig
from .errors import AffectError, FormatError
from .optim import AdamState

AFCK_MAGIC = b"AFCK"
AFCK_VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int = 0
    best_epoch: int = -1
    best_score: float = float("nan")
    metric: str = ""
    rng_states: dict[str, dict] = field(default_factory=dict)

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}


class _Writer:
    def __init__(self):
        self.parts = []

    def pack(self, fmt, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def name(self, s: str):
        b = s.encode("utf-8")
        self.pack("H", len(b))
        self.parts.append(b)

    def blob(self, b: bytes):
        self.pack("I", len(b))
        self.parts.append(b)

    def shape(self, shape):
        self.pack("B", len(shape))
        if shape:
            self.pack(f"{len(shape)}I", *shape)

    def array(self, a: np.ndarray):
        self.parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def getvalue(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes, path=None):
        self.buf = buf
        self.off = 0
        self.path = path

    def fail(self, msg, offset=None):
        raise FormatError(msg, offset=self.off if offset is None else offset, path=self.path)

    def take(self, n, what):
        if self.off + n > len(self.buf):
            self.fail(f"truncated {what}")
        b = self.buf[self.off:self.off + n]
        self.off += n
        return b

    def unpack(self, fmt, what):
        s = struct.Struct("<" + fmt)
        vals = s.unpack(self.take(s.size, what))
        return vals if len(vals) > 1 else vals[0]

    def name(self, what):
        start = self.off
        n = self.unpack("H", what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            self.fail(f"{what} is not UTF-8", start)

    def blob(self, what):
        n = self.unpack("I", what)
        return self.take(n, what)

    def shape(self, what):
        nd = self.unpack("B", what)
        if nd == 0:
            return ()
        dims = self.unpack(f"{nd}I", what)
        return (dims,) if isinstance(dims, int) else tuple(dims)

    def array(self, shape, what):
        n = int(np.prod(shape)) if shape else 1
        raw = self.take(8 * n, what)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def encode_checkpoint(ck: Checkpoint) -> bytes:
    w = _Writer()
    w.parts.append(AFCK_MAGIC)
    w.pack("I", AFCK_VERSION)
    w.blob(ck.config.to_text().encode("utf-8"))
    w.pack("Iid", ck.epoch, ck.best_epoch, ck.best_score)
    w.name(ck.metric)
    w.pack("I", len(ck.params))
    for name, a in ck.params.items():
        w.name(name)
        w.shape(a.shape)
        w.array(a)
    opt = ck.adam
    w.pack("Qdddd", opt.t, opt.lr, opt.beta1, opt.beta2, opt.eps)
    w.pack("I", len(opt.m))
    for name, m in opt.m.items():
        w.name(name)
        w.shape(m.shape)
        w.array(m)
        w.array(opt.v[name])
    w.pack("I", len(ck.rng_states))
    for name, state in ck.rng_states.items():
        w.name(name)
        w.blob(json.dumps(state, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    return w.getvalue()


def decode_checkpoint(buf: bytes, path=None) -> Checkpoint:
    r = _Reader(buf, path)
    if r.take(4, "magic") != AFCK_MAGIC:
        r.fail(f"bad magic {buf[:4]!r}, expected {AFCK_MAGIC!r}", 0)
    version = r.unpack("I", "version")
    if version != AFCK_VERSION:
        r.fail(f"unsupported version {version}", 4)
    cfg_off = r.off
    try:
        config = RunConfig.from_text(r.blob("config block").decode("utf-8"))
    except (UnicodeDecodeError, AffectError) as exc:
        if isinstance(exc, FormatError):
            raise
        r.fail(f"invalid config block: {exc}", cfg_off)
    epoch, best_epoch, best_score = r.unpack("Iid", "meta block")
    metric = r.name("metric name")
    params = {}
    for _ in range(r.unpack("I", "parameter count")):
        name = r.name("parameter name")
        params[name] = r.array(r.shape("parameter shape"), f"parameter {name!r}")
    t, lr, b1, b2, eps = r.unpack("Qdddd", "optimizer header")
    adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, t=t)
    for _ in range(r.unpack("I", "optimizer count")):
        name = r.name("moment name")
        shape = r.shape("moment shape")
        adam.m[name] = r.array(shape, f"first moment {name!r}")
        adam.v[name] = r.array(shape, f"second moment {name!r}")
    rng_states = {}
    for _ in range(r.unpack("I", "rng count")):
        name = r.name("rng name")
        start = r.off
        try:
            rng_states[name] = json.loads(r.blob(f"rng state {name!r}").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            r.fail(f"rng state {name!r} is not valid JSON", start)
    if r.off != len(buf):
        r.fail(f"{len(buf) - r.off} trailing bytes")
    return Checkpoint(config, params, adam, epoch, best_epoch, best_score, metric, rng_states)


def save_checkpoint(path, ck: Checkpoint):
    """Write atomically: a crash mid-write leaves any previous file intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ck))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), path=path)
