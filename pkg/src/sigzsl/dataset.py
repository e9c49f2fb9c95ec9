"""SIGDS corpus files, the SNR sieve and the known/unknown split.

SIGDS layout (little-endian)::

    "SIG1" | u16 version=1 | u16 num_classes | u32 count | u16 channels | u16 frame_len
    num_classes x (u16 byte length, utf-8 class name)
    count x (u16 class index, i16 snr dB, channels*frame_len float32, I row then Q row)
"""
from __future__ import annotations

import hashlib
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nn import child_rng

MAGIC = b"SIG1"
VERSION = 1
_HEAD = struct.Struct("<4sHHIHH")


def record_dtype(channels: int = 2, frame_len: int = 128) -> np.dtype:
    return np.dtype([("cls", "<u2"), ("snr", "<i2"), ("iq", "<f4", (channels, frame_len))])


@dataclass
class Corpus:
    frames: np.ndarray  # (n, channels, frame_len) float32
    labels: np.ndarray  # (n,) class index into class_names
    snrs: np.ndarray  # (n,) dB
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.snrs = np.asarray(self.snrs, dtype=np.int64)
        self.class_names = list(self.class_names)
        n = len(self.frames)
        if self.frames.ndim != 3 or self.labels.shape != (n,) or self.snrs.shape != (n,):
            raise ValueError("frames must be (n, channels, len) with one label and one snr per frame")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label outside the class-name table")

    def __len__(self) -> int:
        return len(self.frames)

    def subset(self, idx) -> "Corpus":
        return Corpus(self.frames[idx], self.labels[idx], self.snrs[idx], self.class_names)

    def class_index(self, name: str) -> int:
        try:
            return self.class_names.index(name)
        except ValueError:
            raise KeyError(f"unknown class name {name!r}; corpus has {self.class_names}") from None

    def digest(self) -> str:
        return hashlib.sha256(to_bytes(self)).hexdigest()


def to_bytes(corpus: Corpus) -> bytes:
    n, channels, frame_len = corpus.frames.shape if len(corpus) else (0, 2, 128)
    names = [s.encode("utf-8") for s in corpus.class_names]
    parts = [_HEAD.pack(MAGIC, VERSION, len(names), n, channels, frame_len)]
    for raw in names:
        parts.append(struct.pack("<H", len(raw)) + raw)
    if n and (corpus.snrs.min() < -(2**15) or corpus.snrs.max() >= 2**15):
        raise ValueError("SNR values must fit in a signed 16-bit integer")
    if len(names) >= 2**16:
        raise ValueError("too many classes for a u16 class index")
    rec = np.empty(n, dtype=record_dtype(channels, frame_len))
    rec["cls"] = corpus.labels
    rec["snr"] = corpus.snrs
    rec["iq"] = corpus.frames
    parts.append(rec.tobytes())
    return b"".join(parts)


def from_bytes(data: bytes, source: str = "<bytes>") -> Corpus:
    if len(data) < _HEAD.size:
        raise FormatError(f"{source}: truncated header")
    magic, version, n_classes, count, channels, frame_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{source}: not a SIGDS file (bad magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported SIGDS version {version}")
    pos = _HEAD.size
    names = []
    for _ in range(n_classes):
        if pos + 2 > len(data):
            raise FormatError(f"{source}: truncated class table")
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + ln > len(data):
            raise FormatError(f"{source}: truncated class table")
        try:
            names.append(data[pos : pos + ln].decode("utf-8"))
        except UnicodeDecodeError as e:
            raise FormatError(f"{source}: corrupt class name") from e
        pos += ln
    dt = record_dtype(channels, frame_len)
    body = len(data) - pos
    if body != count * dt.itemsize:
        kind = "truncated" if body < count * dt.itemsize else "trailing bytes in"
        raise FormatError(f"{source}: {kind} record section ({body} bytes for {count} records)")
    rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
    if count and rec["cls"].max() >= n_classes:
        raise FormatError(f"{source}: class index outside the class table")
    return Corpus(rec["iq"].copy(), rec["cls"].astype(np.int64), rec["snr"].astype(np.int64), names)


def write_sigds(corpus: Corpus, path) -> None:
    Path(path).write_bytes(to_bytes(corpus))


def read_sigds(path) -> Corpus:
    return from_bytes(Path(path).read_bytes(), str(path))


def sieve_by_snr(corpus: Corpus, min_snr: float | None = None) -> Corpus:
    """Keep records with ``snr >= min_snr`` in their original order."""
    if min_snr is None or min_snr == -math.inf:
        return corpus
    out = corpus.subset(np.flatnonzero(corpus.snrs >= min_snr))
    if not len(out):
        warnings.warn(f"SNR sieve at {min_snr} dB removed every record", stacklevel=2)
    return out


@dataclass
class SplitSpec:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15
    unknown: tuple[int, ...] = ()
    known: tuple[int, ...] | None = None  # None: every class not in `unknown`
    seed: int = 0

    def __post_init__(self):
        self.unknown = tuple(int(c) for c in self.unknown)
        if self.known is not None:
            self.known = tuple(int(c) for c in self.known)
            if set(self.known) & set(self.unknown):
                raise ValueError("a class cannot be both known and unknown")
        if min(self.train, self.val, self.test) < 0 or abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split fractions must be non-negative and sum to 1")


@dataclass
class Split:
    train: Corpus
    val_known: Corpus
    test_known: Corpus
    test_unknown: Corpus
    known: tuple[int, ...]
    unknown: tuple[int, ...]


def _take(frac: float, m: int) -> int:
    return math.floor(frac * m + 1e-9)


def split_dataset(corpus: Corpus, spec: SplitSpec) -> Split:
    """Stratified per-class shuffle; val/test get floor(fraction * m) records,
    train the remainder. Unknown classes only yield a test share."""
    present = sorted(set(corpus.labels.tolist()))
    known = tuple(c for c in present if c not in spec.unknown) if spec.known is None else spec.known
    unassigned = [corpus.class_names[c] for c in present if c not in known and c not in spec.unknown]
    if unassigned:
        raise ValueError(f"classes present but assigned to neither K nor U: {unassigned}")
    parts = {"train": [], "val": [], "test": [], "unknown": []}
    for c in present:
        idx = np.flatnonzero(corpus.labels == c)
        perm = idx[child_rng(spec.seed, c).permutation(len(idx))]
        n_val, n_test = _take(spec.val, len(idx)), _take(spec.test, len(idx))
        if c in spec.unknown:
            parts["unknown"].append(perm[:n_test])
            continue
        parts["val"].append(perm[:n_val])
        parts["test"].append(perm[n_val : n_val + n_test])
        parts["train"].append(perm[n_val + n_test :])
    pick = {k: corpus.subset(np.sort(np.concatenate(v)) if v else np.zeros(0, np.int64)) for k, v in parts.items()}
    return Split(pick["train"], pick["val"], pick["test"], pick["unknown"], tuple(known), spec.unknown)


def relabel(labels: np.ndarray, known: tuple[int, ...]) -> np.ndarray:
    """Map corpus class ids onto training indices 0..|K|-1."""
    lut = np.full(max(known) + 1 if known else 1, -1, dtype=np.int64)
    lut[list(known)] = np.arange(len(known))
    labels = np.asarray(labels)
    if labels.size and (labels.max() >= len(lut) or np.any(lut[labels] < 0)):
        raise ValueError("labels outside the known class set")
    return lut[labels]
