"""Frame datasets, the ``.pfd`` container, batching and a synthetic task.

``.pfd`` layout (little-endian)::

    magic      4 bytes  b"PZN1"
    version    u32      1
    records    u32
    frame_len  u32
    classes    u32
    then per record: label u32, frame_len x float32 samples
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PFD_MAGIC = b"PZN1"
PFD_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class PfdError(ValueError):
    """Malformed ``.pfd`` content; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class FrameDataset:
    frame_len: int
    class_count: int
    labels: np.ndarray
    frames: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.frames = np.asarray(self.frames, dtype=np.float32).reshape(-1, self.frame_len)
        if len(self.labels) != len(self.frames):
            raise ValueError("labels and frames differ in count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")
        if self.frames.size and np.abs(self.frames).max() > 1.0:
            raise ValueError("sample magnitude exceeds 1")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return FrameDataset(self.frame_len, self.class_count, self.labels[idx], self.frames[idx])

    def __eq__(self, other):
        return (isinstance(other, FrameDataset) and self.frame_len == other.frame_len
                and self.class_count == other.class_count
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.frames.view(np.uint32), other.frames.view(np.uint32)))


def write_pfd(ds: FrameDataset, path):
    rec = np.empty(len(ds), dtype=[("label", "<u4"), ("x", "<f4", (ds.frame_len,))])
    rec["label"] = ds.labels
    rec["x"] = ds.frames
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(PFD_MAGIC, PFD_VERSION, len(ds), ds.frame_len, ds.class_count))
        fh.write(rec.tobytes())
    tmp.replace(path)


def read_pfd(path) -> FrameDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != PFD_MAGIC:
        raise PfdError("bad magic, not a .pfd file", 0)
    if len(raw) < _HEADER.size:
        raise PfdError("truncated header", len(raw))
    _, version, count, frame_len, classes = _HEADER.unpack_from(raw)
    if version != PFD_VERSION:
        raise PfdError(f"unsupported version {version}", 4)
    if frame_len == 0:
        raise PfdError("frame length is zero", 12)
    rec_size = 4 + 4 * frame_len
    expected = _HEADER.size + count * rec_size
    if len(raw) < expected:
        good = (len(raw) - _HEADER.size) // rec_size
        raise PfdError(f"truncated: {count} records declared, {good} complete", _HEADER.size + good * rec_size)
    if len(raw) > expected:
        raise PfdError("trailing bytes after last record", expected)
    dt = np.dtype([("label", "<u4"), ("x", "<f4", (frame_len,))])
    rec = np.frombuffer(raw, dtype=dt, count=count, offset=_HEADER.size)
    bad = np.flatnonzero(rec["label"] >= classes)
    if bad.size:
        raise PfdError(f"label {rec['label'][bad[0]]} out of range for {classes} classes",
                       _HEADER.size + int(bad[0]) * rec_size)
    return FrameDataset(frame_len, classes, rec["label"].astype(np.int64), rec["x"].copy())


def batches(ds: FrameDataset, batch_size: int, epoch_seed: int):
    """Yield ``(labels, frames)`` over a seeded permutation; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.random.default_rng(epoch_seed).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.labels[idx], ds.frames[idx]


def pcm_frames(path, frame_len, hop=None, dtype="<i2"):
    """Cut a headerless PCM file into frames scaled to [-1, 1]; a trailing partial frame is dropped."""
    raw = Path(path).read_bytes()
    dt = np.dtype(dtype)
    if dt.kind != "i" or len(raw) % dt.itemsize:
        raise PfdError(f"{path}: size is not a whole number of {dt} samples", len(raw) - len(raw) % dt.itemsize)
    x = np.frombuffer(raw, dtype=dt).astype(np.float64) / float(-np.iinfo(dt).min)
    hop = hop or frame_len
    if len(x) < frame_len:
        return np.zeros((0, frame_len), dtype=np.float32)
    starts = np.arange(0, len(x) - frame_len + 1, hop)
    return x[starts[:, None] + np.arange(frame_len)].astype(np.float32)


# -- synthetic band-structured task -------------------------------------------------

@dataclass
class SynthSpec:
    class_count: int = 8
    tones_per_class: int = 1
    carriers: list = field(default_factory=list)  # per class, list of Hz
    mod_rates: list = field(default_factory=list)  # per class, list of Hz
    snr_db: float = 20.0
    frame_len: int = 3200
    sample_rate: float = 16000.0
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    seed: int = 0

    def resolved(self):
        """Carriers and modulation rates with defaults filled in: f = 300 + 400 c (times j+1 for extra tones)."""
        carriers = self.carriers or [[(300.0 + 400.0 * c) * (j + 1) for j in range(self.tones_per_class)]
                                     for c in range(self.class_count)]
        rates = self.mod_rates or [[3.0 + c + j for j in range(self.tones_per_class)]
                                   for c in range(self.class_count)]
        return np.asarray(carriers, dtype=float), np.asarray(rates, dtype=float)

    def validate(self):
        carriers, rates = self.resolved()
        if carriers.shape != (self.class_count, self.tones_per_class) or rates.shape != carriers.shape:
            raise ValueError("carriers/mod_rates must be class_count x tones_per_class")
        if np.any(carriers <= 0) or np.any(carriers >= self.sample_rate / 2):
            raise ValueError("carrier frequencies must lie in (0, sample_rate/2)")
        if not math.isfinite(self.snr_db) and self.snr_db != math.inf:
            raise ValueError("snr_db must be finite or +inf")
        return carriers, rates


def _make_split(spec, carriers, rates, count, rng):
    t = np.arange(spec.frame_len) / spec.sample_rate
    labels = rng.integers(0, spec.class_count, size=count)
    frames = np.empty((count, spec.frame_len), dtype=np.float32)
    for i, c in enumerate(labels):
        phase = rng.uniform(0.0, 2.0 * math.pi, size=spec.tones_per_class)
        sig = np.zeros_like(t)
        for f, m, ph in zip(carriers[c], rates[c], phase):
            sig += np.sin(2.0 * math.pi * f * t + ph) * (1.0 + 0.5 * np.sin(2.0 * math.pi * m * t))
        if math.isfinite(spec.snr_db):
            noise_power = np.mean(sig**2) / 10.0 ** (spec.snr_db / 10.0)
            sig = sig + rng.normal(0.0, math.sqrt(noise_power), size=sig.shape)
        frames[i] = sig / np.abs(sig).max()
    return FrameDataset(spec.frame_len, spec.class_count, labels, frames)


def synth_generate(spec: SynthSpec):
    """Return (train, validation, test) datasets drawn from independent seeded streams."""
    carriers, rates = spec.validate()
    seeds = np.random.SeedSequence(spec.seed).spawn(3)
    sizes = (spec.n_train, spec.n_val, spec.n_test)
    return tuple(_make_split(spec, carriers, rates, n, np.random.default_rng(s)) for n, s in zip(sizes, seeds))
