"""Per-subject binary caches for labelled segments and MFCC tensors.

Both formats are little-endian throughout.

Segment cache (``.seg``)::

    magic      4s   b"NSEG"
    version    u16  1
    id_len     u16  byte length of the UTF-8 subject id
    subject    id_len bytes
    fs         u32  sampling rate of the stored samples (Hz)
    window_s   f64
    channels   u16
    samples    u32  samples per channel per segment
    count      u32  number of segments
    count x {label u8, seizure_index i32, t_start f64}
    count x channels x samples  f32

Feature cache (``.fea``)::

    magic      4s   b"NFEA"
    version    u16  1
    id_len     u16
    subject    id_len bytes
    shape      3 x u16   (channels, coefficients, frames)
    count      u32
    count x {label u8, seizure_index i32, t_start f64}
    count x channels x coefficients x frames  f32   (channel-major)
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, VersionError
from .mfcc import MfccTensor
from .preprocess.segments import LabeledSegment

SEG_MAGIC = b"NSEG"
FEA_MAGIC = b"NFEA"
VERSION = 1
_META = struct.Struct("<Bid")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("cache file truncated")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("cache file truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def _header(r: _Reader, magic: bytes) -> str:
    if r.raw(4) != magic:
        raise FormatError(f"bad magic, expected {magic!r}")
    (version,) = r.take("<H")
    if version != VERSION:
        raise VersionError(f"cache version {version} unsupported (expected {VERSION})")
    (n,) = r.take("<H")
    return r.raw(n).decode("utf-8")


def _subject_bytes(sid: str) -> bytes:
    b = sid.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def encode_segments(subject_id: str, segments: Sequence[LabeledSegment], fs: int,
                    window_s: float) -> bytes:
    n_samp = int(round(window_s * fs))
    parts = [SEG_MAGIC, struct.pack("<H", VERSION), _subject_bytes(subject_id),
             struct.pack("<IdHII", fs, window_s, 19, n_samp, len(segments))]
    parts += [_META.pack(s.label, s.seizure_index, s.t_start) for s in segments]
    if segments:
        block = np.stack([np.asarray(s.data) for s in segments]).astype("<f4")
        if block.shape[1:] != (19, n_samp):
            raise FormatError(f"segments of shape {block.shape[1:]} do not match the header")
        parts.append(block.tobytes())
    return b"".join(parts)


def decode_segments(buf: bytes) -> tuple[list[LabeledSegment], dict]:
    r = _Reader(buf)
    sid = _header(r, SEG_MAGIC)
    fs, window_s, ch, n_samp, count = r.take("<IdHII")
    meta = [r.take("<Bid") for _ in range(count)]
    data = np.frombuffer(r.raw(4 * count * ch * n_samp), dtype="<f4").reshape(count, ch, n_samp)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after segment data")
    segs = [LabeledSegment(sid, lab, t, data[i].astype(np.float64), sz)
            for i, (lab, sz, t) in enumerate(meta)]
    return segs, {"subject_id": sid, "fs": fs, "window_s": window_s}


def encode_features(subject_id: str, tensors: Sequence[MfccTensor],
                    shape: tuple[int, int, int] = (19, 20, 11)) -> bytes:
    parts = [FEA_MAGIC, struct.pack("<H", VERSION), _subject_bytes(subject_id),
             struct.pack("<HHHI", *shape, len(tensors))]
    parts += [_META.pack(t.label, t.seizure_index, t.t_start) for t in tensors]
    if tensors:
        block = np.stack([t.values for t in tensors]).astype("<f4")
        if block.shape[1:] != tuple(shape):
            raise FormatError(f"tensor shape {block.shape[1:]} does not match {shape}")
        parts.append(block.tobytes())
    return b"".join(parts)


def decode_features(buf: bytes) -> list[MfccTensor]:
    r = _Reader(buf)
    sid = _header(r, FEA_MAGIC)
    c, h, w, count = r.take("<HHHI")
    meta = [r.take("<Bid") for _ in range(count)]
    data = np.frombuffer(r.raw(4 * count * c * h * w), dtype="<f4").reshape(count, c, h, w)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after feature data")
    return [MfccTensor(data[i].astype(np.float64), sid, lab, t, sz)
            for i, (lab, sz, t) in enumerate(meta)]


def write_segments(path, subject_id, segments, fs, window_s) -> None:
    Path(path).write_bytes(encode_segments(subject_id, segments, fs, window_s))


def read_segments(path):
    return decode_segments(Path(path).read_bytes())


def write_features(path, subject_id, tensors) -> None:
    Path(path).write_bytes(encode_features(subject_id, tensors))


def read_features(path) -> list[MfccTensor]:
    return decode_features(Path(path).read_bytes())
