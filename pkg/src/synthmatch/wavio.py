"""Mono WAV files: 32-bit IEEE float PCM, little-endian RIFF.

The writer always emits float32 mono.  The reader additionally accepts
16-bit integer PCM (rescaled to [-1, 1]) since user-supplied target audio
often comes that way.
"""

from __future__ import annotations

import struct

import numpy as np


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    data = np.asarray(samples, dtype=np.float32)
    if data.ndim != 1:
        raise ValueError("write_wav expects a 1-D mono signal")
    raw = data.astype("<f4").tobytes()
    byte_rate = sample_rate * 4
    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 4 + 8 + 16 + 8 + len(raw)))
        fh.write(b"WAVE")
        fh.write(b"fmt ")
        # format tag 3 = IEEE float, mono, 32 bits per sample
        fh.write(struct.pack("<IHHIIHH", 16, 3, 1, sample_rate, byte_rate, 4, 32))
        fh.write(b"data")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)


def read_wav(path) -> tuple[np.ndarray, int]:
    """Return (samples as float64 in [-1, 1], sample_rate)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise ValueError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        cid = blob[pos : pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4 : pos + 8])
        body = blob[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise ValueError(f"{path}: missing fmt or data chunk")
    tag, channels, sample_rate, _rate, _align, bits = fmt
    if channels != 1:
        raise ValueError(f"{path}: only mono supported, got {channels} channels")
    if tag == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    elif tag == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    else:
        raise ValueError(f"{path}: unsupported format (tag={tag}, bits={bits})")
    return samples, sample_rate
