"""RIFF/PCM WAV reading and writing.

Only one layout is accepted: 16-bit signed little-endian PCM, mono, 8000 Hz.
Samples map to floats in [-1, 1) by dividing by 32768. Anything else raises
WavFormatError naming the offending field.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

REQUIRED_SAMPLE_RATE = 8000


class WavFormatError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1)
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise WavFormatError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise WavFormatError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise WavFormatError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path: str | Path) -> Waveform:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[0:4] != b"RIFF":
        raise WavFormatError(f"{path}: missing RIFF magic")
    if raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: missing WAVE form type")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavFormatError(f"{path}: no fmt chunk")
    if data is None:
        raise WavFormatError(f"{path}: no data chunk")
    if len(fmt) < 16:
        raise WavFormatError(f"{path}: fmt chunk truncated")
    audio_format, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if audio_format != 1:
        raise WavFormatError(f"{path}: audio_format must be 1 (PCM), got {audio_format}")
    if channels != 1:
        raise WavFormatError(f"{path}: num_channels must be 1, got {channels}")
    if rate != REQUIRED_SAMPLE_RATE:
        raise WavFormatError(f"{path}: sample_rate must be {REQUIRED_SAMPLE_RATE}, got {rate}")
    if bits != 16:
        raise WavFormatError(f"{path}: bits_per_sample must be 16, got {bits}")
    ints = np.frombuffer(data, dtype="<i2")
    return Waveform(ints.astype(np.float64) / 32768.0, rate)


def write_wav(path: str | Path, wave: Waveform) -> None:
    if wave.sample_rate != REQUIRED_SAMPLE_RATE:
        raise WavFormatError(
            f"sample_rate must be {REQUIRED_SAMPLE_RATE}, got {wave.sample_rate}")
    x = np.clip(np.rint(wave.samples * 32768.0), -32768, 32767).astype("<i2")
    data = x.tobytes()
    hdr = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, wave.sample_rate,
                                 wave.sample_rate * 2, 2, 16)
    hdr += b"data" + struct.pack("<I", len(data))
    Path(path).write_bytes(hdr + data)
