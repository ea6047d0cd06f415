"""Log-mel filterbank features with context splicing and frame subsampling.

The base analysis uses a 25 ms Hann window every 10 ms, a 256-point DFT and
23 HTK-style mel filters (2595 * log10(1 + f/700)); powers are floored at
1e-10 before the log. No pre-emphasis and no mean/variance normalization are
applied. Splicing concatenates +-7 neighbouring frames (edge frames replicate)
and subsampling keeps every 10th frame, yielding 345-dimensional vectors every
100 ms in the default configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import Waveform

LOG_FLOOR = 1e-10


class FeatureError(ValueError):
    pass


@dataclass
class FeatureSequence:
    frames: np.ndarray       # (T, F) float64
    frame_period: float      # seconds between consecutive frames

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise FeatureError(f"frames must be 2-D, got shape {self.frames.shape}")
        if self.frame_period <= 0:
            raise FeatureError(f"frame_period must be positive, got {self.frame_period}")
        if not np.all(np.isfinite(self.frames)):
            raise FeatureError("non-finite feature values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters (n_mels, n_fft//2 + 1) spanning 0 .. Nyquist."""
    points = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, mid, hi = points[m], points[m + 1], points[m + 2]
        up = (bin_freqs - lo) / (mid - lo)
        down = (hi - bin_freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def logmel(wave: Waveform, n_mels: int = 23, frame_len: float = 0.025,
           frame_shift: float = 0.010, n_fft: int = 256) -> FeatureSequence:
    """Log-mel filterbank energies, one row per analysis frame."""
    win = int(round(frame_len * wave.sample_rate))
    hop = int(round(frame_shift * wave.sample_rate))
    if len(wave.samples) < win:
        raise FeatureError(
            f"waveform has {len(wave.samples)} samples, shorter than one "
            f"{win}-sample frame")
    if n_fft < win:
        raise FeatureError(f"n_fft {n_fft} smaller than window {win}")
    frames = np.lib.stride_tricks.sliding_window_view(wave.samples, win)[::hop]
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    spec = np.fft.rfft(frames * hann, n=n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    mel = power @ mel_filterbank(n_mels, n_fft, wave.sample_rate).T
    return FeatureSequence(np.log(np.maximum(mel, LOG_FLOOR)), frame_shift)


def splice(f: FeatureSequence, left: int = 7, right: int = 7) -> FeatureSequence:
    """Concatenate each frame with its left/right context, edges replicated."""
    t = f.num_frames
    offsets = np.arange(-left, right + 1)
    idx = np.clip(np.arange(t)[:, None] + offsets[None, :], 0, t - 1)
    out = f.frames[idx].reshape(t, (left + right + 1) * f.dim)
    return FeatureSequence(out, f.frame_period)


def subsample(f: FeatureSequence, factor: int = 10) -> FeatureSequence:
    """Keep frames 0, factor, 2*factor, ...; frame period scales by factor."""
    if factor < 1:
        raise FeatureError(f"subsample factor must be >= 1, got {factor}")
    return FeatureSequence(f.frames[::factor].copy(), f.frame_period * factor)


def extract(wave: Waveform, n_mels: int = 23, left: int = 7, right: int = 7,
            factor: int = 10) -> FeatureSequence:
    """Full pipeline: log-mel, splice, subsample."""
    return subsample(splice(logmel(wave, n_mels=n_mels), left, right), factor)
