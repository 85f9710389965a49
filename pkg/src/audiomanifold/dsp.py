"""Audio front end: resampling, windowing and stacked MEL spectrograms.

Everything here is a pure function of numpy arrays so batch preprocessing
can fan out over clips without shared state.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.signal import resample_poly


class InvalidInputError(ValueError):
    """Raised when audio or spectrogram inputs violate an operation's contract."""


@dataclass(frozen=True)
class AudioClip:
    """Multi-channel audio, ``samples`` shaped (channels, length)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise InvalidInputError(f"samples must be (channels, length), got shape {samples.shape}")
        if samples.shape[0] < 1:
            raise InvalidInputError("clip needs at least one channel")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("clip contains non-finite amplitudes")
        object.__setattr__(self, "samples", samples)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate


@dataclass(frozen=True)
class MelParams:
    window_length: int = 2048
    hop_length: int = 256
    mel_bins: int = 256
    sample_rate: int = 22050
    power: float = 1.0
    log_compress: bool = True


@dataclass(frozen=True)
class Spectrogram:
    """MEL spectrogram tensor shaped (N, T, W)."""

    values: np.ndarray
    mel_params: MelParams = field(default_factory=MelParams)

    def __post_init__(self):
        if self.values.ndim != 3:
            raise InvalidInputError(f"spectrogram must be (N, T, W), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("spectrogram contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited polyphase resampling of every channel to ``target_rate``."""
    if target_rate <= 0:
        raise InvalidInputError(f"target_rate must be positive, got {target_rate}")
    if clip.length == 0:
        raise InvalidInputError("cannot resample an empty clip")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    ratio = Fraction(int(target_rate), int(clip.sample_rate))
    out = resample_poly(clip.samples.astype(np.float64), ratio.numerator, ratio.denominator, axis=1)
    return AudioClip(out.astype(clip.samples.dtype, copy=False), int(target_rate))


def segment(clip: AudioClip, window_seconds: float = 1.0) -> list[AudioClip]:
    """Split into consecutive non-overlapping windows; a short tail is dropped."""
    if window_seconds <= 0:
        raise InvalidInputError(f"window_seconds must be positive, got {window_seconds}")
    size = int(round(window_seconds * clip.sample_rate))
    count = clip.length // size
    return [
        AudioClip(clip.samples[:, i * size:(i + 1) * size].copy(), clip.sample_rate)
        for i in range(count)
    ]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(sample_rate: int, mel_bins: int) -> np.ndarray:
    """Peak frequency (Hz) of each triangular filter."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), mel_bins + 2))
    return edges[1:-1]


def mel_filterbank(sample_rate: int, n_fft: int, mel_bins: int) -> np.ndarray:
    """Triangular filters (mel_bins, n_fft // 2 + 1) spanning 0 Hz to Nyquist.

    Filters have unit peak and are evaluated at the exact DFT bin frequencies.
    """
    if mel_bins < 1:
        raise InvalidInputError("mel_bins must be >= 1")
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), mel_bins + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_signal(x: np.ndarray, window_length: int, hop_length: int) -> np.ndarray:
    """Frames fully inside ``x``; no padding. Returns (T, window_length)."""
    n_frames = (len(x) - window_length) // hop_length + 1
    idx = np.arange(window_length)[None, :] + hop_length * np.arange(n_frames)[:, None]
    return x[idx]


def mel_spectrogram(
    clip: AudioClip,
    window_length: int = 2048,
    hop_length: int = 256,
    mel_bins: int = 256,
    power: float = 1.0,
    log_compress: bool = True,
) -> Spectrogram:
    """Single-channel MEL spectrogram shaped (1, T, mel_bins).

    Hann-windowed STFT with FFT size equal to the window length, magnitude
    raised to ``power`` (1 = magnitude, 2 = power), then the mel filterbank
    and finally ``log(1 + x)`` when ``log_compress`` is set.
    """
    if clip.channels != 1:
        raise InvalidInputError(f"expected a single-channel segment, got {clip.channels} channels")
    if hop_length < 1 or window_length < 1:
        raise InvalidInputError("window and hop lengths must be positive")
    if clip.length < window_length:
        raise InvalidInputError(
            f"segment of {clip.length} samples is shorter than window length {window_length}")
    x = clip.samples[0].astype(np.float64)
    frames = frame_signal(x, window_length, hop_length) * np.hanning(window_length + 1)[:-1]
    mag = np.abs(np.fft.rfft(frames, n=window_length, axis=1)) ** power
    mel = mag @ mel_filterbank(clip.sample_rate, window_length, mel_bins).T
    if log_compress:
        mel = np.log1p(mel)
    params = MelParams(window_length, hop_length, mel_bins, clip.sample_rate, power, log_compress)
    return Spectrogram(mel[None].astype(np.float32), params)


def stack_channels(specs: Sequence[Spectrogram]) -> Spectrogram:
    if not specs:
        raise InvalidInputError("cannot stack an empty list of spectrograms")
    first = specs[0]
    for i, s in enumerate(specs):
        if s.values.shape[1:] != first.values.shape[1:] or s.mel_params != first.mel_params:
            raise InvalidInputError(f"spectrogram {i} does not match shape/params of spectrogram 0")
    return Spectrogram(np.concatenate([s.values for s in specs], axis=0), first.mel_params)


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize over the last two axes with pixel-centre sampling."""
    if out_h <= 0 or out_w <= 0:
        raise InvalidInputError(f"target size must be positive, got {out_h}x{out_w}")
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise InvalidInputError(f"input needs two non-empty spatial axes, got {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    r0, r1, fr = _bilinear_axis(h, out_h)
    c0, c1, fc = _bilinear_axis(w, out_w)
    fr = fr[:, None].astype(x.dtype)
    fc = fc[None, :].astype(x.dtype)
    top = x[..., r0, :]
    bottom = x[..., r1, :]
    rows = top + (bottom - top) * fr
    left = rows[..., c0]
    right = rows[..., c1]
    out = left + (right - left) * fc
    # keep the result inside the input range despite rounding
    return np.clip(out, x.min(), x.max())


def spectrogram_pipeline(
    clip: AudioClip,
    target_rate: int = 22050,
    window_seconds: float = 1.0,
    window_length: int = 2048,
    hop_length: int = 256,
    mel_bins: int = 256,
    size: int = 128,
    power: float = 1.0,
    log_compress: bool = True,
) -> list[np.ndarray]:
    """resample -> segment -> per-channel mel -> stack -> resize.

    Returns one float32 array of shape (N, size, size) per window.
    """
    clip = resample(clip, target_rate)
    out = []
    for seg in segment(clip, window_seconds):
        specs = [
            mel_spectrogram(AudioClip(seg.samples[c:c + 1], seg.sample_rate),
                            window_length, hop_length, mel_bins, power, log_compress)
            for c in range(seg.channels)
        ]
        stacked = stack_channels(specs).values
        out.append(resize_bilinear(stacked, size, size).astype(np.float32))
    return out
