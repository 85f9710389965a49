"""WAV and PNG codecs for the on-disk dataset layout."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.io import wavfile

from ..dsp import AudioClip, InvalidInputError

DEPTH_UNITS_PER_METRE = 1000  # 16-bit depth PNGs store millimetres

DEFAULT_PALETTE = [
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 190), (0, 128, 128),
]


def read_wav(path: str | os.PathLike) -> AudioClip:
    """PCM16 or float32 WAV -> AudioClip with samples in [-1, 1], shape (channels, n)."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float32)
    else:
        raise InvalidInputError(f"{path}: unsupported WAV sample type {data.dtype}")
    if data.ndim == 1:
        data = data[:, None]
    if not 1 <= data.shape[1] <= 16:
        raise InvalidInputError(f"{path}: {data.shape[1]} channels, expected 1-16")
    return AudioClip(np.ascontiguousarray(data.T), int(rate))


def write_wav(path: str | os.PathLike, clip_or_samples, sample_rate: int | None = None) -> None:
    if isinstance(clip_or_samples, AudioClip):
        samples, sample_rate = clip_or_samples.samples, clip_or_samples.sample_rate
    else:
        samples = np.asarray(clip_or_samples)
    wavfile.write(path, int(sample_rate), np.ascontiguousarray(samples.T.astype(np.float32)))


def write_depth_png(path: str | os.PathLike, depth_m: np.ndarray) -> None:
    mm = np.clip(np.rint(np.asarray(depth_m, dtype=np.float64) * DEPTH_UNITS_PER_METRE), 0, 65535)
    Image.fromarray(mm.astype(np.uint16)).save(path)


def read_depth_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    return arr.astype(np.float64) / DEPTH_UNITS_PER_METRE


def write_seg_png(path: str | os.PathLike, seg: np.ndarray, palette=None) -> None:
    seg = np.asarray(seg)
    if seg.min(initial=0) < 0 or seg.max(initial=0) > 255:
        raise ValueError("class ids must fit in 0..255 for paletted PNG")
    im = Image.fromarray(seg.astype(np.uint8), mode="P")
    flat = [v for rgb in (palette or DEFAULT_PALETTE) for v in rgb]
    im.putpalette(flat + [0] * (768 - len(flat)))
    im.save(path)


def read_seg_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im).astype(np.int64)


def ensure_dir(path: str | os.PathLike) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
