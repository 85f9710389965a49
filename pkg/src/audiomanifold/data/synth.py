"""Procedural desk-scale scenes with aligned depth, segmentation and mic-array audio.

A scene is a handful of flat objects standing on a ground plane in front of
a camera. Each sounding object emits a harmonic tone whose fundamental
identifies its class; every microphone hears it attenuated by 1/r and
delayed by r / c. Depth, segmentation and audio are all deterministic
functions of the scene, so audio -> vision is learnable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SPEED_OF_SOUND = 343.0


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    shape: str  # "rect" | "disc"
    cx: float  # centre, fraction of image width (0 = left)
    cy: float  # centre, fraction of image height (0 = top)
    size: float  # apparent extent, fraction of image width
    distance: float  # metres
    emits_sound: bool = True
    frequency: float = 440.0


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    mic_positions: tuple[float, ...]  # lateral x (m) of a linear array at the camera
    background_depth: float = 12.0
    fov_deg: float = 90.0
    ground_height: float | None = None  # camera height above a visible ground plane; None = flat backdrop

    def __post_init__(self):
        if len(self.mic_positions) < 2:
            raise SynthConfigError("a scene needs at least two microphones")
        if self.background_depth <= 0:
            raise SynthConfigError("background depth must be positive")
        for o in self.objects:
            if o.distance <= 0:
                raise SynthConfigError("object distances must be positive")
            if not (0.0 <= o.cx <= 1.0 and 0.0 <= o.cy <= 1.0):
                raise SynthConfigError(f"object centre ({o.cx}, {o.cy}) outside the frame")

    @property
    def view_scale(self) -> float:
        """Visible width (m) per metre of distance."""
        return 2.0 * math.tan(math.radians(self.fov_deg) / 2.0)


@dataclass
class SynthConfig:
    n_train: int = 256
    n_val: int = 0
    n_test: int = 64
    image_size: int = 128
    sample_rate: int = 22050
    duration: float = 1.0
    n_mics: int = 8
    aperture: float = 2.0
    n_classes: int = 3  # object classes; class 0 is background
    shapes: Sequence[str] = ("disc", "rect", "rect")
    physical_sizes: Sequence[float] = (1.2, 1.6, 1.0)
    freq_range: tuple[float, float] = (200.0, 4000.0)
    objects_min: int = 1
    objects_max: int = 1
    distance_range: tuple[float, float] = (2.0, 8.0)
    background_depth: float = 12.0
    fov_deg: float = 90.0
    camera_height: float = 1.0
    ground_plane: bool = False
    emit_probability: float = 1.0
    harmonics: Sequence[float] = (1.0, 0.5, 0.25)
    source_gain: float = 0.5
    snr_db: float = 30.0

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        self.physical_sizes = tuple(self.physical_sizes)
        self.harmonics = tuple(self.harmonics)
        self.freq_range = tuple(self.freq_range)
        self.distance_range = tuple(self.distance_range)
        problems = []
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.n_train + self.n_val + self.n_test == 0:
            problems.append("split counts must be >= 0 and not all zero")
        if self.n_classes < 1:
            problems.append("need at least one object class")
        if len(self.shapes) != self.n_classes or len(self.physical_sizes) != self.n_classes:
            problems.append("shapes and physical_sizes need one entry per object class")
        if any(s not in ("rect", "disc") for s in self.shapes):
            problems.append("shapes must be 'rect' or 'disc'")
        if not 0 <= self.objects_min <= self.objects_max:
            problems.append("need 0 <= objects_min <= objects_max")
        lo, hi = self.distance_range
        if not 0 < lo <= hi:
            problems.append("distance_range must satisfy 0 < min <= max")
        if hi >= self.background_depth:
            problems.append("objects must be nearer than the background")
        if self.n_mics < 2:
            problems.append("need at least two microphones")
        if not 0 < self.freq_range[0] < self.freq_range[1] < self.sample_rate / 2:
            problems.append("freq_range must lie strictly inside (0, Nyquist)")
        if self.ground_plane and self.camera_height <= 0:
            problems.append("camera_height must be > 0 when the ground plane is rendered")
        if self.image_size < 4:
            problems.append("image_size too small")
        if problems:
            raise SynthConfigError("; ".join(problems))

    @classmethod
    def toy(cls, **overrides) -> "SynthConfig":
        """Small, fast preset: 32x32 images, 4 mics, large objects over a visible ground plane."""
        base = dict(n_train=512, n_test=128, image_size=32, n_mics=4, aperture=3.0,
                    physical_sizes=(2.5, 3.0, 2.0), distance_range=(1.5, 6.0), background_depth=10.0,
                    ground_plane=True)
        return cls(**{**base, **overrides})

    @property
    def num_classes(self) -> int:
        """Including background."""
        return self.n_classes + 1

    def class_frequencies(self) -> np.ndarray:
        """Fundamental per object class, log-spaced over ``freq_range``; index 0 is class 1."""
        lo, hi = self.freq_range
        if self.n_classes == 1:
            return np.array([math.sqrt(lo * hi)])
        return np.geomspace(lo, hi, self.n_classes)

    def mic_positions(self) -> tuple[float, ...]:
        return tuple(float(x) for x in np.linspace(-self.aperture / 2, self.aperture / 2, self.n_mics))

    def splits(self) -> list[str]:
        return ["train"] * self.n_train + ["val"] * self.n_val + ["test"] * self.n_test


@dataclass
class Sample:
    index: int
    split: str
    scene: Scene
    audio: np.ndarray  # (mics, samples) float32 in [-1, 1]
    depth: np.ndarray  # (S, S) float32 metres
    seg: np.ndarray  # (S, S) int64 class ids


def sample_scene(cfg: SynthConfig, rng: np.random.Generator) -> Scene:
    freqs = cfg.class_frequencies()
    scale = 2.0 * math.tan(math.radians(cfg.fov_deg) / 2.0)
    n_obj = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    objects = []
    for _ in range(n_obj):
        cls = int(rng.integers(1, cfg.n_classes + 1))
        d = float(rng.uniform(*cfg.distance_range))
        size = min(cfg.physical_sizes[cls - 1] / (d * scale), 1.0)
        cx = float(rng.uniform(size / 2, 1 - size / 2))
        bottom = 0.5 + cfg.camera_height / (d * scale)
        cy = float(np.clip(bottom - size / 2, size / 2, 1 - size / 2))
        emits = bool(rng.random() < cfg.emit_probability)
        objects.append(SceneObject(cls, cfg.shapes[cls - 1], cx, cy, size, d, emits, float(freqs[cls - 1])))
    ground = cfg.camera_height if cfg.ground_plane else None
    return Scene(tuple(objects), cfg.mic_positions(), cfg.background_depth, cfg.fov_deg, ground)


def object_mask(obj: SceneObject, size: int) -> np.ndarray:
    c = (np.arange(size) + 0.5) / size
    y, x = np.meshgrid(c, c, indexing="ij")
    half = obj.size / 2
    if obj.shape == "disc":
        return (x - obj.cx) ** 2 + (y - obj.cy) ** 2 <= half ** 2
    return (np.abs(x - obj.cx) <= half) & (np.abs(y - obj.cy) <= half)


def backdrop_depth(scene: Scene, size: int) -> np.ndarray:
    """Depth with no objects: a flat backdrop, plus the ground plane below the horizon if enabled."""
    depth = np.full((size, size), scene.background_depth, dtype=np.float32)
    if scene.ground_height is not None:
        below = ((np.arange(size) + 0.5) / size - 0.5) * scene.view_scale
        with np.errstate(divide="ignore"):
            rows = np.where(below > 0, scene.ground_height / below, np.inf)
        depth = np.minimum(depth, rows[:, None].astype(np.float32))
    return depth


def rasterize(scene: Scene, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Painter's algorithm: far objects first so nearer ones overwrite them."""
    depth = backdrop_depth(scene, size)
    seg = np.zeros((size, size), dtype=np.int64)
    for obj in sorted(scene.objects, key=lambda o: -o.distance):
        m = object_mask(obj, size)
        depth[m] = obj.distance
        seg[m] = obj.class_id
    return depth, seg


def render_depth(scene: Scene, size: int = 128) -> np.ndarray:
    return rasterize(scene, size)[0]


def render_seg(scene: Scene, size: int = 128) -> np.ndarray:
    return rasterize(scene, size)[1]


def source_position(scene: Scene, obj: SceneObject) -> tuple[float, float]:
    """(lateral x, forward z) of an object in metres; the camera looks along +z."""
    return (obj.cx - 0.5) * obj.distance * scene.view_scale, obj.distance


def channel_geometry(scene: Scene, obj: SceneObject, source_gain: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Per-mic gain (source_gain / r) and propagation delay (r / c, seconds)."""
    x, z = source_position(scene, obj)
    mics = np.asarray(scene.mic_positions)
    r = np.hypot(x - mics, z)
    return source_gain / r, r / SPEED_OF_SOUND


def synth_audio(scene: Scene, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n = int(round(cfg.duration * cfg.sample_rate))
    t = np.arange(n) / cfg.sample_rate
    out = np.zeros((len(scene.mic_positions), n))
    nyquist = cfg.sample_rate / 2
    for obj in scene.objects:
        phase = rng.uniform(0, 2 * np.pi)
        if not obj.emits_sound:
            continue
        gains, delays = channel_geometry(scene, obj, cfg.source_gain)
        for m, (g, tau) in enumerate(zip(gains, delays)):
            sig = np.zeros(n)
            for h, amp in enumerate(cfg.harmonics, start=1):
                if h * obj.frequency < nyquist:
                    sig += amp * np.sin(2 * np.pi * h * obj.frequency * (t - tau) + h * phase)
            out[m] += g * sig
    power = float(np.mean(out ** 2))
    if power > 0 and np.isfinite(cfg.snr_db):
        out += rng.normal(0.0, math.sqrt(power / 10 ** (cfg.snr_db / 10)), size=out.shape)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def generate_sample(cfg: SynthConfig, seed: int, index: int, split: str = "train") -> Sample:
    rng = np.random.default_rng([seed, index])
    scene = sample_scene(cfg, rng)
    depth, seg = rasterize(scene, cfg.image_size)
    audio = synth_audio(scene, cfg, rng)
    return Sample(index, split, scene, audio, depth, seg)


def generate(cfg: SynthConfig, seed: int) -> list[Sample]:
    """All samples for every split, in index order; sample i only depends on (seed, i)."""
    return [generate_sample(cfg, seed, i, split) for i, split in enumerate(cfg.splits())]
