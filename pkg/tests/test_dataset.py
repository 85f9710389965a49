import json
import math

import numpy as np
import pytest

from audiomanifold import tensorio
from audiomanifold.data import io
from audiomanifold.data.manifest import (
    DanglingPathError, ManifestEntry, ManifestError, PairManifest, SplitOverlapError, load_manifest,
    write_manifest,
)
from audiomanifold.data.store import load_split, sha256_files, spectrogram_for, write_dataset
from audiomanifold.data.synth import (
    Scene, SceneObject, SynthConfig, SynthConfigError, channel_geometry, generate, object_mask, render_depth,
    render_seg, synth_audio,
)
from audiomanifold.tensorio import TensorFormatError

MICS = (-0.5, 0.5)


def disc(cx=0.5, cy=0.5, size=0.5, distance=4.0, cls=1):
    return SceneObject(cls, "disc", cx, cy, size, distance)


class TestRender:
    def test_empty_scene(self):
        scene = Scene((), MICS, background_depth=12.0)
        assert (render_depth(scene, 16) == 12.0).all()
        assert (render_seg(scene, 16) == 0).all()

    def test_centered_disc_area(self):
        size = 128
        obj = disc(size=0.5)
        seg = render_seg(Scene((obj,), MICS), size)
        radius = 0.5 * size / 2
        count = int((seg == 1).sum())
        ring = 2 * math.pi * radius
        assert abs(count - math.pi * radius ** 2) <= ring

    def test_overlap_takes_nearer_class(self):
        near = SceneObject(1, "rect", 0.4, 0.5, 0.4, 2.0)
        far = SceneObject(2, "rect", 0.6, 0.5, 0.4, 6.0)
        for order in ((near, far), (far, near)):
            scene = Scene(order, MICS)
            seg, depth = render_seg(scene, 64), render_depth(scene, 64)
            overlap = object_mask(near, 64) & object_mask(far, 64)
            assert overlap.any()
            assert (seg[overlap] == 1).all() and (depth[overlap] == 2.0).all()

    def test_supports_agree(self):
        scene = Scene((disc(distance=3.0), SceneObject(2, "rect", 0.2, 0.7, 0.3, 5.0)), MICS, background_depth=9.0)
        assert np.array_equal(render_seg(scene, 48) > 0, render_depth(scene, 48) < 9.0)

    def test_near_object_smaller_normalised_depth(self):
        a = Scene((disc(cx=0.25, size=0.3, distance=2.0), disc(cx=0.75, size=0.3, distance=4.0, cls=2)), MICS)
        d = render_depth(a, 64)
        norm = (d - d.min()) / (d.max() - d.min())
        assert norm[32, 16] < norm[32, 48]

    def test_ground_plane_recedes_to_horizon(self):
        scene = Scene((), MICS, background_depth=10.0, ground_height=1.0)
        d = render_depth(scene, 32)
        assert (d[:16] == 10.0).all()
        column = d[16:, 0]
        assert (np.diff(column) <= 0).all()
        below_cap = column[column < 10.0]
        assert len(below_cap) > 10 and (np.diff(below_cap) < 0).all()
        # bottom row centre sits 31.5/32 - 0.5 of the frame below the axis; fov 90 -> tan = 2 * that
        assert d[31, 0] == pytest.approx(1.0 / (2 * (31.5 / 32 - 0.5)), rel=1e-6)

    def test_invalid_scene(self):
        with pytest.raises(SynthConfigError):
            Scene((), (0.0,))
        with pytest.raises(SynthConfigError):
            Scene((disc(distance=-1.0),), MICS)
        with pytest.raises(SynthConfigError):
            Scene((disc(cx=1.5),), MICS)


class TestGeometry:
    def test_equidistant_source_no_delay(self):
        scene = Scene((disc(cx=0.5, distance=3.0),), MICS)
        gains, delays = channel_geometry(scene, scene.objects[0])
        assert delays[0] == pytest.approx(delays[1], abs=1e-15)
        assert gains[0] == pytest.approx(gains[1], abs=1e-15)
        assert delays[0] == pytest.approx(math.hypot(0.5, 3.0) / 343.0)

    def test_closer_to_mic_one_is_louder(self):
        scene = Scene((disc(cx=0.3, distance=3.0),), MICS)
        gains, delays = channel_geometry(scene, scene.objects[0])
        assert gains[0] > gains[1] and delays[0] < delays[1]
        # source at x = -0.2 * 3 * 2 = -1.2 m
        assert gains[0] == pytest.approx(0.5 / math.hypot(-1.2 + 0.5, 3.0))

    def test_audio_delay_visible_in_cross_correlation(self):
        # one low tone far to the left of a wide array: delay spans many samples, well under one period
        cfg = SynthConfig(n_train=1, n_test=0, n_mics=2, aperture=3.0, snr_db=float("inf"), harmonics=(1.0,))
        obj = SceneObject(1, "disc", 0.05, 0.5, 0.3, 2.0, frequency=60.0)
        scene = Scene((obj,), (-1.5, 1.5))
        a, b = synth_audio(scene, cfg, np.random.default_rng(0)).astype(np.float64)
        _, delays = channel_geometry(scene, obj)
        expected = (delays[1] - delays[0]) * cfg.sample_rate
        seg = slice(4000, 12000)
        lags = np.arange(-200, 201)
        xc = [np.dot(b[seg], a[seg.start - k:seg.stop - k]) for k in lags]
        assert abs(lags[int(np.argmax(xc))] - expected) <= 1.0
        assert expected > 50


class TestGenerate:
    def test_deterministic(self):
        cfg = SynthConfig(n_train=3, n_test=1, image_size=16)
        a, b = generate(cfg, 7), generate(cfg, 7)
        for x, y in zip(a, b):
            assert x.audio.tobytes() == y.audio.tobytes()
            assert x.depth.tobytes() == y.depth.tobytes() and x.seg.tobytes() == y.seg.tobytes()

    def test_seed_matters(self):
        cfg = SynthConfig(n_train=2, n_test=0, image_size=16)
        assert generate(cfg, 1)[0].audio.tobytes() != generate(cfg, 2)[0].audio.tobytes()

    def test_class_frequencies_log_spaced(self):
        f = SynthConfig(n_classes=3, shapes=("disc",) * 3, physical_sizes=(1,) * 3).class_frequencies()
        assert f[0] == pytest.approx(200) and f[-1] == pytest.approx(4000)
        assert f[1] == pytest.approx(math.sqrt(200 * 4000))

    def test_audio_contract(self):
        cfg = SynthConfig(n_train=2, n_test=0, image_size=16)
        s = generate(cfg, 0)[0]
        assert s.audio.shape == (8, 22050) and s.audio.dtype == np.float32
        assert np.abs(s.audio).max() <= 1.0

    @pytest.mark.parametrize("kw", [dict(n_mics=1), dict(distance_range=(5, 2)), dict(n_train=-1),
                                    dict(shapes=("disc",)), dict(distance_range=(1, 20)),
                                    dict(freq_range=(100, 20000))])
    def test_inconsistent_config(self, kw):
        with pytest.raises(SynthConfigError):
            SynthConfig(**kw)


class TestManifest:
    def _files(self, root, names):
        for n in names:
            (root / n).write_bytes(b"x")

    def test_round_trip(self, tmp_path):
        self._files(tmp_path, ["a.wav", "a.png", "b.wav", "b.png", "c.wav", "c.png"])
        entries = [ManifestEntry(k, f"{k}.wav", f"{k}.png", "depth", s)
                   for k, s in (("a", "train"), ("b", "val"), ("c", "test"))]
        m = PairManifest(entries, depth_bounds=(1.0, 9.0), class_names=["bg", "x"], palette=[(0, 0, 0), (1, 2, 3)],
                         root=tmp_path)
        write_manifest(m, tmp_path / "manifest.jsonl")
        loaded = load_manifest(tmp_path / "manifest.jsonl")
        assert loaded.entries == entries
        assert [e.split for e in loaded.entries] == ["train", "val", "test"]
        assert loaded.depth_bounds == (1.0, 9.0) and loaded.palette == [(0, 0, 0), (1, 2, 3)]

    def test_dangling_path_names_entry(self, tmp_path):
        self._files(tmp_path, ["a.png"])
        m = PairManifest([ManifestEntry("a", "a.wav", "a.png", "depth", "train")], root=tmp_path)
        write_manifest(m, tmp_path / "manifest.jsonl")
        with pytest.raises(DanglingPathError, match="entry a"):
            load_manifest(tmp_path / "manifest.jsonl")

    def test_split_overlap(self, tmp_path):
        self._files(tmp_path, ["a.wav", "a.png"])
        m = PairManifest([ManifestEntry("a", "a.wav", "a.png", "depth", "train"),
                          ManifestEntry("a2", "a.wav", "a.png", "depth", "test")], root=tmp_path)
        write_manifest(m, tmp_path / "manifest.jsonl")
        with pytest.raises(SplitOverlapError):
            load_manifest(tmp_path / "manifest.jsonl")

    def test_bad_bounds_and_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "nope.jsonl")
        (tmp_path / "manifest.jsonl").write_text(json.dumps({"kind": "header", "depth_bounds": [5, 1]}) + "\n")
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "manifest.jsonl")


class TestOnDisk:
    def test_write_and_load(self, tmp_path, monkeypatch):
        monkeypatch.setenv("AUDIOMANIFOLD_CACHE", str(tmp_path / "cache"))
        cfg = SynthConfig.toy(n_train=3, n_test=2, image_size=16)
        m = write_dataset(cfg, 0, tmp_path / "ds")
        assert len(m.entries) == 10
        loaded = load_manifest(tmp_path / "ds" / "manifest.jsonl")
        params = {"size": 16}
        ids, specs, vis, raw = load_split(loaded, "train", "depth", 16, params)
        assert specs.shape == (3, 4, 16, 16) and vis.shape == (3, 1, 16, 16)
        assert 0.0 <= float(vis.min()) and float(vis.max()) <= 1.0
        assert len(list((tmp_path / "cache").glob("*.vtsr"))) == 3  # train clips only so far
        _, again, _, _ = load_split(loaded, "train", "depth", 16, params)
        assert torch_equal(specs, again)
        _, _, seg, raw = load_split(loaded, "test", "segmentation", 16, params, with_audio=False)
        assert seg.shape == (2, 4, 16, 16)
        assert (seg.sum(1) == 1).all()

    def test_dataset_hash_stable(self, tmp_path):
        cfg = SynthConfig.toy(n_train=2, n_test=1, image_size=16)
        write_dataset(cfg, 3, tmp_path / "a")
        write_dataset(cfg, 3, tmp_path / "b")
        files = lambda d: sorted(p for p in d.rglob("*") if p.is_file())  # noqa: E731
        assert sha256_files(files(tmp_path / "a")) == sha256_files(files(tmp_path / "b"))

    def test_png_round_trips(self, tmp_path):
        d = np.array([[1.5, 2.25], [9.999, 0.0]])
        io.write_depth_png(tmp_path / "d.png", d)
        np.testing.assert_allclose(io.read_depth_png(tmp_path / "d.png"), d, atol=5e-4)
        s = np.array([[0, 1], [2, 3]])
        io.write_seg_png(tmp_path / "s.png", s)
        assert np.array_equal(io.read_seg_png(tmp_path / "s.png"), s)

    def test_cache_key_depends_on_params(self, tmp_path):
        audio = np.random.default_rng(0).uniform(-0.5, 0.5, (2, 22050)).astype(np.float32)
        io.write_wav(tmp_path / "a.wav", audio, 22050)
        a = spectrogram_for(tmp_path / "a.wav", {"size": 8}, tmp_path / "c")
        b = spectrogram_for(tmp_path / "a.wav", {"size": 16}, tmp_path / "c")
        assert a.shape == (2, 8, 8) and b.shape == (2, 16, 16)
        assert len(list((tmp_path / "c").glob("*.vtsr"))) == 2


def torch_equal(a, b):
    return a.numpy().tobytes() == b.numpy().tobytes()


class TestTensorFormat:
    def test_round_trip(self, tmp_path):
        x = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np.float32)
        tensorio.save(tmp_path / "x.vtsr", x)
        assert tensorio.load(tmp_path / "x.vtsr").tobytes() == x.tobytes()

    def test_header_layout(self):
        blob = tensorio.encode(np.zeros((2, 3), dtype=np.float32))
        assert blob[:8] == b"VTSR1\0\0\0"
        assert blob[8:12] == (2).to_bytes(4, "little") and blob[12:16] == bytes(4)
        assert blob[16:24] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        assert len(blob) == 24 + 6 * 4

    def test_scalar_and_empty(self):
        for arr in (np.float32(2.5), np.zeros((0, 3), np.float32)):
            out = tensorio.decode(tensorio.encode(np.asarray(arr)))
            assert out.shape == np.asarray(arr).shape

    @pytest.mark.parametrize("blob", [b"", b"NOTVTSR" + bytes(9), tensorio.encode(np.zeros(4, np.float32))[:-1]])
    def test_corrupt(self, blob):
        with pytest.raises(TensorFormatError):
            tensorio.decode(blob)
