"""Synthetic scene generation, domain shifts, and dataset I/O round trips."""

import numpy as np
import pytest

from sfodlab import data as Dt


def test_generation_deterministic():
    spec = Dt.DomainSpec()
    a = Dt.generate_scene(spec, np.random.default_rng(7), "a")
    b = Dt.generate_scene(spec, np.random.default_rng(7), "a")
    assert a.image.tobytes() == b.image.tobytes()
    assert a.boxes.tobytes() == b.boxes.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = Dt.generate_scene(spec, np.random.default_rng(8), "a")
    assert a.image.tobytes() != c.image.tobytes()


def test_generation_counts_and_bounds():
    spec = Dt.DomainSpec(min_objects=2, max_objects=8)
    for seed in range(10):
        sc = Dt.generate_scene(spec, np.random.default_rng(seed))
        assert 2 <= len(sc.boxes) <= 8
        assert sc.image.shape == (96, 96, 3)
        assert sc.image.min() >= 0 and sc.image.max() <= 1
        b = sc.boxes
        assert (b[:, 0] >= 0).all() and (b[:, 2] <= 96).all()
        assert (b[:, 1] >= 0).all() and (b[:, 3] <= 96).all()
        areas = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
        assert (areas >= 4).all()
        assert (sc.labels < Dt.NUM_CLASSES).all()


def test_zero_objects_scene():
    spec = Dt.DomainSpec(min_objects=0, max_objects=0)
    sc = Dt.generate_scene(spec, np.random.default_rng(0))
    assert len(sc.boxes) == 0 and len(sc.labels) == 0


def test_disc_annotation_geometry():
    """A rendered disc's box must match its analytic bounds within 1 px."""
    spec = Dt.DomainSpec(min_objects=1, max_objects=1, min_size=20.0, max_size=20.0,
                         noise_amplitude=0.0)
    found = 0
    for seed in range(40):
        sc = Dt.generate_scene(spec, np.random.default_rng(seed))
        if len(sc.labels) == 1 and sc.labels[0] == 0:
            x1, y1, x2, y2 = sc.boxes[0]
            if x2 - x1 < 19 or y2 - y1 < 19:
                continue  # clipped at the border
            found += 1
            cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
            mask = np.abs(sc.image - sc.image[0, 0]).sum(axis=2) > 0.05
            ys, xs = np.nonzero(mask)
            assert abs(xs.min() - (cx - 10)) <= 1.0
            assert abs(xs.max() + 1 - (cx + 10)) <= 1.0
            assert abs(ys.min() - (cy - 10)) <= 1.0
            assert abs(ys.max() + 1 - (cy + 10)) <= 1.0
    assert found >= 3


def test_fog_identity_at_zero(rng):
    img = rng.random((96, 96, 3)).astype(np.float32)
    assert Dt.apply_fog(img, 0.0, (0.9, 0.9, 0.9)) is img


def test_fog_saturates_to_haze_at_top(rng):
    img = rng.random((96, 96, 3)).astype(np.float32) * 0.3
    out = Dt.apply_fog(img, 1.0, (1.0, 1.0, 1.0))
    assert np.abs(out[0] - 1.0).max() < 0.05      # top row ~ white haze
    assert np.abs(out[-1] - img[-1]).mean() > 0.0  # bottom keeps content (blurred)


def test_fog_contrast_strictly_decreases():
    spec = Dt.DomainSpec()
    for seed in range(10):
        sc = Dt.generate_scene(spec, np.random.default_rng(seed))
        stds = [Dt.apply_fog(sc.image, s, (0.92, 0.92, 0.95)).std()
                for s in (0.0, 0.3, 0.6)]
        assert stds[0] > stds[1] > stds[2], (seed, stds)


def test_fog_shift_matches_none_at_zero():
    base = Dt.DomainSpec(shift="none")
    fogged = Dt.DomainSpec(shift="fog", fog_strength=0.0)
    a = Dt.generate_scene(base, np.random.default_rng(3))
    b = Dt.generate_scene(fogged, np.random.default_rng(3))
    assert a.image.tobytes() == b.image.tobytes()


def test_color_and_scale_shifts():
    spec = Dt.DomainSpec(shift="color", color_cast=(1.0, 0.5, 0.5))
    sc = Dt.generate_scene(spec, np.random.default_rng(1))
    base = Dt.generate_scene(Dt.DomainSpec(shift="none"), np.random.default_rng(1))
    assert np.allclose(sc.image[..., 0], base.image[..., 0])
    assert np.allclose(sc.image[..., 1], np.clip(base.image[..., 1] * 0.5, 0, 1),
                       atol=1e-6)

    zoomed = Dt.apply_scale(base, 2.0)
    assert zoomed.image.shape == base.image.shape
    if len(zoomed.boxes):
        w_new = zoomed.boxes[:, 2] - zoomed.boxes[:, 0]
        assert (w_new >= 2).all()


def test_spec_validation():
    with pytest.raises(ValueError):
        Dt.DomainSpec(shift="rain")
    with pytest.raises(ValueError):
        Dt.DomainSpec(fog_strength=1.5)
    with pytest.raises(ValueError):
        Dt.DomainSpec(scale_factor=0.0)
    s = Dt.DomainSpec(shift="fog", fog_strength=0.4)
    assert Dt.DomainSpec.from_dict(s.to_dict()) == s


# ---------------------------------------------------------------------------
# dataset round trips
# ---------------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    spec = Dt.DomainSpec(shift="fog", fog_strength=0.5)
    scenes = Dt.generate_split(spec, 10, 42, "t")
    Dt.write_dataset(scenes, tmp_path / "ds", spec=spec, seed=42)
    back = Dt.read_dataset(tmp_path / "ds")
    assert len(back) == 10
    for a, b in zip(scenes, back):
        assert a.id == b.id
        assert np.array_equal(a.boxes, b.boxes)        # annotations lossless
        assert np.array_equal(a.labels, b.labels)
        assert np.abs(a.image - b.image).max() <= 1 / 255  # 8-bit quantization
    # a second write/read cycle is bit-exact (stable fixed point)
    Dt.write_dataset(back, tmp_path / "ds2")
    again = Dt.read_dataset(tmp_path / "ds2")
    for b, c in zip(back, again):
        assert b.image.tobytes() == c.image.tobytes()


def test_empty_dataset(tmp_path):
    Dt.write_dataset([], tmp_path / "empty")
    assert (tmp_path / "empty" / "manifest.json").exists()
    assert Dt.read_dataset(tmp_path / "empty") == []


def test_read_errors(tmp_path):
    with pytest.raises(Dt.DataError):
        Dt.read_dataset(tmp_path / "missing")
    spec = Dt.DomainSpec()
    scenes = Dt.generate_split(spec, 2, 0, "x")
    Dt.write_dataset(scenes, tmp_path / "broken")
    (tmp_path / "broken" / "images" / "x_00000.ppm").write_bytes(b"P5 nonsense")
    with pytest.raises(Dt.DataError) as err:
        Dt.read_dataset(tmp_path / "broken")
    assert "x_00000" in str(err.value)


def test_split_scene_ids_and_determinism():
    spec = Dt.DomainSpec()
    a = Dt.generate_split(spec, 3, 9, "train")
    b = Dt.generate_split(spec, 3, 9, "train")
    assert [s.id for s in a] == ["train_00000", "train_00001", "train_00002"]
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
