import numpy as np
import pytest

from roomnet.data import (
    MIN_ALBEDO_GAP,
    augment_flip,
    generate_dataset,
    generate_synthetic_scene,
    layout_is_valid,
    load_dataset,
    load_samples,
    preprocess,
    resize_bilinear,
    sample_layout,
    write_dataset,
)
from roomnet.errors import DatasetLoadError, InvalidArgumentError
from roomnet.geometry import flip_layout, rasterize_layout
from roomnet.imageio import read_image, to_uint8, write_image


@pytest.mark.parametrize("t", range(11))
def test_generated_scenes_are_valid(t):
    for seed in range(5):
        s = generate_synthetic_scene(seed, t, 64, 80, occluders=2)
        assert s.image.shape == (3, 64, 80)
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert s.layout.room_type == t and (s.layout.width, s.layout.height) == (80, 64)
        assert layout_is_valid(s.layout)


def test_generation_is_a_pure_function_of_seed():
    a = generate_synthetic_scene(7, 3, 48, 48, occluders=1)
    b = generate_synthetic_scene(7, 3, 48, 48, occluders=1)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.layout.keypoints, b.layout.keypoints)
    c = generate_synthetic_scene(8, 3, 48, 48, occluders=1)
    assert not np.array_equal(a.image, c.image)


def test_occluders_leave_ground_truth_untouched():
    clean = generate_synthetic_scene(11, 0, 60, 60, occluders=0)
    busy = generate_synthetic_scene(11, 0, 60, 60, occluders=4)
    np.testing.assert_array_equal(clean.layout.keypoints, busy.layout.keypoints)
    assert not np.array_equal(clean.image, busy.image)


def test_surfaces_have_distinct_albedo():
    for seed in range(10):
        alb = generate_synthetic_scene(seed, 0, 40, 40).metadata["albedo"]
        gaps = np.abs(alb[:, None] - alb[None]).max(axis=2)
        assert gaps[np.triu_indices(5, 1)].min() >= MIN_ALBEDO_GAP


def test_surface_colours_are_separable_in_the_image():
    s = generate_synthetic_scene(3, 0, 80, 80, noise=0.0)
    labels = rasterize_layout(s.layout).labels
    means = np.array([s.image[:, labels == k].mean(axis=1) for k in np.unique(labels)])
    gaps = np.abs(means[:, None] - means[None]).max(axis=2)
    assert gaps[np.triu_indices(len(means), 1)].min() > 0.1


def test_dataset_cycles_types_and_is_deterministic():
    a = generate_dataset(22, 32, 32, seed=5)
    b = generate_dataset(22, 32, 32, seed=5)
    assert [s.layout.room_type for s in a] == list(range(11)) * 2
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
    only = generate_dataset(4, 32, 32, seed=5, types=[8, 9])
    assert [s.layout.room_type for s in only] == [8, 9, 8, 9]


def test_invalid_type_rejected():
    with pytest.raises(InvalidArgumentError):
        generate_synthetic_scene(0, 11, 32, 32)


def test_augment_flip_probabilities():
    s = generate_synthetic_scene(1, 1, 32, 40)
    assert augment_flip(s, np.random.default_rng(0), p=0.0) is s
    f = augment_flip(s, np.random.default_rng(0), p=1.0)
    np.testing.assert_array_equal(f.image, s.image[:, :, ::-1])
    np.testing.assert_array_equal(f.layout.keypoints, flip_layout(s.layout).keypoints)
    assert f.layout.room_type == s.layout.room_type
    ff = augment_flip(f, np.random.default_rng(0), p=1.0)
    np.testing.assert_array_equal(ff.image, s.image)


def test_resize_identity_and_constant():
    img = np.random.default_rng(0).random((3, 10, 12))
    np.testing.assert_array_equal(resize_bilinear(img, 10, 12), img)
    const = np.full((3, 7, 9), 0.25)
    np.testing.assert_allclose(resize_bilinear(const, 20, 4), 0.25, rtol=0, atol=1e-15)


def test_resize_doubling_interpolates_midpoints():
    ramp = np.tile(np.arange(4.0), (1, 1, 1)).reshape(1, 1, 4)
    out = resize_bilinear(ramp, 1, 8)[0, 0]
    np.testing.assert_allclose(out, [0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3])


def test_preprocess_scales_layout_and_subtracts_mean():
    s = generate_synthetic_scene(2, 0, 40, 60)
    img, lay = preprocess(to_uint8(s.image), 80, layout=s.layout)
    assert img.shape == (3, 80, 80) and (lay.width, lay.height) == (80, 80)
    np.testing.assert_allclose(lay.keypoints[:, 0], (s.layout.keypoints[:, 0] + 0.5) * 80 / 60 - 0.5)
    assert -0.5 <= img.min() and img.max() <= 0.5
    with pytest.raises(InvalidArgumentError):
        preprocess(np.zeros((0, 0, 3), np.uint8), 80)
    with pytest.raises(InvalidArgumentError):
        preprocess(np.zeros((5, 5)), 80)


def test_dataset_round_trip(tmp_path):
    samples = generate_dataset(5, 24, 32, seed=1)
    write_dataset(samples, tmp_path / "d")
    back = load_samples(load_dataset(tmp_path / "d"))
    assert len(back) == 5
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(to_uint8(a.image), to_uint8(b.image))
        np.testing.assert_allclose(a.layout.keypoints, b.layout.keypoints, rtol=0, atol=1e-9)
        assert a.layout.room_type == b.layout.room_type


def test_image_io_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    for name in ("a.ppm", "a.png"):
        write_image(tmp_path / name, img)
        np.testing.assert_array_equal(read_image(tmp_path / name), img)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(DatasetLoadError, match="manifest"):
        load_dataset(tmp_path)
    write_dataset(generate_dataset(2, 16, 16, seed=0), tmp_path)
    (tmp_path / "manifest.txt").write_text("00000.ppm\t00000.txt\n00001.ppm\n")
    with pytest.raises(DatasetLoadError, match=r"manifest.txt:2"):
        load_dataset(tmp_path)
    (tmp_path / "manifest.txt").write_text("00000.ppm\t00000.txt\nmissing.ppm\t00001.txt\n")
    with pytest.raises(DatasetLoadError, match=r"manifest.txt:2: file not found"):
        load_dataset(tmp_path)
    (tmp_path / "00000.txt").write_text("type 8\n1 2\n")
    (tmp_path / "manifest.txt").write_text("00000.ppm\t00000.txt\n")
    with pytest.raises(DatasetLoadError, match="00000.txt"):
        load_samples(load_dataset(tmp_path))


def test_sample_layout_respects_frame():
    rng = np.random.default_rng(0)
    for t in range(11):
        lay = sample_layout(rng, t, 30, 50)
        assert np.all(lay.keypoints[:, 0] >= -0.5) and np.all(lay.keypoints[:, 0] <= 49.5)
        assert np.all(lay.keypoints[:, 1] >= -0.5) and np.all(lay.keypoints[:, 1] <= 29.5)


def test_invariant_sweep_thousand_layouts_per_type():
    rng = np.random.default_rng(2024)
    for t in range(11):
        for _ in range(1000):
            lay = sample_layout(rng, t, 80, 80)
            assert lay.room_type == t and layout_is_valid(lay)


def test_clean_render_regions_match_label_map():
    for t in range(11):
        s = generate_synthetic_scene(t, t, 48, 48, occluders=0, noise=0.0, shading=0.0)
        labels = rasterize_layout(s.layout).labels
        colours = to_uint8(s.image).reshape(-1, 3)
        _, region = np.unique(colours, axis=0, return_inverse=True)
        region = region.reshape(labels.shape)
        # one colour per surface and one surface per colour
        pairs = set(zip(labels.ravel().tolist(), region.ravel().tolist()))
        assert len(pairs) == len(np.unique(labels)) == len(np.unique(region))
