import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import argmax_loops, gaussian_heatmap_loops
from roomnet.data import sample_layout
from roomnet.errors import InvalidArgumentError, InvalidLayoutError
from roomnet.geometry import Layout, flip_layout, room_type_table
from roomnet.heatmaps import (
    CHANNELS,
    FLIP_CHANNEL_PERM,
    HeatmapSet,
    average_heatmaps,
    background_weight_mask,
    cell_centers,
    decode_keypoints,
    flip_heatmaps,
    heatmap_targets,
    synthesize_heatmaps,
    to_gray_pages,
)


def test_channel_map_is_a_bijection():
    seen = set()
    for spec in room_type_table():
        for k in range(spec.num_keypoints):
            ch = CHANNELS.channel(spec.type_id, k)
            assert CHANNELS.pair(ch) == (spec.type_id, k)
            seen.add(ch)
    assert seen == set(range(48))
    assert CHANNELS.offsets[:3] == (0, 8, 14)
    with pytest.raises(InvalidArgumentError):
        CHANNELS.channel(8, 2)


def test_synthesis_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for t in (0, 5, 9):
        lay = sample_layout(rng, t, 80, 80)
        hm = synthesize_heatmaps(lay, 10).data
        for k, (x, y) in enumerate(lay.keypoints):
            ref = gaussian_heatmap_loops(x, y, 10, 10, 8.0, 5.0)
            np.testing.assert_allclose(hm[CHANNELS.channel(t, k)], ref, rtol=1e-13, atol=1e-300)
        others = np.ones(48, bool)
        others[CHANNELS.channels(t)] = False
        assert not hm[others].any()


def test_peak_is_one_at_cell_center():
    x = cell_centers(10, 8.0)[3]
    y = cell_centers(10, 8.0)[6]
    lay = Layout(8, np.array([[x, y], [x, 70.0]]), 80, 80)
    hm = synthesize_heatmaps(lay, 10).data
    assert hm[CHANNELS.channel(8, 0), 6, 3] == 1.0


def test_nonuniform_scale_rejected():
    lay = Layout(8, np.array([[1.0, 2.0], [3.0, 4.0]]), 80, 60)
    with pytest.raises(InvalidArgumentError):
        synthesize_heatmaps(lay, 10)
    with pytest.raises(InvalidLayoutError):
        synthesize_heatmaps("not a layout", 10)


def test_weight_mask_values():
    lay = sample_layout(np.random.default_rng(1), 3, 80, 80)
    hm = synthesize_heatmaps(lay, 10)
    w = background_weight_mask(hm, 3)
    sl = CHANNELS.channels(3)
    fg = hm.data[sl] > 0.01
    np.testing.assert_array_equal(w[sl][fg], 1.0)
    np.testing.assert_array_equal(w[sl][~fg], 0.2)
    outside = np.ones(48, bool)
    outside[sl] = False
    assert not w[outside].any()
    # an all-zero channel of the active type is uniformly 0.2
    assert np.all(background_weight_mask(np.zeros((48, 4, 4)), 8)[CHANNELS.channels(8)] == 0.2)


def test_heatmap_targets_stack():
    rng = np.random.default_rng(2)
    lays = [sample_layout(rng, t, 80, 80) for t in (0, 10)]
    gt, w = heatmap_targets(lays, 10)
    assert gt.shape == w.shape == (2, 48, 10, 10)
    np.testing.assert_array_equal(gt[1], synthesize_heatmaps(lays[1], 10).data)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), t=st.integers(0, 10))
def test_decode_matches_bruteforce_argmax(seed, t):
    rng = np.random.default_rng(seed)
    hm = rng.integers(0, 4, size=(48, 6, 6)).astype(float)  # plenty of ties
    got = decode_keypoints(hm, t, scale=4.0)
    for k, ch in enumerate(range(CHANNELS.offsets[t], CHANNELS.offsets[t] + CHANNELS.counts[t])):
        r, c = argmax_loops(hm[ch])
        assert tuple(got[k]) == ((c + 0.5) * 4 - 0.5, (r + 0.5) * 4 - 0.5)


def test_decode_needs_scale_for_raw_arrays():
    with pytest.raises(InvalidArgumentError):
        decode_keypoints(np.zeros((48, 4, 4)), 0)


@pytest.mark.parametrize("t", range(11))
def test_round_trip_within_half_cell(t):
    rng = np.random.default_rng(40 + t)
    for _ in range(30):
        lay = sample_layout(rng, t, 80, 80)
        dec = decode_keypoints(synthesize_heatmaps(lay, 10), t)
        assert np.all(np.abs(dec - lay.keypoints) <= 4.0)


def test_flip_heatmaps_involution_and_perm():
    rng = np.random.default_rng(3)
    hm = rng.normal(size=(2, 48, 5, 7))
    np.testing.assert_array_equal(flip_heatmaps(flip_heatmaps(hm)), hm)
    np.testing.assert_array_equal(FLIP_CHANNEL_PERM[FLIP_CHANNEL_PERM], np.arange(48))


def test_flip_heatmaps_tracks_flipped_layout_on_symmetric_grid():
    # keypoints on cell centers mirror onto cell centers, so synthesis commutes with flipping
    rng = np.random.default_rng(4)
    centers = cell_centers(10, 8.0)
    for t in range(11):
        lay = sample_layout(rng, t, 80, 80)
        snapped = np.column_stack([centers[np.abs(lay.keypoints[:, :1] - centers).argmin(1)],
                                   centers[np.abs(lay.keypoints[:, 1:] - centers).argmin(1)]])
        lay = Layout(t, snapped, 80, 80)
        a = flip_heatmaps(synthesize_heatmaps(lay, 10).data)
        b = synthesize_heatmaps(flip_layout(lay), 10).data
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-300)


def test_average_and_gray_pages():
    a = HeatmapSet(np.zeros((48, 2, 2)), 16, 16)
    b = HeatmapSet(np.ones((48, 2, 2)) * 1.2, 16, 16)
    avg = average_heatmaps(a, b)
    assert isinstance(avg, HeatmapSet) and np.all(avg.data == 0.6)
    pages = to_gray_pages(avg)
    assert pages.dtype == np.uint8 and np.all(pages == 153)
    assert np.all(to_gray_pages(b) == 255)
    with pytest.raises(InvalidArgumentError):
        average_heatmaps(np.zeros((48, 2, 2)), np.zeros((48, 3, 3)))
