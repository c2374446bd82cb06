"""Gaussian keypoint heatmaps: channel map, synthesis, decoding, flipping.

Heatmap cell ``(r, c)`` at scale ``s`` (input pixels per cell) is centered
at input coordinate ``((c + 0.5) * s - 0.5, (r + 0.5) * s - 0.5)``.
Arrays may carry leading batch axes; the channel axis is always ``-3``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from roomnet.errors import InvalidArgumentError, InvalidLayoutError
from roomnet.geometry import NUM_KEYPOINT_CHANNELS, NUM_ROOM_TYPES, Layout, room_type, room_type_table

DEFAULT_SIGMA = 5.0
FOREGROUND_THRESHOLD = 0.01
BACKGROUND_FACTOR = 0.2


class ChannelMap:
    """Bijection (room type, keypoint index) <-> output channel."""

    def __init__(self):
        counts = [spec.num_keypoints for spec in room_type_table()]
        self.offsets = tuple(int(o) for o in np.concatenate([[0], np.cumsum(counts)[:-1]]))
        self.counts = tuple(counts)
        self._pairs = tuple((t, k) for t, n in enumerate(counts) for k in range(n))

    def __len__(self) -> int:
        return len(self._pairs)

    def channel(self, t: int, k: int) -> int:
        if not 0 <= t < NUM_ROOM_TYPES or not 0 <= k < self.counts[t]:
            raise InvalidArgumentError(f"no channel for room type {t}, keypoint {k}")
        return self.offsets[t] + k

    def pair(self, channel: int) -> tuple[int, int]:
        return self._pairs[channel]

    def channels(self, t: int) -> slice:
        return slice(self.offsets[t], self.offsets[t] + self.counts[t])


CHANNELS = ChannelMap()


@dataclass
class HeatmapSet:
    data: np.ndarray  # (48, Ho, Wo)
    input_width: int
    input_height: int

    def __post_init__(self):
        if self.data.shape[-3] != NUM_KEYPOINT_CHANNELS:
            raise InvalidArgumentError(f"expected {NUM_KEYPOINT_CHANNELS} channels, got {self.data.shape[-3]}")
        sx = self.input_width / self.data.shape[-1]
        sy = self.input_height / self.data.shape[-2]
        if sx != sy:
            raise InvalidArgumentError(f"heatmap scale differs between axes ({sx} vs {sy})")

    @property
    def scale(self) -> float:
        return self.input_width / self.data.shape[-1]


def cell_centers(n_cells: int, scale: float) -> np.ndarray:
    return (np.arange(n_cells, dtype=np.float64) + 0.5) * scale - 0.5


def _output_grid(layout: Layout, out_res) -> tuple[int, int, float]:
    if np.isscalar(out_res):
        ho = wo = int(out_res)
    else:
        ho, wo = (int(v) for v in out_res)
    s = layout.width / wo
    if layout.height / ho != s:
        raise InvalidArgumentError(
            f"output grid {ho}x{wo} does not scale the {layout.height}x{layout.width} input uniformly")
    return ho, wo, s


def synthesize_heatmaps(layout: Layout, out_res, sigma: float = DEFAULT_SIGMA) -> HeatmapSet:
    """Unnormalized Gaussians (peak 1) at each keypoint; sigma is in input pixels."""
    if not isinstance(layout, Layout):
        raise InvalidLayoutError("synthesize_heatmaps expects a Layout")
    ho, wo, s = _output_grid(layout, out_res)
    xs, ys = cell_centers(wo, s), cell_centers(ho, s)
    data = np.zeros((NUM_KEYPOINT_CHANNELS, ho, wo), dtype=np.float64)
    base = CHANNELS.offsets[layout.room_type]
    for k, (kx, ky) in enumerate(layout.keypoints):
        gx = np.exp(-((xs - kx) ** 2) / (2 * sigma**2))
        gy = np.exp(-((ys - ky) ** 2) / (2 * sigma**2))
        data[base + k] = gy[:, None] * gx[None, :]
    return HeatmapSet(data, layout.width, layout.height)


def background_weight_mask(gt: HeatmapSet | np.ndarray, t: int, threshold: float = FOREGROUND_THRESHOLD,
                           factor: float = BACKGROUND_FACTOR) -> np.ndarray:
    """1 on foreground cells and ``factor`` on background cells of type ``t``'s channels, 0 elsewhere."""
    data = gt.data if isinstance(gt, HeatmapSet) else np.asarray(gt)
    room_type(t)
    w = np.zeros_like(data, dtype=np.float64)
    sl = CHANNELS.channels(t)
    w[..., sl, :, :] = np.where(data[..., sl, :, :] > threshold, 1.0, factor)
    return w


def heatmap_targets(layouts, out_res, sigma: float = DEFAULT_SIGMA, threshold: float = FOREGROUND_THRESHOLD,
                    factor: float = BACKGROUND_FACTOR) -> tuple[np.ndarray, np.ndarray]:
    """Stacked ground truth and weight masks, each (N, 48, Ho, Wo)."""
    gts, ws = [], []
    for layout in layouts:
        g = synthesize_heatmaps(layout, out_res, sigma).data
        gts.append(g)
        ws.append(background_weight_mask(g, layout.room_type, threshold, factor))
    return np.stack(gts), np.stack(ws)


def decode_keypoints(heatmaps: HeatmapSet | np.ndarray, t: int, scale: float | None = None) -> np.ndarray:
    """Argmax cell of each of type ``t``'s channels, as (K, 2) input coordinates.

    Ties go to the lowest flat index.  ``scale`` is required for raw arrays.
    """
    spec = room_type(t)
    if isinstance(heatmaps, HeatmapSet):
        data, scale = heatmaps.data, heatmaps.scale
    else:
        data = np.asarray(heatmaps)
        if scale is None:
            raise InvalidArgumentError("decode_keypoints needs the scale for a raw array")
    chans = data[CHANNELS.channels(t)]
    wo = chans.shape[-1]
    flat = chans.reshape(spec.num_keypoints, -1).argmax(axis=1)
    rows, cols = np.divmod(flat, wo)
    return np.stack([(cols + 0.5) * scale - 0.5, (rows + 0.5) * scale - 0.5], axis=1)


def _flip_perm() -> np.ndarray:
    perm = np.arange(NUM_KEYPOINT_CHANNELS)
    for spec in room_type_table():
        base = CHANNELS.offsets[spec.type_id]
        perm[base:base + spec.num_keypoints] = base + np.asarray(spec.flip_perm)
    return perm


FLIP_CHANNEL_PERM = _flip_perm()


def flip_heatmaps(heatmaps: HeatmapSet | np.ndarray):
    """Mirror every channel horizontally and permute channels into mirrored-layout order."""
    if isinstance(heatmaps, HeatmapSet):
        return HeatmapSet(flip_heatmaps(heatmaps.data), heatmaps.input_width, heatmaps.input_height)
    data = np.asarray(heatmaps)
    return np.ascontiguousarray(data[..., FLIP_CHANNEL_PERM, :, ::-1])


def average_heatmaps(h1, h2):
    a = h1.data if isinstance(h1, HeatmapSet) else np.asarray(h1)
    b = h2.data if isinstance(h2, HeatmapSet) else np.asarray(h2)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"cannot average heatmaps of shapes {a.shape} and {b.shape}")
    mean = (a + b) / 2
    if isinstance(h1, HeatmapSet):
        return HeatmapSet(mean, h1.input_width, h1.input_height)
    return mean


def to_gray_pages(heatmaps: HeatmapSet | np.ndarray) -> np.ndarray:
    """(48, Ho, Wo) uint8 pages with value round(255 * clip(h, 0, 1))."""
    data = heatmaps.data if isinstance(heatmaps, HeatmapSet) else np.asarray(heatmaps)
    return np.round(255 * np.clip(data, 0.0, 1.0)).astype(np.uint8)
