"""Synthetic boxy scenes, on-disk datasets, flip augmentation and preprocessing.

Scenes are built per room type from a jittered front-wall/corner template:
interior corners are sampled inside the frame and every boundary line is
cast from its corner away from a central point until it leaves the frame,
which gives the border keypoints.  The frame is
``[-0.5, W-0.5] x [-0.5, H-0.5]`` as in :mod:`roomnet.geometry`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from roomnet.errors import DatasetLoadError, GenerationFailedError, InvalidArgumentError, InvalidLayoutError
from roomnet.geometry import (
    NUM_ROOM_TYPES,
    Layout,
    _line_frame_params,
    flip_layout,
    frame,
    polygon_area,
    rasterize_layout,
    read_layout,
    room_type,
    surface_polygons,
    write_layout,
)
from roomnet.imageio import from_uint8, read_image, to_uint8, write_image

DEFAULT_MEAN = (0.5, 0.5, 0.5)
MAX_TRIES = 1000
MIN_SURFACE_FRACTION = 0.02
MIN_ALBEDO_GAP = 0.2


@dataclass
class SceneSample:
    image: np.ndarray          # (3, H, W) floats in [0, 1]
    layout: Layout
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------- keypoint sampling

def _exit(p, d, rect):
    """Where the ray p + t d (t > 0) leaves the frame."""
    q = (p[0] + d[0], p[1] + d[1])
    lo, hi = _line_frame_params(p, q, rect)
    # clamp away the last-ulp overshoot so border points sit exactly on the frame
    x = min(max(p[0] + hi * d[0], rect[0]), rect[2])
    y = min(max(p[1] + hi * d[1], rect[1]), rect[3])
    return (x, y)


def _away(corner, center, rng, jitter=0.25):
    d = np.asarray(corner, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    d = d / (np.linalg.norm(d) + 1e-12)
    return d + rng.uniform(-jitter, jitter, 2)


def _vflip(points, height):
    return [(x, (height - 1) - y) for x, y in points]


def _sample_keypoints(rng: np.random.Generator, t: int, h: int, w: int) -> list[tuple[float, float]]:
    rect = frame(w, h)
    fx = lambda u: -0.5 + u * w  # noqa: E731
    fy = lambda v: -0.5 + v * h  # noqa: E731
    u = rng.uniform

    if t == 0:
        c = (fx(u(0.4, 0.6)), fy(u(0.4, 0.6)))
        tl = (fx(u(0.15, 0.4)), fy(u(0.15, 0.4)))
        tr = (fx(u(0.6, 0.85)), fy(u(0.15, 0.4)))
        bl = (fx(u(0.15, 0.4)), fy(u(0.6, 0.85)))
        br = (fx(u(0.6, 0.85)), fy(u(0.6, 0.85)))
        return [tl, _exit(tl, _away(tl, c, rng), rect), bl, _exit(bl, _away(bl, c, rng), rect),
                tr, _exit(tr, _away(tr, c, rng), rect), br, _exit(br, _away(br, c, rng), rect)]
    if t in (1, 2):
        c = (fx(u(0.4, 0.6)), fy(u(0.15, 0.4)))
        bl = (fx(u(0.15, 0.4)), fy(u(0.55, 0.85)))
        br = (fx(u(0.6, 0.85)), fy(u(0.55, 0.85)))
        up_l = _exit(bl, (u(-0.15, 0.15), -1.0), rect)
        up_r = _exit(br, (u(-0.15, 0.15), -1.0), rect)
        pts = [up_l, bl, _exit(bl, _away(bl, c, rng), rect), up_r, br, _exit(br, _away(br, c, rng), rect)]
        if t == 1:
            return pts
        f = _vflip(pts, h)
        return [f[2], f[1], f[0], f[5], f[4], f[3]]
    if t in (3, 4):
        corner = (fx(u(0.3, 0.7)), fy(u(0.15, 0.45)))
        pts = [corner,
               _exit(corner, (-1.0, -u(0.15, 1.0)), rect),
               _exit(corner, (1.0, -u(0.15, 1.0)), rect),
               _exit(corner, (u(-0.15, 0.15), 1.0), rect)]
        if t == 3:
            return pts
        f = _vflip(pts, h)
        return [f[0], f[3], f[1], f[2]]
    if t == 5:
        top = (fx(u(0.3, 0.7)), fy(u(0.15, 0.4)))
        bottom = (top[0] + u(-0.08, 0.08) * w, fy(u(0.6, 0.85)))
        return [top,
                _exit(top, (-1.0, -u(0.15, 1.0)), rect),
                _exit(top, (1.0, -u(0.15, 1.0)), rect),
                bottom,
                _exit(bottom, (-1.0, u(0.15, 1.0)), rect),
                _exit(bottom, (1.0, u(0.15, 1.0)), rect)]
    x0, y0, x1, y1 = rect
    if t == 6:
        return [(x0, fy(u(0.1, 0.4))), (x1, fy(u(0.1, 0.4))), (x0, fy(u(0.6, 0.9))), (x1, fy(u(0.6, 0.9)))]
    if t == 7:
        a, b = u(0.15, 0.4), u(0.6, 0.85)
        return [(fx(a), y0), (fx(a + u(-0.08, 0.08)), y1), (fx(b), y0), (fx(b + u(-0.08, 0.08)), y1)]
    if t == 8:
        a = u(0.25, 0.75)
        return [(fx(a), y0), (fx(a + u(-0.1, 0.1)), y1)]
    if t == 9:
        return [(x0, fy(u(0.15, 0.5))), (x1, fy(u(0.15, 0.5)))]
    return [(x0, fy(u(0.5, 0.85))), (x1, fy(u(0.5, 0.85)))]


def layout_is_valid(layout: Layout, min_fraction: float = MIN_SURFACE_FRACTION) -> bool:
    """Every surface is a clockwise polygon of reasonable size and together they tile the frame."""
    w, h = layout.width, layout.height
    areas = [polygon_area(poly) for _, poly in surface_polygons(layout, clip=False)]
    if min(areas) < min_fraction * w * h:
        return False
    return abs(sum(areas) - w * h) <= 1e-6 * w * h


def sample_layout(rng: np.random.Generator, t: int, height: int, width: int) -> Layout:
    room_type(t)
    for _ in range(MAX_TRIES):
        layout = Layout(t, np.asarray(_sample_keypoints(rng, t, height, width)), width, height)
        if layout_is_valid(layout):
            return layout
    raise GenerationFailedError(f"no valid layout of type {t} after {MAX_TRIES} tries")


# ---------------------------------------------------------------- rendering

def _albedos(rng: np.random.Generator) -> np.ndarray:
    for _ in range(MAX_TRIES):
        cols = rng.uniform(0.1, 0.9, size=(5, 3))
        gaps = np.abs(cols[:, None, :] - cols[None, :, :]).max(axis=2)
        if gaps[np.triu_indices(5, 1)].min() >= MIN_ALBEDO_GAP:
            return cols
    raise GenerationFailedError("could not draw distinct surface albedos")


def render_labels(labels: np.ndarray, albedo: np.ndarray, shading: np.ndarray) -> np.ndarray:
    """Per-surface albedo plus a per-surface linear gradient; returns (3, H, W)."""
    h, w = labels.shape
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx - (w - 1) / 2) / w
    v = (yy - (h - 1) / 2) / h
    ramp = shading[labels, 0] * u + shading[labels, 1] * v
    return np.moveaxis(albedo[labels], -1, 0) + ramp[None]


def generate_synthetic_scene(rng, t: int, height: int, width: int, occluders: int = 0,
                             noise: float = 0.02, shading: float = 0.08) -> SceneSample:
    """Render a random scene of room type ``t``.

    ``rng`` may be a Generator or an integer seed; the sample is a pure
    function of (seed, t, height, width, occluders).  Occluders are painted
    after the layout is fixed and never change the ground truth.
    """
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng) if seed is not None else rng
    if not 0 <= int(t) < NUM_ROOM_TYPES:
        raise InvalidArgumentError(f"room type {t} outside [0, {NUM_ROOM_TYPES - 1}]")
    layout = sample_layout(rng, int(t), height, width)
    labels = rasterize_layout(layout).labels
    albedo = _albedos(rng)
    grads = rng.uniform(-shading, shading, size=(5, 2))
    image = render_labels(labels, albedo, grads)
    if noise > 0:
        image = image + rng.normal(0.0, noise, size=image.shape)
    for _ in range(occluders):
        rh = int(rng.integers(max(1, height // 10), max(2, height // 3)))
        rw = int(rng.integers(max(1, width // 10), max(2, width // 3)))
        top = int(rng.integers(0, height - rh + 1))
        left = int(rng.integers(0, width - rw + 1))
        image[:, top:top + rh, left:left + rw] = rng.uniform(0.0, 1.0, size=(3, 1, 1))
    image = np.clip(image, 0.0, 1.0)
    meta = {"seed": None if seed is None else int(seed), "occluders": occluders, "room_type": int(t),
            "albedo": albedo, "shading": grads}
    return SceneSample(image, layout, meta)


def generate_dataset(n: int, height: int, width: int, seed: int, occluders=(0, 2),
                     types: Optional[Sequence[int]] = None) -> list[SceneSample]:
    """``n`` scenes cycling through ``types`` (default all 11), each seeded from ``seed``."""
    types = list(range(NUM_ROOM_TYPES)) if types is None else list(types)
    seeds = np.random.SeedSequence(seed).generate_state(n)
    out = []
    for i in range(n):
        rng = np.random.default_rng(int(seeds[i]))
        k = int(rng.integers(occluders[0], occluders[1] + 1))
        sample = generate_synthetic_scene(rng, types[i % len(types)], height, width, k)
        sample.metadata["seed"] = int(seeds[i])
        out.append(sample)
    return out


# ---------------------------------------------------------------- augmentation + preprocessing

def augment_flip(sample: SceneSample, rng: np.random.Generator, p: float = 0.5) -> SceneSample:
    """With probability ``p`` mirror the image columns and the layout."""
    if rng.random() >= p:
        return sample
    return SceneSample(np.ascontiguousarray(sample.image[:, :, ::-1]), flip_layout(sample.layout),
                       dict(sample.metadata, flipped=not sample.metadata.get("flipped", False)))


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a (C, H, W) array with pixel-center-aligned bilinear interpolation."""
    c, h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()
    y0, y1, fy = _bilinear_axis(h, height)
    x0, x1, fx = _bilinear_axis(w, width)
    rows = image[:, y0, :] * (1 - fy)[None, :, None] + image[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]


def preprocess(image: np.ndarray, size: int, mean=DEFAULT_MEAN, layout: Optional[Layout] = None):
    """Resize to ``size`` x ``size``, scale to [0, 1] and subtract the per-channel mean.

    Accepts (H, W, 3) uint8 or (3, H, W) floats already in [0, 1].  When a
    layout is given it is rescaled with the image and returned alongside.
    """
    arr = np.asarray(image)
    if arr.size == 0:
        raise InvalidArgumentError("cannot preprocess an empty image")
    if arr.dtype == np.uint8:
        arr = from_uint8(arr)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise InvalidArgumentError(f"expected a (3, H, W) float or (H, W, 3) uint8 image, got {arr.shape}")
    _, h, w = arr.shape
    out = resize_bilinear(arr, size, size) - np.asarray(mean, dtype=np.float64)[:, None, None]
    if layout is None:
        return out
    return out, layout.scaled(size / w, size / h, size, size)


# ---------------------------------------------------------------- datasets on disk

@dataclass
class DatasetManifest:
    root: Path
    pairs: list  # (image path, layout path), absolute
    split: str = ""

    def __len__(self) -> int:
        return len(self.pairs)


def write_dataset(samples: Sequence[SceneSample], root, split: str = "", ext: str = ".ppm") -> DatasetManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines, pairs = [], []
    for i, s in enumerate(samples):
        img_name, lay_name = f"{i:05d}{ext}", f"{i:05d}.txt"
        write_image(root / img_name, to_uint8(s.image))
        write_layout(s.layout, root / lay_name)
        lines.append(f"{img_name}\t{lay_name}")
        pairs.append((root / img_name, root / lay_name))
    (root / "manifest.txt").write_text("".join(ln + "\n" for ln in lines))
    return DatasetManifest(root, pairs, split or root.name)


def load_dataset(path, split: str = "") -> DatasetManifest:
    """Parse and validate ``<path>/manifest.txt``."""
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise DatasetLoadError(f"no manifest.txt in {root}")
    pairs = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise DatasetLoadError(f"{manifest}:{lineno}: expected 'image<TAB>layout', got {line!r}")
        img, lay = (root / f.strip() for f in fields)
        for f in (img, lay):
            if not f.is_file():
                raise DatasetLoadError(f"{manifest}:{lineno}: file not found: {f}")
        pairs.append((img, lay))
    return DatasetManifest(root, pairs, split or root.name)


def load_samples(manifest: DatasetManifest) -> list[SceneSample]:
    out = []
    for img_path, lay_path in manifest.pairs:
        img = read_image(img_path)
        try:
            layout = read_layout(lay_path, img.shape[1], img.shape[0])
        except InvalidLayoutError as exc:
            raise DatasetLoadError(str(exc)) from None
        out.append(SceneSample(from_uint8(img), layout, {"source": str(img_path)}))
    return out
