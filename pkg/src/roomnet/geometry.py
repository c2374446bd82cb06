"""Room-type taxonomy, layout polygons, rasterization and the two layout metrics.

Coordinates are continuous image coordinates with pixel ``(i, j)`` centered
at ``x=i, y=j``; the visible frame is the rectangle
``[-0.5, W-0.5] x [-0.5, H-0.5]``.  Keypoints of a layout may fall outside
the frame.

Every surface polygon is listed clockwise as seen on screen (y down).  An
edge flagged *open* runs along the frame: its endpoints are keypoints on
the frame border and the polygon follows the border clockwise between them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from roomnet.errors import InvalidArgumentError, InvalidLayoutError

NUM_ROOM_TYPES = 11
NUM_KEYPOINT_CHANNELS = 48

CEILING, FLOOR, LEFT_WALL, FRONT_WALL, RIGHT_WALL = range(5)
SURFACE_NAMES = ("ceiling", "floor", "left_wall", "front_wall", "right_wall")
_MIRROR_LABEL = np.array([CEILING, FLOOR, RIGHT_WALL, FRONT_WALL, LEFT_WALL], dtype=np.uint8)


@dataclass(frozen=True)
class Surface:
    label: int
    polygon: tuple[int, ...]
    open_edges: tuple[bool, ...]  # open_edges[i] is the edge polygon[i] -> polygon[i+1]


@dataclass(frozen=True)
class RoomTypeSpec:
    type_id: int
    num_keypoints: int
    edges: tuple[tuple[int, int], ...]
    surfaces: tuple[Surface, ...]
    border: tuple[bool, ...]      # keypoint lies on the frame border
    flip_perm: tuple[int, ...]    # mirrored[i] = mirror(original[flip_perm[i]])


def _s(label, polygon, open_from=()):
    """Surface helper: ``open_from`` lists polygon positions whose outgoing edge is open."""
    return Surface(label, tuple(polygon), tuple(i in open_from for i in range(len(polygon))))


# fmt: off
# Keypoint meaning per type (I = interior corner, B = border point):
#  0: 0 TL front-wall corner I, 1 its ceiling line exit B, 2 BL corner I, 3 its floor line exit B,
#     4 TR corner I, 5 its ceiling line exit B, 6 BR corner I, 7 its floor line exit B
#  1: 0/3 top exits of the two vertical wall edges B, 1/4 front-wall floor corners I, 2/5 floor exits B
#  2: 0/3 ceiling exits B, 1/4 front-wall ceiling corners I, 2/5 bottom exits of the vertical edges B
#  3: 0 ceiling corner I, 1 left ceiling exit B, 2 right ceiling exit B, 3 bottom exit of wall edge B
#  4: 0 floor corner I, 1 top exit of wall edge B, 2 left floor exit B, 3 right floor exit B
#  5: 0 ceiling corner I, 1/2 ceiling exits B, 3 floor corner I, 4/5 floor exits B
#  6: 0/1 ceiling line left/right B, 2/3 floor line left/right B
#  7: 0/1 left wall edge top/bottom B, 2/3 right wall edge top/bottom B
#  8: wall-wall edge top/bottom B;  9: ceiling line left/right B;  10: floor line left/right B
_TABLE = (
    RoomTypeSpec(0, 8, ((0, 4), (4, 6), (6, 2), (2, 0), (0, 1), (2, 3), (4, 5), (6, 7)),
                 (_s(CEILING, (4, 0, 1, 5), (2,)), _s(FLOOR, (2, 6, 7, 3), (2,)),
                  _s(LEFT_WALL, (0, 2, 3, 1), (2,)), _s(FRONT_WALL, (0, 4, 6, 2)),
                  _s(RIGHT_WALL, (4, 5, 7, 6), (1,))),
                 (False, True, False, True, False, True, False, True), (4, 5, 6, 7, 0, 1, 2, 3)),
    RoomTypeSpec(1, 6, ((0, 1), (1, 2), (1, 4), (3, 4), (4, 5)),
                 (_s(FLOOR, (1, 4, 5, 2), (2,)), _s(LEFT_WALL, (0, 1, 2), (2,)),
                  _s(FRONT_WALL, (0, 3, 4, 1), (0,)), _s(RIGHT_WALL, (3, 5, 4), (0,))),
                 (True, False, True, True, False, True), (3, 4, 5, 0, 1, 2)),
    RoomTypeSpec(2, 6, ((0, 1), (1, 2), (1, 4), (3, 4), (4, 5)),
                 (_s(CEILING, (4, 1, 0, 3), (2,)), _s(LEFT_WALL, (1, 2, 0), (1,)),
                  _s(FRONT_WALL, (1, 4, 5, 2), (2,)), _s(RIGHT_WALL, (4, 3, 5), (1,))),
                 (True, False, True, True, False, True), (3, 4, 5, 0, 1, 2)),
    RoomTypeSpec(3, 4, ((0, 1), (0, 2), (0, 3)),
                 (_s(CEILING, (0, 1, 2), (1,)), _s(LEFT_WALL, (0, 3, 1), (1,)),
                  _s(RIGHT_WALL, (0, 2, 3), (1,))),
                 (False, True, True, True), (0, 2, 1, 3)),
    RoomTypeSpec(4, 4, ((0, 1), (0, 2), (0, 3)),
                 (_s(FLOOR, (0, 3, 2), (1,)), _s(LEFT_WALL, (0, 2, 1), (1,)),
                  _s(RIGHT_WALL, (0, 1, 3), (1,))),
                 (False, True, True, True), (0, 1, 3, 2)),
    RoomTypeSpec(5, 6, ((0, 1), (0, 2), (0, 3), (3, 4), (3, 5)),
                 (_s(CEILING, (0, 1, 2), (1,)), _s(FLOOR, (3, 5, 4), (1,)),
                  _s(LEFT_WALL, (0, 3, 4, 1), (2,)), _s(RIGHT_WALL, (0, 2, 5, 3), (1,))),
                 (False, True, True, False, True, True), (0, 2, 1, 3, 5, 4)),
    RoomTypeSpec(6, 4, ((0, 1), (2, 3)),
                 (_s(CEILING, (1, 0), (1,)), _s(FLOOR, (2, 3), (1,)),
                  _s(FRONT_WALL, (0, 1, 3, 2), (1, 3))),
                 (True, True, True, True), (1, 0, 3, 2)),
    RoomTypeSpec(7, 4, ((0, 1), (2, 3)),
                 (_s(LEFT_WALL, (0, 1), (1,)), _s(FRONT_WALL, (0, 2, 3, 1), (0, 2)),
                  _s(RIGHT_WALL, (3, 2), (1,))),
                 (True, True, True, True), (2, 3, 0, 1)),
    RoomTypeSpec(8, 2, ((0, 1),),
                 (_s(LEFT_WALL, (0, 1), (1,)), _s(RIGHT_WALL, (1, 0), (1,))),
                 (True, True), (0, 1)),
    RoomTypeSpec(9, 2, ((0, 1),),
                 (_s(CEILING, (1, 0), (1,)), _s(FRONT_WALL, (0, 1), (1,))),
                 (True, True), (1, 0)),
    RoomTypeSpec(10, 2, ((0, 1),),
                 (_s(FRONT_WALL, (1, 0), (1,)), _s(FLOOR, (0, 1), (1,))),
                 (True, True), (1, 0)),
)
# fmt: on


def validate_table(table: Sequence[RoomTypeSpec]) -> None:
    """Schema check for the room-type table; raises InvalidArgumentError."""
    if len(table) != NUM_ROOM_TYPES:
        raise InvalidArgumentError(f"expected {NUM_ROOM_TYPES} room types, got {len(table)}")
    total = 0
    for tid, spec in enumerate(table):
        k = spec.num_keypoints
        total += k
        if spec.type_id != tid:
            raise InvalidArgumentError(f"type at position {tid} has id {spec.type_id}")
        if len(spec.border) != k or sorted(spec.flip_perm) != list(range(k)):
            raise InvalidArgumentError(f"type {tid}: border flags / flip permutation do not cover {k} keypoints")
        refs = [i for e in spec.edges for i in e] + [i for s in spec.surfaces for i in s.polygon]
        if any(not 0 <= i < k for i in refs):
            raise InvalidArgumentError(f"type {tid}: keypoint index out of range")
        for s in spec.surfaces:
            if len(s.open_edges) != len(s.polygon):
                raise InvalidArgumentError(f"type {tid}: open flags do not match polygon length")
            for i, is_open in enumerate(s.open_edges):
                a, b = s.polygon[i], s.polygon[(i + 1) % len(s.polygon)]
                if is_open and not (spec.border[a] and spec.border[b]):
                    raise InvalidArgumentError(f"type {tid}: open edge {a}->{b} joins non-border keypoints")
        for i in range(k):
            if spec.border[i] and len(_anchors(spec, i)) != 1:
                raise InvalidArgumentError(f"type {tid}: border keypoint {i} must lie on exactly one edge")
    if total != NUM_KEYPOINT_CHANNELS:
        raise InvalidArgumentError(f"keypoint counts sum to {total}, expected {NUM_KEYPOINT_CHANNELS}")


def _anchors(spec: RoomTypeSpec, k: int) -> list[int]:
    return [b if a == k else a for a, b in spec.edges if k in (a, b)]


def room_type_table() -> tuple[RoomTypeSpec, ...]:
    return _TABLE


validate_table(_TABLE)


def room_type(t: int) -> RoomTypeSpec:
    if not 0 <= int(t) < NUM_ROOM_TYPES:
        raise InvalidLayoutError(f"room type {t} outside [0, {NUM_ROOM_TYPES - 1}]")
    return _TABLE[int(t)]


@dataclass
class Layout:
    room_type: int
    keypoints: np.ndarray  # (K, 2) as (x, y)
    width: int
    height: int

    def __post_init__(self):
        self.room_type = int(self.room_type)
        spec = room_type(self.room_type)
        kps = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        if kps.shape[0] != spec.num_keypoints:
            raise InvalidLayoutError(
                f"room type {self.room_type} has {spec.num_keypoints} keypoints, got {kps.shape[0]}")
        if not np.all(np.isfinite(kps)):
            raise InvalidLayoutError("keypoint coordinates must be finite")
        if self.width < 1 or self.height < 1:
            raise InvalidLayoutError(f"image size must be positive, got {self.width}x{self.height}")
        self.keypoints = kps

    @property
    def spec(self) -> RoomTypeSpec:
        return _TABLE[self.room_type]

    def scaled(self, sx: float, sy: float, width: int, height: int) -> "Layout":
        """Rescale about pixel centers, matching a resize of the image to ``width`` x ``height``."""
        kps = self.keypoints.copy()
        kps[:, 0] = (kps[:, 0] + 0.5) * sx - 0.5
        kps[:, 1] = (kps[:, 1] + 0.5) * sy - 0.5
        return Layout(self.room_type, kps, width, height)


@dataclass
class SegmentationMap:
    labels: np.ndarray  # (H, W) uint8 surface labels

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


class Segment(NamedTuple):
    start: tuple[float, float]
    end: tuple[float, float]
    kind: str  # "edge" for a drawing edge, "extension" for its continuation to the frame


# ---------------------------------------------------------------- frame helpers

def frame(width: int, height: int) -> tuple[float, float, float, float]:
    return -0.5, -0.5, width - 0.5, height - 0.5


def _line_frame_params(p, q, rect):
    """Parameters (t_enter, t_exit) where the line p + t (q - p) lies in rect, or None."""
    x0, y0, x1, y1 = rect
    d = (q[0] - p[0], q[1] - p[1])
    lo, hi = -math.inf, math.inf
    for pc, dc, a, b in ((p[0], d[0], x0, x1), (p[1], d[1], y0, y1)):
        if dc == 0:
            if pc < a or pc > b:
                return None
            continue
        ta, tb = (a - pc) / dc, (b - pc) / dc
        lo, hi = max(lo, min(ta, tb)), min(hi, max(ta, tb))
    if lo > hi or not math.isfinite(lo) or not math.isfinite(hi):
        return None
    return lo, hi


def _on_frame(p, rect, tol=1e-9) -> bool:
    x0, y0, x1, y1 = rect
    inside = x0 - tol <= p[0] <= x1 + tol and y0 - tol <= p[1] <= y1 + tol
    near = min(abs(p[0] - x0), abs(p[0] - x1), abs(p[1] - y0), abs(p[1] - y1)) <= tol
    return inside and near


def snap_border_keypoints(layout: Layout) -> np.ndarray:
    """Move each border keypoint along its drawing edge onto the frame.

    Keypoints already on the frame are left untouched, so ground-truth
    layouts are fixed points.  Predicted layouts usually are not (decoded
    keypoints sit on heatmap cell centers).
    """
    spec = layout.spec
    rect = frame(layout.width, layout.height)
    kps = layout.keypoints.copy()
    src = layout.keypoints
    for k in range(spec.num_keypoints):
        if not spec.border[k]:
            continue
        p = tuple(src[k])
        if _on_frame(p, rect):
            continue
        anchor = tuple(src[_anchors(spec, k)[0]])
        if anchor == p:
            continue
        params = _line_frame_params(anchor, p, rect)
        if params is None:
            continue
        t = params[1]
        kps[k] = (anchor[0] + t * (p[0] - anchor[0]), anchor[1] + t * (p[1] - anchor[1]))
    return kps


def _perimeter_pos(p, rect) -> float:
    x0, y0, x1, y1 = rect
    w, h = x1 - x0, y1 - y0
    dists = (abs(p[1] - y0), abs(p[0] - x1), abs(p[1] - y1), abs(p[0] - x0))
    side = int(np.argmin(dists))
    if side == 0:
        return min(max(p[0] - x0, 0.0), w)
    if side == 1:
        return w + min(max(p[1] - y0, 0.0), h)
    if side == 2:
        return w + h + min(max(x1 - p[0], 0.0), w)
    return 2 * w + h + min(max(y1 - p[1], 0.0), h)


def _border_walk(a, b, rect) -> list[tuple[float, float]]:
    """Frame corners met walking clockwise (on screen) from a to b."""
    x0, y0, x1, y1 = rect
    w, h = x1 - x0, y1 - y0
    perim = 2 * (w + h)
    corners = ((0.0, (x0, y0)), (w, (x1, y0)), (w + h, (x1, y1)), (2 * w + h, (x0, y1)))
    sa, sb = _perimeter_pos(a, rect), _perimeter_pos(b, rect)
    span = (sb - sa) % perim
    out = []
    for s, c in sorted(corners, key=lambda sc: (sc[0] - sa) % perim):
        offset = (s - sa) % perim
        if 0 < offset < span:
            out.append(c)
    return out


def clip_polygon(poly: Sequence[tuple[float, float]], rect) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of a polygon against an axis-aligned rectangle."""
    x0, y0, x1, y1 = rect
    planes = (
        (lambda p: p[0] >= x0, lambda p, q: _cross_x(p, q, x0)),
        (lambda p: p[0] <= x1, lambda p, q: _cross_x(p, q, x1)),
        (lambda p: p[1] >= y0, lambda p, q: _cross_y(p, q, y0)),
        (lambda p: p[1] <= y1, lambda p, q: _cross_y(p, q, y1)),
    )
    out = list(poly)
    for inside, cut in planes:
        if not out:
            break
        src, out = out, []
        prev = src[-1]
        for cur in src:
            if inside(cur):
                if not inside(prev):
                    out.append(cut(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cut(prev, cur))
            prev = cur
    return out


def _cross_x(p, q, x):
    t = (x - p[0]) / (q[0] - p[0])
    return (x, p[1] + t * (q[1] - p[1]))


def _cross_y(p, q, y):
    t = (y - p[1]) / (q[1] - p[1])
    return (p[0] + t * (q[0] - p[0]), y)


def surface_polygons(layout: Layout, clip: bool = True) -> list[tuple[int, list[tuple[float, float]]]]:
    """(label, vertex list) per surface in table order, border walks expanded."""
    rect = frame(layout.width, layout.height)
    kps = snap_border_keypoints(layout)
    out = []
    for surf in layout.spec.surfaces:
        verts: list[tuple[float, float]] = []
        n = len(surf.polygon)
        for i, k in enumerate(surf.polygon):
            p = (float(kps[k, 0]), float(kps[k, 1]))
            verts.append(p)
            if surf.open_edges[i]:
                q = kps[surf.polygon[(i + 1) % n]]
                verts.extend(_border_walk(p, (float(q[0]), float(q[1])), rect))
        if clip:
            verts = clip_polygon(verts, rect)
        out.append((surf.label, verts))
    return out


def polygon_area(poly: Sequence[tuple[float, float]]) -> float:
    """Signed shoelace area; positive for clockwise-on-screen (y down) order."""
    if len(poly) < 3:
        return 0.0
    pts = np.asarray(poly, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


# ---------------------------------------------------------------- operations

def layout_to_edges(layout: Layout) -> list[Segment]:
    """Drawing edges of the layout, plus extensions of border keypoints to the frame."""
    if not isinstance(layout, Layout):
        raise InvalidLayoutError("layout_to_edges expects a Layout")
    kps = layout.keypoints
    snapped = snap_border_keypoints(layout)
    segs = []
    for a, b in layout.spec.edges:
        segs.append(Segment(tuple(kps[a]), tuple(kps[b]), "edge"))
    for a, b in layout.spec.edges:
        for k in (a, b):
            if layout.spec.border[k] and not np.array_equal(snapped[k], kps[k]):
                segs.append(Segment(tuple(kps[k]), tuple(snapped[k]), "extension"))
    return segs


def scanline_fill(poly: Sequence[tuple[float, float]], width: int, height: int) -> np.ndarray:
    """Boolean mask of pixel centers inside ``poly`` (even-odd rule).

    Each row intersects every edge once with a half-open rule
    (``(y1 > y) != (y2 > y)``); a pixel is inside when an odd number of
    crossings lie strictly to its right.
    """
    mask = np.zeros((height, width), dtype=bool)
    n = len(poly)
    if n < 3:
        return mask
    pts = [(float(x), float(y)) for x, y in poly]
    ys = [p[1] for p in pts]
    row_lo = max(0, math.floor(min(ys)))
    row_hi = min(height - 1, math.ceil(max(ys)))
    cols = np.arange(width, dtype=np.float64)
    edges = [(pts[i], pts[i - 1]) for i in range(n)]
    for row in range(row_lo, row_hi + 1):
        py = float(row)
        xs = []
        for (x1, y1), (x2, y2) in edges:
            if (y1 > py) != (y2 > py):
                xs.append(x1 + (py - y1) * (x2 - x1) / (y2 - y1))
        if not xs:
            continue
        xs.sort()
        right = len(xs) - np.searchsorted(np.asarray(xs), cols, side="right")
        mask[row] = (right % 2) == 1
    return mask


def rasterize_layout(layout: Layout, width: int | None = None, height: int | None = None) -> SegmentationMap:
    """Label every pixel with the first surface (table order) containing its center."""
    if not isinstance(layout, Layout):
        raise InvalidLayoutError("rasterize_layout expects a Layout")
    width = layout.width if width is None else int(width)
    height = layout.height if height is None else int(height)
    if width < 1 or height < 1:
        raise InvalidArgumentError(f"raster size must be positive, got {width}x{height}")
    if (width, height) != (layout.width, layout.height):
        layout = layout.scaled(width / layout.width, height / layout.height, width, height)
    polys = surface_polygons(layout)
    labels = np.full((height, width), 255, dtype=np.uint8)
    for label, poly in polys:
        inside = scanline_fill(poly, width, height)
        labels[inside & (labels == 255)] = label
    # only reachable for self-intersecting predictions
    labels[labels == 255] = polys[0][0]
    return SegmentationMap(labels)


def pixel_error(pred: SegmentationMap, gt: SegmentationMap) -> float:
    """Percentage of pixels whose surface label differs (canonical labels, no matching)."""
    if pred.labels.shape != gt.labels.shape:
        raise InvalidArgumentError(f"segmentation sizes differ: {pred.labels.shape} vs {gt.labels.shape}")
    return 100.0 * np.count_nonzero(pred.labels != gt.labels) / pred.labels.size


def keypoint_error(pred_kps, gt_kps, width: int, height: int) -> float:
    """Mean Euclidean keypoint distance as a percentage of the image diagonal."""
    p = np.asarray(pred_kps, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(gt_kps, dtype=np.float64).reshape(-1, 2)
    if p.shape != g.shape:
        raise InvalidArgumentError(f"keypoint lists differ in length: {len(p)} vs {len(g)}")
    if len(p) == 0:
        raise InvalidArgumentError("keypoint_error needs at least one keypoint")
    return 100.0 * float(np.mean(np.linalg.norm(p - g, axis=1))) / math.hypot(width, height)


def flip_layout(layout: Layout) -> Layout:
    """Mirror horizontally (x -> W-1-x) and reorder keypoints into canonical order."""
    spec = layout.spec
    mirrored = layout.keypoints.copy()
    mirrored[:, 0] = (layout.width - 1) - mirrored[:, 0]
    return Layout(spec.type_id, mirrored[list(spec.flip_perm)], layout.width, layout.height)


def mirror_labels(labels: np.ndarray) -> np.ndarray:
    """Column-mirror a label map and swap left/right wall labels."""
    return _MIRROR_LABEL[labels[:, ::-1]]


# ---------------------------------------------------------------- text format

def format_layout(layout: Layout) -> str:
    lines = [f"type {layout.room_type}"]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in layout.keypoints]
    return "\n".join(lines) + "\n"


def parse_layout(text: str, width: int, height: int, source: str = "<string>") -> Layout:
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    if not lines:
        raise InvalidLayoutError(f"{source}: empty layout file")
    lineno, head = lines[0]
    parts = head.split()
    if len(parts) != 2 or parts[0] != "type":
        raise InvalidLayoutError(f"{source}:{lineno}: expected 'type <id>', got {head!r}")
    try:
        t = int(parts[1])
    except ValueError:
        raise InvalidLayoutError(f"{source}:{lineno}: bad room type {parts[1]!r}") from None
    if not 0 <= t < NUM_ROOM_TYPES:
        raise InvalidLayoutError(f"{source}:{lineno}: room type {t} outside [0, {NUM_ROOM_TYPES - 1}]")
    kps = []
    for lineno, ln in lines[1:]:
        fields = ln.split()
        try:
            if len(fields) != 2:
                raise ValueError
            kps.append((float(fields[0]), float(fields[1])))
        except ValueError:
            raise InvalidLayoutError(f"{source}:{lineno}: expected '<x> <y>', got {ln!r}") from None
    try:
        return Layout(t, np.asarray(kps, dtype=np.float64).reshape(-1, 2), width, height)
    except InvalidLayoutError as exc:
        raise InvalidLayoutError(f"{source}: {exc}") from None


def write_layout(layout: Layout, path) -> None:
    Path(path).write_text(format_layout(layout))


def read_layout(path, width: int, height: int) -> Layout:
    path = Path(path)
    return parse_layout(path.read_text(), width, height, source=str(path))
