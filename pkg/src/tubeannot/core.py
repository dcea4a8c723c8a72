"""Shared domain types and tube overlap arithmetic.

Boxes use continuous pixel coordinates ``(x, y, w, h)`` with the box covering
``[x, x + w) x [y, y + h)``. A tube is a run of boxes over contiguous frames,
stored as a start frame plus an ``(n, 4)`` coordinate array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

CHANNELS = ("Traj", "MBH", "HOF", "HOG")
NUM_CELLS = 5  # 1 global + 2x2 spatial pyramid


class ValidationError(ValueError):
    """Raised when a domain object violates one of its invariants."""


@dataclass(frozen=True)
class BoundingBox:
    frame: int
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.frame < 0:
            raise ValidationError(f"negative frame index {self.frame}")
        if not (self.w > 0 and self.h > 0):
            raise ValidationError(f"degenerate box w={self.w} h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def aspect(self) -> float:
        return self.w / self.h


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _as_coords(coords) -> np.ndarray:
    arr = np.array(coords, dtype=np.float64).reshape(-1, 4)
    if arr.shape[0] == 0:
        raise ValidationError("a tube needs at least one box")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("non-finite box coordinates")
    if np.any(arr[:, 2] <= 0) or np.any(arr[:, 3] <= 0):
        raise ValidationError("degenerate box (w or h <= 0) in tube")
    return _readonly(arr)


def coords_from_boxes(boxes: Sequence[BoundingBox]) -> tuple[int, np.ndarray]:
    """Convert a box sequence to ``(start, coords)``; rejects frame gaps."""
    if not boxes:
        raise ValidationError("a tube needs at least one box")
    boxes = sorted(boxes, key=lambda b: b.frame)
    start = boxes[0].frame
    for k, b in enumerate(boxes):
        if b.frame != start + k:
            raise ValidationError(
                f"tube frames are not contiguous: expected frame {start + k}, got {b.frame}"
            )
    return start, np.array([[b.x, b.y, b.w, b.h] for b in boxes], dtype=np.float64)


class _TubeMixin:
    start: int
    coords: np.ndarray

    @property
    def length(self) -> int:
        return int(self.coords.shape[0])

    @property
    def end(self) -> int:
        """One past the last frame."""
        return self.start + self.length

    @property
    def boxes(self) -> tuple[BoundingBox, ...]:
        return tuple(
            BoundingBox(self.start + k, *map(float, row)) for k, row in enumerate(self.coords)
        )

    @property
    def aspect_ratios(self) -> np.ndarray:
        return self.coords[:, 2] / self.coords[:, 3]


@dataclass(frozen=True, eq=False)
class FeatureHistogram:
    channel: str
    cells: np.ndarray  # (NUM_CELLS, d)

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.float64)
        if cells.ndim != 2 or cells.shape[0] != NUM_CELLS:
            raise ValidationError(
                f"{self.channel}: expected {NUM_CELLS} cell histograms, got shape {cells.shape}"
            )
        if np.any(cells < 0) or not np.all(np.isfinite(cells)):
            raise ValidationError(f"{self.channel}: histogram bins must be finite and >= 0")
        sums = cells.sum(axis=1)
        bad = (sums > 0) & (np.abs(sums - 1.0) > 1e-6)
        if np.any(bad):
            raise ValidationError(f"{self.channel}: cell histograms must be L1-normalized")
        object.__setattr__(self, "cells", _readonly(cells))

    @property
    def dim(self) -> int:
        return int(self.cells.shape[1])

    def __eq__(self, other):
        if not isinstance(other, FeatureHistogram):
            return NotImplemented
        return self.channel == other.channel and np.array_equal(self.cells, other.cells)


def normalize_cells(cells: np.ndarray) -> np.ndarray:
    """L1-normalize each row, leaving all-zero rows untouched."""
    cells = np.asarray(cells, dtype=np.float64)
    sums = cells.sum(axis=-1, keepdims=True)
    return np.divide(cells, sums, out=np.zeros_like(cells), where=sums > 0)


@dataclass(frozen=True, eq=False)
class ActionProposal(_TubeMixin):
    id: str
    video_id: str
    start: int
    coords: np.ndarray
    histograms: Mapping[str, FeatureHistogram] = field(default_factory=dict)
    raw_features: Mapping[str, np.ndarray] = field(default_factory=dict)
    initial_score: float = 0.0

    def __post_init__(self):
        if self.start < 0:
            raise ValidationError(f"proposal {self.id}: negative start frame")
        object.__setattr__(self, "coords", _as_coords(self.coords))
        raw = {}
        for name, vecs in self.raw_features.items():
            arr = np.array(vecs, dtype=np.float64)
            if arr.ndim != 2:
                raise ValidationError(
                    f"proposal {self.id}: raw features for {name} must be a list of equal-length vectors"
                )
            raw[name] = _readonly(arr)
        object.__setattr__(self, "raw_features", raw)
        object.__setattr__(self, "histograms", dict(self.histograms))
        if self.initial_score < 0:
            raise ValidationError(f"proposal {self.id}: negative initial score")

    @classmethod
    def from_boxes(cls, id: str, video_id: str, boxes: Sequence[BoundingBox], **kw) -> "ActionProposal":
        start, coords = coords_from_boxes(boxes)
        return cls(id=id, video_id=video_id, start=start, coords=coords, **kw)

    def with_score(self, score: float) -> "ActionProposal":
        return ActionProposal(
            id=self.id,
            video_id=self.video_id,
            start=self.start,
            coords=self.coords,
            histograms=self.histograms,
            raw_features=self.raw_features,
            initial_score=float(score),
        )

    def __eq__(self, other):
        if not isinstance(other, ActionProposal):
            return NotImplemented
        return (
            self.id == other.id
            and self.video_id == other.video_id
            and self.start == other.start
            and np.array_equal(self.coords, other.coords)
            and dict(self.histograms) == dict(other.histograms)
            and self.raw_features.keys() == other.raw_features.keys()
            and all(np.array_equal(v, other.raw_features[k]) for k, v in self.raw_features.items())
            and self.initial_score == other.initial_score
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class GroundTruthTube(_TubeMixin):
    video_id: str
    instance_id: int
    start: int
    coords: np.ndarray

    def __post_init__(self):
        if self.start < 0:
            raise ValidationError("ground truth with negative start frame")
        object.__setattr__(self, "coords", _as_coords(self.coords))

    @classmethod
    def from_boxes(cls, video_id: str, instance_id: int, boxes: Sequence[BoundingBox]):
        start, coords = coords_from_boxes(boxes)
        return cls(video_id=video_id, instance_id=instance_id, start=start, coords=coords)

    def __eq__(self, other):
        if not isinstance(other, GroundTruthTube):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.instance_id == other.instance_id
            and self.start == other.start
            and np.array_equal(self.coords, other.coords)
        )

    __hash__ = None


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    frames: int
    height: int
    width: int
    class_label: str
    instance_count: int = 1

    def __post_init__(self):
        if self.frames < 1:
            raise ValidationError(f"video {self.video_id}: needs at least one frame")
        if self.height < 1 or self.width < 1:
            raise ValidationError(f"video {self.video_id}: raster must be at least 1x1")
        if self.instance_count < 1:
            raise ValidationError(f"video {self.video_id}: instance_count must be positive")

    def check_tube(self, tube) -> None:
        """Raise if a tube does not fit in this video."""
        if tube.end > self.frames:
            raise ValidationError(
                f"tube spans frames [{tube.start}, {tube.end}) but video {self.video_id} has {self.frames}"
            )
        c = tube.coords
        if (
            np.any(c[:, 0] < 0)
            or np.any(c[:, 1] < 0)
            or np.any(c[:, 0] + c[:, 2] > self.width)
            or np.any(c[:, 1] + c[:, 3] > self.height)
        ):
            raise ValidationError(f"tube leaves the {self.width}x{self.height} extent of {self.video_id}")


def frame_iou(a: BoundingBox, b: BoundingBox) -> float:
    return float(_box_iou_arrays(np.array([a.x, a.y, a.w, a.h]), np.array([b.x, b.y, b.w, b.h])))


def _box_iou_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IOU of broadcastable ``(..., 4)`` xywh arrays."""
    # areas come from the same corner differences as the intersection, so identical boxes give exactly 1
    ax2, ay2 = a[..., 0] + a[..., 2], a[..., 1] + a[..., 3]
    bx2, by2 = b[..., 0] + b[..., 2], b[..., 1] + b[..., 3]
    ix = np.minimum(ax2, bx2) - np.maximum(a[..., 0], b[..., 0])
    iy = np.minimum(ay2, by2) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = (ax2 - a[..., 0]) * (ay2 - a[..., 1]) + (bx2 - b[..., 0]) * (by2 - b[..., 1]) - inter
    return inter / union


def tube_iou(a, b) -> float:
    """Per-frame IOU summed over shared frames, divided by the union frame count."""
    if a.video_id != b.video_id:
        raise ValueError(f"tubes belong to different videos: {a.video_id!r} vs {b.video_id!r}")
    lo, hi = max(a.start, b.start), min(a.end, b.end)
    union_frames = max(a.end, b.end) - min(a.start, b.start)
    if hi <= lo:
        return 0.0
    ious = _box_iou_arrays(a.coords[lo - a.start : hi - a.start], b.coords[lo - b.start : hi - b.start])
    return float(ious.sum() / union_frames)


def _dense(tubes: Sequence, t0: int, t1: int) -> tuple[np.ndarray, np.ndarray]:
    n = len(tubes)
    boxes = np.zeros((n, t1 - t0, 4))
    boxes[..., 2:] = 1.0
    mask = np.zeros((n, t1 - t0), dtype=bool)
    for k, t in enumerate(tubes):
        boxes[k, t.start - t0 : t.end - t0] = t.coords
        mask[k, t.start - t0 : t.end - t0] = True
    return boxes, mask


def tube_iou_matrix(tubes_a: Sequence, tubes_b: Sequence | None = None) -> np.ndarray:
    """Pairwise tube IOU between two tube lists of one video."""
    same = tubes_b is None
    tubes_b = tubes_a if same else tubes_b
    if not tubes_a or not tubes_b:
        return np.zeros((len(tubes_a), len(tubes_b)))
    vids = {t.video_id for t in tubes_a} | {t.video_id for t in tubes_b}
    if len(vids) > 1:
        raise ValueError(f"tubes belong to different videos: {sorted(vids)}")
    t0 = min(t.start for t in list(tubes_a) + list(tubes_b))
    t1 = max(t.end for t in list(tubes_a) + list(tubes_b))
    ba, ma = _dense(tubes_a, t0, t1)
    bb, mb = (ba, ma) if same else _dense(tubes_b, t0, t1)
    out = np.empty((len(tubes_a), len(tubes_b)))
    # row blocks keep the (rows, n_b, T) temporaries small
    step = max(1, 2_000_000 // max(1, len(tubes_b) * (t1 - t0)))
    for r in range(0, len(tubes_a), step):
        both = ma[r : r + step, None, :] & mb[None, :, :]
        either = ma[r : r + step, None, :] | mb[None, :, :]
        ious = _box_iou_arrays(ba[r : r + step, None, :, :], bb[None, :, :, :])
        num = np.where(both, ious, 0.0).sum(axis=-1)
        out[r : r + step] = num / either.sum(axis=-1)
    return out


def group_by(items: Iterable, key) -> dict:
    out: dict = {}
    for it in items:
        out.setdefault(key(it), []).append(it)
    return out
