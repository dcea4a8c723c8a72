import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tubeannot.core import (
    ActionProposal,
    BoundingBox,
    FeatureHistogram,
    GroundTruthTube,
    ValidationError,
    VideoMeta,
    frame_iou,
    tube_iou,
    tube_iou_matrix,
)


def raster_iou(a: BoundingBox, b: BoundingBox, res: int = 4) -> float:
    """Count sub-pixel samples covered by each box (integer-aligned boxes only)."""
    size = int(max(a.x + a.w, b.x + b.w, a.y + a.h, b.y + b.h)) + 1
    g = (np.arange(size * res) + 0.5) / res
    xx, yy = np.meshgrid(g, g)
    ma = (xx >= a.x) & (xx < a.x + a.w) & (yy >= a.y) & (yy < a.y + a.h)
    mb = (xx >= b.x) & (xx < b.x + b.w) & (yy >= b.y) & (yy < b.y + b.h)
    return (ma & mb).sum() / (ma | mb).sum()


def tube(start, coords, vid="v"):
    return ActionProposal(id=f"p{start}", video_id=vid, start=start, coords=coords)


def test_frame_iou_examples():
    a = BoundingBox(0, 0, 0, 10, 10)
    assert frame_iou(a, a) == 1.0
    assert frame_iou(a, BoundingBox(0, 10, 0, 10, 10)) == 0.0
    b = BoundingBox(0, 5, 0, 10, 10)
    assert frame_iou(a, b) == pytest.approx(1 / 3, abs=1e-15)
    assert raster_iou(a, b) == pytest.approx(1 / 3, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=4, max_size=4), st.lists(st.integers(1, 8), min_size=4, max_size=4))
def test_frame_iou_matches_rasterization(xy, wh):
    a = BoundingBox(0, xy[0], xy[1], wh[0], wh[1])
    b = BoundingBox(0, xy[2], xy[3], wh[2], wh[3])
    assert frame_iou(a, b) == pytest.approx(raster_iou(a, b, res=1), abs=1e-12)
    assert frame_iou(a, b) == pytest.approx(frame_iou(b, a), abs=1e-15)


def test_degenerate_box_rejected():
    with pytest.raises(ValidationError):
        BoundingBox(0, 0, 0, 0, 5)
    with pytest.raises(ValidationError):
        tube(0, [[0, 0, 1, 1], [0, 0, 1, -1]])


def test_gap_rejected():
    boxes = [BoundingBox(0, 0, 0, 2, 2), BoundingBox(2, 0, 0, 2, 2)]
    with pytest.raises(ValidationError, match="contiguous"):
        ActionProposal.from_boxes("p", "v", boxes)
    with pytest.raises(ValidationError, match="contiguous"):
        GroundTruthTube.from_boxes("v", 0, boxes)


def test_tube_iou_examples():
    box = [0, 0, 10, 10]
    a = tube(0, [box] * 10)
    assert tube_iou(a, a) == 1.0
    assert tube_iou(a, tube(10, [box] * 4)) == 0.0
    b = tube(5, [box] * 10)
    # frame-enumeration oracle: 5 shared frames with IOU 1 over 15 union frames
    frames = set(range(0, 10)) | set(range(5, 15))
    num = sum(1.0 for f in frames if 5 <= f < 10)
    assert tube_iou(a, b) == pytest.approx(num / len(frames), abs=1e-15)
    assert tube_iou(a, b) == pytest.approx(1 / 3, abs=1e-15)


def test_tube_iou_rejects_cross_video():
    with pytest.raises(ValueError):
        tube_iou(tube(0, [[0, 0, 1, 1]], "a"), tube(0, [[0, 0, 1, 1]], "b"))


def enumerate_tube_iou(a, b):
    frames = sorted(set(range(a.start, a.end)) | set(range(b.start, b.end)))
    ba, bb = {x.frame: x for x in a.boxes}, {x.frame: x for x in b.boxes}
    return sum(frame_iou(ba[f], bb[f]) for f in frames if f in ba and f in bb) / len(frames)


def random_tube(rng, vid="v", pid="p"):
    n = int(rng.integers(1, 8))
    start = int(rng.integers(0, 6))
    coords = np.column_stack(
        [rng.uniform(0, 10, n), rng.uniform(0, 10, n), rng.uniform(1, 8, n), rng.uniform(1, 8, n)]
    )
    return ActionProposal(id=pid, video_id=vid, start=start, coords=coords)


def test_tube_iou_matches_enumeration_and_matrix():
    rng = np.random.default_rng(0)
    tubes = [random_tube(rng, pid=str(k)) for k in range(25)]
    mat = tube_iou_matrix(tubes)
    for i, a in enumerate(tubes):
        for j, b in enumerate(tubes):
            ref = enumerate_tube_iou(a, b)
            assert tube_iou(a, b) == pytest.approx(ref, abs=1e-12)
            assert mat[i, j] == pytest.approx(ref, abs=1e-12)
    assert np.allclose(mat, mat.T)
    assert np.all((mat >= 0) & (mat <= 1 + 1e-12))


def test_tube_iou_same_span_is_mean_frame_iou():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = random_tube(rng)
        b = ActionProposal(id="q", video_id="v", start=a.start, coords=random_tube(rng).coords[:1].repeat(a.length, 0))
        mean = np.mean([frame_iou(x, y) for x, y in zip(a.boxes, b.boxes)])
        assert tube_iou(a, b) == pytest.approx(mean, abs=1e-12)


def test_histogram_validation():
    cells = np.full((5, 4), 0.25)
    h = FeatureHistogram("HOG", cells)
    assert h.dim == 4 and h == FeatureHistogram("HOG", cells.copy())
    with pytest.raises(ValidationError):
        FeatureHistogram("HOG", np.ones((5, 4)))
    with pytest.raises(ValidationError):
        FeatureHistogram("HOG", np.full((4, 4), 0.25))
    FeatureHistogram("HOG", np.zeros((5, 4)))


def test_video_meta_checks_extent():
    meta = VideoMeta("v", frames=5, height=20, width=20, class_label="run")
    meta.check_tube(tube(0, [[0, 0, 20, 20]] * 5))
    with pytest.raises(ValidationError):
        meta.check_tube(tube(1, [[0, 0, 5, 5]] * 5))
    with pytest.raises(ValidationError):
        meta.check_tube(tube(0, [[16, 0, 5, 5]]))
    with pytest.raises(ValidationError):
        VideoMeta("v", frames=0, height=1, width=1, class_label="x")


def test_types_are_immutable():
    p = tube(0, [[0, 0, 1, 1]])
    with pytest.raises(Exception):
        p.initial_score = 2.0
    with pytest.raises(ValueError):
        p.coords[0, 0] = 5.0
    assert p.with_score(0.5).initial_score == 0.5
