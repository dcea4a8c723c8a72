"""On-disk formats and dataset ingestion.

* rasters: ``b"TSRV1"``, little-endian u32 T, H, W, u32 channels, then a
  frame-major float32 payload of shape (T, H, W, C).
* manifest, proposals, ground truth, annotations: JSON lines.
* proposal features: one ``.npz`` per video (ids, histograms, raw vectors).
"""

from __future__ import annotations

import io
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from tubeannot.core import (
    CHANNELS,
    ActionProposal,
    BoundingBox,
    FeatureHistogram,
    GroundTruthTube,
    ValidationError,
    VideoMeta,
)

log = logging.getLogger(__name__)

MAGIC = b"TSRV1"
_HEADER = struct.Struct("<4I")


class IngestError(ValidationError):
    pass


# -- low level --------------------------------------------------------------


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_record(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    atomic_write_bytes(path, "".join(dumps_record(r) + "\n" for r in records).encode())


def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield (line number, record); blank lines are skipped."""
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"{path}: file not found")
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise IngestError(f"{path}:{lineno}: record must be an object")
            yield lineno, rec


def encode_raster(arr: np.ndarray) -> bytes:
    a = np.asarray(arr)
    if a.ndim == 3:
        a = a[..., None]
    if a.ndim != 4:
        raise ValueError("raster must be (T, H, W) or (T, H, W, C)")
    t, h, w, c = a.shape
    return MAGIC + _HEADER.pack(t, h, w, c) + np.ascontiguousarray(a, dtype="<f4").tobytes()


def write_raster(path: str | Path, arr: np.ndarray) -> None:
    atomic_write_bytes(path, encode_raster(arr))


def read_raster(path: str | Path) -> np.ndarray:
    """Raster as a float32 (T, H, W, C) array."""
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"{path}: raster not found")
    data = path.read_bytes()
    head = len(MAGIC) + _HEADER.size
    if len(data) < head or data[: len(MAGIC)] != MAGIC:
        raise IngestError(f"{path}: not a TSRV1 raster")
    t, h, w, c = _HEADER.unpack_from(data, len(MAGIC))
    expected = t * h * w * c * 4
    if len(data) - head != expected:
        raise IngestError(f"{path}: payload has {len(data) - head} bytes, header implies {expected}")
    return np.frombuffer(data, dtype="<f4", offset=head).reshape(t, h, w, c).astype(np.float32)


# -- records ----------------------------------------------------------------


def _boxes_from_record(rec: dict, where: str) -> list[BoundingBox]:
    try:
        boxes = [BoundingBox(int(b[0]), float(b[1]), float(b[2]), float(b[3]), float(b[4])) for b in rec["boxes"]]
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise IngestError(f"{where}: bad boxes ({exc})") from None
    return boxes


def _clip(boxes: list[BoundingBox], meta: VideoMeta, where: str) -> list[BoundingBox]:
    out = []
    for b in boxes:
        x0, y0 = max(b.x, 0.0), max(b.y, 0.0)
        x1, y1 = min(b.x + b.w, float(meta.width)), min(b.y + b.h, float(meta.height))
        if x1 <= x0 or y1 <= y0:
            raise IngestError(f"{where}: box in frame {b.frame} lies outside the {meta.width}x{meta.height} extent")
        if (x0, y0, x1, y1) == (b.x, b.y, b.x + b.w, b.y + b.h):
            out.append(b)
        else:
            out.append(BoundingBox(b.frame, x0, y0, x1 - x0, y1 - y0))
    return out


def box_records(tube) -> list[list[float]]:
    return [[b.frame, b.x, b.y, b.w, b.h] for b in tube.boxes]


def proposal_record(p: ActionProposal) -> dict:
    return {"id": p.id, "video_id": p.video_id, "boxes": box_records(p)}


def gt_record(g: GroundTruthTube) -> dict:
    return {"video_id": g.video_id, "instance_id": g.instance_id, "boxes": box_records(g)}


def read_proposal_boxes(path: Path, meta: VideoMeta) -> list[tuple[str, int, np.ndarray]]:
    out, seen = [], set()
    for lineno, rec in read_jsonl(path):
        where = f"{path}:{lineno}"
        try:
            pid = str(rec["id"])
        except KeyError:
            raise IngestError(f"{where}: missing id") from None
        if rec.get("video_id", meta.video_id) != meta.video_id:
            raise IngestError(f"{where}: proposal belongs to {rec['video_id']!r}, not {meta.video_id!r}")
        if pid in seen:
            raise IngestError(f"{where}: duplicate proposal id {pid!r}")
        seen.add(pid)
        try:
            p = ActionProposal.from_boxes(pid, meta.video_id, _clip(_boxes_from_record(rec, where), meta, where))
            meta.check_tube(p)
        except IngestError:
            raise
        except ValidationError as exc:
            raise IngestError(f"{where}: {exc}") from None
        out.append((pid, p.start, p.coords))
    return out


def read_ground_truth(path: Path, meta: VideoMeta) -> list[GroundTruthTube]:
    out = []
    for lineno, rec in read_jsonl(path):
        where = f"{path}:{lineno}"
        try:
            g = GroundTruthTube.from_boxes(
                meta.video_id, int(rec.get("instance_id", len(out))), _clip(_boxes_from_record(rec, where), meta, where)
            )
            meta.check_tube(g)
        except IngestError:
            raise
        except ValidationError as exc:
            raise IngestError(f"{where}: {exc}") from None
        if rec.get("video_id", meta.video_id) != meta.video_id:
            raise IngestError(f"{where}: ground truth belongs to {rec['video_id']!r}")
        out.append(g)
    return out


def encode_features(proposals: Iterable[ActionProposal]) -> bytes:
    props = list(proposals)
    arrays = {"ids": np.array([p.id for p in props], dtype=str)}
    if props and props[0].histograms:
        arrays["hist"] = np.stack([np.stack([p.histograms[c].cells for c in CHANNELS]) for p in props])
    for c in CHANNELS:
        if props and c in props[0].raw_features:
            arrays[f"raw_{c}"] = np.concatenate([p.raw_features[c] for p in props])
            arrays[f"count_{c}"] = np.array([len(p.raw_features[c]) for p in props], dtype=np.int64)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def read_features(path: Path, ids: list[str]) -> tuple[list[dict], list[dict]]:
    """Per-proposal (histograms, raw features), aligned with ``ids``."""
    if not path.is_file():
        raise IngestError(f"{path}: feature file not found")
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise IngestError(f"{path}: unreadable feature archive ({exc})") from None
    with z:
        stored = [str(s) for s in z["ids"]]
        if stored != ids:
            raise IngestError(f"{path}: feature ids do not match the proposal file order")
        n = len(ids)
        hists: list[dict] = [{} for _ in range(n)]
        raws: list[dict] = [{} for _ in range(n)]
        if "hist" in z:
            h = z["hist"]
            if h.shape[:3] != (n, len(CHANNELS), 5):
                raise IngestError(f"{path}: histogram array has shape {h.shape}")
            for k in range(n):
                try:
                    hists[k] = {c: FeatureHistogram(c, h[k, ci]) for ci, c in enumerate(CHANNELS)}
                except ValidationError as exc:
                    raise IngestError(f"{path}: proposal {ids[k]!r}: {exc}") from None
        for c in CHANNELS:
            if f"raw_{c}" not in z:
                continue
            raw, counts = z[f"raw_{c}"], z[f"count_{c}"]
            if counts.shape != (n,) or counts.sum() != len(raw):
                raise IngestError(f"{path}: raw {c} counts disagree with the vector table")
            if np.any(counts < 1):
                raise IngestError(f"{path}: a proposal has no raw {c} vectors")
            for k, chunk in enumerate(np.split(raw, np.cumsum(counts)[:-1])):
                raws[k][c] = chunk
    return hists, raws


# -- dataset ----------------------------------------------------------------


@dataclass(eq=False)
class VideoData:
    meta: VideoMeta
    proposals: tuple[ActionProposal, ...]
    flow: np.ndarray  # (T, H, W, 2) float32
    saliency: np.ndarray | None = None  # (T, H, W) float32
    ground_truth: tuple[GroundTruthTube, ...] = ()

    def __eq__(self, other):
        if not isinstance(other, VideoData):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.proposals == other.proposals
            and np.array_equal(self.flow, other.flow)
            and (
                (self.saliency is None and other.saliency is None)
                or (
                    self.saliency is not None
                    and other.saliency is not None
                    and np.array_equal(self.saliency, other.saliency)
                )
            )
            and self.ground_truth == other.ground_truth
        )


@dataclass(eq=False)
class Dataset:
    videos: dict = field(default_factory=dict)  # video id -> VideoData, manifest order
    errors: dict = field(default_factory=dict)  # video id -> (class, message) for unreadable videos
    root: Path | None = None

    @property
    def classes(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for vid, v in self.videos.items():
            out.setdefault(v.meta.class_label, []).append(vid)
        for vid, (cls, _) in self.errors.items():
            out.setdefault(cls, [])
        return out

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return list(self.videos) == list(other.videos) and all(
            self.videos[k] == other.videos[k] for k in self.videos
        ) and self.errors == other.errors


def _manifest_meta(rec: dict, where: str) -> VideoMeta:
    try:
        return VideoMeta(
            video_id=str(rec["video_id"]),
            frames=int(rec["frames"]),
            height=int(rec["height"]),
            width=int(rec["width"]),
            class_label=str(rec["class_label"]),
            instance_count=int(rec.get("instance_count", 1)),
        )
    except KeyError as exc:
        raise IngestError(f"{where}: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise IngestError(f"{where}: {exc}") from None


def _load_video(base: Path, rec: dict, meta: VideoMeta, where: str) -> VideoData:
    def ref(key):
        val = rec.get(key)
        return None if val is None else base / val

    prop_path = ref("proposals")
    flow_path = ref("flow")
    if prop_path is None or flow_path is None:
        raise IngestError(f"{where}: video {meta.video_id} needs 'proposals' and 'flow' files")
    flow = read_raster(flow_path)
    if flow.shape != (meta.frames, meta.height, meta.width, 2):
        raise IngestError(
            f"{flow_path}: raster is {flow.shape[:3]} x {flow.shape[3]} channels, "
            f"manifest declares {(meta.frames, meta.height, meta.width)} x 2"
        )
    saliency = None
    if ref("saliency") is not None:
        sal = read_raster(ref("saliency"))
        if sal.shape != (meta.frames, meta.height, meta.width, 1):
            raise IngestError(f"{ref('saliency')}: saliency raster shape {sal.shape} does not match the video")
        if np.any(sal < 0) or not np.all(np.isfinite(sal)):
            raise IngestError(f"{ref('saliency')}: saliency must be finite and non-negative")
        saliency = sal[..., 0]
    boxes = read_proposal_boxes(prop_path, meta)
    ids = [pid for pid, _, _ in boxes]
    if ref("features") is not None:
        hists, raws = read_features(ref("features"), ids)
    else:
        hists = raws = [{} for _ in ids]
    props = tuple(
        ActionProposal(id=pid, video_id=meta.video_id, start=s, coords=c, histograms=h, raw_features=r)
        for (pid, s, c), h, r in zip(boxes, hists, raws)
    )
    gts = tuple(read_ground_truth(ref("ground_truth"), meta)) if ref("ground_truth") is not None else ()
    return VideoData(meta, props, flow, saliency, gts)


def ingest(manifest: str | Path, strict: bool = True) -> Dataset:
    """Load and validate a dataset.

    With ``strict`` any error aborts. Otherwise errors in a video's own files
    are recorded in ``Dataset.errors`` and the remaining videos still load;
    a malformed manifest always aborts.
    """
    manifest = Path(manifest)
    base = manifest.parent
    ds = Dataset(root=base)
    seen = set()
    for lineno, rec in read_jsonl(manifest):
        where = f"{manifest}:{lineno}"
        meta = _manifest_meta(rec, where)
        if meta.video_id in seen:
            raise IngestError(f"{where}: duplicate video id {meta.video_id!r}")
        seen.add(meta.video_id)
        try:
            ds.videos[meta.video_id] = _load_video(base, rec, meta, where)
        except IngestError as exc:
            if strict:
                raise
            log.error("skipping video %s: %s", meta.video_id, exc)
            ds.errors[meta.video_id] = (meta.class_label, str(exc))
    if not ds.videos and not ds.errors:
        log.warning("%s lists no videos; dataset is empty", manifest)
    return ds


def write_dataset(ds: Dataset, root: str | Path) -> Path:
    """Write every video's files plus ``manifest.jsonl``; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = []
    for vid, v in ds.videos.items():
        m = v.meta
        rec = {
            "video_id": vid,
            "class_label": m.class_label,
            "frames": m.frames,
            "height": m.height,
            "width": m.width,
            "instance_count": m.instance_count,
            "proposals": f"videos/{vid}.proposals.jsonl",
            "flow": f"videos/{vid}.flow.tsrv",
        }
        write_jsonl(root / rec["proposals"], (proposal_record(p) for p in v.proposals))
        write_raster(root / rec["flow"], v.flow)
        if v.proposals and (v.proposals[0].histograms or v.proposals[0].raw_features):
            rec["features"] = f"videos/{vid}.features.npz"
            atomic_write_bytes(root / rec["features"], encode_features(v.proposals))
        if v.saliency is not None:
            rec["saliency"] = f"videos/{vid}.saliency.tsrv"
            write_raster(root / rec["saliency"], v.saliency)
        if v.ground_truth:
            rec["ground_truth"] = f"videos/{vid}.gt.jsonl"
            write_jsonl(root / rec["ground_truth"], (gt_record(g) for g in v.ground_truth))
        manifest.append(rec)
    path = root / "manifest.jsonl"
    write_jsonl(path, manifest)
    return path
