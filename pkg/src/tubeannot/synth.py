"""Seeded synthetic datasets with planted actor tubes.

Each video gets one or more actor tubes (smooth random-walk boxes whose
aspect ratio follows a class-specific template), articulated flow inside the
actors over a camera-like global translation, optional moving clutter blobs,
and a proposal pool mixing jittered, shifted, truncated and background tubes.
Proposal features mix class-shared components with video-specific background
components in proportion to the proposal's overlap with the actors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from tubeannot.core import CHANNELS, NUM_CELLS, ActionProposal, FeatureHistogram, GroundTruthTube, VideoMeta, tube_iou_matrix
from tubeannot.io import Dataset, VideoData


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 8
    videos_per_class: int = 12
    proposals_per_video: int = 200
    frames: int = 16
    height: int = 24
    width: int = 32
    instances: int = 1
    noise: float = 0.5  # 0 = clean; 0.5 = moderate; 1 = hard
    hist_dim: int = 10
    raw_count: int = 12
    raw_dim: int = 8
    clutter_blobs: int | None = None  # default: round(2 * noise)
    saliency: bool = True

    def __post_init__(self):
        if min(self.classes, self.videos_per_class, self.proposals_per_video, self.instances) < 1:
            raise ValueError("counts must be positive")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.frames < 4 or self.height < 8 or self.width < 8 * self.instances:
            raise ValueError("video too small for the planted actors")

    def to_dict(self) -> dict:
        return asdict(self)


def _class_model(rng: np.random.Generator, spec: SyntheticSpec) -> dict:
    return {
        "hist": rng.dirichlet(np.full(spec.hist_dim, 0.5), size=(len(CHANNELS), NUM_CELLS)),
        "centers": rng.normal(0, 3, size=(len(CHANNELS), 6, spec.raw_dim)),
        "aspect": float(rng.uniform(0.45, 0.9)),
        "amp": float(rng.uniform(0.05, 0.25)),
        "freq": float(rng.uniform(0.5, 1.5)),
        "phase": float(rng.uniform(0, 2 * np.pi)),
    }


def _actor_path(rng, spec: SyntheticSpec, cls: dict, x_lo: float, x_hi: float) -> tuple[int, np.ndarray]:
    """Start frame and (n, 4) boxes of a planted actor kept inside [x_lo, x_hi)."""
    # trimmed clips: the actor is present in every frame
    t_len = spec.frames
    n, start = t_len, 0
    h0 = float(rng.uniform(0.45, 0.65) * spec.height)
    t = np.arange(n) / t_len
    aspect = cls["aspect"] * (1 + cls["amp"] * np.sin(2 * np.pi * cls["freq"] * t + cls["phase"]))
    h = np.full(n, h0) * (1 + 0.05 * np.sin(2 * np.pi * t * cls["freq"]))
    w = np.minimum(aspect * h, x_hi - x_lo - 1)
    steps = rng.normal(0, 0.6, size=(n, 2))
    steps[0] = 0
    cx = float(rng.uniform(x_lo + w[0] / 2, x_hi - w[0] / 2)) + np.cumsum(steps[:, 0])
    cy = float(rng.uniform(h[0] / 2, spec.height - h[0] / 2)) + np.cumsum(steps[:, 1])
    cx = np.clip(cx, x_lo + w / 2, x_hi - w / 2)
    cy = np.clip(cy, h / 2, spec.height - h / 2)
    return start, np.column_stack([cx - w / 2, cy - h / 2, w, h])


def _clip_boxes(c: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    x0 = np.clip(c[:, 0], 0, spec.width - 1)
    y0 = np.clip(c[:, 1], 0, spec.height - 1)
    x1 = np.clip(c[:, 0] + c[:, 2], x0 + 1, spec.width)
    y1 = np.clip(c[:, 1] + c[:, 3], y0 + 1, spec.height)
    # keep exact widths where nothing was clipped, so copies of a tube stay bit-identical
    w = np.where((x0 == c[:, 0]) & (x1 == c[:, 0] + c[:, 2]), c[:, 2], x1 - x0)
    h = np.where((y0 == c[:, 1]) & (y1 == c[:, 1] + c[:, 3]), c[:, 3], y1 - y0)
    return np.column_stack([x0, y0, w, h])


def _render_flow(rng, spec: SyntheticSpec, actors, blobs) -> tuple[np.ndarray, np.ndarray]:
    t_len, hh, ww = spec.frames, spec.height, spec.width
    cam = rng.normal(0, 1.5, size=2)
    flow = np.empty((t_len, hh, ww, 2))
    flow[..., 0], flow[..., 1] = cam
    flow += rng.normal(0, 0.12 * spec.noise, size=flow.shape)
    sal = rng.uniform(0, 0.3 * spec.noise, size=(t_len, hh, ww)) if spec.noise > 0 else np.zeros((t_len, hh, ww))
    yy, xx = np.mgrid[0:hh, 0:ww] + 0.5

    def paint(start, coords, amp, phase):
        for k, (x, y, w, h) in enumerate(coords):
            f = start + k
            inside = (xx >= x) & (xx < x + w) & (yy >= y) & (yy < y + h)
            u = amp * np.sin(2 * np.pi * (xx - x) / max(w, 1) + phase + 0.7 * f)
            v = amp * np.cos(2 * np.pi * (yy - y) / max(h, 1) + phase)
            flow[f, inside, 0] += u[inside]
            flow[f, inside, 1] += v[inside]
            cx, cy = x + w / 2, y + h / 2
            sal[f] += np.exp(-(((xx - cx) / (0.6 * w)) ** 2 + ((yy - cy) / (0.6 * h)) ** 2))

    for start, coords in actors:
        paint(start, coords, 1.5, float(rng.uniform(0, 2 * np.pi)))
    for start, coords in blobs:
        paint(start, coords, 1.0, float(rng.uniform(0, 2 * np.pi)))
    return flow.astype(np.float32), sal.astype(np.float32)


def _background_tube(rng, spec: SyntheticSpec, anchor=None) -> tuple[int, np.ndarray]:
    t_len = spec.frames
    n = int(rng.integers(max(2, t_len // 2), t_len + 1))
    start = int(rng.integers(0, t_len - n + 1))
    w = float(rng.uniform(3, spec.width / 3))
    h = float(rng.uniform(3, spec.height * 0.7))
    if anchor is None:
        x, y = rng.uniform(0, spec.width - w), rng.uniform(0, spec.height - h)
        drift = np.cumsum(rng.normal(0, 0.8, size=(n, 2)), axis=0)
        coords = np.column_stack([x + drift[:, 0], y + drift[:, 1], np.full(n, w), np.full(n, h)])
    else:
        a_start, a_coords = anchor
        idx = np.clip(np.arange(start, start + n) - a_start, 0, len(a_coords) - 1)
        base = a_coords[idx]
        jitter = rng.normal(0, 1.0, size=4)
        coords = base + jitter + rng.normal(0, 0.4, size=(n, 4))
    return start, _clip_boxes(coords, spec)


def _variant(rng, spec: SyntheticSpec, actor, kind: str) -> tuple[int, np.ndarray]:
    start, coords = actor
    n = len(coords)
    c = coords.copy()
    if kind == "exact":
        c = c + rng.normal(0, 0.5 * spec.noise, size=c.shape) if spec.noise > 0 else c
    elif kind == "jitter":
        c = c + rng.normal(0, 0.5 + 1.5 * spec.noise, size=4) + rng.normal(0, 0.3 + 0.5 * spec.noise, size=c.shape)
    elif kind == "shift":
        sx, sy = np.exp(rng.uniform(-0.4, 0.4, size=2))
        dx = rng.uniform(0.2, 0.8) * rng.choice([-1, 1]) * c[:, 2].mean()
        dy = rng.uniform(0.0, 0.5) * rng.choice([-1, 1]) * c[:, 3].mean()
        c = np.column_stack([c[:, 0] + dx, c[:, 1] + dy, c[:, 2] * sx, c[:, 3] * sy])
    elif kind == "truncate":
        m = int(rng.integers(max(2, n // 2), n))
        off = int(rng.integers(0, n - m + 1))
        start, c = start + off, c[off : off + m] + rng.normal(0, 0.3 + 0.5 * spec.noise, size=(m, 4))
    return start, _clip_boxes(c, spec)


def _features(rng, spec: SyntheticSpec, mix: float, cls: dict, bg: dict):
    noise = 0.15 + 0.5 * spec.noise
    proto = mix * cls["hist"] + (1 - mix) * bg["hist"]
    hist = proto + noise * rng.random(proto.shape) * proto.mean(axis=-1, keepdims=True)
    hist = hist / hist.sum(axis=-1, keepdims=True)
    raw = {}
    for ci, c in enumerate(CHANNELS):
        from_class = rng.random(spec.raw_count) < mix
        comp = rng.integers(0, 6, size=spec.raw_count)
        centers = np.where(from_class[:, None], cls["centers"][ci][comp], bg["centers"][ci][comp])
        raw[c] = centers + rng.normal(0, 0.3 + 0.4 * spec.noise, size=centers.shape)
    return {c: FeatureHistogram(c, hist[ci]) for ci, c in enumerate(CHANNELS)}, raw


def _video(rng, spec: SyntheticSpec, video_id: str, class_label: str, cls: dict) -> VideoData:
    meta = VideoMeta(video_id, spec.frames, spec.height, spec.width, class_label, spec.instances)
    slot = spec.width / spec.instances
    actors = [_actor_path(rng, spec, cls, k * slot, (k + 1) * slot) for k in range(spec.instances)]
    n_blobs = round(2 * spec.noise) if spec.clutter_blobs is None else spec.clutter_blobs
    blobs = [_background_tube(rng, spec) for _ in range(n_blobs)]
    flow, sal = _render_flow(rng, spec, actors, blobs)

    p = spec.proposals_per_video
    tubes = [_variant(rng, spec, a, "exact") for a in actors][:p]
    kinds = ["jitter"] * round(0.30 * p) + ["shift"] * round(0.15 * p) + ["truncate"] * round(0.10 * p)
    while len(tubes) < p:
        k = len(tubes) - len(actors)
        if k < len(kinds):
            tubes.append(_variant(rng, spec, actors[k % len(actors)], kinds[k]))
        elif blobs and rng.random() < 0.3:
            tubes.append(_background_tube(rng, spec, anchor=blobs[int(rng.integers(len(blobs)))]))
        else:
            tubes.append(_background_tube(rng, spec))
    order = rng.permutation(len(tubes))
    gts = tuple(GroundTruthTube(video_id, k, s, c) for k, (s, c) in enumerate(actors))

    bg = {
        "hist": rng.dirichlet(np.full(spec.hist_dim, 0.5), size=(len(CHANNELS), NUM_CELLS)),
        "centers": rng.normal(0, 3, size=(len(CHANNELS), 6, spec.raw_dim)),
    }
    shells = [ActionProposal(id=f"p{k:03d}", video_id=video_id, start=tubes[i][0], coords=tubes[i][1]) for k, i in enumerate(order)]
    overlap = tube_iou_matrix(shells, list(gts)).max(axis=1)
    proposals = []
    for shell, mix in zip(shells, overlap):
        hist, raw = _features(rng, spec, float(mix), cls, bg)
        proposals.append(
            ActionProposal(id=shell.id, video_id=video_id, start=shell.start, coords=shell.coords, histograms=hist, raw_features=raw)
        )
    return VideoData(meta, tuple(proposals), flow, sal if spec.saliency else None, gts)


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> Dataset:
    """In-memory dataset fully determined by (spec, seed)."""
    root = np.random.SeedSequence(seed)
    ds = Dataset()
    for ci, class_seq in enumerate(root.spawn(spec.classes)):
        class_label = f"class{ci:02d}"
        model_seq, *video_seqs = class_seq.spawn(spec.videos_per_class + 1)
        cls = _class_model(np.random.default_rng(model_seq), spec)
        for vi, vs in enumerate(video_seqs):
            vid = f"{class_label}_v{vi:02d}"
            ds.videos[vid] = _video(np.random.default_rng(vs), spec, vid, class_label, cls)
    return ds
