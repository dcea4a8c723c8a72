"""Foreground score maps from motion and saliency cues.

The per-pixel cues are max-normalized per frame, summed, and regularized on a
6-connected video grid with damped synchronous min-sum belief propagation.
A proposal's initial action score is the mean smoothed score inside its boxes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from tubeannot.core import ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Forward optical flow, one ``(u, v)`` raster per frame: shape ``(T, H, W, 2)``."""

    uv: np.ndarray

    def __post_init__(self):
        uv = np.asarray(self.uv, dtype=np.float64)
        if uv.ndim != 4 or uv.shape[-1] != 2:
            raise ValidationError(f"flow must have shape (T, H, W, 2), got {uv.shape}")
        object.__setattr__(self, "uv", uv)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.uv.shape[:3]


@dataclass(frozen=True, eq=False)
class ScoreVolume:
    values: np.ndarray  # (T, H, W)
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValidationError(f"score volume must be (T, H, W), got {v.shape}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValidationError("score volume values must be finite and >= 0")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class MrfParams:
    num_labels: int = 16
    smoothness_weight: float = 1.0
    truncation: float = (4 / 15) ** 2
    max_iterations: int = 30
    damping: float = 0.5
    # early exit once no message moves by more than this
    tol: float = 1e-9

    def __post_init__(self):
        if self.num_labels < 2:
            raise ValueError("num_labels must be >= 2")
        if self.smoothness_weight < 0:
            raise ValueError("smoothness_weight must be >= 0")
        if self.truncation <= 0:
            raise ValueError("truncation must be > 0")
        if not 0 <= self.damping < 1:
            raise ValueError("damping must lie in [0, 1)")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


def motion_magnitude(flow: FlowField | np.ndarray) -> np.ndarray:
    """Frobenius norm of the flow Jacobian at every pixel, shape ``(T, H, W)``."""
    uv = flow.uv if isinstance(flow, FlowField) else FlowField(flow).uv
    _, h, w, _ = uv.shape
    total = np.zeros(uv.shape[:3])
    for c in range(2):
        comp = uv[..., c]
        # np.gradient needs >= 2 samples along an axis; a single column has no gradient
        if w > 1:
            total += np.gradient(comp, axis=2) ** 2
        if h > 1:
            total += np.gradient(comp, axis=1) ** 2
    return np.sqrt(total)


def gradient_saliency(intensity: np.ndarray) -> np.ndarray:
    """Stand-in saliency: per-frame spatial gradient magnitude of an intensity volume."""
    img = np.asarray(intensity, dtype=np.float64)
    out = np.zeros_like(img)
    if img.shape[2] > 1:
        out += np.gradient(img, axis=2) ** 2
    if img.shape[1] > 1:
        out += np.gradient(img, axis=1) ** 2
    return np.sqrt(out)


def max_normalize(frames: np.ndarray) -> np.ndarray:
    """Scale each frame so its maximum is 1; all-zero frames stay zero."""
    frames = np.asarray(frames, dtype=np.float64)
    peak = frames.reshape(frames.shape[0], -1).max(axis=1)[:, None, None]
    return np.divide(frames, peak, out=np.zeros_like(frames), where=peak > 0)


def aggregate_cues(motion: np.ndarray, saliency: np.ndarray) -> ScoreVolume:
    motion = np.asarray(motion, dtype=np.float64)
    saliency = np.asarray(saliency, dtype=np.float64)
    if motion.shape != saliency.shape or motion.ndim != 3:
        raise ValidationError(
            f"motion {motion.shape} and saliency {saliency.shape} must be equal (T, H, W) rasters"
        )
    if np.any(motion < 0) or np.any(saliency < 0):
        raise ValidationError("cue rasters must be non-negative")
    return ScoreVolume(max_normalize(motion) + max_normalize(saliency), normalized=False)


# -- 3D MRF ---------------------------------------------------------------


def _label_values(params: MrfParams) -> np.ndarray:
    return np.linspace(0.0, 1.0, params.num_labels)


def _offset_costs(params: MrfParams) -> np.ndarray:
    """Untruncated pairwise cost per label offset, for offsets cheaper than the cap."""
    step = 1.0 / (params.num_labels - 1)
    costs = params.smoothness_weight * (np.arange(params.num_labels) * step) ** 2
    return costs[costs < params.truncation]


def _min_convolve(h: np.ndarray, offsets: np.ndarray, truncation: float) -> np.ndarray:
    """``out[l] = min_k h[k] + min(w (k - l)^2 step^2, truncation)`` along axis 0.

    Offsets whose quadratic cost reaches the cap are covered by the
    ``min(h) + truncation`` candidate, so only the cheap offsets are scanned.
    """
    out = h + offsets[0]
    for d in range(1, len(offsets)):
        c = offsets[d]
        np.minimum(out[:-d], h[d:] + c, out=out[:-d])
        np.minimum(out[d:], h[:-d] + c, out=out[d:])
    np.minimum(out, h.min(axis=0) + truncation, out=out)
    return out


def observed_scores(scores: ScoreVolume) -> np.ndarray:
    """Map a score volume into [0, 1]; volumes already inside [0, 1] are untouched."""
    v = scores.values
    peak = v.max() if v.size else 0.0
    return v / peak if peak > 1.0 else v


def quantize(observed: np.ndarray, params: MrfParams) -> np.ndarray:
    """Nearest-label index for each value in [0, 1]."""
    return np.rint(np.clip(observed, 0.0, 1.0) * (params.num_labels - 1)).astype(np.int64)


def mrf_energy(labels: np.ndarray, observed: np.ndarray, params: MrfParams) -> float:
    """Quadratic unary plus truncated-quadratic pairwise energy over the 6-neighborhood."""
    lv = _label_values(params)[labels]
    energy = float(((lv - observed) ** 2).sum())
    for axis in range(3):
        if labels.shape[axis] < 2:
            continue
        d = np.diff(lv, axis=axis)
        energy += float(np.minimum(params.smoothness_weight * d**2, params.truncation).sum())
    return energy


def _sl(axis: int, s: slice) -> tuple:
    # arrays are laid out (L, T, H, W): label axis first for contiguous label shifts
    idx = [slice(None)] * 4
    idx[axis + 1] = s
    return tuple(idx)


def mrf_labels(scores: ScoreVolume, params: MrfParams = MrfParams()) -> tuple[np.ndarray, dict]:
    """Min-sum loopy BP on the video grid; returns label indices and diagnostics."""
    obs = observed_scores(scores)
    lv = _label_values(params)
    # float32 messages halve memory traffic; energies are compared in float64 below
    unary = ((lv[:, None, None, None] - obs[None]) ** 2).astype(np.float32)
    offsets = _offset_costs(params).astype(np.float32)
    trunc = np.float32(params.truncation)
    shape = obs.shape
    # incoming[2*axis] holds messages from the neighbor at index-1 along axis,
    # incoming[2*axis + 1] those from the neighbor at index+1
    incoming = np.zeros((6,) + unary.shape, dtype=np.float32)
    fresh = np.zeros_like(incoming)
    iters = 0
    for iters in range(1, params.max_iterations + 1):
        belief = unary + incoming.sum(axis=0)
        for axis in range(3):
            if shape[axis] < 2:
                continue
            lo, hi = _sl(axis, slice(None, -1)), _sl(axis, slice(1, None))
            # p at the lower index sends to q = p + 1, excluding what q sent to p
            h = belief[lo] - incoming[2 * axis + 1][lo]
            fresh[2 * axis][hi] = _min_convolve(h, offsets, trunc)
            h = belief[hi] - incoming[2 * axis][hi]
            fresh[2 * axis + 1][lo] = _min_convolve(h, offsets, trunc)
        fresh -= fresh.min(axis=1, keepdims=True)
        # damped update: incoming <- damping * incoming + (1 - damping) * fresh
        fresh -= incoming
        fresh *= np.float32(1.0 - params.damping)
        delta = float(np.abs(fresh).max()) if fresh.size else 0.0
        incoming += fresh
        if delta <= params.tol:
            break
    belief = unary + incoming.sum(axis=0)
    labels = belief.argmin(axis=0)
    quant = quantize(obs, params)
    e_bp = mrf_energy(labels, obs, params)
    e_q = mrf_energy(quant, obs, params)
    diag = {"iterations": iters, "energy_bp": e_bp, "energy_quantized": e_q}
    if e_q < e_bp:
        log.debug("BP labeling (E=%.6g) lost to quantized input (E=%.6g)", e_bp, e_q)
        return quant, diag
    return labels, diag


def smooth_mrf(scores: ScoreVolume, params: MrfParams = MrfParams()) -> ScoreVolume:
    labels, _ = mrf_labels(scores, params)
    return ScoreVolume(_label_values(params)[labels], normalized=False)


# -- proposal scores ------------------------------------------------------


def _pixel_spans(coords: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Integer pixel ranges [x0, x1) x [y0, y1) covered by each box."""
    _, h, w = shape
    eps = 1e-9
    x0 = np.floor(coords[:, 0] + eps).astype(np.int64)
    y0 = np.floor(coords[:, 1] + eps).astype(np.int64)
    x1 = np.ceil(coords[:, 0] + coords[:, 2] - eps).astype(np.int64)
    y1 = np.ceil(coords[:, 1] + coords[:, 3] - eps).astype(np.int64)
    if np.any(x0 < 0) or np.any(y0 < 0) or np.any(x1 > w) or np.any(y1 > h):
        raise ValidationError(f"proposal boxes leave the {w}x{h} score volume")
    return np.column_stack([x0, y0, np.maximum(x1, x0 + 1), np.maximum(y1, y0 + 1)])


def initial_proposal_score(proposal, volume: ScoreVolume) -> float:
    """Sum of volume values inside the proposal's boxes over its pixel-frame area."""
    return float(initial_scores([proposal], volume)[0])


def initial_scores(proposals: Sequence, volume: ScoreVolume) -> np.ndarray:
    vals = volume.values
    t_len = vals.shape[0]
    integral = np.zeros((t_len, vals.shape[1] + 1, vals.shape[2] + 1))
    integral[:, 1:, 1:] = vals.cumsum(axis=1).cumsum(axis=2)
    out = np.empty(len(proposals))
    for k, p in enumerate(proposals):
        if p.start < 0 or p.end > t_len:
            raise ValidationError(f"proposal {p.id} spans frames beyond the {t_len}-frame volume")
        sp = _pixel_spans(p.coords, vals.shape)
        t = np.arange(p.start, p.end)
        x0, y0, x1, y1 = sp.T
        total = (
            integral[t, y1, x1] - integral[t, y0, x1] - integral[t, y1, x0] + integral[t, y0, x0]
        ).sum()
        area = ((x1 - x0) * (y1 - y0)).sum()
        out[k] = max(total, 0.0) / area
    return out


@dataclass
class ForegroundResult:
    raw: ScoreVolume
    smoothed: ScoreVolume
    diagnostics: dict = field(default_factory=dict)


def foreground_volume(
    flow: FlowField | np.ndarray,
    saliency: np.ndarray | None,
    params: MrfParams = MrfParams(),
) -> ForegroundResult:
    """Motion + saliency aggregation followed by MRF smoothing for one video."""
    motion = motion_magnitude(flow)
    if saliency is None:
        saliency = gradient_saliency(motion)
    raw = aggregate_cues(motion, saliency)
    labels, diag = mrf_labels(raw, params)
    smoothed = ScoreVolume(_label_values(params)[labels], normalized=False)
    return ForegroundResult(raw=raw, smoothed=smoothed, diagnostics=diag)
