"""Scoring against ground truth: ABO/MABO, localization accuracy, ablations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from tubeannot.core import group_by, tube_iou_matrix

# channel switches are (theta, gamma_fine, pi_shape); columns add shape, then global, then fine grain
ABLATION_CONFIGS: dict[str, tuple[bool, bool, bool]] = {
    "initial": (False, False, False),
    "initial+shape": (False, False, True),
    "initial+shape+global": (True, False, True),
    "initial+shape+global+fine": (True, True, True),
}


@dataclass
class EvalReport:
    per_class_abo: dict
    mabo: float
    localization_accuracy: float
    per_video_best_iou: dict
    ablation_rows: dict | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.localization_accuracy <= 1.0:
            raise ValueError("localization accuracy outside [0, 1]")
        if self.per_class_abo and abs(self.mabo - mabo(self.per_class_abo)) > 1e-12:
            raise ValueError("mabo must equal the mean of per-class ABO")

    def to_dict(self) -> dict:
        out = {
            "per_class_abo": dict(sorted(self.per_class_abo.items())),
            "mabo": self.mabo,
            "localization_accuracy": self.localization_accuracy,
            "per_video_best_iou": dict(sorted(self.per_video_best_iou.items())),
        }
        if self.ablation_rows is not None:
            out["ablation_rows"] = dict(self.ablation_rows)
        out.update(self.extra)
        return out


def abo(ground_truths: Sequence, proposals_per_video: Mapping[str, Sequence]) -> float:
    """Mean over ground truths of the best tube overlap in that video's pool (empty pool: 0)."""
    if not ground_truths:
        raise ValueError("ABO needs at least one ground truth")
    best = []
    for g in ground_truths:
        pool = proposals_per_video.get(g.video_id, ())
        best.append(float(tube_iou_matrix([g], list(pool)).max()) if len(pool) else 0.0)
    return float(np.mean(best))


def mabo(per_class_abo: Mapping[str, float] | Sequence[float]) -> float:
    vals = list(per_class_abo.values()) if isinstance(per_class_abo, Mapping) else list(per_class_abo)
    if not vals:
        raise ValueError("MABO needs at least one class")
    return float(np.mean(vals))


def match_instances(selections: Sequence, ground_truths: Sequence) -> list[tuple[int, int | None, float]]:
    """Greedy matching per video by descending IOU without reuse.

    Returns ``(gt index, selection index or None, iou)`` for every ground
    truth. Equal IOUs go to the lower ground-truth index, then the lower
    selection index.
    """
    out: dict[int, tuple[int, int | None, float]] = {}
    sel_by_video = group_by(range(len(selections)), lambda k: selections[k].video_id)
    gt_by_video = group_by(range(len(ground_truths)), lambda k: ground_truths[k].video_id)
    for vid, gts in gt_by_video.items():
        sels = sel_by_video.get(vid, [])
        if sels:
            iou = tube_iou_matrix([ground_truths[g] for g in gts], [selections[s] for s in sels])
            cand = sorted(
                ((-iou[a, b], gts[a], sels[b], iou[a, b]) for a in range(len(gts)) for b in range(len(sels))),
            )
            used_g, used_s = set(), set()
            for _, g, s, v in cand:
                if g in used_g or s in used_s:
                    continue
                used_g.add(g)
                used_s.add(s)
                out[g] = (g, s, float(v))
        for g in gts:
            out.setdefault(g, (g, None, 0.0))
    return [out[g] for g in range(len(ground_truths))]


def localization_accuracy(selections: Sequence, ground_truths: Sequence, threshold: float = 0.2) -> float:
    """Fraction of ground-truth instances whose matched selection reaches the IOU threshold."""
    if not ground_truths:
        return 0.0
    matches = match_instances(selections, ground_truths)
    return float(np.mean([s is not None and v >= threshold for _, s, v in matches]))


def best_iou_per_video(selections: Sequence, ground_truths: Sequence) -> dict[str, float]:
    out: dict[str, float] = {}
    for g, _, v in match_instances(selections, ground_truths):
        vid = ground_truths[g].video_id
        out[vid] = max(out.get(vid, 0.0), v)
    return out


def ablation_run(dataset, config, configs: Mapping[str, tuple[bool, bool, bool]] = ABLATION_CONFIGS) -> dict[str, float]:
    """Localization accuracy with similarity channels progressively enabled.

    Scoring, subset selection and similarity matrices are computed once per
    class; each configuration only rebuilds the edges and re-solves.
    """
    from tubeannot.pipeline import ablation_accuracies

    return ablation_accuracies(dataset, config, configs)
