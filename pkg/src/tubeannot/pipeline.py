"""End-to-end annotation: score, subset, similarities, graph, solve, report."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from tubeannot.core import ActionProposal, tube_iou, tube_iou_matrix
from tubeannot.evaluation import (
    ABLATION_CONFIGS,
    EvalReport,
    abo,
    best_iou_per_video,
    localization_accuracy,
    mabo,
)
from tubeannot.foreground import FlowField, MrfParams, foreground_volume, initial_scores
from tubeannot.gmcp import (
    GmcpGraph,
    Selection,
    edge_weights,
    length_penalty,
    node_contributions,
    solve_multi_instance,
)
from tubeannot.io import Dataset, box_records, dumps_record, write_jsonl, atomic_write_bytes
from tubeannot.similarity import SimilarityConfig, SimilarityMatrices, class_similarities
from tubeannot.subset import SubsetParams, select_subset, tune_phi

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    mrf: MrfParams = MrfParams()
    subset: SubsetParams = SubsetParams()
    similarity: SimilarityConfig = SimilarityConfig()
    alpha: float = 0.07
    max_iterations: int = 1000
    restarts: int = 0
    seed: int = 0
    overlap_threshold: float = 0.5
    eval_threshold: float = 0.2
    top_k: int = 100
    channels: tuple[bool, bool, bool] = (True, True, True)  # theta, gamma_fine, pi_shape
    use_manifest_instances: bool = True  # False: budget 1 for every video

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_iterations < 0 or self.restarts < 0:
            raise ValueError("iteration and restart counts must be >= 0")
        if not 0 <= self.overlap_threshold <= 1 or not 0 <= self.eval_threshold <= 1:
            raise ValueError("thresholds must lie in [0, 1]")
        object.__setattr__(self, "channels", tuple(bool(c) for c in self.channels))
        if len(self.channels) != 3:
            raise ValueError("channels needs three switches (theta, gamma_fine, pi_shape)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["channels"] = list(self.channels)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "PipelineConfig":
        nested = {"mrf": MrfParams, "subset": SubsetParams, "similarity": SimilarityConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in data.items():
            if k in nested:
                sub_known = {f.name for f in fields(nested[k])}
                bad = set(v) - sub_known
                if bad:
                    raise ValueError(f"unknown keys in {k}: {sorted(bad)}")
                kw[k] = nested[k](**v)
            elif k == "channels":
                kw[k] = tuple(v)
            else:
                kw[k] = v
        return cls(**kw)


# -- per-class stages -------------------------------------------------------


@dataclass
class ClassState:
    """Everything up to the graph edges, reusable across channel configurations."""

    class_label: str
    video_ids: list[str]
    scored: dict  # video id -> tuple of proposals with omega
    nodes: list[ActionProposal]
    groups: np.ndarray
    eta: np.ndarray
    sims: SimilarityMatrices
    timings: dict = field(default_factory=dict)


def score_video(video, config: PipelineConfig) -> tuple[ActionProposal, ...]:
    fg = foreground_volume(FlowField(video.flow.astype(np.float64)), None if video.saliency is None else video.saliency.astype(np.float64), config.mrf)
    omega = initial_scores(video.proposals, fg.smoothed)
    return tuple(p.with_score(float(s)) for p, s in zip(video.proposals, omega))


def top_subset(proposals: Sequence[ActionProposal], config: PipelineConfig) -> list[ActionProposal]:
    """Exemplars of the MAP subset, with phi tuned to keep up to top_k of them."""
    pool = sorted(proposals, key=lambda p: p.id)
    if not pool:
        return []
    params = replace(config.subset, target_count=config.top_k)
    iou = tube_iou_matrix(pool)
    phi = tune_phi(pool, params, iou=iou)
    sel = select_subset(pool, replace(params, phi=phi), iou=iou)
    chosen = set(sel.exemplars)
    return [p for p in pool if p.id in chosen]


def prepare_class(dataset: Dataset, class_label: str, config: PipelineConfig) -> ClassState:
    video_ids = [v for v in dataset.classes[class_label] if v in dataset.videos]
    bad = [v for v, (c, _) in dataset.errors.items() if c == class_label]
    if bad:
        raise RuntimeError(f"unreadable videos in class {class_label}: {', '.join(bad)}")
    if not video_ids:
        raise RuntimeError(f"class {class_label} has no videos")
    t0 = time.perf_counter()
    scored = {vid: score_video(dataset.videos[vid], config) for vid in video_ids}
    t1 = time.perf_counter()
    nodes, groups = [], []
    for g, vid in enumerate(video_ids):
        keep = top_subset(scored[vid], config)
        if not keep:
            raise RuntimeError(f"video {vid} has no proposals")
        nodes.extend(keep)
        groups.extend([g] * len(keep))
    t2 = time.perf_counter()
    sim_cfg = replace(config.similarity, seed=config.seed)
    sims = class_similarities(nodes, groups, sim_cfg)
    t3 = time.perf_counter()
    eta = np.array([length_penalty(dataset.videos[p.video_id].meta.frames, p.length) for p in nodes])
    return ClassState(
        class_label,
        video_ids,
        scored,
        nodes,
        np.asarray(groups),
        eta,
        sims,
        {"scoring": t1 - t0, "subset": t2 - t1, "similarity": t3 - t2},
    )


def build_graph(state: ClassState, config: PipelineConfig, channels=None) -> GmcpGraph:
    use = config.channels if channels is None else tuple(channels)
    edges = edge_weights(state.eta, state.sims.theta, state.sims.gamma_fine, state.sims.pi_shape, use)
    return GmcpGraph(
        tuple(state.video_ids),
        tuple(p.id for p in state.nodes),
        state.groups,
        np.array([p.initial_score for p in state.nodes]),
        state.eta,
        edges,
        config.alpha,
    )


@dataclass
class ClassResult:
    class_label: str
    annotations: list[dict]
    selections: tuple[Selection, ...]
    shortfall: dict
    degenerate: bool
    diagnostics: dict


def solve_class(state: ClassState, dataset: Dataset, config: PipelineConfig, channels=None) -> ClassResult:
    graph = build_graph(state, config, channels)
    budgets = {
        vid: (dataset.videos[vid].meta.instance_count if config.use_manifest_instances else 1) for vid in state.video_ids
    }

    def overlap(i: int, j: int) -> float:
        return tube_iou(state.nodes[i], state.nodes[j])

    res = solve_multi_instance(
        graph, budgets, overlap, config.overlap_threshold, config.max_iterations, config.seed, config.restarts
    )
    node_index = {(p.video_id, p.id): k for k, p in enumerate(state.nodes)}
    annotations = []
    counter: dict[str, int] = {}
    for sel in res.selections:
        flat = [node_index[(vid, pid)] for vid, pid in sel.chosen.items()]
        sub, _ = graph.subgraph(np.isin(np.arange(len(state.nodes)), flat))
        # the subgraph holds exactly the chosen nodes, in flat order
        contrib = node_contributions(sub, np.arange(len(flat)))
        for k, i in enumerate(sorted(flat)):
            p = state.nodes[i]
            inst = counter.get(p.video_id, 0)
            counter[p.video_id] = inst + 1
            annotations.append(
                {
                    "class_label": state.class_label,
                    "video_id": p.video_id,
                    "instance_id": inst,
                    "round": sel.instance_round,
                    "proposal_id": p.id,
                    "boxes": box_records(p),
                    "omega": float(p.initial_score),
                    "eta": float(state.eta[i]),
                    "objective_contribution": float(contrib[k]),
                    "round_objective": float(sel.objective),
                    "degenerate": bool(sel.degenerate),
                }
            )
    annotations.sort(key=lambda a: (state.video_ids.index(a["video_id"]), a["instance_id"]))
    diagnostics = {
        "nodes": len(state.nodes),
        "rounds": len(res.selections),
        "iterations": [s.iterations for s in res.selections],
        "shortfall": dict(res.shortfall),
        "similarity_constants": state.sims.constants,
    }
    return ClassResult(
        state.class_label, annotations, res.selections, dict(res.shortfall), any(s.degenerate for s in res.selections), diagnostics
    )


# -- whole runs -------------------------------------------------------------


class _Tube:
    """Minimal tube view of an annotation record for IOU computations."""

    def __init__(self, video_id: str, boxes):
        self.video_id = video_id
        arr = np.asarray(boxes, dtype=np.float64)
        self.start = int(arr[0, 0])
        self.coords = arr[:, 1:]
        self.length = len(arr)
        self.end = self.start + self.length


def annotation_tubes(annotations: Sequence[dict]) -> list[_Tube]:
    return [_Tube(a["video_id"], a["boxes"]) for a in annotations]


def evaluate(
    dataset: Dataset,
    annotations: Sequence[dict],
    pools: Mapping[str, Sequence] | None = None,
    threshold: float = 0.2,
    classes: Sequence[str] | None = None,
) -> EvalReport | None:
    """Report over the classes that have ground truth; None when none do.

    ``pools`` maps video id -> proposal pool for ABO (default: full pools).
    """
    classes = list(dataset.classes) if classes is None else list(classes)
    per_class, gts_all = {}, []
    full_abo = {}
    for c in classes:
        gts = [g for vid in dataset.classes.get(c, []) if vid in dataset.videos for g in dataset.videos[vid].ground_truth]
        if not gts:
            continue
        full = {vid: dataset.videos[vid].proposals for vid in dataset.classes[c] if vid in dataset.videos}
        per_class[c] = abo(gts, pools if pools is not None else full)
        full_abo[c] = abo(gts, full)
        gts_all.extend(gts)
    if not per_class:
        return None
    tubes = annotation_tubes([a for a in annotations if a["class_label"] in per_class])
    return EvalReport(
        per_class_abo=per_class,
        mabo=mabo(per_class),
        localization_accuracy=localization_accuracy(tubes, gts_all, threshold),
        per_video_best_iou=best_iou_per_video(tubes, gts_all),
        extra={
            "abo_pool": "subset" if pools is not None else "full",
            "per_class_abo_full": full_abo,
            "mabo_full": mabo(full_abo),
            "threshold": threshold,
        },
    )


@dataclass
class RunResult:
    annotations: list[dict]
    report: EvalReport | None
    failures: dict
    class_results: dict
    timings: dict

    @property
    def exit_code(self) -> int:
        total = len(self.class_results) + len(self.failures)
        if not self.failures:
            return 0
        return 1 if len(self.failures) == total else 2


def run(dataset: Dataset, config: PipelineConfig = PipelineConfig(), out_dir: str | Path | None = None) -> RunResult:
    """Annotate every class; failures stay within their class."""
    results, failures, pools, timings = {}, {}, {}, {}
    for c in dataset.classes:
        t0 = time.perf_counter()
        try:
            state = prepare_class(dataset, c, config)
            results[c] = solve_class(state, dataset, config)
            pools.update({vid: [p for p in state.nodes if p.video_id == vid] for vid in state.video_ids})
            timings[c] = dict(state.timings, total=time.perf_counter() - t0)
        except Exception as exc:  # isolate the class, keep going
            log.error("class %s failed: %s", c, exc)
            failures[c] = f"{type(exc).__name__}: {exc}"
            continue
        if out_dir is not None:
            write_jsonl(Path(out_dir) / "annotations" / f"{c}.jsonl", results[c].annotations)
    annotations = [a for c in results for a in results[c].annotations]
    report = evaluate(dataset, annotations, pools, config.eval_threshold, classes=list(results)) if results else None
    out = RunResult(annotations, report, failures, results, timings)
    if out_dir is not None:
        write_outputs(out, config, out_dir)
    return out


def report_payload(result: RunResult, config: PipelineConfig) -> dict:
    return {
        "config": config.to_dict(),
        "failures": dict(sorted(result.failures.items())),
        "classes": {
            c: {"degenerate": r.degenerate, **r.diagnostics} for c, r in result.class_results.items()
        },
        "evaluation": result.report.to_dict() if result.report is not None else None,
    }


def write_outputs(result: RunResult, config: PipelineConfig, out_dir: str | Path) -> None:
    """annotations.jsonl and report.json (timings are logged, not written, to keep outputs byte-stable)."""
    out_dir = Path(out_dir)
    write_jsonl(out_dir / "annotations.jsonl", result.annotations)
    atomic_write_bytes(out_dir / "report.json", (dumps_record(report_payload(result, config)) + "\n").encode())


def ablation_accuracies(
    dataset: Dataset, config: PipelineConfig, configs: Mapping[str, tuple[bool, bool, bool]] = ABLATION_CONFIGS
) -> dict[str, float]:
    states = {}
    for c in dataset.classes:
        try:
            states[c] = prepare_class(dataset, c, config)
        except Exception as exc:
            log.error("class %s failed during ablation: %s", c, exc)
    gts = [g for c in states for vid in states[c].video_ids for g in dataset.videos[vid].ground_truth]
    if not gts:
        raise ValueError("ablation needs ground truth")
    rows = {}
    for name, use in configs.items():
        ann = [a for c, s in states.items() for a in solve_class(s, dataset, config, use).annotations]
        rows[name] = localization_accuracy(annotation_tubes(ann), gts, config.eval_threshold)
    return rows
