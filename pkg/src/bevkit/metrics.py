"""nuScenes-style detection evaluation.

Predictions are greedily matched to ground truth by BEV center distance at
thresholds of 0.5/1/2/4 meters, per-class AP comes from 101-point recall
interpolation of the rank-accumulated precision-recall curve, and the five
true-positive error metrics are computed on the 2-meter matches. Aggregation
follows two distinct missing-value rules, both verified against published
reference tables: a class's mean AP averages over all four thresholds with
non-evaluable entries contributing zero, while the global mean of each TP
error skips classes where the metric is absent.

No range or visibility filtering is applied before evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .fusion import DetectionBox

DETECTION_CLASSES = (
    "car", "truck", "bus", "trailer", "construction_vehicle",
    "pedestrian", "motorcycle", "bicycle", "traffic_cone", "barrier",
)

ATTRIBUTES = (
    "", "vehicle.moving", "vehicle.parked", "vehicle.stopped",
    "cycle.with_rider", "cycle.without_rider",
    "pedestrian.moving", "pedestrian.standing", "pedestrian.sitting_lying_down",
)

AP_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0  # TP errors use the 2 m matches
TP_METRICS = ("ate", "ase", "aoe", "ave", "aae")

# Metrics without meaning for a class are reported absent (the NaN cells of
# published result tables): cones carry no orientation/velocity/attribute,
# barriers no velocity/attribute.
CLASS_TP_METRICS = {
    "traffic_cone": ("ate", "ase"),
    "barrier": ("ate", "ase", "aoe"),
}


@dataclass
class MatchResult:
    """Greedy matching output for one class at one distance threshold.

    ranked_* arrays follow descending prediction score; matched gt indices
    are -1 for false positives.
    """

    ranked_pred: np.ndarray
    ranked_gt: np.ndarray
    ranked_dist: np.ndarray
    n_gt: int

    @property
    def tp_flags(self) -> np.ndarray:
        return self.ranked_gt >= 0

    @property
    def n_matched(self) -> int:
        return int(np.count_nonzero(self.tp_flags))


def bev_distance(a: DetectionBox, b: DetectionBox) -> float:
    return float(np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]))


def match_center_distance(preds: list[DetectionBox], gts: list[DetectionBox],
                          threshold: float) -> MatchResult:
    """Greedy per-class matching by BEV center distance.

    Predictions are visited in descending score (input order breaking
    ties); each takes the nearest unmatched ground truth within the
    threshold, equal distances resolving to the lower gt index.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    gt_centers = np.array([[g.center[0], g.center[1]] for g in gts]).reshape(-1, 2)
    taken = np.zeros(len(gts), dtype=bool)
    ranked_gt = np.full(len(preds), -1, dtype=np.int64)
    ranked_dist = np.full(len(preds), np.nan)
    for rank, pi in enumerate(order):
        if not len(gts):
            break
        p = preds[pi]
        d = np.hypot(gt_centers[:, 0] - p.center[0], gt_centers[:, 1] - p.center[1])
        d = np.where(taken, np.inf, d)
        gi = int(np.argmin(d))  # first minimum = lowest gt index
        if d[gi] <= threshold:
            taken[gi] = True
            ranked_gt[rank] = gi
            ranked_dist[rank] = d[gi]
    return MatchResult(np.array(order, dtype=np.int64), ranked_gt, ranked_dist, len(gts))


def average_precision(match: MatchResult) -> float | None:
    """Area under the PR curve via 101-point recall interpolation.

    Returns None (not evaluable) when there is no ground truth or no
    prediction ever matches, mirroring the NaN cells of published tables.
    """
    if match.n_gt == 0 or match.n_matched == 0:
        return None
    tp = np.cumsum(match.tp_flags.astype(np.float64))
    ranks = np.arange(1, len(tp) + 1, dtype=np.float64)
    precision = tp / ranks
    recall = tp / match.n_gt
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        achievable = precision[recall >= r - 1e-12]
        ap += achievable.max() if achievable.size else 0.0
    return ap / 101.0


def class_mean_ap(ap_per_threshold) -> float | None:
    """Mean over all four thresholds, non-evaluable entries counting zero.

    Returns None when no threshold is evaluable; such classes are excluded
    from the global mean.
    """
    vals = [a for a in ap_per_threshold if a is not None]
    if not vals:
        return None
    return float(sum(vals)) / len(ap_per_threshold)


def _aligned_size_iou(pred: DetectionBox, gt: DetectionBox) -> float:
    """3-D IOU after aligning centers and yaw: shape similarity only."""
    mins = np.minimum(pred.size, gt.size)
    inter = float(np.prod(mins))
    union = float(np.prod(pred.size)) + float(np.prod(gt.size)) - inter
    return inter / union


def _yaw_diff(a: float, b: float) -> float:
    """Absolute yaw difference wrapped into [0, pi]."""
    d = abs(a - b) % (2.0 * np.pi)
    return min(d, 2.0 * np.pi - d)


def tp_errors(matched_pairs: list[tuple[DetectionBox, DetectionBox]],
              class_name: str | None = None) -> dict[str, float | None]:
    """Mean TP errors over (pred, gt) matches from the 2 m threshold.

    Values are None when there are no matches or the metric does not apply
    to the class.
    """
    applicable = CLASS_TP_METRICS.get(class_name, TP_METRICS) if class_name else TP_METRICS
    out: dict[str, float | None] = {m: None for m in TP_METRICS}
    if not matched_pairs:
        return out
    preds, gts = zip(*matched_pairs)
    if "ate" in applicable:
        out["ate"] = float(np.mean([bev_distance(p, g) for p, g in matched_pairs]))
    if "ase" in applicable:
        out["ase"] = float(np.mean([1.0 - _aligned_size_iou(p, g) for p, g in matched_pairs]))
    if "aoe" in applicable:
        out["aoe"] = float(np.mean([_yaw_diff(p.yaw, g.yaw) for p, g in matched_pairs]))
    if "ave" in applicable:
        out["ave"] = float(np.mean([np.hypot(p.velocity[0] - g.velocity[0],
                                             p.velocity[1] - g.velocity[1])
                                    for p, g in matched_pairs]))
    if "aae" in applicable:
        correct = [p.attribute_id == g.attribute_id for p, g in matched_pairs]
        out["aae"] = float(1.0 - np.mean(correct))
    return out


@dataclass
class ClassEval:
    """One class's APs across thresholds plus its TP errors."""

    class_name: str
    ap_per_threshold: list[float | None]
    tp: dict[str, float | None] = field(default_factory=dict)

    @property
    def mean_ap(self) -> float | None:
        return class_mean_ap(self.ap_per_threshold)


@dataclass
class EvalSummary:
    """Global evaluation result; NDS is recomputed from its own fields."""

    per_class: list[ClassEval]
    mean_ap: float
    mtp: dict[str, float | None]
    nds: float
    eval_time: float = 0.0

    def check(self, tol: float = 1e-6) -> None:
        expect = compose_nds(self.mean_ap, [self.mtp[m] for m in TP_METRICS])
        if abs(expect - self.nds) > tol:
            raise ValueError(f"inconsistent NDS: stored {self.nds}, recomputed {expect}")

    def to_dict(self) -> dict:
        return {
            "per_class": {
                ce.class_name: {
                    "ap_per_threshold": ce.ap_per_threshold,
                    "mean_ap": ce.mean_ap,
                    "tp_errors": ce.tp,
                }
                for ce in self.per_class
            },
            "mean_ap": self.mean_ap,
            "mtp": self.mtp,
            "nds": self.nds,
            "eval_time": self.eval_time,
        }


def compose_nds(mean_ap: float, mtps) -> float:
    """(5*mAP + sum over the five TP errors of (1 - min(1, err))) / 10.

    An absent error contributes nothing, i.e. counts as saturated at 1.
    """
    if not 0.0 <= mean_ap <= 1.0:
        raise ValueError("mean AP must lie in [0, 1]")
    total = 5.0 * mean_ap
    mtps = list(mtps)
    if len(mtps) != 5:
        raise ValueError("exactly five TP error values expected")
    for err in mtps:
        if err is None:
            continue
        if err < 0:
            raise ValueError("TP errors are non-negative")
        total += 1.0 - min(1.0, err)
    return total / 10.0


def evaluate_class(preds: list[DetectionBox], gts: list[DetectionBox],
                   class_name: str) -> ClassEval:
    aps = []
    tp_pairs: list[tuple[DetectionBox, DetectionBox]] = []
    for thr in AP_THRESHOLDS:
        match = match_center_distance(preds, gts, thr)
        aps.append(average_precision(match))
        if thr == TP_THRESHOLD:
            tp_pairs = [(preds[int(pi)], gts[int(gi)])
                        for pi, gi in zip(match.ranked_pred, match.ranked_gt) if gi >= 0]
    return ClassEval(class_name, aps, tp_errors(tp_pairs, class_name))


def aggregate_summary(per_class: list[ClassEval], eval_time: float = 0.0) -> EvalSummary:
    """Combine class results under the two documented missing-value rules."""
    if not per_class:
        raise ValueError("need at least one class")
    mean_aps = [ce.mean_ap for ce in per_class if ce.mean_ap is not None]
    global_map = float(np.mean(mean_aps)) if mean_aps else 0.0
    mtp: dict[str, float | None] = {}
    for metric in TP_METRICS:
        present = [ce.tp[metric] for ce in per_class if ce.tp.get(metric) is not None]
        mtp[metric] = float(np.mean(present)) if present else None
    nds = compose_nds(global_map, [mtp[m] for m in TP_METRICS])
    return EvalSummary(per_class, global_map, mtp, nds, eval_time)


def evaluate_detections(preds_by_token: dict[str, list[DetectionBox]],
                        gts_by_token: dict[str, list[DetectionBox]],
                        classes=DETECTION_CLASSES, eval_time: float = 0.0) -> EvalSummary:
    """Full evaluation over samples; matching never crosses sample tokens."""
    if set(preds_by_token) != set(gts_by_token):
        raise ValueError("prediction and ground-truth sample tokens differ")
    per_class = []
    for ci, name in enumerate(classes):
        # Rank accumulation needs one global score ordering per class, so
        # per-token matches are merged before the PR sweep.
        tp_pairs: list[tuple[DetectionBox, DetectionBox]] = []
        n_gt_total = 0
        per_thr_ranked: list[list[tuple[float, bool]]] = [[] for _ in AP_THRESHOLDS]
        for token in sorted(gts_by_token):
            preds = [b for b in preds_by_token[token] if b.class_id == ci]
            gts = [b for b in gts_by_token[token] if b.class_id == ci]
            n_gt_total += len(gts)
            for ti, thr in enumerate(AP_THRESHOLDS):
                match = match_center_distance(preds, gts, thr)
                scores = [preds[int(pi)].score for pi in match.ranked_pred]
                per_thr_ranked[ti].extend(zip(scores, match.tp_flags.tolist()))
                if thr == TP_THRESHOLD:
                    tp_pairs.extend((preds[int(pi)], gts[int(gi)])
                                    for pi, gi in zip(match.ranked_pred, match.ranked_gt)
                                    if gi >= 0)
        aps: list[float | None] = []
        for ranked in per_thr_ranked:
            ranked.sort(key=lambda sf: -sf[0])
            flags = np.array([f for _, f in ranked], dtype=bool)
            ranked_gt = np.where(flags, 0, -1)
            match = MatchResult(np.arange(len(flags)), ranked_gt,
                                np.full(len(flags), np.nan), n_gt_total)
            aps.append(average_precision(match))
        per_class.append(ClassEval(name, aps, tp_errors(tp_pairs, name)))
    return aggregate_summary(per_class, eval_time)


def box_to_json(box: DetectionBox, with_score: bool = True) -> dict:
    d = {
        "translation": list(box.center),
        "size": list(box.size),
        "yaw": box.yaw,
        "velocity": list(box.velocity),
        "detection_name": DETECTION_CLASSES[box.class_id],
        "attribute_name": ATTRIBUTES[box.attribute_id],
    }
    if with_score:
        d["detection_score"] = box.score
    return d


def box_from_json(d: dict) -> DetectionBox:
    return DetectionBox(
        center=tuple(d["translation"]),
        size=tuple(d["size"]),
        yaw=float(d["yaw"]),
        velocity=tuple(d["velocity"]),
        class_id=DETECTION_CLASSES.index(d["detection_name"]),
        score=float(d.get("detection_score", 0.0)),
        attribute_id=ATTRIBUTES.index(d.get("attribute_name", "")),
    )


def save_boxes(path, boxes_by_token: dict[str, list[DetectionBox]],
               with_score: bool = True) -> None:
    payload = {token: [box_to_json(b, with_score) for b in boxes]
               for token, boxes in boxes_by_token.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_boxes(path) -> dict[str, list[DetectionBox]]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return {token: [box_from_json(d) for d in boxes] for token, boxes in payload.items()}


def render_summary_table(rows: dict[str, EvalSummary]) -> str:
    """Plain-text comparison table: one row per method, aggregate columns."""
    header = (f"{'Method':<18}{'mTE':>8}{'mSE':>8}{'mOE':>8}{'mVE':>8}{'mAE':>8}"
              f"{'mAP':>8}{'NDS':>8}{'Time':>9}")
    lines = [header, "-" * len(header)]
    for name, summary in rows.items():
        cells = [summary.mtp[m] for m in TP_METRICS]
        text = "".join(f"{c:>8.4f}" if c is not None else f"{'-':>8}" for c in cells)
        lines.append(f"{name:<18}{text}{summary.mean_ap:>8.4f}{summary.nds:>8.4f}"
                     f"{summary.eval_time:>8.2f}s")
    return "\n".join(lines)
