"""End-to-end pipeline: pillars -> depth net -> lift -> pooling -> fusion.

Runs a scene bundle through every stage with seeded, untrained weights,
records per-stage checksums and wall-clock, computes the losses, decodes
box predictions from the fused heatmap, and evaluates them against the
bundle's ground truth.

Stage wiring, where the configuration leaves the sensors on:

    radar cloud -> pillars -> VFE -> pseudo image -> 1x1 conv -> f_radar
    camera features + rig -> gates -> depth logits + context
    radar projections -> depth-logit hints (camera+radar only)
    softmax -> lift -> f_bev (pooled) and depth-refined lift -> f_depth
    f_bev + f_radar + f_depth -> heatmap prior -> radar box matching
    matched q rows -> q grid -> final heatmap -> peak decoding

The depth supervision target is always rasterized from the lidar and radar
clouds together, so camera-only and camera+radar runs report BCE against
the same target and stay comparable.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fusion as fu
from . import geometry as geo
from . import kan
from . import metrics as me
from . import pillars as pi
from . import voxelpool as vp
from .nnprims import (
    DepthBinSpec,
    conv_pointwise,
    depth_refine,
    lift_outer_product,
    softmax_over_depth,
)
from .scene import CLASS_SIZES, CLASS_ATTRIBUTES, SceneBundle, load_scene

POOL_IMPLS = ("reference", "cumsum", "concurrent")
MODALITIES = ("camera", "camera+radar")


@dataclass
class PipelineConfig:
    """Single stage-keyed configuration for a pipeline run.

    Defaults are the desk-scale constants; none of them comes from a
    published table.
    """

    # depth discretization and head widths
    d_min: float = 2.0
    d_max: float = 58.0
    n_depth_bins: int = 112
    n_context: int = 80
    kan_hidden: tuple[int, ...] = (64,)
    # BEV grid (shared by pillars and pooling)
    bev_range: float = 51.2
    bev_cells: int = 128
    # pillar stream
    pillar_max_points: int = 20
    pillar_max_pillars: int = 4096
    radar_channels: int = 32
    # fusion and head
    n_classes: int = len(me.DETECTION_CLASSES)
    heatmap_score_thresh: float = 0.55
    match_iou_thresh: float = 0.01
    peak_threshold: float = 0.6
    # moderate prior weight: a hard boost would backfire at pixels where
    # lidar sees a nearer surface than the radar return
    radar_hint_strength: float = 2.0
    # execution
    weight_seed: int = 7
    pooling: str = "cumsum"
    workers: int = 4
    modality: str = "camera+radar"
    sequential: bool = False
    average_pool: bool = False

    def __post_init__(self):
        if self.pooling not in POOL_IMPLS:
            raise ValueError(f"pooling must be one of {POOL_IMPLS}")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")
        if isinstance(self.kan_hidden, list):
            self.kan_hidden = tuple(self.kan_hidden)

    @property
    def depth_bins(self) -> DepthBinSpec:
        return DepthBinSpec(self.d_min, self.d_max, self.n_depth_bins)

    @property
    def bev_grid(self) -> vp.BEVGridConfig:
        r = self.bev_range
        return vp.BEVGridConfig((-r, r), (-r, r), self.bev_cells, self.bev_cells)

    @property
    def pillar_grid(self) -> pi.PillarGridConfig:
        r = self.bev_range
        return pi.PillarGridConfig((-r, r), (-r, r),
                                   (self.bev_cells, self.bev_cells),
                                   self.pillar_max_points, self.pillar_max_pillars)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_dict(self) -> dict:
        return {
            "depth": {"d_min": self.d_min, "d_max": self.d_max,
                      "n_bins": self.n_depth_bins, "n_context": self.n_context,
                      "kan_hidden": list(self.kan_hidden)},
            "bev": {"range": self.bev_range, "cells": self.bev_cells},
            "pillars": {"max_points": self.pillar_max_points,
                        "max_pillars": self.pillar_max_pillars,
                        "channels": self.radar_channels},
            "fusion": {"n_classes": self.n_classes,
                       "heatmap_score_thresh": self.heatmap_score_thresh,
                       "match_iou_thresh": self.match_iou_thresh,
                       "peak_threshold": self.peak_threshold,
                       "radar_hint_strength": self.radar_hint_strength},
            "run": {"weight_seed": self.weight_seed, "pooling": self.pooling,
                    "workers": self.workers, "modality": self.modality,
                    "sequential": self.sequential, "average_pool": self.average_pool},
        }

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        depth, bev = d.get("depth", {}), d.get("bev", {})
        pil, fus, run = d.get("pillars", {}), d.get("fusion", {}), d.get("run", {})
        base = PipelineConfig()
        return PipelineConfig(
            d_min=depth.get("d_min", base.d_min),
            d_max=depth.get("d_max", base.d_max),
            n_depth_bins=depth.get("n_bins", base.n_depth_bins),
            n_context=depth.get("n_context", base.n_context),
            kan_hidden=tuple(depth.get("kan_hidden", base.kan_hidden)),
            bev_range=bev.get("range", base.bev_range),
            bev_cells=bev.get("cells", base.bev_cells),
            pillar_max_points=pil.get("max_points", base.pillar_max_points),
            pillar_max_pillars=pil.get("max_pillars", base.pillar_max_pillars),
            radar_channels=pil.get("channels", base.radar_channels),
            n_classes=fus.get("n_classes", base.n_classes),
            heatmap_score_thresh=fus.get("heatmap_score_thresh", base.heatmap_score_thresh),
            match_iou_thresh=fus.get("match_iou_thresh", base.match_iou_thresh),
            peak_threshold=fus.get("peak_threshold", base.peak_threshold),
            radar_hint_strength=fus.get("radar_hint_strength", base.radar_hint_strength),
            weight_seed=run.get("weight_seed", base.weight_seed),
            pooling=run.get("pooling", base.pooling),
            workers=run.get("workers", base.workers),
            modality=run.get("modality", base.modality),
            sequential=run.get("sequential", base.sequential),
            average_pool=run.get("average_pool", base.average_pool),
        )

    @staticmethod
    def from_json(path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return PipelineConfig.from_dict(json.load(fh))


@dataclass
class PipelineWeights:
    """All seeded, injectable parameters of one run."""

    vfe: pi.VfeWeights
    depthnet: kan.DepthNetParams
    radar_proj_kernel: np.ndarray
    radar_proj_bias: np.ndarray
    head_kernel: np.ndarray
    head_bias: np.ndarray
    q_kernel: np.ndarray
    q_bias: np.ndarray
    refine_kernel: np.ndarray

    @staticmethod
    def create(cfg: PipelineConfig, n_features: int) -> "PipelineWeights":
        rng = np.random.default_rng(cfg.weight_seed)
        c_ctx = cfg.n_context
        return PipelineWeights(
            vfe=pi.VfeWeights.random(rng, cfg.radar_channels),
            depthnet=kan.DepthNetParams.random(
                rng, n_features, cfg.n_depth_bins, c_ctx, hidden=cfg.kan_hidden),
            radar_proj_kernel=rng.normal(0.0, 0.2, (c_ctx, cfg.radar_channels)),
            radar_proj_bias=np.zeros(c_ctx),
            head_kernel=rng.normal(0.0, 0.3, (cfg.n_classes, c_ctx)),
            head_bias=rng.normal(0.0, 0.1, cfg.n_classes),
            q_kernel=rng.normal(0.0, 0.2, (c_ctx, 4)),
            q_bias=np.zeros(c_ctx),
            refine_kernel=np.array([[0.0, 0.1, 0.0],
                                    [0.1, 0.6, 0.1],
                                    [0.0, 0.1, 0.0]]),
        )


@dataclass
class RunReport:
    """Checksums, losses, fusion stats, evaluation, and per-stage timing."""

    checksums: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    losses: dict[str, float] = field(default_factory=dict)
    fusion_stats: dict[str, float] = field(default_factory=dict)
    matches: list[dict] = field(default_factory=list)
    dropped_points: dict[str, int] = field(default_factory=dict)
    eval_summary: me.EvalSummary | None = None

    def to_dict(self) -> dict:
        out = {
            "checksums": self.checksums,
            "timings": self.timings,
            "losses": self.losses,
            "fusion_stats": self.fusion_stats,
            "matches": self.matches,
            "dropped_points": self.dropped_points,
        }
        if self.eval_summary is not None:
            self.eval_summary.check()
            out["eval"] = self.eval_summary.to_dict()
        return out


def checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).hexdigest()


class _StageTimer:
    def __init__(self, report: RunReport, name: str):
        self.report, self.name = report, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.report.timings[self.name] = time.perf_counter() - self.t0
        return False


def _stage_error(stage: str, err: Exception) -> Exception:
    # keep the I/O-vs-validation distinction so the CLI exit code survives
    kind = OSError if isinstance(err, OSError) else RuntimeError
    return kind(f"pipeline stage '{stage}' failed: {err}")


def _feature_rig(rig: geo.CameraRig, feature_hw: tuple[int, int]) -> geo.CameraRig:
    h, w = rig.image_size
    fh, fw = feature_hw
    return rig.scaled(fh / h, fw / w)


def _depth_hints(radar_xyz: np.ndarray, rig: geo.CameraRig,
                 feature_hw: tuple[int, int]) -> np.ndarray | None:
    """Per-pixel nearest radar depth at feature resolution, NaN when unseen."""
    frig = _feature_rig(rig, feature_hw)
    dm, _ = geo.depth_map_from_points(radar_xyz, frig, feature_hw)
    vals = dm.values
    if not dm.coverage_mask().any():
        return None
    return vals


def _apply_depth_hints(logits: np.ndarray, hints: np.ndarray,
                       bins: DepthBinSpec, strength: float) -> np.ndarray:
    out = logits.copy()
    covered = hints > 0
    if not covered.any():
        return out
    rows, cols = np.nonzero(covered)
    bin_idx = bins.index_of(hints[covered])
    out[bin_idx, rows, cols] += strength
    return out


def _pool(cfg: PipelineConfig, points: vp.FeaturedPoints) -> vp.BEVGrid:
    impl = cfg.pooling
    workers = 1 if cfg.sequential else cfg.workers
    if impl == "reference":
        return vp.pool_reference(points, cfg.bev_grid, average=cfg.average_pool)
    if impl == "cumsum":
        return vp.pool_cumsum(points, cfg.bev_grid, average=cfg.average_pool)
    return vp.pool_concurrent(points, cfg.bev_grid, workers, average=cfg.average_pool)


def _radar_bev_boxes(radar_xyz: np.ndarray, grid: vp.BEVGridConfig) -> list[fu.DetectionBox]:
    """One-cell footprint proposals at radar-occupied BEV cells."""
    pts = vp.FeaturedPoints(radar_xyz, np.ones((radar_xyz.shape[0], 1)))
    inside, ids = vp.cell_ids(pts, grid)
    if not ids.size:
        return []
    counts = np.bincount(ids, minlength=grid.nx * grid.ny)
    occupied = np.flatnonzero(counts)
    top = counts.max()
    dx, dy = grid.cell_size
    boxes = []
    for cell in occupied:
        iy, ix = divmod(int(cell), grid.nx)
        cx, cy = grid.cell_center(ix, iy)
        boxes.append(fu.DetectionBox(
            center=(float(cx), float(cy), 0.5), size=(dx, dy, 1.0), yaw=0.0,
            velocity=(0.0, 0.0), class_id=0, score=float(counts[cell] / top)))
    return boxes


def _gt_heatmap(boxes: list[fu.DetectionBox], grid: vp.BEVGridConfig,
                n_classes: int) -> np.ndarray:
    hm = np.zeros((n_classes, grid.ny, grid.nx))
    dx, dy = grid.cell_size
    for b in boxes:
        ix = int(np.floor((b.center[0] - grid.x_range[0]) / dx))
        iy = int(np.floor((b.center[1] - grid.y_range[0]) / dy))
        if 0 <= ix < grid.nx and 0 <= iy < grid.ny:
            hm[b.class_id, iy, ix] = 1.0
    return hm


def _decode_peaks(heatmap: np.ndarray, grid: vp.BEVGridConfig, threshold: float,
                  radar_velocity: dict[tuple[int, int], tuple[float, float]],
                  ) -> list[fu.DetectionBox]:
    """3x3 local maxima above threshold become boxes with nominal sizes."""
    n_classes, ny, nx = heatmap.shape
    padded = np.full((n_classes, ny + 2, nx + 2), -np.inf)
    padded[:, 1:-1, 1:-1] = heatmap
    neigh = np.full(heatmap.shape, -np.inf)
    for dj in range(3):
        for dk in range(3):
            if dj == 1 and dk == 1:
                continue
            neigh = np.maximum(neigh, padded[:, dj : dj + ny, dk : dk + nx])
    is_peak = (heatmap >= neigh) & (heatmap >= threshold)
    boxes = []
    for ci, iy, ix in zip(*np.nonzero(is_peak)):
        name = me.DETECTION_CLASSES[ci]
        w, length, h = CLASS_SIZES[name]
        cx, cy = grid.cell_center(int(ix), int(iy))
        vel = radar_velocity.get((int(iy), int(ix)), (0.0, 0.0))
        boxes.append(fu.DetectionBox(
            center=(float(cx), float(cy), h / 2.0), size=(w, length, h), yaw=0.0,
            velocity=vel, class_id=int(ci), score=float(heatmap[ci, iy, ix]),
            attribute_id=me.ATTRIBUTES.index(CLASS_ATTRIBUTES[name])))
    boxes.sort(key=lambda b: -b.score)
    return boxes


def run_pipeline(scene_dir, cfg: PipelineConfig,
                 weights: PipelineWeights | None = None
                 ) -> tuple[RunReport, dict[str, list[fu.DetectionBox]]]:
    """Execute every stage on a bundle; returns the report and predictions."""
    report = RunReport()
    with _StageTimer(report, "load"):
        try:
            bundle: SceneBundle = load_scene(scene_dir)
        except (OSError, KeyError, ValueError) as err:
            raise _stage_error("load", err) from err
    token = bundle.manifest["sample_token"]
    use_radar = cfg.modality == "camera+radar"
    n_feat = bundle.features[0].shape[0]
    weights = weights or PipelineWeights.create(cfg, n_feat)
    bins = cfg.depth_bins
    feature_hw = bundle.features[0].shape[1:]
    for i, f in enumerate(bundle.features):
        report.checksums[f"image_features_cam{i}"] = checksum(f)

    # Supervision target: lidar + radar union, rasterized at feature scale.
    with _StageTimer(report, "supervision"):
        supervision = np.vstack([bundle.lidar[:, :3], bundle.radar[:, :3]])
        gt_maps = []
        for i, rig in enumerate(bundle.cameras):
            frig = _feature_rig(rig, feature_hw)
            dm, dropped = geo.depth_map_from_points(supervision, frig, feature_hw)
            gt_maps.append(dm)
            report.dropped_points[f"supervision_cam{i}"] = dropped

    # Radar pillar stream.
    radar_bev = np.zeros((cfg.n_context, cfg.bev_cells, cfg.bev_cells))
    if use_radar:
        with _StageTimer(report, "pillars"):
            try:
                cloud = pi.RadarPointCloud(bundle.radar)
                tensor = pi.build_pillars(cloud, cfg.pillar_grid, seed=bundle.manifest["seed"])
                encoded = pi.vfe_forward(tensor, weights.vfe)
                pseudo = pi.scatter_to_pseudo_image(encoded, tensor.pillar_coords,
                                                    cfg.pillar_grid)
            except ValueError as err:
                raise _stage_error("pillars", err) from err
            radar_bev = conv_pointwise(pseudo.data, weights.radar_proj_kernel,
                                       weights.radar_proj_bias)
            report.checksums["radar_pseudo_image"] = checksum(pseudo.data)
            report.checksums["radar_bev"] = checksum(radar_bev)

    # Camera-aware depth estimation.
    with _StageTimer(report, "depthnet"):
        try:
            outputs = kan.depthnet_forward(bundle.features, bundle.cameras,
                                           weights.depthnet)
        except ValueError as err:
            raise _stage_error("depthnet", err) from err
        depth_logits = outputs.depth_logits
        if use_radar:
            hinted = []
            for logits, rig in zip(depth_logits, bundle.cameras):
                hints = _depth_hints(bundle.radar[:, :3], rig, feature_hw)
                hinted.append(logits if hints is None else _apply_depth_hints(
                    logits, hints, bins, cfg.radar_hint_strength))
            depth_logits = hinted
        p_depth = [softmax_over_depth(lg) for lg in depth_logits]
        for i in range(len(bundle.cameras)):
            report.checksums[f"gates_cam{i}"] = checksum(outputs.gates[i])
            report.checksums[f"context_cam{i}"] = checksum(outputs.context[i])
            report.checksums[f"depth_logits_cam{i}"] = checksum(depth_logits[i])

    with _StageTimer(report, "depth_loss"):
        bce = [fu.depth_bce_loss(pd, dm, bins)
               for pd, dm in zip(p_depth, gt_maps) if dm.coverage_mask().any()]
        report.losses["depth_bce"] = float(np.mean(bce)) if bce else float("nan")

    # Lift, refine, and pool into BEV.
    with _StageTimer(report, "lift"):
        lifted = [lift_outer_product(ctx, pd)
                  for ctx, pd in zip(outputs.context, p_depth)]
        refined = [depth_refine(lf, weights.refine_kernel) for lf in lifted]
        report.checksums["lifted"] = checksum(lifted[0])

    with _StageTimer(report, "voxelpool"):
        depths = bins.centers()
        positions, feats_plain, feats_refined = [], [], []
        for rig, lf, rf in zip(bundle.cameras, lifted, refined):
            frig = _feature_rig(rig, feature_hw)
            frustum = geo.FrustumGrid.regular(feature_hw, depths)
            pts = geo.unproject_frustum(frig, frustum)
            positions.append(pts)
            c_ctx = lf.shape[0]
            feats_plain.append(lf.reshape(c_ctx, -1).T)
            feats_refined.append(rf.reshape(c_ctx, -1).T)
        positions = np.vstack(positions)
        f_bev = _pool(cfg, vp.FeaturedPoints(positions, np.vstack(feats_plain)))
        f_depth = _pool(cfg, vp.FeaturedPoints(positions, np.vstack(feats_refined)))
        report.checksums["f_bev"] = checksum(f_bev.data)
        report.checksums["f_depth"] = checksum(f_depth.data)

    # Fusion, heatmap prior, radar matching, final heatmap.
    with _StageTimer(report, "fusion"):
        try:
            fused = fu.fuse_bev_features(f_bev.data, radar_bev, f_depth.data)
        except ValueError as err:
            raise _stage_error("fusion", err) from err
        prior_scores = kan.sigmoid(conv_pointwise(fused.data, weights.head_kernel,
                                                  weights.head_bias))
        prior = fu.Heatmap(prior_scores, cfg.bev_grid)
        matches: list[fu.RadarMatch] = []
        proposals: list[fu.DetectionBox] = []
        if use_radar:
            proposals = _radar_bev_boxes(bundle.radar[:, :3], cfg.bev_grid)
            matches = fu.match_radar_to_heatmap(proposals, prior,
                                                cfg.heatmap_score_thresh,
                                                cfg.match_iou_thresh)
            q_grid = np.zeros((4, cfg.bev_cells, cfg.bev_cells))
            for m in matches:
                q_grid[:, m.cell[0], m.cell[1]] = m.q_row
            fused = fu.FusedBEV(fused.data + conv_pointwise(
                q_grid, weights.q_kernel, weights.q_bias))
        final_scores = kan.sigmoid(conv_pointwise(fused.data, weights.head_kernel,
                                                  weights.head_bias))
        report.checksums["fused_bev"] = checksum(fused.data)
        report.checksums["heatmap"] = checksum(final_scores)
        report.fusion_stats = {
            "n_radar_boxes": float(len(proposals)),
            "n_matches": float(len(matches)),
        }
        report.matches = [{"cell": list(m.cell), "iou": m.iou,
                           "q": m.q_row.tolist()} for m in matches]

    # Decode, losses, evaluation.
    with _StageTimer(report, "head"):
        radar_vel = {m.cell: (float(m.q_row[2]), float(m.q_row[3])) for m in matches}
        preds = _decode_peaks(final_scores, cfg.bev_grid, cfg.peak_threshold, radar_vel)
        gt_boxes = bundle.gt_boxes[token]
        gt_hm = _gt_heatmap(gt_boxes, cfg.bev_grid, cfg.n_classes)
        pairs_p, pairs_g = [], []
        for ci in range(cfg.n_classes):
            cls_p = [b for b in preds if b.class_id == ci]
            cls_g = [b for b in gt_boxes if b.class_id == ci]
            match = me.match_center_distance(cls_p, cls_g, me.TP_THRESHOLD)
            for pidx, gidx in zip(match.ranked_pred, match.ranked_gt):
                if gidx >= 0:
                    pairs_p.append(cls_p[int(pidx)])
                    pairs_g.append(cls_g[int(gidx)])
        l_det, l_heatmap, l_bbox = fu.detection_loss(final_scores, gt_hm, pairs_p, pairs_g)
        report.losses.update({"l_det": l_det, "l_heatmap": l_heatmap, "l_bbox": l_bbox})

    with _StageTimer(report, "evaluate"):
        t0 = time.perf_counter()
        summary = me.evaluate_detections({token: preds}, bundle.gt_boxes)
        summary.eval_time = time.perf_counter() - t0
        report.eval_summary = summary

    return report, {token: preds}


def save_run_outputs(out_dir, report: RunReport,
                     predictions: dict[str, list[fu.DetectionBox]]) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pred_path = out / "predictions.json"
    me.save_boxes(pred_path, predictions)
    report_path = out / "report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report_path, pred_path
