"""End-to-end drivers: volume pipeline (coarse-to-fine) and late-fusion baseline.

The volume pipeline lifts oracle features into a grid around an initial
guess, turns the per-keypoint channel sums into probability fields (sharpened
softmax), reads keypoints out of the fields, and solves the pose with the
soft exhaustive solver. The late-fusion baseline instead reads 2D keypoints
per view, triangulates them, and solves from the triangulated points.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DegenerateRays, EmptyMask
from .field import (
    TargetHeatmaps,
    _axis_soft_argmax,
    extract_keypoint,
    keypoint_loss,
    kl_divergence,
    normalize_field,
    rasterize_heatmap,
)
from .geometry import CameraIntrinsics, RigidTransform, ViewPair, triangulate, unproject_pixel
from .metrics import ModelPoints
from .solver import Correspondences, HypothesisSet, SolverParams, pose_loss, solve
from .volume import FeatureMap, GridSpec, build_grid, lift_features


@dataclass(frozen=True)
class PipelineConfig:
    """Grid sizes, field sharpening, and solver/loss settings."""

    coarse_half_range_m: tuple = (0.3, 0.3, 0.3)
    coarse_cell_m: float = 0.01
    fine_cell_m: float = 0.005
    fine_range_factor: float = 0.75  # fine half-range = factor * model diameter
    field_gain: float = 16.0  # sharpening applied before the softmax
    heatmap_sigma_cells: float = 2.0  # target heatmap width for diagnostics
    solver: SolverParams = dc_field(default_factory=SolverParams)
    alpha: float = 1.0
    betas: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.fine_cell_m >= self.coarse_cell_m:
            raise ValueError("fine cell size must be below the coarse cell size")
        if min(self.coarse_half_range_m) <= 0 or self.fine_range_factor <= 0:
            raise ValueError("ranges must be positive")


@dataclass(frozen=True)
class LevelResult:
    """Output of one grid level: keypoints, pose, and diagnostics."""

    spec: GridSpec
    keypoints: np.ndarray  # (N, 3) world
    confidences: np.ndarray  # (N,)
    pose: RigidTransform
    hypotheses: HypothesisSet
    diagnostics: dict

    def to_record(self) -> dict:
        return {
            "grid_dims": list(self.spec.dims),
            "cell_size_m": [float(c) for c in self.spec.cell_size],
            "pose": self.pose.to_dict(),
            "keypoints": [[float(x) for x in p] for p in self.keypoints],
            "confidences": [float(c) for c in self.confidences],
            "diagnostics": {k: (float(v) if np.isscalar(v) else v)
                            for k, v in self.diagnostics.items()},
        }


@dataclass(frozen=True)
class PipelineResult:
    initial_center: np.ndarray
    coarse: LevelResult
    fine: LevelResult

    @property
    def pose(self) -> RigidTransform:
        return self.fine.pose

    def to_record(self) -> dict:
        return {
            "initial_center": [float(x) for x in self.initial_center],
            "coarse": self.coarse.to_record(),
            "fine": self.fine.to_record(),
            "pose": self.pose.to_dict(),
        }


def initial_guess(ref_mask, intrinsics: CameraIntrinsics, prior_depth_m: float,
                  ref_from_world: RigidTransform | None = None) -> np.ndarray:
    """World point under the mask centroid at the prior depth.

    ``ref_mask`` is a FeatureMap or its (H, W) mask array. Raises EmptyMask
    when no pixel is positive.
    """
    mask = ref_mask.mask if isinstance(ref_mask, FeatureMap) else np.asarray(ref_mask)
    vs, us = np.nonzero(mask > 0)
    if len(us) == 0:
        raise EmptyMask("reference mask has no positive pixels")
    u, v = float(us.mean()), float(vs.mean())
    p_cam = unproject_pixel(u, v, prior_depth_m, intrinsics)
    if ref_from_world is None:
        return p_cam
    return ref_from_world.inverse().apply(p_cam)


def _per_keypoint_fields(values: np.ndarray, n_keypoints: int, gain: float) -> np.ndarray:
    """Sharpened softmax field per keypoint from lifted channel sums.

    Every lifted block (view x scale) carries one channel per keypoint, so
    keypoint i owns channels i, i+N, i+2N, ...
    """
    if values.shape[3] % n_keypoints != 0:
        raise ValueError("volume channels are not a multiple of the keypoint count")
    fields = np.empty((n_keypoints,) + values.shape[:3])
    for i in range(n_keypoints):
        raw = values[:, :, :, i::n_keypoints].sum(axis=3, dtype=np.float64)
        fields[i] = normalize_field(gain * raw)
    return fields


def run_level(center, cell_m, half_range_m, ref_maps, query_maps, pair: ViewPair,
              model_keypoints: np.ndarray, cfg: PipelineConfig,
              gt_pose: RigidTransform | None = None) -> LevelResult:
    """One grid level: lift, field, keypoint readout, pose solve.

    When ``gt_pose`` is given, diagnostics carry the keypoint loss, pose loss,
    and mean KL against rasterized target heatmaps (sigma is
    ``heatmap_sigma_cells`` cells).
    """
    model_keypoints = np.asarray(model_keypoints, dtype=float)
    n = len(model_keypoints)
    spec = build_grid(center, half_range_m, cell_m)
    volume = lift_features(spec, ref_maps, query_maps, pair)
    fields = _per_keypoint_fields(volume.values, n, cfg.field_gain)

    points = np.empty((n, 3))
    confidences = np.empty(n)
    for i in range(n):
        points[i], confidences[i] = extract_keypoint(fields[i], spec)

    pose, hset = solve(Correspondences(model_keypoints, points), cfg.solver)

    diagnostics = {"mean_confidence": float(confidences.mean())}
    if gt_pose is not None:
        diagnostics["keypoint_loss"] = keypoint_loss(points, gt_pose.apply(model_keypoints))
        diagnostics["pose_loss"] = pose_loss(pose, gt_pose, cfg.alpha)
        sigma = cfg.heatmap_sigma_cells * float(np.min(spec.cell_size))
        targets = TargetHeatmaps(model_keypoints, gt_pose, np.full(n, sigma))
        kls = []
        for i in range(n):
            try:
                kls.append(kl_divergence(fields[i], rasterize_heatmap(targets, spec, i)))
            except Exception:
                continue
        diagnostics["kl_mean"] = float(np.mean(kls)) if kls else float("nan")
        diagnostics["kl_count"] = len(kls)
    return LevelResult(spec, points, confidences, pose, hset, diagnostics)


def run_coarse_to_fine(cfg: PipelineConfig, pair: ViewPair, ref_maps, query_maps,
                       model: ModelPoints, model_keypoints: np.ndarray,
                       prior_depth_m: float,
                       gt_pose: RigidTransform | None = None) -> PipelineResult:
    """Coarse grid around the mask-centroid guess, fine grid around the coarse pose.

    The fine level re-samples the same feature maps on a smaller, denser grid
    centered at the coarse pose applied to the model centroid.
    """
    ref_list = ref_maps if isinstance(ref_maps, (list, tuple)) else [ref_maps]
    center = initial_guess(ref_list[0], pair.intrinsics, prior_depth_m,
                           pair.ref_from_world)
    coarse = run_level(center, cfg.coarse_cell_m, cfg.coarse_half_range_m,
                       ref_maps, query_maps, pair, model_keypoints, cfg, gt_pose)
    fine_center = coarse.pose.apply(model.centroid())
    fine_half = cfg.fine_range_factor * model.diameter
    fine = run_level(fine_center, cfg.fine_cell_m, fine_half,
                     ref_maps, query_maps, pair, model_keypoints, cfg, gt_pose)
    return PipelineResult(np.asarray(center), coarse, fine)


def extract_keypoint_2d(channel: np.ndarray) -> tuple[float, float, float]:
    """(u, v, confidence) from one 2D response channel via marginal soft-argmax."""
    channel = np.asarray(channel, dtype=float)
    total = channel.sum()
    norm = channel / total if total > 0 else channel
    u, pu = _axis_soft_argmax(norm.sum(axis=0), np.arange(channel.shape[1], dtype=float))
    v, pv = _axis_soft_argmax(norm.sum(axis=1), np.arange(channel.shape[0], dtype=float))
    return u, v, pu * pv


def run_late_fusion(ref_map: FeatureMap, query_map: FeatureMap, pair: ViewPair,
                    model_keypoints: np.ndarray,
                    solver_params: SolverParams | None = None):
    """Per-view 2D keypoints, triangulation, then the soft pose solve.

    Keypoints whose rays fail to triangulate are dropped; the solver needs at
    least 3 survivors (TooFewPoints otherwise). Returns (pose, info dict).
    """
    model_keypoints = np.asarray(model_keypoints, dtype=float)
    n = len(model_keypoints)
    kept, scene_pts, confs = [], [], []
    for i in range(n):
        ur, vr, cr = extract_keypoint_2d(ref_map.data[:, :, i])
        uq, vq, cq = extract_keypoint_2d(query_map.data[:, :, i])
        try:
            p = triangulate((ur, vr), (uq, vq), pair)
        except DegenerateRays:
            continue
        kept.append(i)
        scene_pts.append(p)
        confs.append(min(cr, cq))

    c = Correspondences(model_keypoints[kept], np.asarray(scene_pts).reshape(-1, 3))
    pose, hset = solve(c, solver_params)
    info = {"kept": kept, "scene_points": np.asarray(scene_pts),
            "confidences": np.asarray(confs), "hypotheses": hset}
    return pose, info
