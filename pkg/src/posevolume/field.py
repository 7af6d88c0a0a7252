"""Keypoint probability fields over a grid and their losses.

A field is a non-negative scalar grid of shape ``spec.dims`` normalized to
sum 1, interpreted as the probability that the keypoint sits in each cell.
Keypoints are read out per axis: marginalize, locate the marginal maximum,
and take a background-subtracted soft-argmax in a +/-2 cell window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CountMismatch, KeypointOutsideGrid, NonFiniteInput, SpecMismatch
from .geometry import RigidTransform
from .volume import GridSpec

KL_FLOOR = 1e-12
READOUT_HALF_WINDOW = 2


@dataclass(frozen=True)
class TargetHeatmaps:
    """Gaussian targets: model keypoints, the pose placing them, per-keypoint widths."""

    keypoints: np.ndarray  # (N, 3) model-frame meters
    pose: RigidTransform
    sigmas: np.ndarray  # (N,) meters

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=float).reshape(-1, 3)
        sig = np.asarray(self.sigmas, dtype=float).reshape(-1)
        if kp.shape[0] < 4:
            raise ValueError("need at least 4 keypoints")
        if sig.shape[0] != kp.shape[0]:
            raise ValueError("one sigma per keypoint required")
        if np.any(sig <= 0):
            raise ValueError("sigmas must be positive")
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "sigmas", sig)

    @property
    def n_keypoints(self) -> int:
        return self.keypoints.shape[0]


@dataclass(frozen=True)
class ProbabilityVolume:
    """Stack of per-keypoint normalized scalar grids over one GridSpec."""

    spec: GridSpec
    grids: np.ndarray  # (N, nx, ny, nz)

    def __post_init__(self):
        grids = np.asarray(self.grids, dtype=float)
        if grids.ndim != 4 or grids.shape[1:] != self.spec.dims:
            raise ValueError("grids must be (N,) + spec.dims")
        if np.any(grids < 0):
            raise ValueError("probability grids must be non-negative")
        sums = grids.reshape(grids.shape[0], -1).sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("each grid must sum to 1 within 1e-6")
        object.__setattr__(self, "grids", grids)

    @property
    def n_keypoints(self) -> int:
        return self.grids.shape[0]


def rasterize_heatmap(target: TargetHeatmaps, spec: GridSpec, i: int) -> np.ndarray:
    """Normalized Gaussian grid around keypoint ``i`` placed by the target pose.

    Raises KeypointOutsideGrid when the placed keypoint leaves the grid.
    """
    center = target.pose.apply(target.keypoints[i])
    if not spec.contains(center):
        raise KeypointOutsideGrid(
            f"keypoint {i} at {np.round(center, 4)} outside grid bounds")
    sigma = target.sigmas[i]
    # separable Gaussian over cell centers
    axes = [np.exp(-((spec.axis_coords(a) - center[a]) ** 2) / (2.0 * sigma ** 2))
            for a in range(3)]
    grid = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return grid / grid.sum()


def normalize_field(raw: np.ndarray) -> np.ndarray:
    """Softmax over all cells; concentrates and normalizes an arbitrary field."""
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw)):
        raise NonFiniteInput("field contains NaN or infinity")
    e = np.exp(raw - raw.max())
    return e / e.sum()


def kl_divergence(field: np.ndarray, target: np.ndarray) -> float:
    """KL divergence sum(field * log(field / target)) over cells.

    Uses the 0*log(0) = 0 convention for empty field cells and floors the
    target at 1e-12 so underflowed tails do not produce infinities.
    """
    field = np.asarray(field, dtype=float)
    target = np.asarray(target, dtype=float)
    if field.shape != target.shape:
        raise SpecMismatch(f"grid shapes differ: {field.shape} vs {target.shape}")
    ratio = field / np.maximum(target, KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(field > 0, field * np.log(ratio), 0.0)
    return float(terms.sum())


def _axis_soft_argmax(marginal: np.ndarray, coords: np.ndarray) -> tuple[float, float]:
    """Sub-cell coordinate and peak value of one marginal distribution.

    The window spans the contiguous half-maximum region around the marginal
    argmax plus READOUT_HALF_WINDOW cells on each side, so narrow peaks read
    like a fixed +/-2 window while wide ridges keep their full top. The window
    minimum is subtracted before the weighted mean to cancel background mass,
    which plain probability weighting would smear toward the window center.
    """
    peak = float(marginal.max())
    if peak <= 0 or peak - marginal.min() <= 1e-15 * peak:
        # flat (e.g. uniform field): expectation over the whole axis
        weights = marginal if peak > 0 else np.ones_like(marginal)
        return float(np.dot(coords, weights) / weights.sum()), peak
    # ties within rounding (symmetric peaks) widen the window symmetrically
    tied = np.flatnonzero(marginal >= peak * (1.0 - 1e-9))
    jlo, jhi = int(tied.min()), int(tied.max())
    half = 0.5 * peak
    while jlo > 0 and marginal[jlo - 1] >= half:
        jlo -= 1
    while jhi < len(marginal) - 1 and marginal[jhi + 1] >= half:
        jhi += 1
    lo = max(0, jlo - READOUT_HALF_WINDOW)
    hi = min(len(marginal) - 1, jhi + READOUT_HALF_WINDOW)
    w = marginal[lo:hi + 1] - marginal[lo:hi + 1].min()
    s = w.sum()
    if s <= 0:
        return float(coords[tied[0]]), peak
    return float(np.dot(coords[lo:hi + 1], w) / s), peak


def extract_keypoint(grid: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, float]:
    """Read a keypoint estimate out of one normalized scalar grid.

    Marginalizes onto each axis and runs the windowed soft-argmax around each
    marginal maximum. Returns (world point, confidence); the confidence is the
    product of the three marginal maxima.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.shape != spec.dims:
        raise SpecMismatch(f"grid shape {grid.shape} does not match spec dims {spec.dims}")
    point = np.zeros(3)
    confidence = 1.0
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        marginal = grid.sum(axis=other)
        coord, peak = _axis_soft_argmax(marginal, spec.axis_coords(axis))
        point[axis] = coord
        confidence *= peak
    return point, float(confidence)


def smooth_l1(x: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """Elementwise smooth-L1: quadratic below ``beta``, linear above."""
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def keypoint_loss(predicted: np.ndarray, target: np.ndarray, beta: float = 1.0) -> float:
    """Smooth-L1 keypoint loss: sum over coordinates, mean over keypoints."""
    predicted = np.asarray(predicted, dtype=float).reshape(-1, 3)
    target = np.asarray(target, dtype=float).reshape(-1, 3)
    if predicted.shape != target.shape:
        raise CountMismatch(f"{predicted.shape[0]} predicted vs {target.shape[0]} target keypoints")
    return float(smooth_l1(predicted - target, beta).sum(axis=1).mean())
