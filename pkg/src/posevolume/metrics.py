"""Pose-error metrics and occlusion-stratified accuracy summaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree, distance

from .geometry import RigidTransform

# exact pairwise search below this size, KD-tree above
BRUTE_FORCE_MAX_POINTS = 5000
SUCCESS_DIAMETER_FRACTION = 0.1

RESULTS_CSV_VERSION = "posevolume-results v1"
RESULTS_CSV_COLUMNS = ("scene_id", "method", "add", "adds", "success", "invisible_fraction")


def max_pairwise_distance(points: np.ndarray, chunk: int = 512) -> float:
    points = np.asarray(points, dtype=float)
    best = 0.0
    for i in range(0, len(points), chunk):
        d = distance.cdist(points[i:i + chunk], points)
        best = max(best, float(d.max()))
    return best


@dataclass(frozen=True)
class ModelPoints:
    """Object model point cloud with its diameter and symmetry flag.

    ``diameter`` is derived: the maximum pairwise distance between points.
    """

    points: np.ndarray  # (M, 3) model frame
    symmetric: bool = False
    name: str = ""
    diameter: float = field(init=False)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if points.shape[0] < 2:
            raise ValueError("model needs at least 2 points")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "diameter", max_pairwise_distance(points))
        if self.diameter <= 0:
            raise ValueError("model points are all coincident")

    @property
    def m(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


def add_metric(est: RigidTransform, gt: RigidTransform, model: ModelPoints) -> float:
    """Mean distance between correspondingly transformed model points."""
    return float(np.linalg.norm(gt.apply(model.points) - est.apply(model.points),
                                axis=1).mean())


def adds_metric(est: RigidTransform, gt: RigidTransform, model: ModelPoints) -> float:
    """Mean distance from each estimated-pose point to its closest truth-pose point."""
    a = est.apply(model.points)
    b = gt.apply(model.points)
    if model.m <= BRUTE_FORCE_MAX_POINTS:
        d = distance.cdist(a, b)
        return float(d.min(axis=1).mean())
    dists, _ = cKDTree(b).query(a)
    return float(dists.mean())


def success(est: RigidTransform, gt: RigidTransform, model: ModelPoints) -> bool:
    """Whether the pose error is below a tenth of the model diameter.

    Symmetric models are judged by the closest-point metric, others by the
    matched-point metric. The threshold is strict.
    """
    err = adds_metric(est, gt, model) if model.symmetric else add_metric(est, gt, model)
    return err < SUCCESS_DIAMETER_FRACTION * model.diameter


@dataclass(frozen=True)
class OcclusionBin:
    lo: float
    hi: float
    accuracy: float
    count: int


def occlusion_curve(results, bin_edges) -> list[OcclusionBin]:
    """Accuracy per invisible-fraction bin.

    ``results`` are (success: bool, invisible_fraction in [0, 1]) pairs;
    ``bin_edges`` are ascending edges. A fraction falls in bin i when
    ``edges[i] <= f < edges[i+1]`` (the last bin includes its right edge).
    Empty bins are omitted.
    """
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin_edges must be ascending with at least two entries")
    bins = []
    for i in range(len(edges) - 1):
        lo, hi = edges[i], edges[i + 1]
        last = i == len(edges) - 2
        members = [ok for ok, f in results
                   if lo <= f < hi or (last and f == hi)]
        if members:
            bins.append(OcclusionBin(float(lo), float(hi),
                                     sum(members) / len(members), len(members)))
    return bins


def format_result_row(scene_id: str, method: str, add: float, adds: float,
                      ok: bool, invisible_fraction: float) -> str:
    return ",".join([scene_id, method, repr(float(add)), repr(float(adds)),
                     str(int(ok)), repr(float(invisible_fraction))])


def write_results_csv(path, rows: list[str]) -> None:
    """Write result rows with the versioned header; rows come pre-formatted."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"# {RESULTS_CSV_VERSION}\n")
        f.write(",".join(RESULTS_CSV_COLUMNS) + "\n")
        for row in rows:
            f.write(row + "\n")


def read_results_csv(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("scene_id"):
                continue
            sid, method, add, adds, ok, frac = line.split(",")
            out.append({"scene_id": sid, "method": method, "add": float(add),
                        "adds": float(adds), "success": bool(int(ok)),
                        "invisible_fraction": float(frac)})
    return out
