"""Closed-form rigid alignment and the soft exhaustive-hypothesis pose solver.

Every 3-point subset of the correspondences yields a candidate pose by SVD
alignment. Each candidate is scored by a soft inlier count (sigmoid of the
per-keypoint residuals), the counts are softmax-normalized, and the candidates
are blended into one pose: translations by weighted mean, rotations by the
chordal mean (weighted matrix sum projected back onto SO(3)).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import CountMismatch, DegenerateConfiguration, TooFewPoints
from .geometry import RigidTransform

COLLINEAR_REL_TOL = 1e-12


@dataclass(frozen=True)
class Correspondences:
    """Paired model-frame and world-frame keypoints."""

    model: np.ndarray  # (N, 3)
    scene: np.ndarray  # (N, 3)

    def __post_init__(self):
        model = np.asarray(self.model, dtype=float).reshape(-1, 3)
        scene = np.asarray(self.scene, dtype=float).reshape(-1, 3)
        if model.shape[0] != scene.shape[0]:
            raise CountMismatch("model and scene point counts differ")
        if model.shape[0] < 3:
            raise TooFewPoints(f"need at least 3 correspondences, got {model.shape[0]}")
        if not (np.all(np.isfinite(model)) and np.all(np.isfinite(scene))):
            raise ValueError("correspondences must be finite")
        object.__setattr__(self, "model", model)
        object.__setattr__(self, "scene", scene)

    @property
    def n(self) -> int:
        return self.model.shape[0]


@dataclass(frozen=True)
class SolverParams:
    """Soft inlier counting parameters.

    ``gamma1`` is the sigmoid sharpness (1/m), ``gamma2`` the soft inlier
    distance threshold (m), ``temperature`` scales the softmax over raw
    counts.
    """

    gamma1: float = 100.0
    gamma2: float = 0.02
    temperature: float = 1.0

    def __post_init__(self):
        if self.gamma1 <= 0 or self.gamma2 <= 0 or self.temperature <= 0:
            raise ValueError("solver parameters must be positive")


@dataclass(frozen=True)
class HypothesisSet:
    """Candidate poses with residual distances, raw soft counts and weights."""

    hypotheses: list[RigidTransform]
    distances: np.ndarray  # (K, N)
    raw_counts: np.ndarray  # (K,)
    scores: np.ndarray  # (K,), softmax weights summing to 1
    triples: tuple | None = None  # index triples backing each hypothesis
    skipped_triples: tuple = field(default_factory=tuple)

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float)
        if np.any(scores < 0) or abs(scores.sum() - 1.0) > 1e-9:
            raise ValueError("scores must be a distribution (non-negative, sum 1)")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "distances", np.asarray(self.distances, dtype=float))
        object.__setattr__(self, "raw_counts", np.asarray(self.raw_counts, dtype=float))

    @property
    def k(self) -> int:
        return len(self.hypotheses)


def _batched_align(model_sets: np.ndarray, scene_sets: np.ndarray):
    """SVD alignment of stacked point sets: (K, m, 3) pairs -> R (K,3,3), t (K,3).

    Also returns a boolean degeneracy mask: subsets whose centered model
    points are collinear (second singular value below COLLINEAR_REL_TOL
    relative to the first) cannot pin the rotation.
    """
    mc = model_sets.mean(axis=1, keepdims=True)
    sc = scene_sets.mean(axis=1, keepdims=True)
    a = model_sets - mc
    b = scene_sets - sc

    sv = np.linalg.svd(a, compute_uv=False)  # (K, 3) descending
    degenerate = (sv[:, 0] <= 0) | (sv[:, 1] < COLLINEAR_REL_TOL * sv[:, 0])

    h = np.einsum("kmi,kmj->kij", a, b)
    u, _, vt = np.linalg.svd(h)
    v = np.transpose(vt, (0, 2, 1))
    det = np.linalg.det(np.einsum("kij,klj->kil", v, u))
    flip = np.repeat(np.eye(3)[None, :, :], len(det), axis=0)
    flip[:, 2, 2] = np.sign(det)
    r = np.einsum("kij,kjl,kml->kim", v, flip, u)
    t = sc[:, 0, :] - np.einsum("kij,kj->ki", r, mc[:, 0, :])
    return r, t, degenerate


def kabsch_align(model: np.ndarray, scene: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping model points onto scene points.

    Reflections are corrected so det(R) = +1. Raises DegenerateConfiguration
    for collinear model points.
    """
    model = np.asarray(model, dtype=float).reshape(-1, 3)
    scene = np.asarray(scene, dtype=float).reshape(-1, 3)
    if model.shape[0] < 3:
        raise TooFewPoints("alignment needs at least 3 points")
    r, t, degenerate = _batched_align(model[None], scene[None])
    if degenerate[0]:
        raise DegenerateConfiguration("model points are collinear")
    return RigidTransform(r[0], t[0])


def _enumerate(c: Correspondences):
    triples = tuple(itertools.combinations(range(c.n), 3))
    idx = np.array(triples)
    r, t, degenerate = _batched_align(c.model[idx], c.scene[idx])
    keep = ~degenerate
    kept = tuple(tr for tr, k in zip(triples, keep) if k)
    skipped = tuple(tr for tr, k in zip(triples, keep) if not k)
    return r[keep], t[keep], kept, skipped


def enumerate_hypotheses(c: Correspondences) -> list[RigidTransform]:
    """One candidate pose per 3-point subset, in lexicographic subset order.

    Degenerate (collinear) subsets are skipped.
    """
    r, t, _, _ = _enumerate(c)
    return [RigidTransform(ri, ti) for ri, ti in zip(r, t)]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _score_arrays(r: np.ndarray, t: np.ndarray, c: Correspondences, params: SolverParams):
    placed = np.einsum("kij,nj->kni", r, c.model) + t[:, None, :]
    distances = np.linalg.norm(placed - c.scene[None], axis=2)  # (K, N)
    raw = _sigmoid(params.gamma1 * (params.gamma2 - distances)).sum(axis=1)
    logits = raw / params.temperature
    e = np.exp(logits - logits.max())
    scores = e / e.sum()
    return distances, raw, scores


def score_hypotheses(hyps: list[RigidTransform], c: Correspondences,
                     params: SolverParams) -> HypothesisSet:
    """Residual distances, soft inlier counts, and softmax weights per hypothesis."""
    if not hyps:
        raise ValueError("no hypotheses to score")
    r = np.stack([h.R for h in hyps])
    t = np.stack([h.t for h in hyps])
    distances, raw, scores = _score_arrays(r, t, c, params)
    return HypothesisSet(list(hyps), distances, raw, scores)


def aggregate_pose(hset: HypothesisSet) -> RigidTransform:
    """Blend scored hypotheses into one pose.

    Translation is the score-weighted mean; rotation is the score-weighted
    matrix sum projected onto SO(3) (chordal mean) with det(+1) enforced.
    """
    scores = hset.scores
    t = scores @ np.stack([h.t for h in hset.hypotheses])
    m = np.einsum("k,kij->ij", scores, np.stack([h.R for h in hset.hypotheses]))
    u, _, vt = np.linalg.svd(m)
    flip = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    return RigidTransform(u @ flip @ vt, t)


def solve(c: Correspondences, params: SolverParams | None = None
          ) -> tuple[RigidTransform, HypothesisSet]:
    """Exhaustive soft-hypothesis pose solve: enumerate, score, aggregate."""
    params = params or SolverParams()
    r, t, kept, skipped = _enumerate(c)
    if len(kept) == 0:
        raise DegenerateConfiguration("all 3-point subsets are collinear")
    distances, raw, scores = _score_arrays(r, t, c, params)
    hset = HypothesisSet([RigidTransform(ri, ti) for ri, ti in zip(r, t)],
                         distances, raw, scores, triples=kept, skipped_triples=skipped)
    return aggregate_pose(hset), hset


def pose_loss(est: RigidTransform, gt: RigidTransform, alpha: float = 1.0) -> float:
    """Translation distance plus ``alpha`` times the rotation Frobenius residual."""
    rot_residual = np.linalg.norm(est.R @ gt.R.T - np.eye(3), ord="fro")
    return float(np.linalg.norm(est.t - gt.t) + alpha * rot_residual)


def joint_loss(pose_losses, keypoint_losses, kl_losses, betas) -> float:
    """Weighted sum of the three loss kinds accumulated over refinement levels."""
    pose_losses = list(pose_losses)
    keypoint_losses = list(keypoint_losses)
    kl_losses = list(kl_losses)
    if not (len(pose_losses) == len(keypoint_losses) == len(kl_losses)):
        raise CountMismatch("per-level loss lists must have equal lengths")
    b1, b2, b3 = betas
    return float(sum(b1 * p + b2 * k + b3 * d
                     for p, k, d in zip(pose_losses, keypoint_losses, kl_losses)))
