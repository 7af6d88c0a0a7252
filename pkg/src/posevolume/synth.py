"""Synthetic scenes and oracle feature maps standing in for trained networks.

Scenes place an object at a depth near a configured prior, viewed from a
reference camera (aligned with the world frame) and a query camera displaced
by roughly the configured baseline. Oracle maps carry one channel per
keypoint: a 2D Gaussian response at the keypoint's projection, optionally
jittered, relocated (outliers), and zeroed under a rectangular occluder in
the reference view. All randomness derives from the config seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import SchemaMismatch, TooFewModelPoints, Unplaceable
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    ViewPair,
    project_points,
    random_rotation,
    small_rotation,
    unproject_pixel,
)
from .metrics import ModelPoints
from .volume import FeatureMap, load_feature_map, save_feature_map

MANIFEST_SCHEMA = "posevolume-scene v1"
PLACEMENT_ATTEMPTS = 100
SILHOUETTE_DILATION_PX = 2
_ORACLE_STREAM = 0x0FAC


@dataclass(frozen=True)
class SynthConfig:
    """Scene and oracle generation settings; ``seed`` fixes all randomness."""

    seed: int = 0
    n_keypoints: int = 9
    baseline_m: float = 0.168
    noise_px: float = 0.0
    outlier_rate: float = 0.0
    occlusion_fraction: float = 0.0
    prior_depth_m: float = 0.6
    depth_jitter_m: float = 0.15
    image_width: int = 320
    image_height: int = 240
    focal_px: float = 320.0
    response_sigma_px: float = 3.0

    def __post_init__(self):
        for name in ("outlier_rate", "occlusion_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.baseline_m < 0:
            raise ValueError("baseline_m must be non-negative")
        if self.n_keypoints < 4:
            raise ValueError("need at least 4 keypoints")
        if self.prior_depth_m <= self.depth_jitter_m:
            raise ValueError("prior depth must exceed the depth jitter")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal_px, self.focal_px,
                                self.image_width / 2.0, self.image_height / 2.0,
                                self.image_width, self.image_height)


# ---------------------------------------------------------------------------
# built-in models


def _sample_box_surface(rng, size, n):
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    pts = (rng.random((n, 3)) - 0.5) * np.asarray(size)
    for f in range(6):
        axis, sign = divmod(f, 2)
        sel = faces == f
        pts[sel, axis] = (0.5 if sign == 0 else -0.5) * size[axis]
    return pts


def make_cube(side: float = 0.12, n_points: int = 2000) -> ModelPoints:
    rng = np.random.default_rng(11001)
    return ModelPoints(_sample_box_surface(rng, (side, side, side), n_points),
                       symmetric=False, name="cube")


def make_cylinder(radius: float = 0.05, height: float = 0.14, n_points: int = 2000) -> ModelPoints:
    rng = np.random.default_rng(11002)
    lateral_area = 2 * math.pi * radius * height
    cap_area = math.pi * radius ** 2
    p_lateral = lateral_area / (lateral_area + 2 * cap_area)
    pts = np.empty((n_points, 3))
    on_side = rng.random(n_points) < p_lateral
    theta = rng.uniform(0, 2 * math.pi, n_points)
    pts[on_side, 0] = radius * np.cos(theta[on_side])
    pts[on_side, 1] = radius * np.sin(theta[on_side])
    pts[on_side, 2] = rng.uniform(-height / 2, height / 2, int(on_side.sum()))
    n_caps = int((~on_side).sum())
    r = radius * np.sqrt(rng.random(n_caps))
    pts[~on_side, 0] = r * np.cos(theta[~on_side])
    pts[~on_side, 1] = r * np.sin(theta[~on_side])
    pts[~on_side, 2] = np.where(rng.random(n_caps) < 0.5, -height / 2, height / 2)
    return ModelPoints(pts, symmetric=True, name="cylinder")


def make_blob(n_points: int = 2000) -> ModelPoints:
    """Asymmetric union of three boxes (body, head, arm)."""
    rng = np.random.default_rng(11003)
    parts = [
        ((0.10, 0.065, 0.05), (0.0, 0.0, 0.0)),
        ((0.045, 0.045, 0.045), (0.035, 0.04, 0.015)),
        ((0.07, 0.018, 0.018), (-0.04, -0.028, -0.012)),
    ]
    areas = []
    for size, _ in parts:
        sx, sy, sz = size
        areas.append(2 * (sx * sy + sy * sz + sx * sz))
    counts = np.floor(np.asarray(areas) / sum(areas) * n_points).astype(int)
    counts[0] += n_points - counts.sum()
    chunks = []
    for (size, offset), cnt in zip(parts, counts):
        chunks.append(_sample_box_surface(rng, size, cnt) + np.asarray(offset))
    return ModelPoints(np.concatenate(chunks), symmetric=False, name="blob")


BUILTIN_MODELS = {"cube": make_cube, "cylinder": make_cylinder, "blob": make_blob}


def builtin_model(name: str) -> ModelPoints:
    if name not in BUILTIN_MODELS:
        raise KeyError(f"unknown builtin model '{name}' (have {sorted(BUILTIN_MODELS)})")
    return BUILTIN_MODELS[name]()


def load_ply(path) -> ModelPoints:
    """Read vertex positions from an ASCII PLY file."""
    with open(path, "r", encoding="utf-8") as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n_vertices = None
        props = []
        in_vertex = False
        for line in f:
            tok = line.strip().split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY supported")
            if tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_vertices = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        if n_vertices is None:
            raise ValueError(f"{path}: no vertex element")
        cols = [props.index(c) for c in ("x", "y", "z")]
        pts = np.empty((n_vertices, 3))
        for i in range(n_vertices):
            vals = f.readline().split()
            pts[i] = [float(vals[c]) for c in cols]
    return ModelPoints(pts, name="ply")


# ---------------------------------------------------------------------------
# keypoint selection


def select_keypoints(model: ModelPoints, n: int) -> np.ndarray:
    """Model centroid plus n-1 farthest-point-sampled surface points.

    Sampling is seeded at the point farthest from the centroid and is fully
    deterministic (ties resolve to the lowest index).
    """
    if n < 4:
        raise ValueError("need at least 4 keypoints")
    if model.m < n - 1:
        raise TooFewModelPoints(f"model has {model.m} points, need {n - 1}")
    pts = model.points
    centroid = model.centroid()
    first = int(np.argmax(np.linalg.norm(pts - centroid, axis=1)))
    chosen = [first]
    min_d2 = np.sum((pts - pts[first]) ** 2, axis=1)
    while len(chosen) < n - 1:
        nxt = int(np.argmax(min_d2))
        chosen.append(nxt)
        min_d2 = np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return np.vstack([centroid, pts[chosen]])


# ---------------------------------------------------------------------------
# scene generation


@dataclass(frozen=True)
class SceneSample:
    """One generated scene: object pose, cameras, occluder, bookkeeping."""

    pose: RigidTransform  # world-from-model
    pair: ViewPair
    occluder_mask: np.ndarray  # (H, W) bool, all False when unoccluded
    occluder_rect: tuple | None  # (u0, v0, u1, v1) inclusive pixel bounds
    invisible_fraction: float
    model: ModelPoints
    config: SynthConfig


def _look_at(center: np.ndarray, target: np.ndarray) -> RigidTransform:
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    n = np.linalg.norm(x)
    if n < 1e-9:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
        n = np.linalg.norm(x)
    x = x / n
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return RigidTransform(R, -R @ center)


def _projects_inside(points_world, cam_from_world, k, margin_px=4.0):
    cam = cam_from_world.apply(points_world)
    if np.any(cam[:, 2] <= 0.05):
        return False, None, None
    u, v, _ = project_points(cam, k)
    ok = (np.all(u >= margin_px) and np.all(u <= k.width - 1 - margin_px)
          and np.all(v >= margin_px) and np.all(v <= k.height - 1 - margin_px))
    return ok, u, v


def _occluder_rect(rng, u, v, k, need: int) -> tuple:
    """Axis-aligned rectangle anchored at an image edge covering ``need`` points."""
    side = int(rng.integers(4))  # 0 left, 1 right, 2 top, 3 bottom
    coord = u if side < 2 else v
    order = np.sort(coord)
    if side % 2 == 0:  # anchored at the low edge
        thr = order[need - 1]
        lo, hi = 0, int(math.floor(thr + 0.5))
    else:
        thr = order[len(order) - need]
        lo, hi = int(math.ceil(thr - 0.5)), (k.width if side < 2 else k.height) - 1
    if side < 2:
        return (lo, 0, hi, k.height - 1)
    return (0, lo, k.width - 1, hi)


def _rect_to_mask(rect, width, height) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    if rect is not None:
        u0, v0, u1, v1 = rect
        mask[max(0, v0):v1 + 1, max(0, u0):u1 + 1] = True
    return mask


def _measure_invisible(u, v, mask, k) -> float:
    iu = np.clip(np.round(u).astype(int), 0, k.width - 1)
    iv = np.clip(np.round(v).astype(int), 0, k.height - 1)
    outside = (u < 0) | (u > k.width - 1) | (v < 0) | (v > k.height - 1)
    covered = mask[iv, iu] & ~outside
    return float((covered | outside).mean())


def generate_scene(cfg: SynthConfig, model: ModelPoints) -> SceneSample:
    """Sample an object pose and camera pair; build the occluder if requested.

    Retries placement until all model points land inside both frusta, raising
    Unplaceable after PLACEMENT_ATTEMPTS tries.
    """
    rng = np.random.default_rng(cfg.seed)
    k = cfg.intrinsics()

    for _ in range(PLACEMENT_ATTEMPTS):
        depth = cfg.prior_depth_m + rng.uniform(-cfg.depth_jitter_m, cfg.depth_jitter_m)
        px = k.cx + rng.uniform(-0.2, 0.2) * k.width
        py = k.cy + rng.uniform(-0.2, 0.2) * k.height
        center_world = unproject_pixel(px, py, depth, k)
        r_obj = random_rotation(rng)
        pose = RigidTransform(r_obj, center_world - r_obj @ model.centroid())

        ref = RigidTransform.identity()
        if cfg.baseline_m == 0.0:
            query = RigidTransform.identity()
        else:
            direction = rng.normal(size=3)
            direction[2] *= 0.25
            direction /= np.linalg.norm(direction)
            cam_center = cfg.baseline_m * direction
            query = _look_at(cam_center, center_world)
            wobble = small_rotation(rng, math.radians(1.5))
            query = RigidTransform(wobble @ query.R, -(wobble @ query.R) @ cam_center)

        world_pts = pose.apply(model.points)
        ok_ref, u_ref, v_ref = _projects_inside(world_pts, ref, k)
        ok_query, _, _ = _projects_inside(world_pts, query, k)
        if not (ok_ref and ok_query):
            continue

        rect = None
        if cfg.occlusion_fraction > 0:
            need = int(round(cfg.occlusion_fraction * model.m))
            if need > 0:
                rect = _occluder_rect(rng, u_ref, v_ref, k, min(need, model.m))
        mask = _rect_to_mask(rect, k.width, k.height)
        invisible = _measure_invisible(u_ref, v_ref, mask, k)
        pair = ViewPair(k, ref, query)
        return SceneSample(pose, pair, mask, rect, invisible, model, cfg)

    raise Unplaceable(f"no in-frustum placement found in {PLACEMENT_ATTEMPTS} attempts")


# ---------------------------------------------------------------------------
# oracle feature maps


def _disk_footprint(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx ** 2 + yy ** 2) <= r ** 2


def _render_channels(centers_uv, width, height, sigma) -> np.ndarray:
    """Stack of Gaussian response images, one per (u, v) center."""
    n = len(centers_uv)
    out = np.zeros((height, width, n), dtype=np.float32)
    reach = int(math.ceil(4 * sigma))
    for i, (u, v) in enumerate(centers_uv):
        x0 = max(0, int(math.floor(u)) - reach)
        x1 = min(width - 1, int(math.ceil(u)) + reach)
        y0 = max(0, int(math.floor(v)) - reach)
        y1 = min(height - 1, int(math.ceil(v)) + reach)
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1)
        ys = np.arange(y0, y1 + 1)
        gx = np.exp(-((xs - u) ** 2) / (2 * sigma ** 2))
        gy = np.exp(-((ys - v) ** 2) / (2 * sigma ** 2))
        out[y0:y1 + 1, x0:x1 + 1, i] = np.outer(gy, gx).astype(np.float32)
    return out


def _silhouette(u, v, width, height, dilation_px) -> np.ndarray:
    sil = np.zeros((height, width), dtype=bool)
    iu = np.round(u).astype(int)
    iv = np.round(v).astype(int)
    keep = (iu >= 0) & (iu < width) & (iv >= 0) & (iv < height)
    sil[iv[keep], iu[keep]] = True
    if dilation_px > 0:
        sil = ndimage.binary_dilation(sil, structure=_disk_footprint(dilation_px))
    return sil


def _downscale_mask(mask: np.ndarray, scale: int) -> np.ndarray:
    h, w = mask.shape
    return mask[:h - h % scale, :w - w % scale].reshape(
        h // scale, scale, w // scale, scale).any(axis=(1, 3))


def oracle_feature_pyramid(scene: SceneSample, keypoints: np.ndarray,
                           cfg: SynthConfig, scales=(1, 4)):
    """Oracle maps for both views at the requested downsampling factors.

    Returns (ref_maps, query_maps), each a list aligned with ``scales``.
    Channel i of every map responds at keypoint i's projection; jitter and
    outlier relocations are drawn once per view and shared across scales.
    Reference-view responses are zeroed inside the occluder, and each mask
    channel is the rendered silhouette minus the occluder.
    """
    rng = np.random.default_rng([cfg.seed, _ORACLE_STREAM])
    k = cfg.intrinsics()
    world_kp = scene.pose.apply(np.asarray(keypoints, dtype=float))
    world_model = scene.pose.apply(scene.model.points)
    n_scales = len(scales)

    views = []
    for cam_from_world, occluded in ((scene.pair.ref_from_world, True),
                                     (scene.pair.query_from_world, False)):
        cam = cam_from_world.apply(world_kp)
        u, v, _ = project_points(cam, k)
        # each scale gets an independent jitter draw (layers err independently);
        # jitter is expressed in full-resolution pixel units for every scale
        jit = (rng.normal(0.0, cfg.noise_px, (n_scales, len(u), 2))
               if cfg.noise_px > 0 else np.zeros((n_scales, len(u), 2)))
        # outlier relocation is a per-view failure shared by all scales
        relocate = rng.random(len(u)) < cfg.outlier_rate
        u_out = rng.uniform(0, k.width - 1, len(u))
        v_out = rng.uniform(0, k.height - 1, len(v))
        centers = np.stack([np.where(relocate, u_out, u + jit[s, :, 0])
                            for s in range(n_scales)]), \
                  np.stack([np.where(relocate, v_out, v + jit[s, :, 1])
                            for s in range(n_scales)])
        mu, mv, _ = project_points(cam_from_world.apply(world_model), k)
        views.append((centers, mu, mv, occluded))

    pyramids = ([], [])
    for si, scale in enumerate(scales):
        w_s, h_s = k.width // scale, k.height // scale
        occ_s = _downscale_mask(scene.occluder_mask, scale)
        # response width is fixed in full-resolution pixels (the layers localize
        # the same physical extent), floored at one map pixel for sampling
        sigma_s = max(cfg.response_sigma_px / scale, 1.25)
        for out, ((cu, cv), mu, mv, occluded) in zip(pyramids, views):
            data = _render_channels(np.stack([cu[si] / scale, cv[si] / scale], axis=1),
                                    w_s, h_s, sigma_s)
            sil = _silhouette(mu / scale, mv / scale, w_s, h_s,
                              max(1, SILHOUETTE_DILATION_PX // scale))
            if occluded:
                data[occ_s] = 0.0
                sil = sil & ~occ_s
            out.append(FeatureMap(data, sil.astype(np.float32)))
    return pyramids


def oracle_features(scene: SceneSample, keypoints: np.ndarray,
                    cfg: SynthConfig) -> tuple[FeatureMap, FeatureMap]:
    """Full-resolution oracle maps for the reference and query views."""
    (ref,), (query,) = oracle_feature_pyramid(scene, keypoints, cfg, scales=(1,))
    return ref, query


# ---------------------------------------------------------------------------
# manifests


def scene_manifest(scene: SceneSample, scene_id: str, keypoints: np.ndarray,
                   dumps: dict | None = None) -> dict:
    return {
        "schema": MANIFEST_SCHEMA,
        "scene_id": scene_id,
        "config": asdict(scene.config),
        "intrinsics": scene.pair.intrinsics.to_dict(),
        "ref_from_world": scene.pair.ref_from_world.to_dict(),
        "query_from_world": scene.pair.query_from_world.to_dict(),
        "world_from_model": scene.pose.to_dict(),
        "model": {"name": scene.model.name, "symmetric": bool(scene.model.symmetric),
                  "diameter_m": float(scene.model.diameter)},
        "model_keypoints": [[float(x) for x in kp] for kp in np.asarray(keypoints)],
        "occluder_rect": list(scene.occluder_rect) if scene.occluder_rect else None,
        "invisible_fraction": float(scene.invisible_fraction),
        "dumps": dumps or {},
    }


def manifest_to_json(manifest: dict) -> str:
    return json.dumps(manifest, sort_keys=True, indent=1) + "\n"


def save_scene(out_dir, scene_id: str, scene: SceneSample, keypoints: np.ndarray,
               maps=None, scales=(1, 4)) -> dict:
    """Write the scene manifest plus per-view feature dumps; returns the manifest."""
    if maps is None:
        maps = oracle_feature_pyramid(scene, keypoints, scene.config, scales)
    dumps = {"scales": list(scales), "ref": [], "query": []}
    for view, view_maps in zip(("ref", "query"), maps):
        for scale, fmap in zip(scales, view_maps):
            name = f"{scene_id}_{view}_s{scale}.bin"
            save_feature_map(fmap, f"{out_dir}/{name}")
            dumps[view].append(name)
    manifest = scene_manifest(scene, scene_id, keypoints, dumps)
    with open(f"{out_dir}/{scene_id}.json", "w", encoding="utf-8", newline="\n") as f:
        f.write(manifest_to_json(manifest))
    return manifest


def _require(manifest: dict, key: str, path):
    if key not in manifest:
        raise SchemaMismatch(f"{path}: missing field '{key}'")
    return manifest[key]


def load_scene(out_dir, scene_id: str):
    """Rebuild (scene, keypoints, (ref_maps, query_maps)) from a scene directory."""
    path = f"{out_dir}/{scene_id}.json"
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise SchemaMismatch(f"{path}: manifest not found")
    except json.JSONDecodeError as e:
        raise SchemaMismatch(f"{path}: invalid JSON ({e})")
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise SchemaMismatch(f"{path}: schema is not '{MANIFEST_SCHEMA}'")

    cfg = SynthConfig(**_require(manifest, "config", path))
    model_info = _require(manifest, "model", path)
    model = builtin_model(model_info["name"])
    if bool(model_info.get("symmetric")) != model.symmetric:
        raise SchemaMismatch(f"{path}: symmetric flag disagrees with model")
    pose = RigidTransform.from_dict(_require(manifest, "world_from_model", path))
    pair = ViewPair(CameraIntrinsics.from_dict(_require(manifest, "intrinsics", path)),
                    RigidTransform.from_dict(_require(manifest, "ref_from_world", path)),
                    RigidTransform.from_dict(_require(manifest, "query_from_world", path)))
    rect = manifest.get("occluder_rect")
    rect = tuple(rect) if rect else None
    mask = _rect_to_mask(rect, pair.intrinsics.width, pair.intrinsics.height)
    scene = SceneSample(pose, pair, mask, rect,
                        float(_require(manifest, "invisible_fraction", path)),
                        model, cfg)
    keypoints = np.asarray(_require(manifest, "model_keypoints", path), dtype=float)

    dumps = _require(manifest, "dumps", path)
    maps = ([], [])
    for out, view in zip(maps, ("ref", "query")):
        for name in dumps.get(view, []):
            try:
                out.append(load_feature_map(f"{out_dir}/{name}"))
            except (OSError, ValueError) as e:
                raise SchemaMismatch(f"{out_dir}/{name}: bad feature dump ({e})")
    return scene, keypoints, maps
