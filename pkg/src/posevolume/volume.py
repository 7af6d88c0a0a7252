"""World-space voxel grids and two-view feature lifting.

The grid is a regular box of cells, axis-aligned with the world frame (scenes
are generated with the reference camera aligned to the world axes, so grid
axes are parallel to the reference camera frame). Cell (ix, iy, iz) has its
world center at ``center + (index - (dims - 1) / 2) * cell_size`` per axis.

Serialized volumes use x-fastest flat ordering: flat cell index
``m = ix + nx * (iy + ny * iz)``, features stored per cell, channel-last.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidRange
from .geometry import ViewPair, project_points

DEFAULT_MAX_CELLS = 256 ** 3


@dataclass(frozen=True)
class GridSpec:
    """Regular 3D grid layout: world center, cell counts, cell sizes (m)."""

    center: np.ndarray
    dims: tuple[int, int, int]
    cell_size: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(3)
        cell = np.asarray(self.cell_size, dtype=float).reshape(3)
        dims = tuple(int(d) for d in self.dims)
        if any(d < 2 for d in dims):
            raise ValueError(f"grid dims must all be >= 2, got {dims}")
        if np.any(cell <= 0):
            raise ValueError("cell sizes must be positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "cell_size", cell)
        object.__setattr__(self, "dims", dims)

    @property
    def n_cells(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def axis_coords(self, axis: int) -> np.ndarray:
        """World coordinates of cell centers along one axis."""
        n = self.dims[axis]
        idx = np.arange(n, dtype=float)
        return self.center[axis] + (idx - (n - 1) / 2.0) * self.cell_size[axis]

    def cell_center(self, index) -> np.ndarray:
        idx = np.asarray(index, dtype=float).reshape(3)
        return self.center + (idx - (np.array(self.dims, dtype=float) - 1) / 2.0) * self.cell_size

    def cell_centers(self) -> np.ndarray:
        """All cell centers, shape (n_cells, 3), x-fastest ordering."""
        xs, ys, zs = (self.axis_coords(a) for a in range(3))
        gz, gy, gx = np.meshgrid(zs, ys, xs, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def continuous_index(self, p: np.ndarray) -> np.ndarray:
        """Fractional cell index of world points; (3,) or (N, 3) in, same shape out."""
        p = np.asarray(p, dtype=float)
        return (p - self.center) / self.cell_size + (np.array(self.dims, dtype=float) - 1) / 2.0

    def outer_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """(lo, hi) world corners of the grid including the half-cell margin."""
        half = np.array(self.dims, dtype=float) * self.cell_size / 2.0
        return self.center - half, self.center + half

    def contains(self, p: np.ndarray) -> bool:
        lo, hi = self.outer_bounds()
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= lo) and np.all(p <= hi))

    def to_dict(self) -> dict:
        return {
            "center_m": [float(v) for v in self.center],
            "dims": list(self.dims),
            "cell_size_m": [float(v) for v in self.cell_size],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(np.asarray(d["center_m"], float), tuple(d["dims"]),
                   np.asarray(d["cell_size_m"], float))


@dataclass(frozen=True)
class FeatureMap:
    """Dense per-pixel features plus an object-probability mask in [0, 1].

    ``data`` has shape (height, width, channels); ``mask`` (height, width).
    """

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError("feature data must be (height, width, channels)")
        mask = np.ascontiguousarray(self.mask, dtype=np.float32)
        if mask.shape != data.shape[:2]:
            raise ValueError("mask shape must match feature map height x width")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class GeometricVolume:
    """Per-cell feature vectors lifted from two views (ref channels first)."""

    spec: GridSpec
    values: np.ndarray  # (nx, ny, nz, channels) float32

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.shape[:3] != self.spec.dims:
            raise ValueError("values shape does not match grid dims")
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.shape[3]


def build_grid(center, half_range, cell_size, max_cells: int = DEFAULT_MAX_CELLS) -> GridSpec:
    """Grid spanning ``center +/- half_range`` with the given cell size.

    ``half_range`` and ``cell_size`` may be scalars or per-axis triples.
    Cell counts are ``ceil(2 * half_range / cell_size)`` per axis (at least 2).
    Raises InvalidRange when the total cell count would exceed ``max_cells``.
    """
    center = np.asarray(center, dtype=float).reshape(3)
    half = np.broadcast_to(np.asarray(half_range, dtype=float), (3,)).copy()
    cell = np.broadcast_to(np.asarray(cell_size, dtype=float), (3,)).copy()
    if np.any(half <= 0) or np.any(cell <= 0):
        raise ValueError("half_range and cell_size must be positive")
    # small epsilon so exact multiples don't round up from float noise
    dims = tuple(max(2, int(math.ceil(2.0 * h / c - 1e-9))) for h, c in zip(half, cell))
    n = dims[0] * dims[1] * dims[2]
    if n > max_cells:
        raise InvalidRange(f"grid of {dims} = {n} cells exceeds cap of {max_cells}")
    return GridSpec(center, dims, cell)


# ---------------------------------------------------------------------------
# sampling


def _bilinear_gather(data: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) data at continuous pixel coords; out-of-bounds gives zeros.

    NaN coordinates are treated as out-of-bounds.
    """
    h, w = data.shape[:2]
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    with np.errstate(invalid="ignore"):
        inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)

    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    x0 = np.floor(uc).astype(np.int64)
    y0 = np.floor(vc).astype(np.int64)
    x0 = np.minimum(x0, w - 2) if w >= 2 else x0 * 0
    y0 = np.minimum(y0, h - 2) if h >= 2 else y0 * 0
    fx = (uc - x0).astype(np.float32)
    fy = (vc - y0).astype(np.float32)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    c00 = data[y0, x0]
    c01 = data[y0, x1]
    c10 = data[y1, x0]
    c11 = data[y1, x1]
    fx = fx[..., None]
    fy = fy[..., None]
    out = (c00 * (1 - fx) * (1 - fy) + c01 * fx * (1 - fy)
           + c10 * (1 - fx) * fy + c11 * fx * fy)
    out[~inside] = 0.0
    return out


def bilinear_sample(fmap: FeatureMap, u: float, v: float) -> np.ndarray:
    """Bilinear feature lookup at one continuous pixel position.

    Positions outside [0, width-1] x [0, height-1] return the initial feature
    value (all zeros).
    """
    out = _bilinear_gather(fmap.data, np.array([u]), np.array([v]))
    return out[0].astype(float)


def _as_map_list(maps) -> list[FeatureMap]:
    if isinstance(maps, FeatureMap):
        return [maps]
    return list(maps)


def lift_features(spec: GridSpec, ref_maps, query_maps, pair: ViewPair) -> GeometricVolume:
    """Lift 2D features from both views into the grid.

    Each cell center is transformed into each camera frame, projected, and
    bilinearly sampled from every map of that view (maps may be a single
    FeatureMap or a list, e.g. full and quarter resolution). Samples are gated
    by the view's sampled mask value. Cells behind a camera, or projecting
    outside an image, receive zeros for that view's share. The returned
    channel layout is all reference-view channels followed by all query-view
    channels.
    """
    ref_maps = _as_map_list(ref_maps)
    query_maps = _as_map_list(query_maps)
    if {m.channels for m in ref_maps} != {m.channels for m in query_maps}:
        raise ValueError("reference and query maps must share channel counts")

    centers = spec.cell_centers()
    k = pair.intrinsics
    blocks = []
    for cam_from_world, maps in ((pair.ref_from_world, ref_maps),
                                 (pair.query_from_world, query_maps)):
        cam = cam_from_world.apply(centers)
        u, v, _ = project_points(cam, k)
        for m in maps:
            su = m.width / k.width
            sv = m.height / k.height
            stacked = np.concatenate([m.data, m.mask[:, :, None]], axis=2)
            sampled = _bilinear_gather(stacked, u * su, v * sv)
            feats = sampled[:, :-1] * sampled[:, -1:]
            blocks.append(feats)

    flat = np.concatenate(blocks, axis=1)
    nx, ny, nz = spec.dims
    values = flat.reshape(nz, ny, nx, flat.shape[1]).transpose(2, 1, 0, 3)
    return GeometricVolume(spec, values)


def trilinear_weights(spec: GridSpec, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices (8, 3) and weights (8,) of the cells surrounding a world point.

    Weights are non-negative and sum to one for any point inside the grid's
    outer bounds (queries in the half-cell margin clamp to the boundary
    cells). Points outside the outer bounds get all-zero weights.
    """
    idx = np.zeros((8, 3), dtype=np.int64)
    w = np.zeros(8)
    if not spec.contains(p):
        return idx, w
    g = np.clip(spec.continuous_index(p), 0.0, np.array(spec.dims, dtype=float) - 1.0)
    lo = np.minimum(np.floor(g).astype(np.int64), np.array(spec.dims) - 2)
    f = g - lo
    corners = np.array([[i, j, l] for i in (0, 1) for j in (0, 1) for l in (0, 1)])
    idx = lo[None, :] + corners
    w = np.prod(np.where(corners == 1, f[None, :], 1.0 - f[None, :]), axis=1)
    return idx, w


def trilinear_sample(volume: GeometricVolume, p: np.ndarray) -> np.ndarray:
    """Trilinearly interpolated cell value at a world point (zeros outside)."""
    idx, w = trilinear_weights(volume.spec, p)
    out = np.zeros(volume.channels)
    if w.sum() == 0.0:
        return out
    vals = volume.values[idx[:, 0], idx[:, 1], idx[:, 2]].astype(float)
    return w @ vals


# ---------------------------------------------------------------------------
# binary dumps: one JSON header line, then little-endian float32 payload


def _write_dump(path, header: dict, payload: np.ndarray):
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as f:
        f.write(line.encode("utf-8"))
        f.write(b"\n")
        f.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def _read_dump(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        payload = np.frombuffer(f.read(), dtype="<f4")
    return header, payload


def save_volume(volume: GeometricVolume, path) -> None:
    """Write a volume as a JSON header line plus x-fastest float32 payload."""
    header = {"kind": "volume", "channels": volume.channels, "order": "x-fastest",
              **volume.spec.to_dict()}
    flat = volume.values.transpose(2, 1, 0, 3).reshape(-1, volume.channels)
    _write_dump(path, header, flat)


def load_volume(path) -> GeometricVolume:
    header, payload = _read_dump(path)
    if header.get("kind") != "volume":
        raise ValueError(f"{path} is not a volume dump")
    spec = GridSpec.from_dict(header)
    c = int(header["channels"])
    nx, ny, nz = spec.dims
    values = payload.reshape(nz, ny, nx, c).transpose(2, 1, 0, 3)
    return GeometricVolume(spec, values)


def save_feature_map(fmap: FeatureMap, path) -> None:
    """Write a feature map (features then mask) in the volume dump format."""
    header = {"kind": "feature_map", "width": fmap.width, "height": fmap.height,
              "channels": fmap.channels, "mask": True}
    payload = np.concatenate([fmap.data.ravel(), fmap.mask.ravel()])
    _write_dump(path, header, payload)


def load_feature_map(path) -> FeatureMap:
    header, payload = _read_dump(path)
    if header.get("kind") != "feature_map":
        raise ValueError(f"{path} is not a feature map dump")
    h, w, c = int(header["height"]), int(header["width"]), int(header["channels"])
    data = payload[: h * w * c].reshape(h, w, c)
    mask = payload[h * w * c:].reshape(h, w)
    return FeatureMap(data, mask)
