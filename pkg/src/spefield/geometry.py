"""Geometry carriers, analytic SDFs, sampling, isosurface extraction, metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure as _measure

__all__ = [
    "PointCloud",
    "TriangleMesh",
    "ScalarGrid",
    "AnalyticShape",
    "normalize_to_ball",
    "sample_mesh_surface",
    "analytic_sdf",
    "mesh_sdf_bruteforce",
    "evaluate_grid",
    "grid_from_function",
    "marching_cubes",
    "chamfer",
    "mae",
    "psnr",
]


@dataclass
class PointCloud:
    positions: np.ndarray  # (N, d)
    normals: np.ndarray | None = None  # (N, d)
    scale: float = 1.0  # applied normalization: x_norm = (x - translation) * scale
    translation: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")
        if self.normals is not None:
            self.normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
            if self.normals.shape != self.positions.shape:
                raise ValueError("normals shape must match positions")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def dim(self):
        return self.positions.shape[1]


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int

    def __post_init__(self):
        self.vertices = np.atleast_2d(np.asarray(self.vertices, dtype=float))
        self.triangles = np.atleast_2d(np.asarray(self.triangles, dtype=np.int64))
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle index out of range")

    def face_areas(self):
        v = self.vertices
        t = self.triangles
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def face_normals(self):
        v = self.vertices
        t = self.triangles
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        norm = np.linalg.norm(cross, axis=1, keepdims=True)
        norm[norm == 0.0] = 1.0
        return cross / norm


@dataclass
class ScalarGrid:
    resolution: tuple  # per axis
    bounds: tuple  # (lo, hi), each (d,)
    values: np.ndarray  # flat, row-major over the resolution shape

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        lo = np.asarray(self.bounds[0], dtype=float)
        hi = np.asarray(self.bounds[1], dtype=float)
        if not np.all(lo < hi):
            raise ValueError("grid bounds must satisfy min < max per axis")
        self.bounds = (lo, hi)
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != int(np.prod(self.resolution)):
            raise ValueError("value count must equal the product of resolutions")

    def lattice(self):
        """Cell-corner lattice points, row-major; (prod(res), d)."""
        lo, hi = self.bounds
        axes = [
            np.linspace(lo[i], hi[i], self.resolution[i])
            for i in range(len(self.resolution))
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def spacing(self):
        lo, hi = self.bounds
        return (hi - lo) / (np.asarray(self.resolution) - 1)

    def as_array(self):
        return self.values.reshape(self.resolution)


@dataclass
class AnalyticShape:
    """Closed-form SDF oracle: sphere, box or torus (torus axis = z)."""

    kind: str
    params: tuple

    def __post_init__(self):
        expected = {"sphere": 1, "box": 3, "torus": 2}
        if self.kind not in expected:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        self.params = tuple(float(p) for p in self.params)
        if len(self.params) != expected[self.kind]:
            raise ValueError(f"{self.kind} expects {expected[self.kind]} parameters")
        if any(p <= 0 for p in self.params):
            raise ValueError("shape parameters must be positive")

    @classmethod
    def parse(cls, tag):
        """Parse tags like 'sphere:0.5', 'torus:0.4:0.15', 'box:0.3:0.2:0.4'."""
        parts = tag.split(":")
        return cls(kind=parts[0], params=tuple(float(p) for p in parts[1:]))

    def sdf(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "sphere":
            return np.linalg.norm(x, axis=1) - self.params[0]
        if self.kind == "box":
            h = np.asarray(self.params)
            q = np.abs(x) - h
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(np.max(q, axis=1), 0.0)
            return outside + inside
        big_r, small_r = self.params
        ring = np.hypot(np.hypot(x[:, 0], x[:, 1]) - big_r, x[:, 2])
        return ring - small_r

    def sample_surface(self, n, rng):
        """Uniform surface samples with exact normals."""
        rng = np.random.default_rng(rng)
        if self.kind == "sphere":
            v = rng.standard_normal((n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            return PointCloud(positions=self.params[0] * v, normals=v)
        if self.kind == "torus":
            big_r, small_r = self.params
            u = rng.uniform(0.0, 2.0 * np.pi, 2 * n + 64)
            v = rng.uniform(0.0, 2.0 * np.pi, 2 * n + 64)
            # area element is proportional to R + r*cos(v): rejection sample
            keep = rng.uniform(0.0, 1.0, v.size) < (big_r + small_r * np.cos(v)) / (
                big_r + small_r
            )
            while keep.sum() < n:
                u2 = rng.uniform(0.0, 2.0 * np.pi, n)
                v2 = rng.uniform(0.0, 2.0 * np.pi, n)
                k2 = rng.uniform(0.0, 1.0, n) < (big_r + small_r * np.cos(v2)) / (
                    big_r + small_r
                )
                u = np.concatenate([u[keep], u2])
                v = np.concatenate([v[keep], v2])
                keep = np.concatenate([np.ones(keep.sum(), bool), k2])
            u, v = u[keep][:n], v[keep][:n]
            cu, su, cv, sv = np.cos(u), np.sin(u), np.cos(v), np.sin(v)
            pos = np.stack(
                [(big_r + small_r * cv) * cu, (big_r + small_r * cv) * su, small_r * sv],
                axis=1,
            )
            nrm = np.stack([cv * cu, cv * su, sv], axis=1)
            return PointCloud(positions=pos, normals=nrm)
        # box: pick faces with probability proportional to area
        h = np.asarray(self.params)
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
        face_axis = rng.choice(3, size=n, p=areas / areas.sum())
        side = np.where(rng.uniform(size=n) < 0.5, -1.0, 1.0)
        pos = rng.uniform(-1.0, 1.0, (n, 3)) * h
        nrm = np.zeros((n, 3))
        rows = np.arange(n)
        pos[rows, face_axis] = side * h[face_axis]
        nrm[rows, face_axis] = side
        return PointCloud(positions=pos, normals=nrm)


def analytic_sdf(shape: AnalyticShape, x):
    """Exact signed distance of an analytic shape at x."""
    out = shape.sdf(x)
    return float(out[0]) if np.ndim(x) == 1 else out


def normalize_to_ball(pc: PointCloud, radius=0.9):
    """Center at the centroid and scale the farthest point to `radius`."""
    if len(pc) == 0:
        raise ValueError("cannot normalize an empty point cloud")
    translation = pc.positions.mean(axis=0)
    centered = pc.positions - translation
    max_norm = np.linalg.norm(centered, axis=1).max()
    scale = radius / max_norm if max_norm > 0 else 1.0
    out = PointCloud(
        positions=centered * scale,
        normals=None if pc.normals is None else pc.normals.copy(),
        scale=scale,
        translation=translation,
    )
    return out, (scale, translation)


def sample_mesh_surface(mesh: TriangleMesh, n, rng):
    """Area-weighted triangle choice, uniform barycentric placement."""
    if len(mesh.triangles) == 0:
        raise ValueError("mesh has no triangles")
    rng = np.random.default_rng(rng)
    areas = mesh.face_areas()
    probs = areas / areas.sum()
    tri = rng.choice(len(mesh.triangles), size=n, p=probs)
    r1 = np.sqrt(rng.uniform(size=(n, 1)))
    r2 = rng.uniform(size=(n, 1))
    a = mesh.vertices[mesh.triangles[tri, 0]]
    b = mesh.vertices[mesh.triangles[tri, 1]]
    c = mesh.vertices[mesh.triangles[tri, 2]]
    pos = (1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c
    return PointCloud(positions=pos, normals=mesh.face_normals()[tri])


# -- brute-force mesh SDF ----------------------------------------------------------


def _point_triangle_distances(p, a, b, c):
    """Distance from point p (3,) to each triangle (a, b, c) arrays (T, 3)."""
    ab = b - a
    ac = c - a
    ap = p[None, :] - a
    d1 = np.einsum("td,td->t", ab, ap)
    d2 = np.einsum("td,td->t", ac, ap)
    bp = p[None, :] - b
    d3 = np.einsum("td,td->t", ab, bp)
    d4 = np.einsum("td,td->t", ac, bp)
    cp = p[None, :] - c
    d5 = np.einsum("td,td->t", ab, cp)
    d6 = np.einsum("td,td->t", ac, cp)

    closest = np.empty_like(a)
    done = np.zeros(len(a), dtype=bool)

    # vertex regions
    m = (d1 <= 0) & (d2 <= 0)
    closest[m] = a[m]
    done |= m
    m = (d3 >= 0) & (d4 <= d3) & ~done
    closest[m] = b[m]
    done |= m
    m = (d6 >= 0) & (d5 <= d6) & ~done
    closest[m] = c[m]
    done |= m

    # edge regions
    vc = d1 * d4 - d3 * d2
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0) & ~done
    t = np.where(d1 - d3 != 0, d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3), 0.0)
    closest[m] = a[m] + t[m, None] * ab[m]
    done |= m
    vb = d5 * d2 - d1 * d6
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0) & ~done
    t = np.where(d2 - d6 != 0, d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6), 0.0)
    closest[m] = a[m] + t[m, None] * ac[m]
    done |= m
    va = d3 * d6 - d5 * d4
    m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0) & ~done
    denom = (d4 - d3) + (d5 - d6)
    t = np.where(denom != 0, (d4 - d3) / np.where(denom == 0, 1.0, denom), 0.0)
    closest[m] = b[m] + t[m, None] * (c[m] - b[m])
    done |= m

    # interior region
    m = ~done
    denom = va + vb + vc
    denom = np.where(denom == 0, 1.0, denom)
    v = vb / denom
    w = vc / denom
    closest[m] = a[m] + v[m, None] * ab[m] + w[m, None] * ac[m]

    return np.linalg.norm(p[None, :] - closest, axis=1)


def _ray_parity(p, a, b, c, rng):
    """Inside test by counting ray-triangle crossings; retries on edge grazes."""
    direction = np.array([0.577350269189626, 0.577350269189626, 0.577350269189626])
    for _ in range(16):
        e1 = b - a
        e2 = c - a
        h = np.cross(direction[None, :], e2)
        det = np.einsum("td,td->t", e1, h)
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = p[None, :] - a
        u = np.einsum("td,td->t", s, h) * inv
        q = np.cross(s, e1)
        v = np.einsum("d,td->t", direction, q) * inv
        t = np.einsum("td,td->t", e2, q) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        eps = 1e-9
        grazing = ok & (
            (np.abs(u) < eps)
            | (np.abs(v) < eps)
            | (np.abs(1 - u - v) < eps)
            | (np.abs(t) < eps)
        )
        if not np.any(grazing & (t > -eps)):
            return int(hit.sum()) % 2 == 1
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
    raise RuntimeError("ray parity test failed to find a clean ray")


def mesh_sdf_bruteforce(mesh: TriangleMesh, x, rng=None):
    """O(T)-per-query signed distance; sign via ray-crossing parity.

    Valid for closed meshes only; intended for desk-scale ground truth.
    """
    rng = np.random.default_rng(0 if rng is None else rng)
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.empty(x2.shape[0])
    for i, p in enumerate(x2):
        dist = _point_triangle_distances(p, a, b, c).min()
        sign = -1.0 if _ray_parity(p, a, b, c, rng) else 1.0
        out[i] = sign * dist
    return float(out[0]) if np.ndim(x) == 1 else out


# -- grids and extraction ---------------------------------------------------------


def evaluate_grid(model, bounds, resolution, chunk=65536):
    """Evaluate a scalar-output model on a cell-corner lattice."""
    resolution = tuple(
        (resolution,) * len(bounds[0]) if np.ndim(resolution) == 0 else resolution
    )
    if np.ndim(resolution[0]) != 0:
        resolution = tuple(resolution[0])
    grid = ScalarGrid(
        resolution=resolution,
        bounds=bounds,
        values=np.zeros(int(np.prod(resolution))),
    )
    pts = grid.lattice()
    values = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], chunk):
        out = model.forward(pts[start : start + chunk])
        if out.ndim != 2 or out.shape[1] != 1:
            raise ValueError("evaluate_grid requires a scalar-output model")
        values[start : start + chunk] = out[:, 0]
    grid.values = values
    return grid


def grid_from_function(fn, bounds, resolution):
    """ScalarGrid from a vectorized scalar function of (N, d) points."""
    resolution = tuple(
        (resolution,) * len(bounds[0]) if np.ndim(resolution) == 0 else resolution
    )
    grid = ScalarGrid(
        resolution=resolution,
        bounds=bounds,
        values=np.zeros(int(np.prod(resolution))),
    )
    grid.values = np.asarray(fn(grid.lattice()), dtype=float).ravel()
    return grid


def marching_cubes(grid: ScalarGrid, iso=0.0):
    """Isosurface extraction with linear edge interpolation.

    Vertices on shared edges are deduplicated; triangles are oriented so
    their normals point toward increasing field values. An iso value
    outside the grid's value range yields an empty mesh.
    """
    if any(r < 2 for r in grid.resolution):
        raise ValueError("marching cubes needs resolution >= 2 per axis")
    vol = grid.as_array()
    if iso <= vol.min() or iso >= vol.max():
        return TriangleMesh(vertices=np.zeros((0, 3)), triangles=np.zeros((0, 3), int))
    verts, faces, _, _ = _measure.marching_cubes(
        vol,
        level=iso,
        spacing=tuple(grid.spacing()),
        gradient_direction="descent",
        allow_degenerate=False,
    )
    verts = verts + grid.bounds[0][None, :]
    return TriangleMesh(vertices=verts, triangles=faces)


# -- metrics -----------------------------------------------------------------------


def chamfer(a, b, method="kdtree"):
    """Symmetric mean nearest-neighbor Euclidean distance between point sets."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer distance needs non-empty point sets")
    if method == "kdtree":
        d_ab, _ = cKDTree(b).query(a)
        d_ba, _ = cKDTree(a).query(b)
    elif method == "bruteforce":
        d_ab = np.empty(a.shape[0])
        for start in range(0, a.shape[0], 1024):
            blockview = a[start : start + 1024]
            diff = blockview[:, None, :] - b[None, :, :]
            d_ab[start : start + 1024] = np.sqrt((diff**2).sum(-1)).min(axis=1)
        d_ba = np.empty(b.shape[0])
        for start in range(0, b.shape[0], 1024):
            blockview = b[start : start + 1024]
            diff = blockview[:, None, :] - a[None, :, :]
            d_ba[start : start + 1024] = np.sqrt((diff**2).sum(-1)).min(axis=1)
    else:
        raise ValueError(f"unknown chamfer method {method!r}")
    return float(d_ab.mean() + d_ba.mean())


def mae(a: ScalarGrid, b: ScalarGrid):
    """Mean absolute error between two grids on the same lattice."""
    if a.resolution != b.resolution:
        raise ValueError("grid resolutions differ")
    if not (
        np.allclose(a.bounds[0], b.bounds[0]) and np.allclose(a.bounds[1], b.bounds[1])
    ):
        raise ValueError("grid bounds differ")
    return float(np.mean(np.abs(a.values - b.values)))


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images with values in [0, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
