"""Iso-surface extraction from the max-opacity field of a Gaussian cloud.

The field at x is max_i o_i exp(-m_i(x) / 2), clamped to 0.999. A uniform
lattice is split into six tetrahedra per cube (Freudenthal split, so faces of
neighbouring cubes agree), crossings are located by bisection on the field,
and vertices on shared lattice edges are merged by edge key.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from numba import njit

from .render import ALPHA_MAX
from .scene import GaussianCloud

DEFAULT_RESOLUTION = 128
DEFAULT_ISO = 0.5
DEFAULT_REFINE = 10
GRID_CUTOFF = 1.0 / 255.0


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.faces)

    def triangle_areas(self) -> np.ndarray:
        if not len(self.faces):
            return np.zeros(0)
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edge_counts(self) -> dict:
        """Undirected edge -> number of incident triangles."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        keys, counts = np.unique(e, axis=0, return_counts=True)
        return {tuple(k): int(c) for k, c in zip(keys, counts)}

    def is_watertight(self) -> bool:
        """Every edge shared by exactly two triangles, with opposite orientation."""
        if not len(self.faces):
            return True
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        und = np.sort(e, axis=1)
        _, counts = np.unique(und, axis=0, return_counts=True)
        if not np.all(counts == 2):
            return False
        # consistent orientation: each directed edge appears once
        _, dcounts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(dcounts == 1))


# ---------------------------------------------------------------------------
# field
# ---------------------------------------------------------------------------

def _field_params(cloud: GaussianCloud):
    return (np.ascontiguousarray(cloud.means), np.ascontiguousarray(cloud.inverse_covariances()),
            np.ascontiguousarray(cloud.opacities))


def field_eval(cloud: GaussianCloud, x) -> float:
    """Exact max-opacity field at one point (all primitives considered)."""
    if len(cloud) == 0:
        return 0.0
    means, inv, opa = _field_params(cloud)
    d = np.asarray(x, dtype=np.float64) - means
    m = np.einsum("ni,nij,nj->n", d, inv, d)
    return float(min(np.max(opa * np.exp(-0.5 * m)), ALPHA_MAX))


def field_eval_many(cloud: GaussianCloud, pts) -> np.ndarray:
    """Exact field at many points; O(N * P), intended for tests and small inputs."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(cloud) == 0:
        return np.zeros(len(pts))
    means, inv, opa = _field_params(cloud)
    return _field_brute(pts, means, inv, opa)


@njit(cache=True, nogil=True)
def _field_brute(pts, means, inv, opa):
    out = np.zeros(pts.shape[0])
    for p in range(pts.shape[0]):
        best = 0.0
        for i in range(means.shape[0]):
            dx = pts[p, 0] - means[i, 0]
            dy = pts[p, 1] - means[i, 1]
            dz = pts[p, 2] - means[i, 2]
            m = (inv[i, 0, 0] * dx * dx + inv[i, 1, 1] * dy * dy + inv[i, 2, 2] * dz * dz
                 + 2.0 * (inv[i, 0, 1] * dx * dy + inv[i, 0, 2] * dx * dz + inv[i, 1, 2] * dy * dz))
            v = opa[i] * np.exp(-0.5 * m)
            if v > best:
                best = v
        out[p] = min(best, 0.999)
    return out


def _support_boxes(cloud: GaussianCloud, cutoff: float):
    """Per-primitive AABB of the region where o exp(-m/2) >= cutoff (empty if o < cutoff)."""
    opa = cloud.opacities
    r2 = 2.0 * np.log(np.maximum(opa, 1e-300) / cutoff)
    cov = cloud.covariances()
    half = np.sqrt(np.maximum(r2, 0.0)[:, None] * np.diagonal(cov, axis1=1, axis2=2))
    keep = r2 > 0
    return cloud.means - half, cloud.means + half, keep


@njit(cache=True, nogil=True)
def _splat_grid(origin, step, dims, lo, hi, keep, means, inv, opa, out):
    nx, ny, nz = dims[0], dims[1], dims[2]
    for i in range(means.shape[0]):
        if not keep[i]:
            continue
        i0 = max(int(np.ceil((lo[i, 0] - origin[0]) / step[0])), 0)
        i1 = min(int(np.floor((hi[i, 0] - origin[0]) / step[0])), nx - 1)
        j0 = max(int(np.ceil((lo[i, 1] - origin[1]) / step[1])), 0)
        j1 = min(int(np.floor((hi[i, 1] - origin[1]) / step[1])), ny - 1)
        k0 = max(int(np.ceil((lo[i, 2] - origin[2]) / step[2])), 0)
        k1 = min(int(np.floor((hi[i, 2] - origin[2]) / step[2])), nz - 1)
        for a in range(i0, i1 + 1):
            dx = origin[0] + a * step[0] - means[i, 0]
            for b in range(j0, j1 + 1):
                dy = origin[1] + b * step[1] - means[i, 1]
                for c in range(k0, k1 + 1):
                    dz = origin[2] + c * step[2] - means[i, 2]
                    m = (inv[i, 0, 0] * dx * dx + inv[i, 1, 1] * dy * dy + inv[i, 2, 2] * dz * dz
                         + 2.0 * (inv[i, 0, 1] * dx * dy + inv[i, 0, 2] * dx * dz + inv[i, 1, 2] * dy * dz))
                    v = opa[i] * np.exp(-0.5 * m)
                    if v > out[a, b, c]:
                        out[a, b, c] = v


class _PointField:
    """Spatial hash of primitive support boxes for fast pointwise evaluation.

    Contributions below ``cutoff`` are dropped, which is exact for any level
    set above the cutoff.
    """

    def __init__(self, cloud: GaussianCloud, lo_box, hi_box, cutoff: float, cells: int = 48):
        self.means, self.inv, self.opa = _field_params(cloud)
        lo, hi, keep = _support_boxes(cloud, cutoff)
        self.origin = np.asarray(lo_box, dtype=np.float64)
        span = np.maximum(np.asarray(hi_box) - self.origin, 1e-12)
        self.dims = np.full(3, cells, dtype=np.int64)
        self.step = span / cells
        self.offsets, self.items = _build_hash(self.origin, self.step, self.dims, lo, hi, keep)

    def __call__(self, pts):
        return _hash_eval(np.ascontiguousarray(pts), self.origin, self.step, self.dims,
                          self.offsets, self.items, self.means, self.inv, self.opa)


@njit(cache=True)
def _build_hash(origin, step, dims, lo, hi, keep):
    ncell = dims[0] * dims[1] * dims[2]
    counts = np.zeros(ncell + 1, dtype=np.int64)
    for pass_ in range(2):
        if pass_ == 1:
            for c in range(ncell):
                counts[c + 1] += counts[c]
            items = np.empty(counts[ncell], dtype=np.int64)
            fill = counts[:ncell].copy()
        for i in range(lo.shape[0]):
            if not keep[i]:
                continue
            r = np.empty((3, 2), dtype=np.int64)
            for ax in range(3):
                r[ax, 0] = min(max(int(np.floor((lo[i, ax] - origin[ax]) / step[ax])), 0), dims[ax] - 1)
                r[ax, 1] = min(max(int(np.floor((hi[i, ax] - origin[ax]) / step[ax])), 0), dims[ax] - 1)
            for a in range(r[0, 0], r[0, 1] + 1):
                for b in range(r[1, 0], r[1, 1] + 1):
                    for c in range(r[2, 0], r[2, 1] + 1):
                        cell = (a * dims[1] + b) * dims[2] + c
                        if pass_ == 0:
                            counts[cell + 1] += 1
                        else:
                            items[fill[cell]] = i
                            fill[cell] += 1
    return counts, items


@njit(cache=True, nogil=True)
def _hash_eval(pts, origin, step, dims, offsets, items, means, inv, opa):
    out = np.zeros(pts.shape[0])
    for p in range(pts.shape[0]):
        cidx = np.empty(3, dtype=np.int64)
        for ax in range(3):
            cidx[ax] = min(max(int(np.floor((pts[p, ax] - origin[ax]) / step[ax])), 0), dims[ax] - 1)
        cell = (cidx[0] * dims[1] + cidx[1]) * dims[2] + cidx[2]
        best = 0.0
        for q in range(offsets[cell], offsets[cell + 1]):
            i = items[q]
            dx = pts[p, 0] - means[i, 0]
            dy = pts[p, 1] - means[i, 1]
            dz = pts[p, 2] - means[i, 2]
            m = (inv[i, 0, 0] * dx * dx + inv[i, 1, 1] * dy * dy + inv[i, 2, 2] * dz * dz
                 + 2.0 * (inv[i, 0, 1] * dx * dy + inv[i, 0, 2] * dx * dz + inv[i, 1, 2] * dy * dz))
            v = opa[i] * np.exp(-0.5 * m)
            if v > best:
                best = v
        out[p] = min(best, 0.999)
    return out


def mesh_bounds(cloud: GaussianCloud):
    """Cloud AABB inflated by three times the largest standard deviation."""
    pad = 3.0 * float(np.exp(cloud.log_scales).max())
    return cloud.means.min(axis=0) - pad, cloud.means.max(axis=0) + pad


def evaluate_grid(cloud: GaussianCloud, lo, hi, resolution: int, cutoff: float = GRID_CUTOFF):
    """Field on the (res+1)^3 lattice spanning [lo, hi]; values below cutoff read as 0."""
    dims = np.full(3, resolution + 1, dtype=np.int64)
    step = (np.asarray(hi) - np.asarray(lo)) / resolution
    out = np.zeros(tuple(dims))
    means, inv, opa = _field_params(cloud)
    blo, bhi, keep = _support_boxes(cloud, cutoff)
    _splat_grid(np.asarray(lo, dtype=np.float64), step, dims, blo, bhi, keep, means, inv, opa, out)
    return np.minimum(out, ALPHA_MAX)


# ---------------------------------------------------------------------------
# marching tetrahedra
# ---------------------------------------------------------------------------

_CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])


def _tetrahedra():
    """Six tets per cube along the 0 -> 7 diagonal, one per axis ordering."""
    tets = []
    for perm in permutations(range(3)):
        path = [0]
        c = 0
        for ax in perm:
            c |= 1 << ax
            path.append(c)
        tets.append(path)
    return np.array(tets)


_TETS = _tetrahedra()
_TET_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def _case_table():
    """mask -> list of triangles, each a triple of local tet edges (a, b)."""
    table = {}
    for mask in range(16):
        inside = [k for k in range(4) if mask >> k & 1]
        outside = [k for k in range(4) if not mask >> k & 1]
        if len(inside) in (0, 4):
            table[mask] = []
        elif len(inside) == 1:
            a = inside[0]
            table[mask] = [[(a, o) for o in outside]]
        elif len(inside) == 3:
            a = outside[0]
            table[mask] = [[(i, a) for i in inside]]
        else:
            (a, b), (c, d) = inside, outside
            quad = [(a, c), (a, d), (b, d), (b, c)]
            table[mask] = [[quad[0], quad[1], quad[2]], [quad[0], quad[2], quad[3]]]
    return table


_CASES = _case_table()


def extract_mesh(cloud: GaussianCloud, grid_resolution: int = DEFAULT_RESOLUTION,
                 iso: float = DEFAULT_ISO, refine_iters: int = DEFAULT_REFINE,
                 bounds=None) -> TriMesh:
    """Marching tetrahedra on the max-opacity field with bisection edge refinement."""
    if not 0.0 < iso < ALPHA_MAX:
        raise ValueError("iso must lie in (0, 0.999)")
    if grid_resolution < 1:
        raise ValueError("grid_resolution must be positive")
    if len(cloud) == 0:
        return TriMesh.empty()
    lo, hi = bounds if bounds is not None else mesh_bounds(cloud)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    cutoff = min(GRID_CUTOFF, 0.5 * iso)
    res = grid_resolution
    n1 = res + 1
    F = evaluate_grid(cloud, lo, hi, res, cutoff)
    inside = (F > iso).reshape(-1)
    step = (hi - lo) / res

    # cube base indices
    ii, jj, kk = np.meshgrid(np.arange(res), np.arange(res), np.arange(res), indexing="ij")
    base = ((ii * n1 + jj) * n1 + kk).reshape(-1)
    corner_off = (_CORNERS[:, 0] * n1 + _CORNERS[:, 1]) * n1 + _CORNERS[:, 2]
    # discard cubes that are entirely in or out
    cin = inside[base[:, None] + corner_off[None, :]]
    mixed = cin.any(axis=1) & ~cin.all(axis=1)
    base = base[mixed]

    tri_edges = []  # (T, 3, 2) global vertex ids of each triangle's edges
    for tet in _TETS:
        vid = base[:, None] + corner_off[tet][None, :]  # (C, 4)
        mask = (inside[vid] * (1 << np.arange(4))).sum(axis=1)
        for m in range(1, 15):
            sel = vid[mask == m]
            if not len(sel):
                continue
            for tri in _CASES[m]:
                e = np.stack([np.stack([sel[:, a], sel[:, b]], axis=1) for a, b in tri], axis=1)
                tri_edges.append(e)
    if not tri_edges:
        return TriMesh.empty()
    E = np.concatenate(tri_edges)  # (T, 3, 2): (inside vertex, outside vertex)

    keys = E.reshape(-1, 2)
    uniq, inv_idx = np.unique(keys, axis=0, return_inverse=True)
    faces = inv_idx.reshape(-1, 3)

    def lattice(v):
        k = v % n1
        j = (v // n1) % n1
        i = v // (n1 * n1)
        return lo + np.stack([i, j, k], axis=1) * step

    p_in = lattice(uniq[:, 0])
    p_out = lattice(uniq[:, 1])
    field_fn = _PointField(cloud, lo, hi, cutoff)
    for _ in range(refine_iters):
        mid = 0.5 * (p_in + p_out)
        above = field_fn(mid) > iso
        p_in = np.where(above[:, None], mid, p_in)
        p_out = np.where(above[:, None], p_out, mid)
    verts = 0.5 * (p_in + p_out)

    # orient each triangle so its normal points from inside to outside
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    n = np.cross(b - a, c - a)
    Ein = lattice(E[:, :, 0].reshape(-1)).reshape(-1, 3, 3).mean(axis=1)
    Eout = lattice(E[:, :, 1].reshape(-1)).reshape(-1, 3, 3).mean(axis=1)
    flip = np.einsum("ij,ij->i", n, Eout - Ein) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return _cleanup(TriMesh(verts, faces))


def _cleanup(mesh: TriMesh, min_area: float = 1e-12) -> TriMesh:
    """Drop degenerate triangles and unreferenced vertices (order preserving)."""
    faces = mesh.faces[mesh.triangle_areas() > min_area]
    used = np.zeros(len(mesh.vertices), dtype=bool)
    used[faces.reshape(-1)] = True
    remap = np.cumsum(used) - 1
    return TriMesh(mesh.vertices[used], remap[faces])
