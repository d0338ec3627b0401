"""Closed triangulated surfaces in the unit 3-torus and their discrete geometry.

A :class:`SurfaceMesh` stores one representative per vertex plus an integer
lift per triangle corner, so that ``vertices[tri] + offsets`` is a genuine
flat triangle in R^3 even when the triangle straddles a face of the unit
cell.  Everything that measures a triangle works on these lifted corners.

Conventions: the unit normal points out of the enclosed region E; the mean
curvature is the sum of principal curvatures, positive on a sphere.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)


class GeometryError(ValueError):
    """Broken mesh: not closed, wrong genus, degenerate or inconsistent lifts."""


class PerturbationTooLarge(ValueError):
    """Normal displacement exceeds the graph-regime cap."""


@dataclass(frozen=True)
class SurfaceMesh:
    vertices: np.ndarray  # (V, 3) representatives, normally in [0, 1)
    triangles: np.ndarray  # (F, 3) oriented, outward normal by right-hand rule
    offsets: np.ndarray  # (F, 3, 3) integer lift of each corner
    tag: str = "base"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=float))
        object.__setattr__(self, "triangles", np.asarray(self.triangles, dtype=np.int64))
        off = np.asarray(self.offsets, dtype=float)
        object.__setattr__(self, "offsets", off)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def lifted(self) -> np.ndarray:
        """(F, 3, 3) corner coordinates of every triangle in a consistent local lift."""
        return self.vertices[self.triangles] + self.offsets

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + self.n_triangles

    def check_closed(self) -> None:
        """Every edge is shared by exactly two triangles with opposite orientation."""
        t = self.triangles
        directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        V = self.n_vertices
        key = directed[:, 0] * V + directed[:, 1]
        uniq, counts = np.unique(key, return_counts=True)
        if np.any(counts != 1):
            raise GeometryError("mesh is not consistently oriented (repeated directed edge)")
        rev = directed[:, 1] * V + directed[:, 0]
        if not np.all(np.isin(rev, uniq)):
            raise GeometryError("mesh is not closed (boundary edge found)")
        # each shared edge must be lifted by an integer translation in the two triangles
        P = self.lifted()
        a = np.concatenate([P[:, 0], P[:, 1], P[:, 2]])
        b = np.concatenate([P[:, 1], P[:, 2], P[:, 0]])
        order = np.argsort(key)
        rorder = np.argsort(rev)
        shift_a = a[order] - b[rorder]  # this edge's start vs the twin's end
        shift_b = b[order] - a[rorder]
        if not np.allclose(shift_a, shift_b, atol=1e-9) or not np.allclose(shift_a, np.round(shift_a), atol=1e-9):
            raise GeometryError("inconsistent periodic lifts across an edge")

    def wrapped(self) -> "SurfaceMesh":
        """Same surface with vertex representatives moved into [0, 1)."""
        shift = np.floor(self.vertices)
        v = self.vertices - shift
        off = self.offsets + shift[self.triangles]
        return replace(self, vertices=v, offsets=off)

    def with_vertices(self, vertices: np.ndarray, tag: str | None = None) -> "SurfaceMesh":
        return replace(self, vertices=np.asarray(vertices, dtype=float), tag=tag or self.tag, meta=dict(self.meta))

    def total_area(self) -> float:
        P = self.lifted()
        return float(0.5 * np.linalg.norm(np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]), axis=1).sum())


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def schwarz_p_level(x1, x2, x3):
    return np.cos(2 * np.pi * x1) + np.cos(2 * np.pi * x2) + np.cos(2 * np.pi * x3)


def periodic_marching_cubes(level_fn, resolution: int, tag: str = "base") -> SurfaceMesh:
    """Zero set of a 1-periodic function, meshed on a cell-centred grid and welded across cell faces.

    The enclosed region is ``{level_fn > 0}``.
    """
    from skimage.measure import marching_cubes

    N = int(resolution)
    x = (np.arange(N + 1) + 0.5) / N
    X1, X2, X3 = np.meshgrid(x, x, x, indexing="ij")
    vals = level_fn(X1, X2, X3)
    if np.any(np.abs(vals) < 1e-12):
        raise GeometryError("a grid node lies on the level set; choose another resolution")
    verts, faces, _, _ = marching_cubes(vals, level=0.0, spacing=(1.0 / N,) * 3, allow_degenerate=False)
    raw = verts + 0.5 / N
    faces = faces.astype(np.int64)
    # orientation: outward from {level > 0} means against the gradient
    tri = raw[faces]
    nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    c = tri.mean(axis=1)
    h = 1e-6
    grad = np.stack([
        (level_fn(*(c + h * e).T) - level_fn(*(c - h * e).T)) / (2 * h) for e in np.eye(3)
    ], axis=1)
    if np.sum(np.einsum("ij,ij->i", nrm, grad)) > 0:
        faces = faces[:, ::-1].copy()
    # weld periodic copies
    wrapped = np.mod(raw, 1.0)
    wrapped[wrapped >= 1.0] -= 1.0
    tree = cKDTree(wrapped, boxsize=1.0)
    pairs = tree.query_pairs(r=1e-8 / N, output_type="ndarray")
    parent = np.arange(len(raw))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(len(raw))])
    uniq, new_index = np.unique(roots, return_inverse=True)
    canon = wrapped[uniq]
    tris = new_index[faces]
    if np.any((tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])):
        raise GeometryError("welding collapsed a triangle")
    offsets = np.round(raw[faces] - canon[tris])
    mesh = SurfaceMesh(canon, tris, offsets, tag=tag)
    mesh.check_closed()
    return mesh


def _level_gradient(level_fn, x, h=1e-6):
    return np.stack([
        (level_fn(*(x + h * e).T) - level_fn(*(x - h * e).T)) / (2 * h) for e in np.eye(3)
    ], axis=1)


def smooth_on_level_set(mesh: SurfaceMesh, level_fn, iterations: int = 10, step: float = 0.5) -> SurfaceMesh:
    """Tangential umbrella smoothing, each sweep followed by Newton projection back onto the level set.

    Evens out the slivers left by marching cubes while keeping the vertices on
    the implicit surface; every step is equivariant under the symmetries of
    ``level_fn`` and of the grid.
    """
    T = mesh.triangles
    V = mesh.n_vertices
    x = mesh.vertices.copy()
    deg = np.zeros(V)
    for c in range(3):
        np.add.at(deg, T[:, c], 2.0)
    for _ in range(iterations):
        P = x[T] + mesh.offsets
        U = np.zeros((V, 3))
        for a in range(3):
            for b in range(3):
                if a != b:
                    np.add.at(U, T[:, a], P[:, b] - P[:, a])
        U /= deg[:, None]
        n = _level_gradient(level_fn, x)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        U -= np.einsum("ij,ij->i", U, n)[:, None] * n
        x = x + step * U
        for _ in range(3):
            gr = _level_gradient(level_fn, x)
            x = x - (level_fn(*x.T) / np.einsum("ij,ij->i", gr, gr))[:, None] * gr
    return mesh.with_vertices(x).wrapped()


def build_schwarz_p(resolution: int = 64, relax: bool = True, max_relax_iter: int = 12,
                    smooth_iter: int = 10) -> SurfaceMesh:
    """Schwarz P surface from its nodal approximation, optionally relaxed to discrete constant mean curvature."""
    if resolution < 32:
        raise GeometryError(f"resolution {resolution} below the minimum of 32")
    mesh = periodic_marching_cubes(schwarz_p_level, resolution)
    if smooth_iter:
        mesh = smooth_on_level_set(mesh, schwarz_p_level, smooth_iter)
    chi = mesh.euler_characteristic()
    if chi != -4:
        raise GeometryError(f"Schwarz P mesh has Euler characteristic {chi}, expected -4 (genus 3)")
    mesh.meta.update(resolution=resolution, relaxed=False, surface="schwarz_p")
    if relax:
        from .jacobi import relax_mean_curvature

        mesh, history = relax_mean_curvature(mesh, max_iter=max_relax_iter)
        mesh.meta.update(relaxed=True, relax_history=history)
    return mesh


def icosphere(radius: float = 0.25, refinement: int = 3, center=(0.5, 0.5, 0.5)) -> SurfaceMesh:
    t = (1.0 + 5**0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(refinement):
        edges = {}
        verts = list(v)

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in edges:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                edges[key] = len(verts) - 1
            return edges[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v, f = np.array(verts), np.array(nf)
    mesh = SurfaceMesh(np.asarray(center) + radius * v, f, np.zeros((len(f), 3, 3)), tag="sphere",
                       meta={"surface": "sphere", "radius": radius, "refinement": refinement})
    return mesh


def _periodic_plane(x1: float, m: int, outward: int, start: int = 0):
    """Triangulated plane ``{x₁ = const}`` wrapping the (x₂, x₃) torus."""
    j, k = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    verts = np.stack([np.full(m * m, x1), j.ravel() / m, k.ravel() / m], axis=1)
    tris, offs = [], []
    for a in range(m):
        for b in range(m):
            c00 = (a, b)
            c10 = (a + 1, b)
            c11 = (a + 1, b + 1)
            c01 = (a, b + 1)
            for quad in ((c00, c10, c11), (c00, c11, c01)):
                corners = quad if outward > 0 else quad[::-1]
                tris.append([start + (p % m) * m + (q % m) for p, q in corners])
                offs.append([[0.0, p // m, q // m] for p, q in corners])
    return verts, np.array(tris), np.array(offs, dtype=float)


def lamella(x_lo: float = 0.0, x_hi: float = 0.5, m: int = 16) -> SurfaceMesh:
    """Slab ``E = {x_lo < x₁ < x_hi}`` bounded by two periodic planes."""
    v1, t1, o1 = _periodic_plane(x_lo, m, outward=-1)
    v2, t2, o2 = _periodic_plane(x_hi, m, outward=+1, start=m * m)
    return SurfaceMesh(np.vstack([v1, v2]), np.vstack([t1, t2]), np.concatenate([o1, o2]), tag="lamella",
                       meta={"surface": "lamella", "thickness": x_hi - x_lo})


def flat_plane(x1: float = 0.3, m: int = 16) -> SurfaceMesh:
    """A single periodic plane: closed in the torus but bounding nothing."""
    v, t, o = _periodic_plane(x1, m, outward=+1)
    return SurfaceMesh(v, t, o, tag="plane", meta={"surface": "plane"})


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeometryCache:
    normals: np.ndarray  # (V, 3) unit, outward
    mass: np.ndarray  # (V,) lumped weight |Σ N_f| / 3, the first-order volume swept per unit w
    area: np.ndarray  # (V,) barycentric area, sums to the total area
    H: np.ndarray  # mean curvature (κ₁ + κ₂)
    K: np.ndarray  # Gauss curvature from angle defect
    A2: np.ndarray  # |A|² = H² - 2K, clipped at zero
    angle_defect: np.ndarray
    face_vector_area: np.ndarray  # (F, 3)
    face_area: np.ndarray
    stiffness: sp.csr_matrix  # cotangent stiffness, positive semi-definite
    mean_curvature_vector: np.ndarray  # (V, 3) = (stiffness @ x), lift-aware
    mean_edge: float
    total_area: float
    euler: int

    @property
    def n(self) -> int:
        return len(self.mass)

    def nu(self, i: int) -> np.ndarray:
        return self.normals[:, i]

    @property
    def kernel_fields(self) -> np.ndarray:
        """(V, 3) normal components ν_i."""
        return self.normals

    def integrate(self, g) -> float:
        return float(np.dot(self.mass, g))

    def focal_cap(self) -> float:
        """Half the smallest focal distance, from the largest principal curvature."""
        kmax = np.abs(self.H) / 2 + np.sqrt(np.maximum(self.H**2 / 4 - self.K, 0.0))
        km = float(kmax.max())
        return np.inf if km == 0 else 0.5 / km


def _cotangents(P: np.ndarray) -> np.ndarray:
    """(F, 3) cotangent of the angle at each corner."""
    cots = np.empty(P.shape[:2])
    for c in range(3):
        a = P[:, (c + 1) % 3] - P[:, c]
        b = P[:, (c + 2) % 3] - P[:, c]
        cots[:, c] = np.einsum("ij,ij->i", a, b) / np.linalg.norm(np.cross(a, b), axis=1)
    return cots


def _angles(P: np.ndarray) -> np.ndarray:
    ang = np.empty(P.shape[:2])
    for c in range(3):
        a = P[:, (c + 1) % 3] - P[:, c]
        b = P[:, (c + 2) % 3] - P[:, c]
        ang[:, c] = np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.einsum("ij,ij->i", a, b))
    return ang


def cotan_stiffness(mesh: SurfaceMesh, P: np.ndarray | None = None) -> sp.csr_matrix:
    P = mesh.lifted() if P is None else P
    cots = _cotangents(P)
    T = mesh.triangles
    rows, cols, vals = [], [], []
    for c in range(3):
        i, j = T[:, (c + 1) % 3], T[:, (c + 2) % 3]  # edge opposite corner c
        w = 0.5 * cots[:, c]
        rows += [i, j, i, j]
        cols += [j, i, i, j]
        vals += [-w, -w, w, w]
    V = mesh.n_vertices
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(V, V))


def compute_geometry(mesh: SurfaceMesh) -> GeometryCache:
    P = mesh.lifted()
    T = mesh.triangles
    V = mesh.n_vertices
    Nf = 0.5 * np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0])
    Af = np.linalg.norm(Nf, axis=1)
    bad = np.nonzero(Af < 1e-14)[0]
    if len(bad):
        raise GeometryError(f"degenerate triangle {int(bad[0])} (area {Af[bad[0]]:.3e})")
    vec = np.zeros((V, 3))
    area = np.zeros(V)
    for c in range(3):
        np.add.at(vec, T[:, c], Nf / 3.0)
        np.add.at(area, T[:, c], Af / 3.0)
    mass = np.linalg.norm(vec, axis=1)
    normals = vec / mass[:, None]
    cots = _cotangents(P)
    hvec = np.zeros((V, 3))
    for c in range(3):
        a, b = (c + 1) % 3, (c + 2) % 3
        w = 0.5 * cots[:, c][:, None]
        d = P[:, a] - P[:, b]
        np.add.at(hvec, T[:, a], w * d)
        np.add.at(hvec, T[:, b], -w * d)
    stiff = cotan_stiffness(mesh, P)
    H = np.einsum("ij,ij->i", hvec, normals) / mass
    ang = _angles(P)
    angsum = np.zeros(V)
    for c in range(3):
        np.add.at(angsum, T[:, c], ang[:, c])
    defect = 2 * np.pi - angsum
    K = defect / mass
    A2 = np.maximum(H**2 - 2 * K, 0.0)
    e = mesh.edges()
    # mean edge length from triangle edges (lift-aware)
    el = np.concatenate([np.linalg.norm(P[:, (c + 1) % 3] - P[:, c], axis=1) for c in range(3)])
    return GeometryCache(
        normals=normals, mass=mass, area=area, H=H, K=K, A2=A2, angle_defect=defect,
        face_vector_area=Nf, face_area=Af, stiffness=stiff, mean_curvature_vector=hvec,
        mean_edge=float(el.mean()), total_area=float(Af.sum()),
        euler=int(V - len(e) + len(T)),
    )


def directional_gradients(mesh: SurfaceMesh, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of total area and enclosed volume when vertex v moves along ``directions[v]``.

    Returns ``(dA/dw, dV/dw)``.  With the outward normals of the mesh itself the
    second array is the lumped weight and their ratio is the mean curvature.
    """
    P = mesh.lifted()
    T = mesh.triangles
    D = np.asarray(directions)[T]
    n0 = np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0])
    nhat = n0 / np.linalg.norm(n0, axis=1, keepdims=True)
    dA = np.zeros(mesh.n_vertices)
    dV = np.zeros(mesh.n_vertices)
    for a in range(3):
        c = np.cross(D[:, a], P[:, (a + 1) % 3] - P[:, (a + 2) % 3])
        np.add.at(dA, T[:, a], 0.5 * np.einsum("ij,ij->i", nhat, c))
        np.add.at(dV, T[:, a], np.einsum("ij,ij->i", D[:, a], n0) / 6.0)
    return dA, dV


# ---------------------------------------------------------------------------
# volume
# ---------------------------------------------------------------------------

_CUTS = np.array([
    [0.1234567, 0.3456789, 0.5678901],
    [0.4713, 0.5291, 0.4877],
    [0.5023, 0.2219, 0.7411],
    [0.8817, 0.6043, 0.1189],
    [0.3311, 0.7777, 0.9123],
    [0.6555, 0.4443, 0.3331],
])


def _fraction_above(s: np.ndarray, t: float) -> np.ndarray:
    """Area fraction of each triangle where the linear function with corner values ``s`` exceeds ``t``."""
    s = np.sort(s, axis=1)
    a, b, c = s[:, 0], s[:, 1], s[:, 2]
    out = np.zeros(len(s))
    out[t <= a] = 1.0
    m1 = (t > a) & (t < b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[m1] = 1.0 - (t - a[m1]) ** 2 / ((b[m1] - a[m1]) * (c[m1] - a[m1]))
        m2 = (t >= b) & (t < c)
        out[m2] = (c[m2] - t) ** 2 / ((c[m2] - a[m2]) * (c[m2] - b[m2]))
    return out


def _cut_volume(P: np.ndarray, N: np.ndarray, cut) -> float | None:
    """Volume of the enclosed region from ``∫_∂E frac(x₁ - c₁) n₁ + |E ∩ {x₁ ≡ c₁}|``.

    The cross-section area is reduced the same way to a boundary integral in
    the plane plus the length of a line section, which is read from the
    ordered crossing points.  Returns None when the chosen line misses the surface.
    """
    c1, c2, c3 = cut
    s = P[:, :, 0] - c1
    s = s - np.floor(s.min(axis=1))[:, None]
    part1 = float(np.sum(N[:, 0] * (s.mean(axis=1) - _fraction_above(s, 1.0))))

    cross = (s.min(axis=1) < 1.0) & (s.max(axis=1) >= 1.0)
    if not np.any(cross):
        return None
    Pc, sc, Nc = P[cross], s[cross], N[cross]
    pts = []
    for a, b in ((0, 1), (1, 2), (2, 0)):
        sa, sb = sc[:, a], sc[:, b]
        hit = (sa - 1.0) * (sb - 1.0) < 0
        t = np.where(hit, (1.0 - sa) / np.where(hit, sb - sa, 1.0), np.nan)
        pts.append(Pc[:, a] + t[:, None] * (Pc[:, b] - Pc[:, a]))
    pts = np.stack(pts, axis=1)  # (S, 3 edges, 3)
    valid = ~np.isnan(pts[:, :, 0])
    two = valid.sum(axis=1) == 2
    if not np.all(two):
        # a corner exactly on the plane: fall back to another cut
        return None
    idx = np.argsort(~valid, axis=1, kind="stable")[:, :2]
    q0 = np.take_along_axis(pts, idx[:, :1, None], axis=1)[:, 0, 1:]
    q1 = np.take_along_axis(pts, idx[:, 1:2, None], axis=1)[:, 0, 1:]
    m = Nc[:, 1:]
    mn = np.linalg.norm(m, axis=1)
    m = m / mn[:, None]
    L = np.linalg.norm(q1 - q0, axis=1)
    t0, t1 = q0[:, 0] - c2, q1[:, 0] - c2
    shift = np.floor(np.minimum(t0, t1))
    t0, t1 = t0 - shift, t1 - shift
    lo, hi = np.minimum(t0, t1), np.maximum(t0, t1)
    with np.errstate(divide="ignore", invalid="ignore"):
        above = np.where(hi > 1.0, (hi - 1.0) / (hi - lo), 0.0)
    part2 = float(np.sum(m[:, 0] * L * (0.5 * (t0 + t1) - above)))

    straddle = (lo < 1.0) & (hi > 1.0)
    if not np.any(straddle):
        return None
    u = (1.0 - t0[straddle]) / (t1[straddle] - t0[straddle])
    z = q0[straddle, 1] + u * (q1[straddle, 1] - q0[straddle, 1])
    z = np.mod(z - c3, 1.0)
    mu = np.sign(m[straddle, 1])
    last = np.argmax(z)
    inside = 1.0 if mu[last] < 0 else 0.0
    part3 = float(np.sum(mu * z)) + inside
    return part1 + part2 + part3


def enclosed_volume(mesh: SurfaceMesh) -> float:
    """Exact volume of the polyhedral region, valid for surfaces that wrap around the torus."""
    P = mesh.lifted()
    N = 0.5 * np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0])
    # permuting coordinates of both corners and normals keeps the outward
    # orientation, so any axis order gives the same volume
    orders = [(0, 1, 2), (1, 2, 0), (2, 0, 1), (0, 2, 1), (1, 0, 2), (2, 1, 0)]
    rng = np.random.default_rng(0)
    cuts = list(_CUTS) + list(rng.random((32, 3)))
    for cut in cuts:
        for order in orders:
            vol = _cut_volume(P[:, :, order], N[:, order], cut)
            if vol is not None:
                return float(vol)
    raise GeometryError("no cutting line meets the surface; volume undefined")


def swept_volume(mesh: SurfaceMesh, displacement: np.ndarray) -> float:
    """Signed volume swept when every vertex moves linearly by ``displacement``.

    Per triangle this depends only on edge vectors, so it is indifferent to lifts.
    """
    P = mesh.lifted()
    D = np.asarray(displacement)[mesh.triangles]
    E1, E2 = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
    F1, F2 = D[:, 1] - D[:, 0], D[:, 2] - D[:, 0]
    S = D.sum(axis=1)
    G = np.cross(E1, E2) + 0.5 * (np.cross(E1, F2) + np.cross(F1, E2)) + np.cross(F1, F2) / 3.0
    return float(np.einsum("ij,ij->", S, G) / 6.0)


def perturb(mesh: SurfaceMesh, geom: GeometryCache, w, xi=(0.0, 0.0, 0.0), cap: float = 0.1) -> SurfaceMesh:
    """Vertices ``x + ξ + w(x) ν(x)`` wrapped back into the unit cell; connectivity unchanged."""
    w = np.asarray(w, dtype=float)
    if w.shape != (mesh.n_vertices,):
        raise ValueError(f"w has shape {w.shape}, expected ({mesh.n_vertices},)")
    check_cap(geom, w, cap)
    raw = mesh.vertices + np.asarray(xi, dtype=float) + w[:, None] * geom.normals
    shift = np.floor(raw)
    out = replace(mesh, vertices=raw - shift, offsets=mesh.offsets + shift[mesh.triangles], tag="perturbed",
                  meta=dict(mesh.meta))
    return out


def check_cap(geom: GeometryCache, w: np.ndarray, cap: float = 0.1) -> None:
    limit = min(cap, geom.focal_cap())
    wmax = float(np.max(np.abs(w))) if len(w) else 0.0
    if wmax > limit:
        raise PerturbationTooLarge(f"||w||_inf = {wmax:.4g} exceeds the graph-regime cap {limit:.4g}")


@dataclass(frozen=True)
class VolumeExpansion:
    linear_coeff: np.ndarray  # vertex weights
    quadratic_coeff: np.ndarray  # weight * H / 2
    cubic_coeff: np.ndarray  # weight * K / 3

    def evaluate(self, w) -> tuple[float, float]:
        w = np.asarray(w)
        lin = float(self.linear_coeff @ w)
        rem = float(self.quadratic_coeff @ w**2 + self.cubic_coeff @ w**3)
        return lin, rem


def expansion_coefficients(geom: GeometryCache) -> VolumeExpansion:
    """Offset Jacobian ``1 + H z + K z²`` integrated from 0 to w at every vertex."""
    return VolumeExpansion(geom.mass.copy(), geom.mass * geom.H / 2.0, geom.mass * geom.K / 3.0)


def volume_expansion(geom: GeometryCache, w, cap: float = 0.1) -> tuple[float, float]:
    """(∫ w dσ, ∫ Q̃(x, w) dσ): first-order and higher-order parts of the volume change."""
    w = np.asarray(w, dtype=float)
    check_cap(geom, w, cap)
    return expansion_coefficients(geom).evaluate(w)


def symmetrize(mesh: SurfaceMesh, values: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Average a vertex function over the reflections x_j -> -x_j (origin at a cube corner).

    Vertices whose mirror image has no vertex within ``tol`` keep their value.
    """
    pts = np.mod(mesh.vertices, 1.0)
    tree = cKDTree(np.mod(pts, 1.0) % 1.0, boxsize=1.0)
    acc = values.astype(float).copy()
    cnt = np.ones(len(values))
    for j in range(3):
        img = pts.copy()
        img[:, j] = np.mod(-img[:, j], 1.0)
        img[img >= 1.0] -= 1.0
        d, idx = tree.query(img)
        ok = d < tol
        acc[ok] += values[idx[ok]]
        cnt[ok] += 1
    return acc / cnt


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def write_obj(mesh: SurfaceMesh, path) -> None:
    """OBJ with wrapped vertices, plus ``<path>.wrap`` recording each triangle corner's lift."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(f"# {mesh.tag} surface in the unit 3-torus; lifts in {path.name}.wrap\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    with open(str(path) + ".wrap", "w") as fh:
        fh.write("# triangle o0x o0y o0z o1x o1y o1z o2x o2y o2z\n")
        for i, o in enumerate(mesh.offsets.astype(int)):
            fh.write(f"{i} " + " ".join(str(int(x)) for x in o.ravel()) + "\n")


def read_obj(path) -> SurfaceMesh:
    path = Path(path)
    verts, tris = [], []
    for line in path.read_text().splitlines():
        if line.startswith("v "):
            verts.append([float(x) for x in line.split()[1:4]])
        elif line.startswith("f "):
            tris.append([int(x.split("/")[0]) - 1 for x in line.split()[1:4]])
    offsets = np.zeros((len(tris), 3, 3))
    wrap = Path(str(path) + ".wrap")
    if wrap.exists():
        for line in wrap.read_text().splitlines():
            if line.startswith("#") or not line.strip():
                continue
            parts = [int(x) for x in line.split()]
            offsets[parts[0]] = np.array(parts[1:]).reshape(3, 3)
    return SurfaceMesh(np.array(verts), np.array(tris), offsets, tag="loaded")


def write_vertex_csv(mesh: SurfaceMesh, geom: GeometryCache, path, w=None) -> None:
    w = np.zeros(mesh.n_vertices) if w is None else np.asarray(w)
    with open(path, "w") as fh:
        fh.write("x1,x2,x3,nu1,nu2,nu3,weight,H,K,A2,w\n")
        for i in range(mesh.n_vertices):
            x, n = mesh.vertices[i], geom.normals[i]
            fh.write(",".join(f"{v:.17g}" for v in (*x, *n, geom.mass[i], geom.H[i], geom.K[i], geom.A2[i], w[i])) + "\n")
