"""Jacobi operator, kernel fields, Gram matrix and the bordered linear solver.

The default operator is the exact second derivative of the discrete
functional ``area - λ₀ volume`` with respect to normal vertex displacements.
Being the linearization of the very residual that the fixed-point solver
evaluates, it leaves only genuinely nonlinear and γ-dependent terms in the
remainder.  The textbook cotangent-minus-|A|² operator is available for
comparison.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .surface import GeometryCache, SurfaceMesh, compute_geometry, directional_gradients

logger = logging.getLogger(__name__)


class DegenerateGeometry(ValueError):
    """Gram matrix of the normal components is singular or badly conditioned."""


class SolverError(RuntimeError):
    pass


@dataclass
class JacobiOperator:
    matrix: sp.csr_matrix  # weak form: w' S w is the second variation
    mass: np.ndarray
    lambda0: float
    kind: str = "hessian"
    _lu: object = field(default=None, repr=False)
    _kkt_cols: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.mass)

    def apply(self, w: np.ndarray) -> np.ndarray:
        """Strong form ``M⁻¹ S w`` (units of curvature per unit displacement)."""
        return (self.matrix @ w) / self.mass

    def quadratic_form(self, w: np.ndarray) -> float:
        return float(w @ (self.matrix @ w))


def _local_hessians(mesh: SurfaceMesh, normals: np.ndarray):
    """Per-triangle 3×3 Hessians of area and volume along the given vertex directions."""
    P = mesh.lifted()
    D = normals[mesh.triangles]
    n0 = np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0])
    ln = np.linalg.norm(n0, axis=1)
    nhat = n0 / ln[:, None]
    c = np.stack([np.cross(D[:, a], P[:, (a + 1) % 3] - P[:, (a + 2) % 3]) for a in range(3)], axis=1)
    Pc = c - nhat[:, None, :] * np.einsum("fd,fad->fa", nhat, c)[:, :, None]
    HA = 0.5 * np.einsum("fad,fbd->fab", Pc, Pc) / ln[:, None, None]
    for a in range(3):
        b = (a + 1) % 3
        s = 0.5 * np.einsum("fd,fd->f", nhat, np.cross(D[:, a], D[:, b]))
        HA[:, a, b] += s
        HA[:, b, a] += s
    HV = np.einsum("fad,fbd->fab", D, c) / 6.0
    return HA, HV


def _scatter(mesh: SurfaceMesh, local: np.ndarray) -> sp.csr_matrix:
    T = mesh.triangles
    rows = np.repeat(T, 3, axis=1).ravel()
    cols = np.tile(T, (1, 3)).ravel()
    V = mesh.n_vertices
    return sp.csr_matrix((local.reshape(len(T), 9).ravel(), (rows, cols)), shape=(V, V))


def area_volume_hessians(mesh: SurfaceMesh, normals: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    HA, HV = _local_hessians(mesh, normals)
    A = _scatter(mesh, HA)
    Vm = _scatter(mesh, HV)
    return ((A + A.T) * 0.5).tocsr(), ((Vm + Vm.T) * 0.5).tocsr()


def assemble(mesh: SurfaceMesh, geom: GeometryCache, kind: str = "hessian",
             lambda0: float | None = None) -> JacobiOperator:
    """Discrete Jacobi operator in weak form.

    ``kind="hessian"``: ``Hess(area) - λ₀ Hess(volume)`` along the vertex normals,
    with λ₀ the weighted mean curvature.  ``kind="cotan"``: cotangent stiffness
    minus the lumped |A|² potential.
    """
    lam = float(geom.integrate(geom.H) / geom.mass.sum()) if lambda0 is None else float(lambda0)
    if kind == "hessian":
        HA, HV = area_volume_hessians(mesh, geom.normals)
        S = (HA - lam * HV).tocsr()
    elif kind == "cotan":
        S = (geom.stiffness - sp.diags(geom.mass * geom.A2)).tocsr()
    else:
        raise ValueError(f"unknown operator kind {kind!r}")
    return JacobiOperator(S, geom.mass.copy(), lam, kind)


# ---------------------------------------------------------------------------
# kernel fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GramMatrix:
    matrix: np.ndarray
    cond: float

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.matrix, rhs)


def gram_matrix(geom: GeometryCache, max_cond: float = 1e8) -> GramMatrix:
    nu = geom.normals
    G = (nu * geom.mass[:, None]).T @ nu
    G = 0.5 * (G + G.T)
    ev = np.linalg.eigvalsh(G)
    cond = np.inf if ev[0] <= 0 else float(ev[-1] / ev[0])
    if not np.isfinite(cond) or cond > max_cond:
        raise DegenerateGeometry(f"Gram matrix of normal components is degenerate (condition {cond:.3g})")
    return GramMatrix(G, cond)


def kernel_coefficients(geom: GeometryCache, gram: GramMatrix, phi: np.ndarray) -> np.ndarray:
    return gram.solve(geom.normals.T @ (geom.mass * phi))


def project_P(geom: GeometryCache, gram: GramMatrix, phi: np.ndarray) -> np.ndarray:
    """Remove the weighted-L² component of ``phi`` along span{ν₁, ν₂, ν₃}."""
    c = kernel_coefficients(geom, gram, phi)
    out = phi - geom.normals @ c
    # one refinement sweep brings the orthogonality down to round-off
    c2 = kernel_coefficients(geom, gram, out)
    return out - geom.normals @ c2


# ---------------------------------------------------------------------------
# bordered solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearSolveResult:
    w: np.ndarray
    lam: float
    beta: np.ndarray  # multipliers forced by the data, G⁻¹∫φν_i
    beta_defect: np.ndarray  # part due to the discrete Jacobi fields not being exact kernel vectors
    residual: float
    constraint_mean: float
    constraint_kernel: np.ndarray
    flagged: bool = False


class BorderedSolver:
    """Factor ``[[S, -B], [-Bᵀ, 0]]`` once, with ``B = M [1, ν₁, ν₂, ν₃]``.

    Solves ``S w = M (λ + Σ β_i ν_i + φ)``, ``∫w = a``, ``∫w ν_i = 0``.
    """

    def __init__(self, op: JacobiOperator, geom: GeometryCache, kernel: bool = True):
        self.op = op
        self.geom = geom
        self.kernel = kernel
        V = op.n
        cols = [np.ones(V), geom.normals] if kernel else [np.ones(V)]
        B = np.column_stack(cols) * geom.mass[:, None]
        self.B = B
        K = sp.bmat([[op.matrix, sp.csr_matrix(-B)], [sp.csr_matrix(-B.T), None]], format="csc")
        self.kkt = K
        try:
            self.lu = spla.splu(K, permc_spec="COLAMD")
        except RuntimeError as exc:  # exactly singular factorization
            raise SolverError(f"bordered system is singular: {exc}") from exc
        self.gram = GramMatrix((geom.normals * geom.mass[:, None]).T @ geom.normals, 0.0)
        self._Snu = op.matrix @ geom.normals  # kernel defect S ν_i

    def _solve_kkt(self, rhs_w: np.ndarray, rhs_c: np.ndarray) -> np.ndarray:
        rhs = np.concatenate([rhs_w, rhs_c])
        x = self.lu.solve(rhs)
        # one step of iterative refinement
        r = rhs - self.kkt @ x
        x = x + self.lu.solve(r)
        return x

    def solve(self, phi: np.ndarray, a: float = 0.0) -> LinearSolveResult:
        phi = np.asarray(phi, dtype=float)
        if not np.all(np.isfinite(phi)):
            raise SolverError("non-finite right-hand side")
        V = self.op.n
        m = self.geom.mass
        rc = np.zeros(self.B.shape[1])
        rc[0] = -a
        x = self._solve_kkt(m * phi, rc)
        w, mult = x[:V], x[V:]
        lam = float(mult[0])
        beta_raw = mult[1:] if self.kernel else np.zeros(3)
        beta_data = -self.gram.solve(self.geom.normals.T @ (m * phi))
        beta_def = self.gram.solve(self._Snu.T @ w)
        res = self.op.matrix @ w - m * (lam + self.geom.normals @ beta_raw + phi)
        scale = max(np.abs(m * phi).max(), np.abs(self.op.matrix @ w).max(), 1e-300)
        cm = float(m @ w - a)
        ck = self.geom.normals.T @ (m * w)
        return LinearSolveResult(
            w=w, lam=lam, beta=beta_data, beta_defect=beta_def,
            residual=float(np.abs(res).max() / scale), constraint_mean=cm, constraint_kernel=ck,
            flagged=bool(np.linalg.norm(beta_data) > 1e-8 * max(np.abs(phi).max(), 1e-300)),
        )


def solve_linear(op: JacobiOperator, geom: GeometryCache, gram: GramMatrix, phi, a: float = 0.0,
                 solver: BorderedSolver | None = None) -> LinearSolveResult:
    """One-shot wrapper; pass ``solver`` to reuse a factorization."""
    solver = solver or BorderedSolver(op, geom)
    return solver.solve(phi, a)


# ---------------------------------------------------------------------------
# spectrum
# ---------------------------------------------------------------------------


@dataclass
class KernelReport:
    eigenvalues: np.ndarray
    epsilon: float
    jacobi_residuals: np.ndarray
    near_zero: int
    subspace_angle_deg: float
    fourth: float
    passed: bool
    message: str

    def to_text(self) -> str:
        lines = [
            f"eigenvalues: {' '.join(f'{x:.6e}' for x in self.eigenvalues)}",
            f"epsilon: {self.epsilon:.6e}",
            f"jacobi_residuals: {' '.join(f'{x:.6e}' for x in self.jacobi_residuals)}",
            f"near_zero: {self.near_zero}",
            f"subspace_angle_deg: {self.subspace_angle_deg:.6f}",
            f"fourth_eigenvalue: {self.fourth:.6e}",
            f"passed: {self.passed}",
            f"message: {self.message}",
        ]
        return "\n".join(lines) + "\n"


def jacobi_residuals(op: JacobiOperator, geom: GeometryCache, norm: str = "dual") -> np.ndarray:
    """``‖L₀ν_i‖ / ‖ν_i‖`` for the three normal components.

    ``norm="dual"`` measures the weak residual ``S ν_i`` in the norm dual to the
    discrete H¹ norm, ``sqrt(rᵀ (K + M)⁻¹ r)``; ``norm="strong"`` uses the
    weighted L² norm of ``M⁻¹ S ν_i``, which is dominated by vertex-scale noise
    on irregular meshes.
    """
    nu = geom.normals
    R = op.matrix @ nu
    if norm == "dual":
        lu = spla.splu((geom.stiffness + sp.diags(geom.mass)).tocsc())
        num = np.einsum("ij,ij->j", R, lu.solve(R))
    elif norm == "strong":
        num = ((R / geom.mass[:, None]) ** 2 * geom.mass[:, None]).sum(axis=0)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    den = (nu**2 * geom.mass[:, None]).sum(axis=0)
    return np.sqrt(num / den)


def constrained_eigenpairs(op: JacobiOperator, k: int = 6, sigma: float = -1.0):
    """Lowest eigenpairs of ``S u = μ M u`` on weighted zero-mean functions (shift-invert)."""
    V = op.n
    m = op.mass
    M = sp.diags(m)
    c = m[:, None]
    K = sp.bmat([[(op.matrix - sigma * M), sp.csr_matrix(c)], [sp.csr_matrix(c.T), None]], format="csc")
    lu = spla.splu(K, permc_spec="COLAMD")

    def opinv(x):
        return lu.solve(np.concatenate([x, [0.0]]))[:V]

    Op = spla.LinearOperator((V, V), matvec=opinv, dtype=float)
    v0 = np.random.default_rng(12345).standard_normal(V)
    v0 -= (m @ v0) / m.sum()
    vals, vecs = spla.eigsh(op.matrix, k=k, M=M, sigma=sigma, OPinv=Op, which="LM", v0=v0, tol=1e-10)
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


def subspace_angle(geom: GeometryCache, U: np.ndarray) -> float:
    """Largest principal angle (degrees) between span(U) and span{ν_i} in the weighted inner product."""
    sq = np.sqrt(geom.mass)[:, None]
    Q1, _ = np.linalg.qr(U * sq)
    Q2, _ = np.linalg.qr(geom.normals * sq)
    s = np.linalg.svd(Q1.T @ Q2, compute_uv=False)
    return float(np.degrees(np.arccos(np.clip(s.min(), -1.0, 1.0))))


def kernel_check(op: JacobiOperator, geom: GeometryCache, k: int = 6, sigma: float = -1.0) -> KernelReport:
    vals, vecs = constrained_eigenpairs(op, k=k, sigma=sigma)
    res = jacobi_residuals(op, geom)
    eps = 10.0 * float(res.max())
    near = np.abs(vals) <= eps
    nz = int(near.sum())
    angle = subspace_angle(geom, vecs[:, np.argsort(np.abs(vals))[:3]])
    fourth = float(np.sort(vals)[3]) if len(vals) > 3 else float("nan")
    ok = nz == 3 and angle <= 5.0 and fourth > eps
    if nz > 3:
        msg = f"nondegeneracy failure: {nz} near-zero modes"
    elif nz < 3:
        msg = f"only {nz} near-zero modes below epsilon"
    elif angle > 5.0:
        msg = f"near-kernel is {angle:.2f} degrees from span(nu_i)"
    else:
        msg = "kernel is spanned by the translations"
    return KernelReport(vals, eps, res, nz, angle, fourth, ok, msg)


def coercivity_probe(op: JacobiOperator, geom: GeometryCache, gram: GramMatrix, samples: int = 50,
                     seed: int = 0) -> np.ndarray:
    """Ratios ⟨S w, w⟩ / ‖w‖²_{H¹} for random w with zero mean and no kernel component."""
    rng = np.random.default_rng(seed)
    m = geom.mass
    out = []
    for _ in range(samples):
        w = rng.standard_normal(op.n)
        # smooth a little so the samples are not pure grid noise
        for _ in range(3):
            w = w - 0.3 * (geom.stiffness @ w) / m * geom.mean_edge**2
        w = project_P(geom, gram, w - (m @ w) / m.sum())
        h1 = float(w @ (geom.stiffness @ w) + m @ w**2)
        out.append(op.quadratic_form(w) / h1)
    return np.array(out)


# ---------------------------------------------------------------------------
# relaxation
# ---------------------------------------------------------------------------


def relax_mean_curvature(mesh: SurfaceMesh, max_iter: int = 12, tol: float = 1e-11):
    """Newton iteration along vertex normals towards constant discrete mean curvature at fixed volume.

    Stops when ``max|H - λ₀|`` no longer decreases.  Returns the best mesh
    and the history of ``max|H - λ₀|``.
    """
    from .surface import enclosed_volume

    V0 = enclosed_volume(mesh)
    best = mesh
    geom = compute_geometry(mesh)
    lam = float(geom.integrate(geom.H) / geom.mass.sum())
    hist = [float(np.abs(geom.H - lam).max())]
    cur = mesh
    for it in range(max_iter):
        if hist[-1] < tol:
            break
        op = assemble(cur, geom, lambda0=lam)
        # kernel components of the residual are removed too, so no kernel pinning here
        solver = BorderedSolver(op, geom, kernel=False)
        vol_err = V0 - enclosed_volume(cur)
        sol = solver.solve(-(geom.H - lam), vol_err)
        new = cur.with_vertices(cur.vertices + sol.w[:, None] * geom.normals, tag="base").wrapped()
        try:
            g2 = compute_geometry(new)
        except ValueError:
            break
        lam2 = float(g2.integrate(g2.H) / g2.mass.sum())
        h = float(np.abs(g2.H - lam2).max())
        if h >= hist[-1]:
            break
        cur, geom, lam = new, g2, lam2
        best = cur
        hist.append(h)
        logger.info("relax iteration %d: max|H - lambda0| = %.3e", it + 1, h)
    return best, hist


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def write_coo(matrix: sp.spmatrix, path) -> None:
    A = sp.coo_matrix(matrix)
    with open(path, "w") as fh:
        fh.write(f"# rows={A.shape[0]} cols={A.shape[1]} nnz={A.nnz}\n")
        for i, j, v in zip(A.row, A.col, A.data):
            fh.write(f"{i} {j} {v:.17g}\n")


def write_eigen_report(report: KernelReport, path) -> None:
    with open(path, "w") as fh:
        fh.write(report.to_text())
