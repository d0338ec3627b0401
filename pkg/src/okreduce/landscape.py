"""Reduced energy Φ_γ(ξ) over the torus of translations and its critical points."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import torus_field as tf
from .reduction import BaseBundle, DivergenceError, PerturbationState, SolverConfig, solve_auxiliary

logger = logging.getLogger(__name__)


class ScanError(RuntimeError):
    pass


@dataclass
class ReducedMap:
    M: int
    gamma: float
    f_text: str
    phi: np.ndarray  # (M, M, M)
    A: np.ndarray  # (M, M, M, 3)
    lam: np.ndarray
    w_sup: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    warm_from: np.ndarray  # flat index of the node whose w seeded this one, -1 for zero
    area: float
    tol: float
    seconds: float = 0.0

    def xi(self, i, j, k) -> np.ndarray:
        return np.array([i, j, k], dtype=float) / self.M

    @property
    def A_norm(self) -> np.ndarray:
        return np.linalg.norm(self.A, axis=-1)

    def interpolant(self) -> "PeriodicSpline":
        return PeriodicSpline(self.phi)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("xi1,xi2,xi3,phi,A1,A2,A3,lambda,w_sup,iters,converged\n")
            for i, j, k in np.ndindex(self.phi.shape):
                x = self.xi(i, j, k)
                A = self.A[i, j, k]
                fh.write(
                    f"{x[0]:.6f},{x[1]:.6f},{x[2]:.6f},{self.phi[i, j, k]:.17g},"
                    f"{A[0]:.17g},{A[1]:.17g},{A[2]:.17g},{self.lam[i, j, k]:.17g},"
                    f"{self.w_sup[i, j, k]:.17g},{int(self.iterations[i, j, k])},{int(self.converged[i, j, k])}\n"
                )


def traversal_order(M: int) -> list[tuple[int, int, int]]:
    """Boustrophedon walk: consecutive nodes are always grid neighbours."""
    order = []
    for i in range(M):
        js = range(M) if i % 2 == 0 else range(M - 1, -1, -1)
        for jn, j in enumerate(js):
            forward = (i * M + jn) % 2 == 0
            ks = range(M) if forward else range(M - 1, -1, -1)
            order.extend((i, j, k) for k in ks)
    return order


def scan(base: BaseBundle, gamma: float, f_spec: tf.ForcingSpec, M: int = 9,
         cfg: SolverConfig | None = None, max_failed: float = 0.05) -> ReducedMap:
    if M < 5:
        raise ValueError("landscape grid needs M >= 5")
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    shape = (M, M, M)
    phi = np.full(shape, np.nan)
    A = np.full(shape + (3,), np.nan)
    lam = np.full(shape, np.nan)
    wsup = np.full(shape, np.nan)
    iters = np.zeros(shape, dtype=int)
    conv = np.zeros(shape, dtype=bool)
    warm = np.full(shape, -1, dtype=int)
    prev_w = None
    prev_idx = -1
    for node in traversal_order(M):
        xi = np.array(node, dtype=float) / M
        try:
            st = solve_auxiliary(base, gamma, xi, f_spec, cfg, w0=prev_w, with_energy=True,
                                 warm_start=f"node {prev_idx}" if prev_w is not None else "zero")
        except DivergenceError as exc:
            st = exc.state
            logger.warning("node %s did not converge", node)
        if st is None:
            continue
        phi[node] = st.energy
        A[node] = st.A
        lam[node] = st.lam
        wsup[node] = st.w_sup
        iters[node] = st.iterations
        conv[node] = st.converged
        warm[node] = prev_idx
        if st.converged:
            prev_w = st.w
            prev_idx = int(np.ravel_multi_index(node, shape))
    failed = 1.0 - conv.mean()
    if failed > max_failed:
        raise ScanError(f"{failed:.1%} of landscape nodes failed to converge")
    return ReducedMap(M, gamma, f_spec.to_text(), phi, A, lam, wsup, iters, conv, warm,
                      base.geom.total_area, cfg.tol, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# periodic tricubic interpolant
# ---------------------------------------------------------------------------


def _bspline(t: np.ndarray):
    """Cubic B-spline weights (and first two derivatives) for the 4 nodes around fractional offset t."""
    t = np.asarray(t)
    w = np.stack([(1 - t) ** 3 / 6, (3 * t**3 - 6 * t**2 + 4) / 6, (-3 * t**3 + 3 * t**2 + 3 * t + 1) / 6, t**3 / 6])
    d1 = np.stack([-(1 - t) ** 2 / 2, (9 * t**2 - 12 * t) / 6, (-9 * t**2 + 6 * t + 3) / 6, t**2 / 2])
    d2 = np.stack([(1 - t), (18 * t - 12) / 6, (-18 * t + 6) / 6, t])
    return w, d1, d2


class PeriodicSpline:
    """Interpolating periodic cubic B-spline through samples on a uniform M³ grid of the unit torus."""

    def __init__(self, values: np.ndarray):
        v = np.asarray(values, dtype=float)
        self.M = v.shape[0]
        k = np.fft.fftfreq(self.M)
        sym1 = (4 + 2 * np.cos(2 * np.pi * k)) / 6
        sym = sym1[:, None, None] * sym1[None, :, None] * sym1[None, None, :]
        self.coef = np.fft.ifftn(np.fft.fftn(v) / sym).real

    def _stencil(self, x):
        s = np.mod(np.asarray(x, dtype=float), 1.0) * self.M
        base = np.floor(s).astype(int)
        t = s - base
        idx = [(base[a] + np.arange(-1, 3)) % self.M for a in range(3)]
        return idx, [_bspline(t[a]) for a in range(3)]

    def evaluate(self, x) -> tuple[float, np.ndarray, np.ndarray]:
        """Value, gradient and Hessian (derivatives with respect to ξ, not grid index)."""
        idx, bs = self._stencil(x)
        C = self.coef[np.ix_(idx[0], idx[1], idx[2])]
        M = self.M

        def contract(o0, o1, o2):
            return float(np.einsum("i,j,k,ijk->", bs[0][o0], bs[1][o1], bs[2][o2], C))

        val = contract(0, 0, 0)
        g = np.array([contract(1, 0, 0), contract(0, 1, 0), contract(0, 0, 1)]) * M
        H = np.empty((3, 3))
        for a in range(3):
            for b in range(3):
                o = [0, 0, 0]
                o[a] += 1
                o[b] += 1
                H[a, b] = contract(*o) * M * M
        return val, g, H

    def __call__(self, x) -> float:
        return self.evaluate(x)[0]


# ---------------------------------------------------------------------------
# critical points
# ---------------------------------------------------------------------------


@dataclass
class CriticalPoint:
    xi: np.ndarray
    kind: str  # min | max | saddle | degenerate | degenerate-manifold
    phi: float
    grad_norm: float
    A_norm: float = float("nan")
    cell: int = -1
    hessian_eigs: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class CriticalConfig:
    grad_tol: float = 1e-9
    tie_tol: float = 1e-10
    degeneracy_factor: float = 1e3
    newton_iter: int = 50


def _newton(spline: PeriodicSpline, x0: np.ndarray, cfg: CriticalConfig):
    x = x0.copy()
    for _ in range(cfg.newton_iter):
        _, g, H = spline.evaluate(x)
        if np.linalg.norm(g) <= cfg.grad_tol:
            return np.mod(x, 1.0), True
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = -g
        # damp steps longer than half a cell
        lim = 0.5 / spline.M
        n = np.linalg.norm(step)
        if n > lim:
            step *= lim / n
        x = x + step
    _, g, _ = spline.evaluate(x)
    return np.mod(x, 1.0), bool(np.linalg.norm(g) <= cfg.grad_tol)


def _torus_dist(a, b) -> float:
    d = np.asarray(a) - np.asarray(b)
    d -= np.round(d)
    return float(np.linalg.norm(d))


def classify(eigs: np.ndarray, tie: float) -> str:
    scale = max(np.abs(eigs).max(), 1e-300)
    if np.any(np.abs(eigs) <= tie * scale):
        return "degenerate"
    if np.all(eigs > 0):
        return "min"
    if np.all(eigs < 0):
        return "max"
    return "saddle"


def critical_points(rmap: ReducedMap, cfg: CriticalConfig | None = None) -> list[CriticalPoint]:
    cfg = cfg or CriticalConfig()
    phi = rmap.phi
    rng = float(np.nanmax(phi) - np.nanmin(phi))
    if rng < cfg.degeneracy_factor * rmap.tol * rmap.area:
        i = np.unravel_index(np.nanargmin(phi), phi.shape)
        return [CriticalPoint(rmap.xi(*i), "degenerate-manifold", float(phi[i]), 0.0,
                              float(rmap.A_norm[i]), -1, np.zeros(3))]
    spline = rmap.interpolant()
    M = rmap.M
    # gradient of the interpolant at the nodes; a cell is a candidate if every
    # component takes both signs (or vanishes) over its 8 corners
    G = np.empty((M, M, M, 3))
    for node in np.ndindex(M, M, M):
        G[node] = spline.evaluate(np.array(node) / M)[1]
    found: list[CriticalPoint] = []
    for cell in np.ndindex(M, M, M):
        corners = [tuple((np.array(cell) + np.array(o)) % M) for o in np.ndindex(2, 2, 2)]
        g = np.array([G[c] for c in corners])
        if not np.all((g.min(axis=0) <= 0) & (g.max(axis=0) >= 0)):
            continue
        x, ok = _newton(spline, (np.array(cell) + 0.5) / M, cfg)
        if not ok:
            continue
        if any(_torus_dist(x, p.xi) < 0.5 / M for p in found):
            continue
        val, g, H = spline.evaluate(x)
        eigs = np.linalg.eigvalsh(H)
        found.append(CriticalPoint(x, classify(eigs, cfg.tie_tol), val, float(np.linalg.norm(g)),
                                   cell=int(np.ravel_multi_index(cell, (M, M, M))), hessian_eigs=eigs))
    found.sort(key=lambda p: (p.phi, tuple(p.xi)))
    return found


def multiplicity_verdict(points: list[CriticalPoint]) -> str:
    if len(points) == 1 and points[0].kind == "degenerate-manifold":
        return "degenerate (translation-invariant)"
    isolated = [p for p in points if p.kind != "degenerate-manifold"]
    kinds = {k: sum(p.kind == k for p in isolated) for k in ("min", "max", "saddle", "degenerate")}
    status = "ok" if len(isolated) >= 4 else "FAILED"
    return (f"{status}: {len(isolated)} isolated critical points "
            f"(min {kinds['min']}, max {kinds['max']}, saddle {kinds['saddle']}, degenerate {kinds['degenerate']}); "
            "lower bound 4")


def write_critical_csv(points: list[CriticalPoint], path) -> None:
    with open(path, "w") as fh:
        fh.write("xi1,xi2,xi3,type,phi,A_norm\n")
        for p in points:
            fh.write(f"{p.xi[0]:.10f},{p.xi[1]:.10f},{p.xi[2]:.10f},{p.kind},{p.phi:.17g},{p.A_norm:.6e}\n")


# ---------------------------------------------------------------------------
# bifurcation check
# ---------------------------------------------------------------------------


@dataclass
class BifurcationReport:
    xi: np.ndarray
    A: np.ndarray
    A_norm: float
    median: float
    ratio: float
    passed: bool
    state: PerturbationState | None = None


def verify_bifurcation(base: BaseBundle, gamma: float, f_spec: tf.ForcingSpec, xi_star, median: float,
                       cfg: SolverConfig | None = None, factor: float = 0.1, w0=None) -> BifurcationReport:
    """Re-solve at ξ* and check ``‖A(ξ*)‖ ≤ factor × median‖A‖`` of the scan."""
    st = solve_auxiliary(base, gamma, xi_star, f_spec, cfg, w0=w0)
    A = st.A
    nA = float(np.linalg.norm(A))
    ratio = nA / median if median > 0 else float("inf")
    return BifurcationReport(np.asarray(xi_star), A, nA, median, ratio, bool(nA <= factor * median), st)


def negative_controls(base: BaseBundle, gamma: float, f_spec: tf.ForcingSpec, rmap: ReducedMap,
                      points: list[CriticalPoint], cfg: SolverConfig | None = None,
                      count: int = 3) -> list[BifurcationReport]:
    """Re-solve at the ``count`` nodes farthest from every detected critical point; there ‖A‖ should
    reach the scan median."""
    M = rmap.M
    nodes = [np.array(node) / M for node in np.ndindex(M, M, M)]
    dist = [min((_torus_dist(x, p.xi) for p in points), default=1.0) for x in nodes]
    # stable sort: ties resolved by node order, so the choice is deterministic
    order = np.argsort(-np.asarray(dist), kind="stable")[:count]
    median = float(np.median(rmap.A_norm[rmap.converged]))
    out = []
    for i in order:
        st = solve_auxiliary(base, gamma, nodes[i], f_spec, cfg)
        nA = float(np.linalg.norm(st.A))
        out.append(BifurcationReport(nodes[i], st.A, nA, median, nA / median, bool(nA >= median), st))
    return out


def negative_control(base: BaseBundle, gamma: float, f_spec: tf.ForcingSpec, rmap: ReducedMap,
                     points: list[CriticalPoint], cfg: SolverConfig | None = None) -> BifurcationReport:
    """Single control at the node farthest from every detected critical point."""
    return negative_controls(base, gamma, f_spec, rmap, points, cfg, count=1)[0]
