"""Auxiliary equation: fixed-point iteration for the normal graph (w, λ) at fixed γ and ξ.

Each sweep evaluates the full residual ``r = H_Γ + 4γ v_F + 2γ f`` on the
perturbed surface Γ = {x + ξ + w ν}, forms the nonlinear part

    𝓕(w) = L₀ w - (r - λ₀)

and solves the linear bordered problem ``L₀ w' = λ + P𝓕(w)`` with
``∫ w' ν_i = 0`` and ``∫ w' = a``, where ``a`` makes the enclosed volume
exact.  Since L₀ is the exact linearization of the curvature part of r,
𝓕 has Lipschitz constant O(γ + ‖w‖), which is what makes the sweep contract.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import torus_field as tf
from .energy import DEFAULT_MODES, DEFAULT_ORDER, first_variation_residual, total_energy
from .jacobi import BorderedSolver, GramMatrix, JacobiOperator, assemble, gram_matrix, project_P
from .surface import (GeometryCache, SurfaceMesh, build_schwarz_p, compute_geometry, enclosed_volume, perturb,
                      swept_volume)

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message: str, state: "PerturbationState | None" = None):
        super().__init__(message)
        self.state = state


@dataclass
class BaseBundle:
    mesh: SurfaceMesh
    geom: GeometryCache
    op: JacobiOperator
    gram: GramMatrix
    solver: BorderedSolver
    volume: float

    @classmethod
    def from_mesh(cls, mesh: SurfaceMesh, kind: str = "hessian") -> "BaseBundle":
        geom = compute_geometry(mesh)
        op = assemble(mesh, geom, kind=kind)
        gram = gram_matrix(geom)
        return cls(mesh, geom, op, gram, BorderedSolver(op, geom), enclosed_volume(mesh))

    @classmethod
    def schwarz_p(cls, resolution: int = 64, relax: bool = True, kind: str = "hessian") -> "BaseBundle":
        return cls.from_mesh(build_schwarz_p(resolution, relax=relax), kind=kind)

    @property
    def n(self) -> int:
        return self.mesh.n_vertices

    @property
    def lambda0(self) -> float:
        return self.op.lambda0

    def volume_change(self, w: np.ndarray) -> float:
        """Exact volume change of the polyhedron when vertices move by ``w ν``."""
        return swept_volume(self.mesh, w[:, None] * self.geom.normals)


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-9
    max_iter: int = 60
    damping: float = 1.0
    vol_tol: float = 1e-8
    cap: float = 0.1
    gamma_max: float = 0.1
    modes: int = DEFAULT_MODES
    order: int = DEFAULT_ORDER
    auto_damp: bool = True
    lipschitz_bound: float = 50.0

    def __post_init__(self):
        for name in ("tol", "vol_tol", "cap", "gamma_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class PerturbationState:
    gamma: float
    xi: np.ndarray
    w: np.ndarray
    lam: float
    a: float
    iterations: int
    history: list
    A: np.ndarray
    lambda_hat: float
    converged: bool
    volume_error: float = float("nan")
    kernel_orthogonality: float = float("nan")
    projected_residual: float = float("nan")
    remainder: float = float("nan")
    damping: float = 1.0
    energy: float = float("nan")
    warm_start: str = "zero"
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def w_sup(self) -> float:
        return float(np.abs(self.w).max())

    def contraction_factor(self, tol: float = 1e-9) -> float:
        return contraction_from_history(self.history, tol)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("w")
        d["xi"] = [float(x) for x in self.xi]
        d["A"] = [float(x) for x in self.A]
        d["w_sup"] = self.w_sup
        d["history"] = [float(x) for x in self.history]
        d["contraction"] = self.contraction_factor()
        return d


def contraction_from_history(history, tol: float = 1e-9) -> float:
    """Median ratio of successive update norms, ignoring updates near the round-off floor."""
    h = np.asarray(history, dtype=float)
    if len(h) < 3:
        return float("nan")
    ratios = [h[k + 1] / h[k] for k in range(1, len(h) - 1) if h[k + 1] > 10 * tol and h[k] > 0]
    if not ratios:
        return float("nan")
    return float(np.median(ratios))


def _torus_delta(a, b) -> np.ndarray:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return d - np.round(d)


def _volume_correction(base: BaseBundle, w: np.ndarray) -> float:
    """Constant c with volume_change(w + c) = 0; a constant shift keeps ∫ w ν_i unchanged."""
    c = 0.0
    m_tot = base.geom.mass.sum()
    for _ in range(20):
        dv = base.volume_change(w + c)
        if abs(dv) < 1e-15:
            break
        c -= dv / m_tot
    return c


def solve_auxiliary(base: BaseBundle, gamma: float, xi=(0.0, 0.0, 0.0), f_spec: tf.ForcingSpec | None = None,
                    cfg: SolverConfig | None = None, w0: np.ndarray | None = None,
                    warm_start: str | None = None, with_energy: bool = False) -> PerturbationState:
    cfg = cfg or SolverConfig()
    f_spec = f_spec or tf.ForcingSpec.zero()
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if gamma > cfg.gamma_max:
        raise ValueError(f"gamma={gamma} exceeds gamma_max={cfg.gamma_max}")
    t0 = time.perf_counter()
    xi = np.mod(np.asarray(xi, dtype=float), 1.0)
    # work in the frame of the base mesh: translating Γ by ξ is the same as
    # evaluating the forcing at x + ξ, and the other terms do not see ξ at all
    f_local = f_spec.translated(xi)
    m = base.geom.mass
    nu = base.geom.normals
    w = np.zeros(base.n) if w0 is None else np.asarray(w0, dtype=float).copy()
    theta = cfg.damping
    history: list[float] = []
    lam = 0.0
    a = 0.0
    converged = False
    res = None
    for it in range(1, cfg.max_iter + 1):
        gamma_mesh = perturb(base.mesh, base.geom, w, cap=cfg.cap)
        res = first_variation_residual(gamma_mesh, base.geom, base.gram, gamma, f_local, cfg.modes, cfg.order)
        F = base.op.apply(w) - (res.r - base.lambda0)
        phi = project_P(base.geom, base.gram, F)
        a = -(base.volume_change(w) - m @ w)
        sol = base.solver.solve(phi, a)
        w_new = (1.0 - theta) * w + theta * sol.w
        lam = sol.lam
        dw = float(np.abs(w_new - w).max())
        history.append(dw)
        w = w_new
        logger.debug("iteration %d: |dw| = %.3e", it, dw)
        if dw < cfg.tol:
            converged = True
            break
        if cfg.auto_damp and theta == 1.0 and len(history) >= 4:
            q = contraction_from_history(history, cfg.tol)
            if np.isfinite(q) and q >= 0.9:
                theta = 0.5
                logger.info("contraction factor %.2f: damping engaged", q)
    # hard volume constraint
    c = _volume_correction(base, w)
    if abs(c) > 0:
        w = w + c
    gamma_mesh = perturb(base.mesh, base.geom, w, cap=cfg.cap)
    res = first_variation_residual(gamma_mesh, base.geom, base.gram, gamma, f_local, cfg.modes, cfg.order)
    vol_err = enclosed_volume(gamma_mesh) - base.volume
    kern = float(np.abs(nu.T @ (m * w)).max() / max(np.sqrt(m @ w**2) * np.sqrt(m.sum()), 1e-300))
    state = PerturbationState(
        gamma=gamma, xi=xi, w=w, lam=lam, a=a, iterations=len(history), history=history, A=res.A,
        lambda_hat=res.lambda_hat, converged=converged, volume_error=float(vol_err),
        kernel_orthogonality=kern, projected_residual=res.remainder_norm,
        remainder=res.remainder_norm, damping=theta,
        warm_start=warm_start or ("zero" if w0 is None else "given"),
    )
    if with_energy:
        state.energy = total_energy(gamma_mesh, gamma, f_local, K=cfg.modes, order=cfg.order,
                                    u_hat=res.spectrum).total
    state.seconds = time.perf_counter() - t0
    if not converged:
        raise DivergenceError(
            f"auxiliary solve did not converge in {cfg.max_iter} iterations "
            f"(last update {history[-1]:.3e}); try a smaller gamma", state)
    return state


def lipschitz_probe(base: BaseBundle, gamma: float, xi1, xi2, f_spec: tf.ForcingSpec | None = None,
                    cfg: SolverConfig | None = None) -> dict:
    cfg = cfg or SolverConfig()
    s1 = solve_auxiliary(base, gamma, xi1, f_spec, cfg)
    s2 = solve_auxiliary(base, gamma, xi2, f_spec, cfg)
    dist = float(np.linalg.norm(_torus_delta(xi1, xi2)))
    diff = float(np.abs(s1.w - s2.w).max() + abs(s1.lam - s2.lam))
    ratio = diff / dist
    per_gamma = ratio / gamma if gamma > 0 else float("nan")
    return {"gamma": gamma, "distance": dist, "difference": diff, "ratio": ratio, "ratio_over_gamma": per_gamma,
            "bound": cfg.lipschitz_bound, "ok": bool(gamma == 0 or per_gamma <= cfg.lipschitz_bound)}


def contraction_probe(base: BaseBundle, gamma: float, xi=(0.0, 0.0, 0.0), f_spec: tf.ForcingSpec | None = None,
                      cfg: SolverConfig | None = None) -> dict:
    cfg = cfg or SolverConfig()
    s = solve_auxiliary(base, gamma, xi, f_spec, cfg)
    q = s.contraction_factor(cfg.tol)
    return {"gamma": gamma, "q": q, "q_over_gamma": q / gamma if gamma > 0 and np.isfinite(q) else float("nan"),
            "iterations": s.iterations, "history": [float(x) for x in s.history],
            "ok": bool(not np.isfinite(q) or q < 1.0),
            "note": "undefined: converged after the first correction" if not np.isfinite(q) else ""}


def write_report(state: PerturbationState, path, inputs: dict | None = None) -> None:
    payload = {"inputs": inputs or {}, "state": state.to_dict()}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_trace(state: PerturbationState, path) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,update_sup\n")
        for i, h in enumerate(state.history, 1):
            fh.write(f"{i},{h:.17g}\n")
