"""Energy of a surface configuration and its first variation.

    I_γ(F) = area(∂F) + γ ∫∫ G (u - m)(u - m) + γ ∫ f u,    u = χ_F - χ_{T³∖F}

The nonlocal term is evaluated from the Fourier coefficients of the region,
obtained directly from the triangles (see ``torus_field.indicator_spectrum``)
and truncated at ``|k_i| ≤ K``.  This makes the energy an exact function of
vertex positions, invariant under every translation, and ``4v`` averaged over
each vertex star is its gradient.  A grid route (ray-cast indicator
plus FFT Poisson solve) is kept as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import torus_field as tf
from .jacobi import GramMatrix
from .surface import GeometryCache, SurfaceMesh, directional_gradients, enclosed_volume

DEFAULT_MODES = 8
DEFAULT_ORDER = 2


@dataclass(frozen=True)
class EnergyBreakdown:
    perimeter: float
    nonlocal_: float
    forcing: float
    gamma: float
    method: str = "spectral"

    @property
    def total(self) -> float:
        return self.perimeter + self.gamma * self.nonlocal_ + self.gamma * self.forcing

    def as_row(self) -> dict:
        return {"perimeter": self.perimeter, "nonlocal": self.nonlocal_, "forcing": self.forcing,
                "gamma": self.gamma, "total": self.total, "method": self.method}


def region_spectrum(mesh: SurfaceMesh, K: int = DEFAULT_MODES, order: int = DEFAULT_ORDER) -> tf.HalfSpectrum:
    """Spectrum of ``u = 2χ_F - 1`` without its mean (``û_k = 2 χ̂_k`` for ``k ≠ 0``)."""
    chi = tf.indicator_spectrum(mesh.lifted(), K, order=order)
    return tf.HalfSpectrum(K, 2.0 * chi.coeffs)


def forcing_integral(mesh: SurfaceMesh, f_spec: tf.ForcingSpec, volume: float | None = None,
                     order: int = DEFAULT_ORDER) -> float:
    """``∫ f u_F dx`` for a trigonometric ``f``, term by term from the region's Fourier modes."""
    P = mesh.lifted()
    total = 0.0
    for t in f_spec.terms:
        if t.amplitude == 0.0:
            continue
        if t.wave == (0, 0, 0):
            if t.kind == "cos":
                vol = enclosed_volume(mesh) if volume is None else volume
                total += t.amplitude * (2.0 * vol - 1.0)
            continue
        c = tf.indicator_mode(P, t.wave, order=order)
        # ∫_F cos = Re ĉ, ∫_F sin = -Im ĉ ; the torus integral of a non-constant mode is zero
        total += 2.0 * t.amplitude * (c.real if t.kind == "cos" else -c.imag)
    return float(total)


def total_energy(mesh: SurfaceMesh, gamma: float, f_spec: tf.ForcingSpec | None = None,
                 method: str = "spectral", K: int = DEFAULT_MODES, n: int = 64,
                 order: int = DEFAULT_ORDER, u_hat: tf.HalfSpectrum | None = None) -> EnergyBreakdown:
    """Perimeter, γ-free nonlocal and forcing parts of the energy.

    ``u_hat`` may carry a spectrum already computed for this mesh with the same K and order.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    f_spec = f_spec or tf.ForcingSpec.zero()
    area = mesh.total_area()
    if gamma == 0.0:
        return EnergyBreakdown(area, 0.0, 0.0, 0.0, method)
    if method == "spectral":
        nl = tf.spectral_nonlocal_energy(u_hat if u_hat is not None else region_spectrum(mesh, K, order))
        fo = forcing_integral(mesh, f_spec, order=order) if not f_spec.is_zero else 0.0
    elif method == "grid":
        vol = enclosed_volume(mesh)
        u = tf.indicator_from_lifted(mesh.lifted(), n, volume_hint=vol)
        nl = tf.nonlocal_energy(u)
        fo = float(np.mean(tf.forcing_field(f_spec, n).values * u.values)) if not f_spec.is_zero else 0.0
    else:
        raise ValueError(f"unknown energy method {method!r}")
    return EnergyBreakdown(area, nl, fo, gamma, method)


@dataclass(frozen=True)
class ResidualField:
    r: np.ndarray
    lambda_hat: float
    A: np.ndarray
    remainder: np.ndarray
    weights: np.ndarray  # volume derivative along the base normals, the pulled-back area element
    curvature: np.ndarray
    potential: np.ndarray
    forcing: np.ndarray
    spectrum: tf.HalfSpectrum | None = None

    @property
    def remainder_norm(self) -> float:
        return float(np.abs(self.remainder).max())


def potential_at_vertices(mesh: SurfaceMesh, K: int = DEFAULT_MODES, order: int = DEFAULT_ORDER) -> np.ndarray:
    spec = tf.potential_spectrum(region_spectrum(mesh, K, order))
    return tf.evaluate_spectrum(spec, mesh.vertices)


def _hat_averages(mesh: SurfaceMesh, directions: np.ndarray, dV: np.ndarray, f_spec: tf.ForcingSpec,
                  u_hat: tf.HalfSpectrum, order: int) -> tuple[np.ndarray, np.ndarray]:
    """``∫ φ_v g (d_v · n) dσ / ∫ φ_v (d_v · n) dσ`` for g = v_F and g = f."""
    bary, wts = tf._RULES[order]
    P = mesh.lifted()
    T = mesh.triangles
    N = 0.5 * np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0])
    pts = np.einsum("qc,fcd->fqd", bary, P)
    flat = pts.reshape(-1, 3)
    gv = tf.evaluate_spectrum(tf.potential_spectrum(u_hat), flat).reshape(len(T), -1)
    gf = f_spec.evaluate(flat).reshape(len(T), -1) if not f_spec.is_zero else np.zeros_like(gv)
    V = mesh.n_vertices
    sv = np.zeros(V)
    sf = np.zeros(V)
    for a in range(3):
        dn = np.einsum("ij,ij->i", directions[T[:, a]], N)
        phi = bary[:, a] * wts  # hat function of corner a at the quadrature points
        np.add.at(sv, T[:, a], dn * (gv @ phi))
        np.add.at(sf, T[:, a], dn * (gf @ phi))
    return sv / dV, sf / dV


def a_coefficients(geom_base: GeometryCache, gram: GramMatrix, r: np.ndarray) -> tuple[float, np.ndarray]:
    """(λ̂, A) with λ̂ the weighted mean of r and ``A = Gram⁻¹ ∫(r - λ̂) ν_i dσ``."""
    m = geom_base.mass
    lam = float(m @ r / m.sum())
    A = gram.solve(geom_base.normals.T @ (m * (r - lam)))
    return lam, A


def first_variation_residual(mesh_G: SurfaceMesh, geom_base: GeometryCache, gram: GramMatrix, gamma: float,
                             f_spec: tf.ForcingSpec | None = None, K: int = DEFAULT_MODES,
                             order: int = DEFAULT_ORDER, consistent: bool = True) -> ResidualField:
    """``r = H_Γ + 4γ v_F + 2γ f`` at the vertices of Γ, identified with Σ by vertex index.

    ``H_Γ`` is the ratio of the area and volume derivatives along the base
    normals, so that ``r = λ`` holds exactly at a constrained critical point.
    The factor 2 on ``f`` is the derivative of ``∫ f u_F`` (``u`` jumps by 2).

    With ``consistent`` (default) the traces of ``v_F`` and ``f`` are hat-function
    averages over the vertex star, weighted like the volume derivative, which
    makes ``r`` the gradient of the discrete energy up to triangle quadrature;
    otherwise they are point values at the vertices.
    """
    f_spec = f_spec or tf.ForcingSpec.zero()
    if mesh_G.n_vertices != geom_base.n:
        raise ValueError("perturbed mesh and base geometry have different vertex counts")
    dA, dV = directional_gradients(mesh_G, geom_base.normals)
    H = dA / dV
    V = mesh_G.n_vertices
    u_hat = region_spectrum(mesh_G, K, order) if gamma > 0 else None
    if gamma > 0 and consistent:
        v, f = _hat_averages(mesh_G, geom_base.normals, dV, f_spec, u_hat, order)
    elif gamma > 0:
        v = tf.evaluate_spectrum(tf.potential_spectrum(u_hat), mesh_G.vertices)
        f = f_spec.evaluate(mesh_G.vertices)
    else:
        v = f = np.zeros(V)
    r = H + 4.0 * gamma * v + 2.0 * gamma * f
    lam, A = a_coefficients(geom_base, gram, r)
    rem = r - lam - geom_base.normals @ A
    return ResidualField(r, lam, A, rem, dV, H, v, f, u_hat)


def write_residual_csv(res: ResidualField, path) -> None:
    with open(path, "w") as fh:
        fh.write("r,H,v,f,weight,remainder\n")
        for row in zip(res.r, res.curvature, res.potential, res.forcing, res.weights, res.remainder):
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
