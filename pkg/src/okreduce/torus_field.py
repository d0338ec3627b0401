"""Periodic scalar fields on the unit 3-torus and the spectral nonlocal machinery.

Grid fields are sampled cell-centred: index ``(i, j, k)`` sits at
``((i + 1/2) / n, (j + 1/2) / n, (k + 1/2) / n)``.  The Green function of
``-Δ`` on the torus is never formed; its action is applied mode by mode.

Two routes to the nonlocal term are provided.  The grid route rasterises a
set to ``±1`` and FFTs it.  The mesh route integrates Fourier modes of the
indicator directly over the triangles (divergence theorem), which is smooth
in vertex positions and exactly covariant under translations.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


class TorusFieldError(ValueError):
    """Invalid grid field, forcing description or inconsistent input."""


# ---------------------------------------------------------------------------
# grid fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PeriodicField:
    values: np.ndarray
    zero_mean: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or not (v.shape[0] == v.shape[1] == v.shape[2]):
            raise TorusFieldError(f"expected an n x n x n array, got shape {v.shape}")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.zero_mean:
            scale = max(float(np.abs(v).max()), 1e-300)
            if abs(float(v.mean())) > 1e-12 * scale:
                raise TorusFieldError("field flagged zero-mean has non-zero mean")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def mean(self) -> float:
        return float(self.values.mean())

    def at_index(self, i: int, j: int, k: int) -> float:
        n = self.n
        return float(self.values[i % n, j % n, k % n])

    def shifted(self, di: int, dj: int, dk: int) -> "PeriodicField":
        """Translate by a whole number of cells."""
        return PeriodicField(np.roll(self.values, (di, dj, dk), axis=(0, 1, 2)))


def grid_coordinates(n: int) -> np.ndarray:
    """1-D cell-centre coordinates ``(i + 1/2) / n``."""
    return (np.arange(n) + 0.5) / n


def grid_points(n: int) -> np.ndarray:
    x = grid_coordinates(n)
    X = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1)
    return X.reshape(-1, 3)


def from_function(func, n: int) -> PeriodicField:
    """Sample ``func(x1, x2, x3)`` (vectorised) on the cell-centred grid."""
    x = grid_coordinates(n)
    X1, X2, X3 = np.meshgrid(x, x, x, indexing="ij")
    return PeriodicField(func(X1, X2, X3))


def _wavenumbers(n: int):
    k = np.fft.fftfreq(n, d=1.0 / n)
    K1, K2, K3 = np.meshgrid(k, k, k, indexing="ij")
    return K1, K2, K3


def _symbol(n: int) -> np.ndarray:
    """Fourier symbol of ``-Δ`` on the unit torus, ``4π²|k|²``."""
    K1, K2, K3 = _wavenumbers(n)
    return (TWO_PI**2) * (K1**2 + K2**2 + K3**2)


def _check_resolution(n: int) -> None:
    if n < 4:
        raise TorusFieldError(f"grid resolution n={n} is under-resolved (need n >= 4)")


def laplacian(field: PeriodicField) -> PeriodicField:
    """Spectral ``-Δ`` of a grid field."""
    _check_resolution(field.n)
    out = np.fft.ifftn(np.fft.fftn(field.values) * _symbol(field.n)).real
    return PeriodicField(out)


def poisson_solve(rho: PeriodicField) -> PeriodicField:
    """Zero-mean solution of ``-Δ v = rho - mean(rho)``."""
    _check_resolution(rho.n)
    rho_hat = np.fft.fftn(rho.values)
    sym = _symbol(rho.n)
    sym[0, 0, 0] = 1.0
    v_hat = rho_hat / sym
    v_hat[0, 0, 0] = 0.0
    v = np.fft.ifftn(v_hat).real
    v -= v.mean()
    return PeriodicField(v, zero_mean=True)


def nonlocal_energy(u: PeriodicField, m: float | None = None) -> float:
    """``∫∫ G(x, y)(u(x) - m)(u(y) - m)`` evaluated as ``∫ v (u - m)``.

    ``m`` must equal the mean of ``u``; the torus Poisson problem has no
    solution otherwise.
    """
    mu = u.mean()
    if m is None:
        m = mu
    if abs(m - mu) > 1e-8:
        raise TorusFieldError(f"m={m!r} inconsistent with mean(u)={mu!r}")
    v = poisson_solve(u)
    return float(np.mean(v.values * (u.values - m)))


def nonlocal_energy_fourier(u: PeriodicField) -> float:
    """Same quantity from ``Σ_k |û_k|² / (4π²|k|²)`` (Parseval route)."""
    n = u.n
    u_hat = np.fft.fftn(u.values) / n**3
    sym = _symbol(n)
    sym[0, 0, 0] = np.inf
    return float(np.sum(np.abs(u_hat) ** 2 / sym))


def sample_at(field: PeriodicField, points, method: str = "trilinear") -> np.ndarray:
    """Evaluate a grid field at arbitrary torus points.

    ``trilinear`` is exact on functions that are trilinear within each cell;
    ``spectral`` evaluates the trigonometric interpolant (Nyquist modes dropped).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if method == "trilinear":
        return _trilinear(field.values, pts)
    if method == "spectral":
        return _spectral_eval(field.values, pts)
    raise TorusFieldError(f"unknown sampling method {method!r}")


def _trilinear(values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    n = values.shape[0]
    s = pts * n - 0.5
    i0 = np.floor(s).astype(np.int64)
    t = s - i0
    out = np.zeros(len(pts))
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1.0 - t[:, 0]
        ix = (i0[:, 0] + dx) % n
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1.0 - t[:, 1]
            iy = (i0[:, 1] + dy) % n
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1.0 - t[:, 2]
                iz = (i0[:, 2] + dz) % n
                out += wx * wy * wz * values[ix, iy, iz]
    return out


def _spectral_eval(values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    n = values.shape[0]
    k = np.fft.fftfreq(n, d=1.0 / n)
    # samples sit at (j + 1/2)/n: undo the half-cell phase
    phase = np.exp(-1j * np.pi * k / n)
    c = np.fft.fftn(values) / n**3
    c = c * phase[:, None, None] * phase[None, :, None] * phase[None, None, :]
    keep = np.abs(k) < n / 2
    c = c[np.ix_(keep, keep, keep)]
    kk = k[keep]
    out = np.empty(len(pts))
    for start in range(0, len(pts), 256):
        p = pts[start:start + 256]
        e1 = np.exp(1j * TWO_PI * p[:, 0:1] * kk)
        e2 = np.exp(1j * TWO_PI * p[:, 1:2] * kk)
        e3 = np.exp(1j * TWO_PI * p[:, 2:3] * kk)
        out[start:start + 256] = np.einsum("abc,pa,pb,pc->p", c, e1, e2, e3, optimize=True).real
    return out


# ---------------------------------------------------------------------------
# forcing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForcingTerm:
    kind: str  # "cos" or "sin"
    wave: tuple[int, int, int]
    amplitude: float


_TERM_RE = re.compile(
    r"^\s*([+-]?\s*[0-9.eE+-]*)\s*\*?\s*(cos|sin)\s*\(\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*\)\s*$"
)


@dataclass(frozen=True)
class ForcingSpec:
    """A finite real trigonometric series ``Σ a cos(2πk·x) + b sin(2πk·x)``."""

    terms: tuple[ForcingTerm, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for t in self.terms:
            if t.kind not in ("cos", "sin"):
                raise TorusFieldError(f"unknown forcing term kind {t.kind!r}")
            if len(t.wave) != 3 or any(int(c) != c for c in t.wave):
                raise TorusFieldError(f"wave vector {t.wave!r} is not an integer triple")

    @classmethod
    def zero(cls) -> "ForcingSpec":
        return cls(())

    @classmethod
    def cosines(cls, *waves: Sequence[int], amplitude: float = 1.0) -> "ForcingSpec":
        return cls(tuple(ForcingTerm("cos", tuple(int(c) for c in k), amplitude) for k in waves))

    @classmethod
    def parse(cls, text: str) -> "ForcingSpec":
        """Parse e.g. ``"cos(1,0,0) + 0.5*sin(0,1,0) - cos(0,0,1)"``; ``"0"`` or ``""`` is zero."""
        text = text.strip()
        if text in ("", "0", "none", "zero"):
            return cls.zero()
        # split on top-level + / - while keeping the sign
        pieces = re.split(r"(?<=\))\s*(?=[+-])", text)
        terms = []
        for piece in pieces:
            m = _TERM_RE.match(piece)
            if not m:
                raise TorusFieldError(f"cannot parse forcing term {piece!r}")
            coef = m.group(1).replace(" ", "")
            if coef in ("", "+"):
                amp = 1.0
            elif coef == "-":
                amp = -1.0
            else:
                amp = float(coef)
            wave = (int(m.group(3)), int(m.group(4)), int(m.group(5)))
            terms.append(ForcingTerm(m.group(2), wave, amp))
        return cls(tuple(terms))

    def to_text(self) -> str:
        if not self.terms:
            return "0"
        return " + ".join(f"{t.amplitude!r}*{t.kind}({t.wave[0]},{t.wave[1]},{t.wave[2]})" for t in self.terms)

    @property
    def is_zero(self) -> bool:
        return all(t.amplitude == 0.0 for t in self.terms)

    @property
    def band_limit(self) -> int:
        return max((max(abs(c) for c in t.wave) for t in self.terms), default=0)

    @property
    def lipschitz_bound(self) -> float:
        return float(sum(TWO_PI * np.linalg.norm(t.wave) * abs(t.amplitude) for t in self.terms))

    def translated(self, xi) -> "ForcingSpec":
        """The series for ``x ↦ f(x + ξ)``, again a finite trigonometric series."""
        xi = np.asarray(xi, dtype=float)
        if not np.any(xi) or not self.terms:
            return self
        out = []
        for t in self.terms:
            if t.wave == (0, 0, 0):
                out.append(t)
                continue
            th = TWO_PI * float(np.dot(t.wave, xi))
            c, s = np.cos(th), np.sin(th)
            if t.kind == "cos":
                out += [ForcingTerm("cos", t.wave, t.amplitude * c), ForcingTerm("sin", t.wave, -t.amplitude * s)]
            else:
                out += [ForcingTerm("sin", t.wave, t.amplitude * c), ForcingTerm("cos", t.wave, t.amplitude * s)]
        return ForcingSpec(tuple(out))

    def evaluate(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(len(pts))
        for t in self.terms:
            arg = TWO_PI * pts @ np.asarray(t.wave, dtype=float)
            out += t.amplitude * (np.cos(arg) if t.kind == "cos" else np.sin(arg))
        return out


def forcing_field(spec: ForcingSpec, n: int) -> PeriodicField:
    _check_resolution(n)
    if spec.band_limit >= n / 2:
        raise TorusFieldError(f"forcing band limit {spec.band_limit} aliases on an n={n} grid")
    return PeriodicField(spec.evaluate(grid_points(n)).reshape(n, n, n))


def fourier_coefficients(field: PeriodicField) -> dict[tuple[int, int, int], complex]:
    """Non-negligible coefficients ``c_k`` of ``Σ c_k exp(2πik·x)`` (cell-centre phase removed)."""
    n = field.n
    k = np.fft.fftfreq(n, d=1.0 / n).astype(int)
    phase = np.exp(-1j * np.pi * k / n)
    c = np.fft.fftn(field.values) / n**3
    c = c * phase[:, None, None] * phase[None, :, None] * phase[None, None, :]
    out = {}
    for idx in zip(*np.nonzero(np.abs(c) > 1e-13)):
        out[(int(k[idx[0]]), int(k[idx[1]]), int(k[idx[2]]))] = complex(c[idx])
    return out


# ---------------------------------------------------------------------------
# rasterising a mesh: periodic ray casting along the three axes
# ---------------------------------------------------------------------------


def _axis_crossings(tris: np.ndarray, normals: np.ndarray, axis: int, n: int):
    """Crossings of the cell-centred grid lines parallel to ``axis`` with lifted triangles.

    Returns (line index, position along the axis in [0, 1), orientation sign).
    """
    b, c = [a for a in range(3) if a != axis]
    P = tris[:, :, [b, c]] * n - 0.5  # grid-index coordinates of the projected corners
    lo = np.ceil(P.min(axis=1)).astype(np.int64)
    hi = np.floor(P.max(axis=1)).astype(np.int64)
    span = hi - lo + 1
    ok = (span[:, 0] > 0) & (span[:, 1] > 0) & (np.abs(normals[:, axis]) > 0)
    lines, pos, sgn = [], [], []
    if not ok.any():
        return np.zeros(0, np.int64), np.zeros(0), np.zeros(0)
    idx = np.nonzero(ok)[0]
    max_span = span[idx].max(axis=0)
    A = P[idx]
    x0, x1, x2 = A[:, 0], A[:, 1], A[:, 2]
    det = (x1[:, 0] - x0[:, 0]) * (x2[:, 1] - x0[:, 1]) - (x2[:, 0] - x0[:, 0]) * (x1[:, 1] - x0[:, 1])
    good = np.abs(det) > 0
    for dj in range(max_span[0]):
        for dk in range(max_span[1]):
            j = lo[idx, 0] + dj
            k = lo[idx, 1] + dk
            inside_box = (j <= hi[idx, 0]) & (k <= hi[idx, 1]) & good
            if not inside_box.any():
                continue
            sel = np.nonzero(inside_box)[0]
            pj, pk = j[sel].astype(float), k[sel].astype(float)
            a0, a1, a2 = x0[sel], x1[sel], x2[sel]
            d = det[sel]
            l1 = ((pj - a0[:, 0]) * (a2[:, 1] - a0[:, 1]) - (a2[:, 0] - a0[:, 0]) * (pk - a0[:, 1])) / d
            l2 = ((a1[:, 0] - a0[:, 0]) * (pk - a0[:, 1]) - (pj - a0[:, 0]) * (a1[:, 1] - a0[:, 1])) / d
            l0 = 1.0 - l1 - l2
            hit = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
            if not hit.any():
                continue
            f = idx[sel[hit]]
            T = tris[f, :, axis]
            s = l0[hit] * T[:, 0] + l1[hit] * T[:, 1] + l2[hit] * T[:, 2]
            lines.append((j[sel[hit]] % n) * n + (k[sel[hit]] % n))
            pos.append(np.mod(s, 1.0))
            sgn.append(np.sign(normals[f, axis]))
    if not lines:
        return np.zeros(0, np.int64), np.zeros(0), np.zeros(0)
    return np.concatenate(lines), np.concatenate(pos), np.concatenate(sgn)


def _axis_vote(tris, normals, axis: int, n: int) -> np.ndarray:
    """+1 inside, -1 outside, 0 for grid lines that never meet the surface."""
    line, pos, sgn = _axis_crossings(tris, normals, axis, n)
    vote = np.zeros((n, n, n), dtype=np.int8)
    if len(line) == 0:
        return vote
    key = line * 2.0 + pos
    order = np.argsort(key, kind="stable")
    key, line, sgn = key[order], line[order], sgn[order]
    last_of_line = np.full(n * n, -1, dtype=np.int64)
    last_of_line[line] = np.arange(len(line))  # later entries overwrite: keeps the last
    g = grid_coordinates(n)
    # lay out the grid as (line, position-along-axis)
    L = np.arange(n * n)
    q = (L[:, None] * 2.0 + g[None, :]).ravel()
    qline = np.repeat(L, n)
    j = np.searchsorted(key, q, side="right") - 1
    same = (j >= 0) & (line[np.clip(j, 0, None)] == qline)
    prev = np.where(same, j, last_of_line[qline])
    has = last_of_line[qline] >= 0
    state = np.where(sgn[np.clip(prev, 0, None)] < 0, 1, -1).astype(np.int8)
    state[~has] = 0
    state = state.reshape(n * n, n)  # (line, along-axis)
    b, c = [a for a in range(3) if a != axis]
    grid = state.reshape(n, n, n)  # (index_b, index_c, index_axis)
    # move axes so the result is indexed (i1, i2, i3)
    perm = {b: 0, c: 1, axis: 2}
    return np.transpose(grid, [perm[0], perm[1], perm[2]]).astype(np.int8)


def indicator_from_lifted(tris: np.ndarray, n: int, level_sign: np.ndarray | None = None,
                          volume_hint: float | None = None) -> PeriodicField:
    """Label grid points ``+1`` inside / ``-1`` outside by 3-direction majority vote."""
    _check_resolution(n)
    N = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    votes = np.stack([_axis_vote(tris, N, a, n) for a in range(3)])
    total = votes.astype(np.int32).sum(axis=0)
    out = np.sign(total).astype(float)
    tie = total == 0
    if tie.any():
        if level_sign is not None:
            out[tie] = np.where(level_sign[tie] > 0, 1.0, -1.0)
        else:
            decided = np.any(votes != 0, axis=0)
            # an undecided-by-majority point with some votes: take the first non-zero vote
            for a in range(3):
                pick = tie & decided & (out == 0) & (votes[a] != 0)
                out[pick] = votes[a][pick]
            _propagate_along_silent_lines(out, votes)
            rest = out == 0
            if rest.any():
                fill = 1.0 if (volume_hint is not None and volume_hint > 0.5) else -1.0
                out[rest] = fill
    return PeriodicField(out)


def _propagate_along_silent_lines(out: np.ndarray, votes: np.ndarray) -> None:
    """A grid line that never meets the surface has one state along its whole length.

    Undecided points on such a line take the majority of its decided points;
    repeated over the three axes until nothing changes.
    """
    changed = True
    while changed and (out == 0).any():
        changed = False
        for a in range(3):
            silent = np.all(votes[a] == 0, axis=a)  # lines along axis a without crossings
            if not silent.any():
                continue
            s = np.sign(out.sum(axis=a))
            fill = np.expand_dims(np.where(silent, s, 0.0), axis=a)
            pick = (out == 0) & (np.broadcast_to(fill, out.shape) != 0)
            if pick.any():
                out[pick] = np.broadcast_to(fill, out.shape)[pick]
                changed = True


# ---------------------------------------------------------------------------
# mesh-driven Fourier coefficients of the indicator
# ---------------------------------------------------------------------------

# barycentric quadrature rules on a triangle (weights sum to one)
_RULES = {
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    2: (np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]), np.full(3, 1 / 3)),
    4: (
        np.array([
            [0.108103018168070, 0.445948490915965, 0.445948490915965],
            [0.445948490915965, 0.108103018168070, 0.445948490915965],
            [0.445948490915965, 0.445948490915965, 0.108103018168070],
            [0.816847572980459, 0.091576213509771, 0.091576213509771],
            [0.091576213509771, 0.816847572980459, 0.091576213509771],
            [0.091576213509771, 0.091576213509771, 0.816847572980459],
        ]),
        np.array([0.223381589678011] * 3 + [0.109951743655322] * 3),
    ),
}


@dataclass(frozen=True)
class HalfSpectrum:
    """Modes ``-K <= k1, k2 <= K``, ``0 <= k3 <= K`` of a real field on the torus.

    ``coeffs[a, b, c]`` is the coefficient of ``exp(2πi k·x)`` for
    ``k = (a - K, b - K, c)``.  The conjugate half is implied.
    """

    K: int
    coeffs: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        w = np.full(self.coeffs.shape, 2.0)
        w[:, :, 0] = 1.0
        return w


def _mode_axes(K: int):
    return np.arange(-K, K + 1), np.arange(0, K + 1)


def _k_squared(K: int) -> np.ndarray:
    full, half = _mode_axes(K)
    K1, K2, K3 = np.meshgrid(full, full, half, indexing="ij")
    return (K1**2 + K2**2 + K3**2).astype(float), (K1, K2, K3)


def indicator_spectrum(tris: np.ndarray, K: int, order: int = 2, chunk: int = 4096) -> HalfSpectrum:
    """Fourier coefficients ``∫_F exp(-2πik·x) dx`` of the region bounded by lifted triangles.

    Uses ``exp(-2πik·x) = div(k exp(-2πik·x) / (-2πi|k|²))`` and a fixed
    barycentric rule on each triangle; the ``k = 0`` entry is left at zero.
    The quadrature moves rigidly with the mesh, so a translation by ``ξ``
    multiplies every coefficient by exactly ``exp(-2πik·ξ)``.
    """
    bary, wts = _RULES[order]
    N = 0.5 * np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])  # vector areas
    pts = np.einsum("qc,fcd->fqd", bary, tris).reshape(-1, 3)
    wN = (wts[None, :, None] * N[:, None, :]).reshape(-1, 3)
    full, half = _mode_axes(K)
    nf, nh = len(full), len(half)
    S = np.zeros((3, nf * nf, nh), dtype=complex)
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        e1 = np.exp(-1j * TWO_PI * p[:, 0:1] * full)
        e2 = np.exp(-1j * TWO_PI * p[:, 1:2] * full)
        e3 = np.exp(-1j * TWO_PI * p[:, 2:3] * half)
        B = (e1[:, :, None] * e2[:, None, :]).reshape(len(p), -1)
        for a in range(3):
            S[a] += (B * wN[s:s + chunk, a:a + 1]).T @ e3
    S = S.reshape(3, nf, nf, nh)
    k2, (K1, K2, K3) = _k_squared(K)
    kdotS = K1 * S[0] + K2 * S[1] + K3 * S[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        chi = kdotS / (-1j * TWO_PI * k2)
    chi[K, K, 0] = 0.0
    return HalfSpectrum(K, chi)


def indicator_mode(tris: np.ndarray, wave, order: int = 2) -> complex:
    """Single coefficient ``∫_F exp(-2πik·x) dx`` for a non-zero integer ``k``."""
    k = np.asarray(wave, dtype=float)
    k2 = float(k @ k)
    if k2 == 0:
        raise TorusFieldError("the k = 0 coefficient is the enclosed volume")
    bary, wts = _RULES[order]
    N = 0.5 * np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    pts = np.einsum("qc,fcd->fqd", bary, tris)
    e = np.exp(-1j * TWO_PI * pts @ k)
    return complex(np.sum((e * wts[None, :]).sum(axis=1) * (N @ k)) / (-1j * TWO_PI * k2))


def spectral_nonlocal_energy(u_hat: HalfSpectrum) -> float:
    """``Σ_{k≠0} |û_k|² / (4π²|k|²)`` over the truncated spectrum."""
    k2, _ = _k_squared(u_hat.K)
    k2[u_hat.K, u_hat.K, 0] = np.inf
    return float(np.sum(u_hat.weights * np.abs(u_hat.coeffs) ** 2 / (TWO_PI**2 * k2)))


def potential_spectrum(u_hat: HalfSpectrum) -> HalfSpectrum:
    """Spectrum of the zero-mean ``v`` with ``-Δv = u - mean(u)``."""
    k2, _ = _k_squared(u_hat.K)
    k2[u_hat.K, u_hat.K, 0] = np.inf
    return HalfSpectrum(u_hat.K, u_hat.coeffs / (TWO_PI**2 * k2))


def evaluate_spectrum(spec: HalfSpectrum, points, chunk: int = 8192) -> np.ndarray:
    """Real field ``Σ_k c_k exp(2πik·x)`` at arbitrary points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    full, half = _mode_axes(spec.K)
    C = (spec.coeffs * spec.weights).reshape(len(full) ** 2, len(half))
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        e1 = np.exp(1j * TWO_PI * p[:, 0:1] * full)
        e2 = np.exp(1j * TWO_PI * p[:, 1:2] * full)
        e3 = np.exp(1j * TWO_PI * p[:, 2:3] * half)
        B = (e1[:, :, None] * e2[:, None, :]).reshape(len(p), -1)
        out[s:s + chunk] = np.sum((B @ C) * e3, axis=1).real
    return out


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def write_binary(field: PeriodicField, path) -> None:
    """Header: ``n`` as little-endian int64, then ``n³`` float64 with x₁ fastest."""
    n = field.n
    with open(path, "wb") as fh:
        fh.write(struct.pack("<q", n))
        fh.write(np.ascontiguousarray(field.values.transpose(2, 1, 0), dtype="<f8").tobytes())


def read_binary(path) -> PeriodicField:
    data = Path(path).read_bytes()
    (n,) = struct.unpack("<q", data[:8])
    vals = np.frombuffer(data[8:], dtype="<f8")
    if vals.size != n**3:
        raise TorusFieldError(f"{path}: expected {n**3} values, found {vals.size}")
    return PeriodicField(vals.reshape(n, n, n).transpose(2, 1, 0))


def write_csv_slice(field: PeriodicField, path, axis: int = 2, index: int = 0) -> None:
    """Write one grid plane as ``x_a,x_b,value`` rows."""
    n = field.n
    g = grid_coordinates(n)
    plane = np.take(field.values, index % n, axis=axis)
    a, b = [ax for ax in range(3) if ax != axis]
    with open(path, "w") as fh:
        fh.write(f"x{a + 1},x{b + 1},value\n")
        for i in range(n):
            for j in range(n):
                fh.write(f"{g[i]:.10g},{g[j]:.10g},{plane[i, j]:.17g}\n")


def iter_modes(K: int) -> Iterable[tuple[int, int, int]]:
    full, half = _mode_axes(K)
    for a in full:
        for b in full:
            for c in half:
                yield int(a), int(b), int(c)
