import itertools

import numpy as np
import pytest

from okreduce.landscape import (CriticalConfig, PeriodicSpline, ReducedMap, classify, critical_points,
                                multiplicity_verdict, traversal_order, write_critical_csv)

TWO_PI = 2 * np.pi


def _grid(M, fn):
    x = np.arange(M) / M
    X = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1)
    return fn(X)


def _map(phi, tol=1e-9, area=2.35):
    M = phi.shape[0]
    shape = phi.shape
    return ReducedMap(M, 0.01, "test", phi, np.zeros(shape + (3,)), np.zeros(shape), np.zeros(shape),
                      np.ones(shape, dtype=int), np.ones(shape, dtype=bool), np.full(shape, -1), area, tol)


def cos3(X):
    return np.cos(TWO_PI * X[..., 0]) + np.cos(TWO_PI * X[..., 1]) + np.cos(TWO_PI * X[..., 2])


def test_traversal_visits_every_node_through_neighbours():
    M = 5
    order = traversal_order(M)
    assert sorted(order) == sorted(itertools.product(range(M), repeat=3))
    for a, b in zip(order, order[1:]):
        d = np.abs(np.subtract(a, b))
        assert d.sum() == 1


def test_spline_interpolates_nodes():
    rng = np.random.default_rng(0)
    vals = rng.standard_normal((6, 6, 6))
    sp = PeriodicSpline(vals)
    for node in [(0, 0, 0), (1, 4, 2), (5, 5, 5)]:
        assert sp(np.array(node) / 6) == pytest.approx(vals[node], abs=1e-12)


def test_spline_derivatives_of_smooth_function():
    M = 16
    sp = PeriodicSpline(_grid(M, cos3))
    x = np.array([0.23, 0.61, 0.07])
    val, g, H = sp.evaluate(x)
    assert val == pytest.approx(cos3(x), abs=1e-3)
    g_ref = -TWO_PI * np.sin(TWO_PI * x)
    assert np.abs(g - g_ref).max() < 2e-2 * TWO_PI
    H_ref = np.diag(-(TWO_PI**2) * np.cos(TWO_PI * x))
    assert np.abs(H - H_ref).max() < 5e-2 * TWO_PI**2


def test_classify():
    assert classify(np.array([1.0, 2.0, 3.0]), 1e-10) == "min"
    assert classify(np.array([-1.0, -2.0, -3.0]), 1e-10) == "max"
    assert classify(np.array([-1.0, 2.0, 3.0]), 1e-10) == "saddle"
    assert classify(np.array([0.0, 2.0, 3.0]), 1e-10) == "degenerate"


def test_critical_points_of_cosine_sum():
    # cos 2πx + cos 2πy + cos 2πz has 8 nondegenerate critical points at {0, 1/2}³
    pts = critical_points(_map(_grid(7, cos3)))
    assert len(pts) == 8
    kinds = sorted(p.kind for p in pts)
    assert kinds == ["max", "min"] + ["saddle"] * 6
    for p in pts:
        assert np.abs(p.xi * 2 - np.round(p.xi * 2)).max() < 1e-6
    mn = next(p for p in pts if p.kind == "min")
    assert mn.xi == pytest.approx([0.5, 0.5, 0.5], abs=1e-6)
    assert multiplicity_verdict(pts).startswith("ok: 8 isolated")


def test_critical_points_shifted_off_grid():
    shift = np.array([0.113, 0.271, 0.029])
    pts = critical_points(_map(_grid(9, lambda X: cos3(X - shift))))
    mx = [p for p in pts if p.kind == "max"]
    assert len(pts) == 8 and len(mx) == 1
    d = mx[0].xi - shift
    assert np.abs(d - np.round(d)).max() < 5e-3


def test_flat_landscape_is_degenerate():
    phi = 2.35 + 1e-12 * np.random.default_rng(0).standard_normal((5, 5, 5))
    pts = critical_points(_map(phi))
    assert len(pts) == 1 and pts[0].kind == "degenerate-manifold"
    assert multiplicity_verdict(pts) == "degenerate (translation-invariant)"


def test_planar_landscape_points_are_degenerate():
    # a single-mode landscape cos 2πx depends on one coordinate only: every critical point is degenerate
    pts = critical_points(_map(_grid(6, lambda X: np.cos(TWO_PI * X[..., 0]))), CriticalConfig())
    assert all(p.kind == "degenerate" for p in pts)


def test_write_critical_csv(tmp_path):
    pts = critical_points(_map(_grid(7, cos3)))
    write_critical_csv(pts, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "xi1,xi2,xi3,type,phi,A_norm"
    assert len(lines) == 9


@pytest.mark.parametrize("M", [8, 12])
def test_critical_points_of_cosine_product(M):
    # cos 2πx·cos 2πy·cos 2πz: maxima where an even number of coordinates is 1/2, minima where it is odd;
    # every other critical point lies on the zero set where two of the cosines vanish
    pts = critical_points(_map(_grid(M, lambda X: np.prod(np.cos(TWO_PI * X), axis=-1))))
    ext = [p for p in pts if p.kind in ("min", "max")]
    assert len(ext) == 8
    for p in ext:
        half = np.round(p.xi * 2) % 2
        assert np.abs(p.xi * 2 - np.round(p.xi * 2)).max() < 1e-6
        assert p.kind == ("max" if half.sum() % 2 == 0 else "min")
        assert abs(abs(p.phi) - 1) < 1e-3
    for p in pts:
        if p.kind not in ("min", "max"):
            assert abs(p.phi) < 1e-6
            q = np.abs(p.xi * 4 - np.round(p.xi * 4))
            odd = (np.round(p.xi * 4) % 2 == 1) & (q < 1e-3)
            assert odd.sum() >= 2


@pytest.mark.slow
def test_scan_single_axis_forcing_varies_along_that_axis():
    from okreduce import torus_field as tf
    from okreduce.landscape import scan
    from okreduce.reduction import BaseBundle

    rmap = scan(BaseBundle.schwarz_p(32), 0.01, tf.ForcingSpec.parse("cos(1,0,0)"), M=5)
    assert rmap.converged.all()
    spread = rmap.phi - rmap.phi.mean(axis=(1, 2), keepdims=True)
    assert np.abs(spread).max() <= 1e-7
    assert np.ptp(rmap.phi.mean(axis=(1, 2))) > 1e-6
