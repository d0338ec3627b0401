import numpy as np
import pytest

from okreduce import torus_field as tf
from okreduce.surface import build_schwarz_p, enclosed_volume, lamella

TWO_PI = 2.0 * np.pi


def _slab_1d(n, lo, hi):
    x = (np.arange(n) + 0.5) / n
    return np.where((x > lo) & (x < hi), 1.0, -1.0)


def _dft_series_energy(u1):
    """Independent 1-D route: Σ_{k≠0} |U_k|² / (4π² k²) with U the normalised DFT."""
    n = len(u1)
    U = np.fft.fft(u1) / n
    k = np.fft.fftfreq(n, d=1.0 / n)
    return float(np.sum(np.abs(U[1:]) ** 2 / (TWO_PI**2 * k[1:] ** 2)))


def test_poisson_single_mode():
    u = tf.from_function(lambda x, y, z: np.cos(TWO_PI * x), 32)
    v = tf.poisson_solve(u)
    assert np.allclose(v.values, u.values / (4 * np.pi**2), atol=1e-14)


def test_poisson_round_trip_random():
    rng = np.random.default_rng(1)
    rho = tf.PeriodicField(rng.standard_normal((24, 24, 24)))
    v = tf.poisson_solve(rho)
    back = tf.laplacian(v).values
    assert np.abs(back - (rho.values - rho.values.mean())).max() <= 1e-10
    assert abs(v.values.mean()) < 1e-14


def test_nonlocal_single_mode_value():
    # ∫ v u for u = cos 2πx: (1/2) / (4π²)
    u = tf.from_function(lambda x, y, z: np.cos(TWO_PI * x), 16)
    assert tf.nonlocal_energy(u) == pytest.approx(1.0 / (8 * np.pi**2), rel=1e-12)
    assert tf.nonlocal_energy_fourier(u) == pytest.approx(1.0 / (8 * np.pi**2), rel=1e-12)


def test_nonlocal_rejects_inconsistent_mean():
    u = tf.from_function(lambda x, y, z: np.cos(TWO_PI * x), 8)
    with pytest.raises(tf.TorusFieldError):
        tf.nonlocal_energy(u, m=0.3)


def test_under_resolved_grid_rejected():
    with pytest.raises(tf.TorusFieldError):
        tf.poisson_solve(tf.PeriodicField(np.zeros((2, 2, 2))))


def test_lamella_grid_matches_1d_series():
    n = 64
    mesh = lamella(0.125, 0.625, 8)
    u = tf.indicator_from_lifted(mesh.lifted(), n, volume_hint=0.5)
    assert u.mean() == pytest.approx(0.0, abs=1e-15)
    ref = _dft_series_energy(_slab_1d(n, 0.125, 0.625))
    assert tf.nonlocal_energy(u) == pytest.approx(ref, rel=1e-6)


def test_lamella_spectrum_matches_truncated_series():
    from okreduce.energy import total_energy

    K = 8
    odd = np.arange(1, K + 1, 2, dtype=float)
    ref = 2.0 / np.pi**4 * np.sum(odd**-4)  # tends to 1/48
    e = total_energy(lamella(0.125, 0.625, 16), 1.0, K=K).nonlocal_
    assert e == pytest.approx(ref, rel=1e-10)


def test_indicator_mode_slab():
    # ∫_{a<x<a+1/2} e^{-2πix} dx = e^{-2πia} (-i/π)
    c = tf.indicator_mode(lamella(0.125, 0.625, 8).lifted(), (1, 0, 0))
    assert c == pytest.approx(np.exp(-2j * np.pi * 0.125) * (-1j / np.pi), abs=1e-14)
    assert abs(tf.indicator_mode(lamella(0.125, 0.625, 8).lifted(), (0, 1, 0))) < 1e-14


def test_spectrum_translation_phase():
    mesh = build_schwarz_p(32, relax=False)
    xi = np.array([0.13, 0.21, 0.37])
    s0 = tf.indicator_spectrum(mesh.lifted(), 3)
    s1 = tf.indicator_spectrum(mesh.lifted() + xi, 3)
    k = np.arange(-3, 4)
    K1, K2, K3 = np.meshgrid(k, k, np.arange(4), indexing="ij")
    phase = np.exp(-1j * TWO_PI * (K1 * xi[0] + K2 * xi[1] + K3 * xi[2]))
    assert np.abs(s1.coeffs - phase * s0.coeffs).max() < 1e-13


def test_schwarz_indicator_grid_agrees_with_level_sign():
    mesh = build_schwarz_p(32, relax=False)
    n = 32
    u = tf.indicator_from_lifted(mesh.lifted(), n, volume_hint=enclosed_volume(mesh))
    lvl = tf.from_function(lambda x, y, z: np.cos(TWO_PI * x) + np.cos(TWO_PI * y) + np.cos(TWO_PI * z), n)
    agree = np.mean(np.sign(lvl.values) == u.values)
    assert agree > 0.99
    assert abs(u.mean()) < 0.01


def test_forcing_spec_parse_and_evaluate():
    f = tf.ForcingSpec.parse("cos(1,0,0) + 0.5*sin(0,2,0)")
    assert f.band_limit == 2
    pts = np.array([[0.25, 0.125, 0.0], [0.0, 0.0, 0.0]])
    expect = np.cos(TWO_PI * pts[:, 0]) + 0.5 * np.sin(2 * TWO_PI * pts[:, 1])
    assert np.allclose(f.evaluate(pts), expect, atol=1e-15)
    assert tf.ForcingSpec.parse(f.to_text()).evaluate(pts) == pytest.approx(expect)
    assert tf.ForcingSpec.zero().is_zero
    with pytest.raises(tf.TorusFieldError):
        tf.ForcingSpec.parse("exp(1,0,0)")


def test_binary_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    f = tf.PeriodicField(rng.standard_normal((6, 6, 6)))
    tf.write_binary(f, tmp_path / "f.bin")
    g = tf.read_binary(tmp_path / "f.bin")
    assert np.array_equal(f.values, g.values)
    raw = (tmp_path / "f.bin").read_bytes()
    assert len(raw) == 8 + 8 * 6**3
    assert int.from_bytes(raw[:8], "little") == 6
    body = np.frombuffer(raw[8:], dtype="<f8")
    # x1 fastest: the second stored value is values[1, 0, 0]
    assert body[1] == f.values[1, 0, 0] and body[6] == f.values[0, 1, 0]
