import numpy as np
import pytest

from okreduce.surface import (PerturbationTooLarge, build_schwarz_p, compute_geometry,
                              directional_gradients, enclosed_volume, icosphere, lamella, perturb,
                              read_obj, swept_volume, volume_expansion, write_obj)


@pytest.fixture(scope="module")
def schwarz32():
    mesh = build_schwarz_p(32, relax=False)
    return mesh, compute_geometry(mesh)


def test_sphere_curvatures():
    r = 0.25
    mesh = icosphere(r, refinement=4)
    g = compute_geometry(mesh)
    assert g.euler == 2
    assert g.angle_defect.sum() == pytest.approx(4 * np.pi, abs=1e-12)
    assert np.median(g.H) == pytest.approx(2 / r, rel=0.02)
    assert np.median(g.K) == pytest.approx(1 / r**2, rel=0.02)
    assert g.total_area == pytest.approx(4 * np.pi * r**2, rel=0.01)
    assert enclosed_volume(mesh) == pytest.approx(4 / 3 * np.pi * r**3, rel=0.01)


def test_sphere_normal_gram():
    r = 0.25
    g = compute_geometry(icosphere(r, refinement=4))
    G = g.normals.T @ (g.mass[:, None] * g.normals)
    assert np.allclose(G, (4 * np.pi * r**2 / 3) * np.eye(3), atol=5e-3 * 4 * np.pi * r**2)


def test_volume_matches_divergence_theorem_for_sphere():
    # a sphere does not wrap, so the plain divergence formula applies
    mesh = icosphere(0.2, refinement=3)
    P = mesh.lifted()
    ref = np.einsum("ij,ij->", P[:, 0], np.cross(P[:, 1], P[:, 2])) / 6.0
    assert enclosed_volume(mesh) == pytest.approx(ref, rel=1e-12)


def test_lamella_volume_and_curvature():
    mesh = lamella(0.1, 0.45, 8)
    g = compute_geometry(mesh)
    assert enclosed_volume(mesh) == pytest.approx(0.35, abs=1e-14)
    assert np.abs(g.H).max() < 1e-12
    assert g.euler == 0
    assert g.total_area == pytest.approx(2.0, abs=1e-13)


def test_sphere_volume_inscribed_deficit():
    # the inscribed polyhedron loses O(h^2) volume: 5.6e-4 at refinement 3, 3.5e-5 at 5
    r = 0.25
    exact = 4 * np.pi * r**3 / 3
    assert enclosed_volume(icosphere(r, 5)) == pytest.approx(exact, abs=1e-4)
    errs = [exact - enclosed_volume(icosphere(r, k)) for k in (3, 4, 5)]
    assert errs[0] / errs[1] == pytest.approx(4, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(4, rel=0.05)


def test_sphere_offset_area():
    r, eps = 0.25, 0.01
    mesh = icosphere(r, 3)
    g = compute_geometry(mesh)
    moved = perturb(mesh, g, np.full(mesh.n_vertices, eps))
    assert moved.total_area() == pytest.approx(4 * np.pi * (r + eps) ** 2, rel=0.02)


def test_volume_expansion_concentric_shell():
    r, eps = 0.25, 0.01
    mesh = icosphere(r, 7)
    g = compute_geometry(mesh)
    lin, rem = volume_expansion(g, np.full(mesh.n_vertices, eps))
    assert lin + rem == pytest.approx(4 * np.pi * ((r + eps) ** 3 - r**3) / 3, abs=1e-6)
    assert volume_expansion(g, np.zeros(mesh.n_vertices)) == (0.0, 0.0)


def test_lamella_swept_volume_is_exact():
    mesh = lamella(0.1, 0.45, 8)
    g = compute_geometry(mesh)
    w = np.full(mesh.n_vertices, 0.02)
    assert swept_volume(mesh, w[:, None] * g.normals) == pytest.approx(0.04, abs=1e-15)
    moved = perturb(mesh, g, w)
    assert enclosed_volume(moved) == pytest.approx(0.39, abs=1e-14)


def test_schwarz_topology_and_volume(schwarz32):
    mesh, g = schwarz32
    assert mesh.euler_characteristic() == -4
    mesh.check_closed()
    assert enclosed_volume(mesh) == pytest.approx(0.5, abs=1e-10)
    assert g.angle_defect.sum() == pytest.approx(-8 * np.pi, abs=1e-10)
    assert np.abs(g.normals.T @ g.mass).max() < 1e-12


def test_schwarz_translation_leaves_geometry(schwarz32):
    mesh, g = schwarz32
    moved = perturb(mesh, g, np.zeros(mesh.n_vertices), xi=(0.3, 0.7, 0.15))
    g2 = compute_geometry(moved)
    assert enclosed_volume(moved) == pytest.approx(0.5, abs=1e-10)
    assert np.allclose(g2.H, g.H, atol=1e-9)
    assert g2.total_area == pytest.approx(g.total_area, rel=1e-13)


def test_resolution_floor():
    with pytest.raises(ValueError):
        build_schwarz_p(16, relax=False)


def test_directional_gradients_match_finite_differences(schwarz32):
    mesh, g = schwarz32
    rng = np.random.default_rng(3)
    idx = rng.choice(mesh.n_vertices, 5, replace=False)
    dA, dV = directional_gradients(mesh, g.normals)
    h = 1e-6
    for i in idx:
        w = np.zeros(mesh.n_vertices)
        w[i] = h
        up = perturb(mesh, g, w)
        dn = perturb(mesh, g, -w)
        fd_A = (up.total_area() - dn.total_area()) / (2 * h)
        fd_V = swept_volume(mesh, w[:, None] * g.normals) / h
        assert dA[i] == pytest.approx(fd_A, rel=1e-6)
        assert dV[i] == pytest.approx(fd_V, rel=1e-5)


def test_mass_is_first_order_volume(schwarz32):
    mesh, g = schwarz32
    rng = np.random.default_rng(4)
    w = 1e-7 * rng.standard_normal(mesh.n_vertices)
    dv = swept_volume(mesh, w[:, None] * g.normals)
    assert dv == pytest.approx(g.mass @ w, rel=1e-5)


def test_volume_expansion_second_order_in_h():
    rng = np.random.default_rng(0)
    waves = [(rng.integers(-2, 3, 3), rng.random() * 2 * np.pi, rng.standard_normal()) for _ in range(6)]
    errors = []
    for res in (32, 64):
        mesh = build_schwarz_p(res, relax=False)
        g = compute_geometry(mesh)
        w = sum(a * np.cos(2 * np.pi * mesh.vertices @ k + p) for k, p, a in waves)
        w = 0.01 * w / np.abs(w).max()
        lin, rem = volume_expansion(g, w)
        direct = enclosed_volume(perturb(mesh, g, w)) - enclosed_volume(mesh)
        errors.append(abs(lin + rem - direct))
    assert errors[0] / errors[1] > 2.5


def test_perturbation_cap(schwarz32):
    mesh, g = schwarz32
    with pytest.raises(PerturbationTooLarge):
        perturb(mesh, g, np.full(mesh.n_vertices, 0.2))


def test_obj_round_trip(tmp_path, schwarz32):
    mesh, _ = schwarz32
    write_obj(mesh, tmp_path / "m.obj")
    assert (tmp_path / "m.obj.wrap").exists()
    back = read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.allclose(back.vertices, mesh.vertices, atol=0, rtol=0)
    assert np.array_equal(back.offsets, mesh.offsets)
    assert enclosed_volume(back) == pytest.approx(enclosed_volume(mesh), abs=1e-15)
