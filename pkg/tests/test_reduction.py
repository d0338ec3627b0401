import json

import numpy as np
import pytest

from okreduce import torus_field as tf
from okreduce.reduction import (BaseBundle, DivergenceError, SolverConfig, contraction_from_history, contraction_probe,
                                lipschitz_probe, solve_auxiliary, write_report, write_trace)

F3 = tf.ForcingSpec.parse("cos(1,0,0) + cos(0,1,0) + cos(0,0,1)")


@pytest.fixture(scope="module")
def bundle():
    return BaseBundle.schwarz_p(32)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(damping=1.5)
    with pytest.raises(ValueError):
        SolverConfig(max_iter=0)


def test_contraction_from_history():
    h = [1.0, 0.1, 0.01, 0.001, 1e-12]
    # first step skipped, last step under the floor
    assert contraction_from_history(h, 1e-9) == pytest.approx(0.1)
    assert np.isnan(contraction_from_history([1e-16], 1e-9))


def test_translated_forcing_matches_shifted_points():
    xi = np.array([0.13, 0.52, 0.77])
    f = tf.ForcingSpec.parse("cos(1,0,0) + 0.5*sin(0,2,1) + 0.25*cos(0,0,0)")
    pts = np.random.default_rng(0).random((20, 3))
    assert np.abs(f.translated(xi).evaluate(pts) - f.evaluate(pts + xi)).max() < 1e-14


def test_gamma_zero_is_trivial(bundle):
    st = solve_auxiliary(bundle, 0.0, (0.2, 0.4, 0.6), F3)
    assert st.converged
    assert st.iterations == 1
    assert np.abs(st.w).max() < 1e-12


def test_gamma_above_cap(bundle):
    with pytest.raises(ValueError):
        solve_auxiliary(bundle, 0.2, (0, 0, 0), F3)


def test_converged_state_invariants(bundle):
    st = solve_auxiliary(bundle, 0.01, (0.1, 0.2, 0.3), F3, with_energy=True)
    assert st.converged
    assert abs(st.volume_error) <= 1e-8
    assert st.kernel_orthogonality < 1e-10
    assert st.contraction_factor() < 1
    assert 0 < st.w_sup < 0.01
    assert np.isfinite(st.energy)


def test_unforced_solution_independent_of_xi(bundle):
    a = solve_auxiliary(bundle, 0.01, (0.1, 0.2, 0.3))
    b = solve_auxiliary(bundle, 0.01, (0.65, 0.05, 0.9))
    assert np.array_equal(a.w, b.w)
    assert a.lam == b.lam
    assert np.abs(a.A).max() <= 1e-8


def test_warm_start_reaches_same_fixed_point(bundle):
    cold = solve_auxiliary(bundle, 0.01, (0.3, 0.3, 0.3), F3)
    warm = solve_auxiliary(bundle, 0.01, (0.3, 0.3, 0.3), F3, w0=cold.w)
    assert warm.iterations <= 2
    assert np.abs(warm.w - cold.w).max() < 1e-8


def test_divergence_reports_state(bundle):
    with pytest.raises(DivergenceError) as info:
        solve_auxiliary(bundle, 0.02, (0.1, 0.2, 0.3), F3, SolverConfig(max_iter=2))
    assert info.value.state is not None
    assert not info.value.state.converged
    assert len(info.value.state.history) == 2


def test_lipschitz_probe_finite(bundle):
    out = lipschitz_probe(bundle, 0.01, (0.1, 0.1, 0.1), (0.12, 0.1, 0.1), F3)
    assert np.isfinite(out["ratio"]) and out["ok"]


def test_report_files(tmp_path, bundle):
    st = solve_auxiliary(bundle, 0.005, (0.0, 0.0, 0.25), F3)
    write_report(st, tmp_path / "r.json", inputs={"gamma": 0.005})
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["inputs"]["gamma"] == 0.005
    assert data["state"]["iterations"] == st.iterations
    write_trace(st, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iteration,update_sup" and len(lines) == st.iterations + 1


def test_update_history_has_monotone_tail(bundle):
    st = solve_auxiliary(bundle, 0.01, (0.1, 0.2, 0.3), F3)
    tail = st.history[-5:]
    assert len(tail) == 5
    assert all(b < a for a, b in zip(tail, tail[1:]))


def test_lipschitz_unforced_is_zero(bundle):
    out = lipschitz_probe(bundle, 0.01, (0.1, 0.2, 0.3), (0.11, 0.2, 0.3))
    assert out["ratio"] <= 1e-6


def test_lipschitz_ratio_stable_under_probe_distance(bundle):
    x = np.array([0.1, 0.2, 0.3])
    r2 = lipschitz_probe(bundle, 0.01, x, x + [1e-2, 0, 0], F3)["ratio"]
    r3 = lipschitz_probe(bundle, 0.01, x, x + [1e-3, 0, 0], F3)["ratio"]
    assert abs(r2 / r3 - 1) <= 0.3


def test_contraction_probe_small_gamma(bundle):
    out = contraction_probe(bundle, 0.01, (0.1, 0.2, 0.3), F3)
    assert out["ok"] and out["q"] < 0.5
