import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from oracles import circumradius_equilateral
from redinv.benchmarks import (BenchmarkReport, chebyshev_finite, compare_estimators, delta_tilde, diameter,
                               framing_interval, held_out_points)
from redinv.errors import InvalidInputError
from redinv.forward_pde import Mesh, ParameterBox, ParametricModel, h1_space
from redinv.linalg_space import InnerProductSpace
from redinv.sensing import Dictionary, build_observation

MESH = Mesh(63)


@pytest.fixture(scope="module")
def setup():
    return build_observation((Dictionary.uniform(MESH, 15), [1, 4, 7, 10, 13]))


def _euclid_setup(k_obs, dim):
    return build_observation(np.eye(dim)[:, :k_obs], InnerProductSpace(np.eye(dim)))


def test_two_snapshot_delta_tilde():
    S = _euclid_setup(1, 2)
    # ||u - v|| = 1 and ||P_W(u - v)|| = 0.1
    U = np.array([[0.0, 0.1], [0.0, np.sqrt(1 - 0.01)]])
    dt = delta_tilde(U, S, [0.05, 0.1, 10.0])
    assert dt[0.05] == 0.0
    assert dt[0.1] == pytest.approx(1.0, abs=1e-15)
    assert dt[10.0] == pytest.approx(1.0)


def test_delta_tilde_extremes_and_monotone(small_train, setup):
    sig = [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1e3]
    dt = delta_tilde(small_train, setup, sig)
    vals = [dt[s] for s in sig]
    assert vals[0] == 0.0
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(diameter(small_train.snapshots, small_train.space), rel=1e-12)


def test_delta_tilde_against_brute_force(small_train, setup):
    S = small_train.snapshots[:, :30]
    space = small_train.space
    best = {0.005: 0.0, 0.02: 0.0}
    for i in range(30):
        for j in range(i + 1, 30):
            dw = np.linalg.norm(setup.coords(S[:, i] - S[:, j]))
            du = space.norm(S[:, i] - S[:, j])
            for s in best:
                if dw <= s:
                    best[s] = max(best[s], du)
    dt = delta_tilde(S, setup, list(best))
    for s, v in best.items():
        assert dt[s] == pytest.approx(v, rel=1e-12, abs=1e-15)


def test_delta_tilde_pair_limit(setup):
    with pytest.raises(InvalidInputError):
        delta_tilde(np.zeros((63, 5001)), setup, [0.1])


def test_framing_interval():
    assert framing_interval(0.3, 0.05) == (pytest.approx(0.2), pytest.approx(0.4))
    assert framing_interval(0.01, 0.05) == (0.0, pytest.approx(0.11))


def test_chebyshev_simple_sets():
    c, r = chebyshev_finite(np.array([[1.0], [2.0]]))
    assert r == 0.0 and np.allclose(c, [1.0, 2.0])
    c, r = chebyshev_finite(np.array([[0.0, 2.0], [0.0, 0.0]]))
    assert np.allclose(c, [1.0, 0.0]) and r == pytest.approx(1.0)
    s = 1.7
    tri = s * np.array([[0.0, 1.0, 0.5], [0.0, 0.0, np.sqrt(3) / 2]])
    c, r = chebyshev_finite(tri)
    assert r == pytest.approx(circumradius_equilateral(s), rel=1e-10)
    with pytest.raises(InvalidInputError):
        chebyshev_finite(np.zeros((2, 501)))


def test_chebyshev_in_energy_metric(rng):
    space = h1_space(15)
    X = rng.standard_normal((15, 12))
    c, r = chebyshev_finite(X, space)
    assert np.max(space.norm(X - c[:, None])) == pytest.approx(r, rel=1e-10)


@settings(max_examples=50)
@given(seed=st.integers(0, 2**32 - 1), dim=st.integers(1, 6), count=st.integers(2, 40))
def test_radius_diameter_inequality(seed, dim, count):
    X = np.random.default_rng(seed).standard_normal((dim, count))
    c, r = chebyshev_finite(X)
    d = diameter(X)
    assert 0.5 * d * (1 - 1e-12) <= r <= d
    assert np.max(np.linalg.norm(X - c[:, None], axis=0)) <= r * (1 + 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_chebyshev_is_minimal(seed):
    X = np.random.default_rng(seed).standard_normal((3, 25))
    c, r = chebyshev_finite(X)
    f = lambda z: np.max(np.linalg.norm(X - z[:, None], axis=0))  # noqa: E731
    alt = minimize(f, X.mean(axis=1), method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
    assert r <= alt.fun + 1e-9


def test_held_out_points(small_model):
    P = held_out_points(small_model, 9)
    assert P.shape == (64, 2)
    assert np.allclose(np.unique(P[:, 0]), np.linspace(-1, 1, 9)[:-1] + 0.125)
    one = held_out_points(small_model, 1)
    assert np.array_equal(one, [[0.0, 0.0]])


def test_affine_manifold_all_estimators_exact(setup):
    box = ParameterBox([-1.0, -1.0], [1.0, 1.0])
    model = ParametricModel(63, 1.0, [0.0, 0.0], box, source=1.0,
                            source_psis=[lambda x: np.sin(np.pi * x), lambda x: x])
    rep = compare_estimators(model, setup, 5, pd_iters=5000)
    for name, v in rep.estimator_errors.items():
        assert v["worst"] <= 1e-8, name


@pytest.fixture(scope="module")
def report(small_model, setup):
    return compare_estimators(small_model, setup, 9, pd_iters=2000)


def test_report_contents(report):
    e = report.estimator_errors
    assert set(e) == {"pbdw_linear", "pbdw_affine", "affine_opt", "piecewise_oracle", "piecewise_surrogate"}
    assert all(v["worst"] >= v["mean"] >= 0 for v in e.values())
    assert e["piecewise_oracle"]["worst"] <= e["piecewise_surrogate"]["worst"]
    dt = [report.delta_tilde[s] for s in sorted(report.delta_tilde)]
    assert all(a <= b for a, b in zip(dt, dt[1:]))
    assert set(report.framing) == set(report.delta_tilde)
    assert len(report.width_proxy) == 7 and np.all(np.array(report.width_lower) <= np.array(report.width_proxy) + 1e-15)


def test_report_reproducible(report, small_model, setup, tmp_path):
    again = compare_estimators(small_model, setup, 9, pd_iters=2000)
    report.to_csv(tmp_path / "a.csv")
    again.to_csv(tmp_path / "b.csv")
    report.to_json(tmp_path / "a.json")
    again.to_json(tmp_path / "b.json")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "row,key,worst,mean"


def test_report_subset(small_model, setup):
    rep = compare_estimators(small_model, setup, 5, estimators=["pbdw"])
    assert list(rep.estimator_errors) == ["pbdw_linear"]
    assert isinstance(rep, BenchmarkReport)
