import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from oracles import green_representer
from redinv.errors import ConditioningError, DomainError
from redinv.forward_pde import Mesh, h1_space, with_boundary
from redinv.linalg_space import Subspace, orthonormalize, project
from redinv.sensing import (Dictionary, add_noise, build_observation, load_selection, local_average_functional,
                            measure, mollifier, noise_vector, read_measurements, riesz_local_average,
                            riesz_point_eval, save_selection, write_measurements)

MESH = Mesh(63)
SPACE = h1_space(63)


def test_point_eval_value_at_half(oracle):
    w = riesz_point_eval(MESH, 0.5)
    assert w[31] == pytest.approx(oracle["green_half_at_half"], abs=1e-12)
    assert oracle["green_half_at_half"] == 0.5


def test_point_eval_matches_green_function_at_nodes():
    for k in (8, 16, 40):
        x = MESH.nodes[k - 1]
        w = riesz_point_eval(MESH, x)
        assert np.max(np.abs(w - green_representer(x, MESH.nodes))) <= 1e-12


@pytest.mark.parametrize("x", [0.25, 0.5, 0.9, 0.123])
def test_point_eval_unit_norm(x):
    assert SPACE.norm(riesz_point_eval(MESH, x)) == pytest.approx(1.0, abs=1e-10)


def test_point_eval_reproduces_parabola():
    v = MESH.nodes * (1 - MESH.nodes)
    assert SPACE.inner(riesz_point_eval(MESH, 0.5), v) == pytest.approx(0.5, abs=1e-12)


@settings(max_examples=50)
@given(k=st.integers(1, 63), seed=st.integers(0, 2**32 - 1))
def test_reproducing_property_at_nodes(k, seed):
    x = MESH.nodes[k - 1]
    v = np.random.default_rng(seed).standard_normal(63)
    w = riesz_point_eval(MESH, x)
    assert SPACE.inner(w, v) * np.sqrt(x * (1 - x)) == pytest.approx(v[k - 1], abs=1e-12 * (1 + np.abs(v).max()) * 10)


def test_domain_errors():
    with pytest.raises(DomainError):
        riesz_point_eval(MESH, 1.0)
    with pytest.raises(DomainError):
        riesz_local_average(MESH, 0.05, 0.1)


def test_mollifier_integrates_to_one():
    assert integrate.quad(mollifier, -1, 1)[0] == pytest.approx(1.0, abs=1e-14)


def test_local_average_functional_exact_quadrature():
    v = np.sin(3 * MESH.nodes) * MESH.nodes
    x, tau = 0.37, 0.061
    ell = local_average_functional(MESH, x, tau)
    vb = with_boundary(v)
    f = lambda s: np.interp(s, MESH.all_nodes, vb) * mollifier((s - x) / tau) / tau  # noqa: E731
    brk = [p for p in MESH.all_nodes if x - tau < p < x + tau]
    ref = integrate.quad(f, x - tau, x + tau, points=brk, epsabs=1e-14, epsrel=1e-14, limit=200)[0]
    assert ell @ v == pytest.approx(ref, abs=1e-13)


def test_local_average_converges_to_point_eval():
    mesh = Mesh(511)
    p = riesz_point_eval(mesh, 0.5)
    errs = [h1_space(511).norm(riesz_local_average(mesh, 0.5, t) - p) for t in (0.1, 0.05, 0.025)]
    assert errs[0] > errs[1] > errs[2]


def test_local_average_norm_and_symmetry():
    w = riesz_local_average(MESH, 0.5, 0.1)
    assert SPACE.norm(w) == pytest.approx(1.0, abs=1e-10)
    assert np.max(np.abs(w - w[::-1])) <= 1e-12


def test_dictionary_norms():
    for D in (Dictionary.uniform(MESH, 31), Dictionary.uniform(MESH, 31, "local_average", 0.02)):
        assert np.max(np.abs(SPACE.norm(D.representers) - 1)) <= 1e-10
    assert len(Dictionary(MESH)) == 511


def test_identical_sensors_conditioning_error():
    D = Dictionary(MESH, "point_eval", [0.3, 0.5, 0.3])
    with pytest.raises(ConditioningError) as info:
        build_observation((D, [0, 1, 2]))
    assert info.value.pair == (0, 2)


def test_single_sensor_gram():
    s = build_observation((Dictionary(MESH, "point_eval", [0.4]), [0]))
    assert np.allclose(s.B, [[1.0]], atol=1e-12)


def test_nodal_sensors_project_to_interpolant(small_train):
    D = Dictionary(MESH, "point_eval", MESH.nodes[[7, 15, 23, 31, 47]])
    setup = build_observation((D, list(range(5))))
    xk = np.concatenate([[0], D.locations, [1]])
    for j in (0, 10, 20, 40, 80):
        u = small_train.snapshots[:, j]
        _, w = measure(setup, u)
        interp = np.interp(MESH.nodes, xk, np.concatenate([[0], u[[7, 15, 23, 31, 47]], [0]]))
        assert SPACE.norm(w - interp) <= 1e-10


def test_measure_equals_projection(small_train):
    setup = build_observation((Dictionary.uniform(MESH, 15), [1, 4, 8, 12]))
    for j in range(10):
        u = small_train.snapshots[:, 7 * j]
        z, w = measure(setup, u)
        assert SPACE.norm(w - project(setup.W, u)) <= 1e-10
        assert SPACE.norm(setup.from_z(z) - w) <= 1e-10


def test_measure_inside_and_orthogonal_to_w(rng):
    setup = build_observation((Dictionary.uniform(MESH, 15), [2, 6, 9]))
    u = setup.omegas @ rng.standard_normal(3)
    assert SPACE.norm(measure(setup, u)[1] - u) <= 1e-12 * SPACE.norm(u)
    Q = orthonormalize(Subspace(SPACE, np.column_stack([setup.omegas, rng.standard_normal(63)])))
    z, w = measure(setup, Q.basis[:, 3])
    assert np.abs(z).max() <= 1e-12 and SPACE.norm(w) <= 1e-12


@settings(max_examples=50)
@given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(-10, 10))
def test_measure_superposition(seed, alpha):
    rng = np.random.default_rng(seed)
    setup = build_observation((Dictionary.uniform(MESH, 15), [0, 5, 10, 14]))
    u1, u2 = rng.standard_normal((2, 63))
    z, w = measure(setup, alpha * u1 + u2)
    z1, w1 = measure(setup, u1)
    z2, w2 = measure(setup, u2)
    scale = 1 + abs(alpha)
    assert np.abs(z - alpha * z1 - z2).max() <= 1e-12 * scale * np.abs(z1).max() * 100
    assert SPACE.norm(w - alpha * w1 - w2) <= 1e-12 * scale * 100 * (SPACE.norm(w1) + SPACE.norm(w2))


def test_noise_exact_norm_and_seeded():
    setup = build_observation((Dictionary.uniform(MESH, 15), [0, 5, 10]))
    eta = noise_vector(setup, 0.3, 7)
    assert SPACE.norm(eta) == pytest.approx(0.3, abs=1e-12)
    assert np.array_equal(eta, noise_vector(setup, 0.3, 7))
    assert SPACE.norm(project(setup.W, eta) - eta) <= 1e-12
    w = np.ones(63)
    assert np.array_equal(add_noise(setup, w, 0.0, 1), w)
    z = setup.omegas.T @ SPACE.gram @ w
    zn = add_noise(setup, z, 0.3, 7, kind="z")
    assert np.allclose(zn - z, setup.omegas.T @ SPACE.gram @ eta, atol=1e-12)


def test_selection_and_measurement_files(tmp_path, small_train):
    setup = build_observation((Dictionary.uniform(MESH, 15, "local_average", 0.03), [1, 4]))
    save_selection(tmp_path / "sel.json", setup)
    back = load_selection(tmp_path / "sel.json", MESH)
    assert np.allclose(back.omegas, setup.omegas)
    Z = setup.omegas.T @ SPACE.gram @ small_train.snapshots[:, :3]
    write_measurements(tmp_path / "m.csv", small_train.params[:3], Z.T)
    y, z = read_measurements(tmp_path / "m.csv", 2)
    assert np.array_equal(y, small_train.params[:3]) and np.array_equal(z, Z.T)
