"""Acceptance suite: one test per criterion, each printing a single pass/fail line."""
import numpy as np
import pytest

from oracles import beta_brute_force, epigraph_projection_scalar
from redinv.affine_optimal import build_problem, primal_dual_solve, project_epigraph, subgradient_baseline
from redinv.benchmarks import (chebyshev_finite, compare_estimators, delta_tilde, diameter, framing_interval,
                               held_out_points)
from redinv.forward_pde import (Mesh, bump_testbed, elliptic_testbed, greedy_reduced_basis, h1_distance,
                                h1_space, pod_width_proxy, sample_training_set, with_boundary)
from redinv.joint_greedy import geim
from redinv.linalg_space import InnerProductSpace, Subspace, inf_sup_beta, orthonormalize, project
from redinv.pbdw import PbdwOperator
from redinv.piecewise import build_family, estimate_errors
from redinv.sensing import Dictionary, build_observation, measure, riesz_point_eval
from redinv.sensor_greedy import collective_omp, compute_J_fourier, fourier_space, worst_case_omp


@pytest.fixture(scope="module")
def elliptic():
    model = elliptic_testbed(255, 2)
    T = sample_training_set(model, 17)
    H = sample_training_set(model, points=held_out_points(model, 11))
    return model, T, H


def _uniform_setup(mesh, m):
    return build_observation((Dictionary(mesh, "point_eval", np.arange(1, m + 1) / (m + 1)), list(range(m))))


def test_criterion_1_exactness(elliptic, criterion):
    model, T, _ = elliptic
    rng = np.random.default_rng(1)
    space = model.space
    setup = _uniform_setup(model.mesh, 8)
    checks = []
    rb = greedy_reduced_basis(T, 6)
    op = PbdwOperator.fit(rb.space(6), setup)
    U = rb.space(6).basis @ rng.standard_normal((6, 20))
    rel = space.norm(op.reconstruct(measure(setup, U)[1]) - U) / space.norm(U)
    checks.append(("pbdw exact on V_n", rel.max() <= 1e-10))
    ubar = model.solve(model.box.center)
    rba = greedy_reduced_basis(T, 6, offset=ubar)
    opa = PbdwOperator.fit(rba.space(6), setup, offset=ubar)
    Ua = ubar[:, None] + rba.space(6).basis @ rng.standard_normal((6, 20))
    rel = space.norm(opa(measure(setup, Ua)[1]) - Ua) / space.norm(Ua)
    checks.append(("affine pbdw exact on ubar + V_n", rel.max() <= 1e-10))
    D = Dictionary.uniform(model.mesh, 127)
    run = geim(T, D, 8)
    g = run.operator()
    Om = D.representers[:, run.sensors]
    v = rng.standard_normal((space.dim, 10))
    interp = np.abs(Om.T @ space.gram @ (g.reconstruct(v) - v)).max() / np.abs(Om.T @ space.gram @ v).max()
    checks.append(("geim interpolation", interp <= 1e-10))
    Vv = g.V.basis @ rng.standard_normal((g.n, 10))
    checks.append(("geim projection", (space.norm(g.reconstruct(Vv) - Vv) / space.norm(Vv)).max() <= 1e-10))
    setup5 = _uniform_setup(model.mesh, 5)
    prob = build_problem(T, setup5, greedy_reduced_basis(T, 10).basis)
    amap = primal_dual_solve(prob, iters=500).map
    a = rng.standard_normal((5, 10))
    out = amap.apply(a)
    checks.append(("P_W of optimal affine output", np.abs(setup5.coords(out) - a).max() <= 1e-10 * np.abs(a).max()))
    assert criterion(1, checks)


def test_criterion_2_error_bound(elliptic, criterion):
    model, T, H = elliptic
    assert H.J == 100
    checks = []
    for n, m in ((3, 6), (5, 10)):
        setup = _uniform_setup(model.mesh, m)
        V = greedy_reduced_basis(T, n).space(n)
        op = PbdwOperator.fit(V, setup)
        err = op.errors(H.snapshots)
        dist = model.space.norm(H.snapshots - project(V, H.snapshots))
        checks.append((f"(n, m) = ({n}, {m})", bool(np.all(err <= op.mu * dist * (1 + 1e-8)))))
    assert criterion(2, checks)


def test_criterion_3_sensor_formulas(criterion):
    mesh = Mesh(255)
    space = h1_space(255)
    w = riesz_point_eval(mesh, 0.5)
    x = mesh.nodes
    checks = [("representer value at 0.5", abs(w[127] - 0.5) <= 1e-12),
              ("reproduces t(1 - t)", abs(space.inner(w, x * (1 - x)) - 0.5) <= 1e-12)]
    nodes = [31, 63, 95, 127, 191, 223]
    setup = build_observation((Dictionary(mesh, "point_eval", x[nodes]), list(range(len(nodes)))))
    u = elliptic_testbed(255, 2).solve([0.3, -0.8])
    _, pw = measure(setup, u)
    xk = np.concatenate([[0.0], x[nodes], [1.0]])
    interp = np.interp(x, xk, np.concatenate([[0.0], u[nodes], [0.0]]))
    checks.append(("P_W u is the nodal interpolant", space.norm(pw - interp) <= 1e-10))
    assert criterion(3, checks)


def test_criterion_4_omp_rates(criterion):
    mesh = Mesh(511)
    D = Dictionary(mesh)
    checks = []
    for n in (2, 3, 5):
        V = fourier_space(mesh, n)
        J2 = compute_J_fourier(n) ** 2
        col = collective_omp(V, D, 1.0, m_max=300)
        wc = worst_case_omp(V, D, 1.0, m_max=60)
        rc, rw = np.array(col.rm_history), np.array(wc.rm_history)
        k = np.arange(61)
        checks.append((f"collective rate n={n}", bool(np.all(rc[:61] <= J2 / (k + 1)))))
        checks.append((f"worst-case rate n={n}", bool(np.all(rw <= n**2 * J2 / (k + 1)))))
        checks.append((f"r_m below 1e-3 n={n}", rc.min() < 1e-3))
    checks.append(("J(V_1) = 2 sqrt 2", abs(compute_J_fourier(1) - 2 * np.sqrt(2)) <= 1e-6))
    checks.append(("J(V_n) >= sqrt n", all(compute_J_fourier(n) >= np.sqrt(n) for n in range(1, 21))))
    assert criterion(4, checks)


def test_criterion_5_primal_dual(small_train, oracle, criterion):
    setup = build_observation((Dictionary.uniform(Mesh(63), 15), [1, 4, 7, 10, 13]))
    Z = greedy_reduced_basis(small_train, 6).basis
    checks = []
    p1 = build_problem(small_train.subset([40]), setup, Z)
    checks.append(("J = 1", primal_dual_solve(p1, iters=5000).objective <= 1e-5))
    p2 = build_problem(small_train.subset([3, 60]), setup, Z)
    checks.append(("J = 2", primal_dual_solve(p2, iters=20000).objective <= 1e-5))
    idx = np.random.default_rng(0).choice(small_train.J, 50, replace=False)
    T50 = small_train.subset(idx)
    p50 = build_problem(T50, setup, greedy_reduced_basis(T50, 12).basis)
    pd = primal_dual_solve(p50, iters=20000)
    sg = subgradient_baseline(p50, iters=20000)
    checks.append(("J = 50 beats subgradient", pd.objective <= sg.objective))
    cases = np.array(oracle["epigraph_cases"])
    y, s = project_epigraph(cases[:, 0:1], cases[:, 1:2], cases[:, 2])
    fresh = np.array([epigraph_projection_scalar(*c[:3]) for c in cases])
    ok = np.abs(y[:, 0] - fresh[:, 0]).max() <= 1e-8 and np.abs(s - fresh[:, 1]).max() <= 1e-8
    checks.append(("epigraph projection vs bisection", bool(ok) and len(cases) >= 100))
    yp, _ = project_epigraph(np.zeros(1), np.array([2.0]), 0.0)
    checks.append(("pinned root", abs(yp[0] - oracle["pinned_root_y"]) <= 1e-8 and abs(2 * yp[0] ** 3 + yp[0] - 2) <= 1e-10))
    assert criterion(5, checks)


def test_criterion_6_piecewise(criterion):
    sigma = 5e-4
    model = bump_testbed(255, delta=0.02, width=0.05)
    T = sample_training_set(model, 513)
    H = sample_training_set(model, points=held_out_points(model, 513))
    setup = build_observation((Dictionary(model.mesh, "point_eval", [0.3, 0.5]), [0, 1]))
    fam = build_family(model, T, setup, "sigma", sigma=sigma, K_max=64)
    checks = [("family complete", not fam.partial),
              ("every mu_k eps_k <= sigma", all(c.mu[c.chosen_n] * c.eps[c.chosen_n] <= sigma for c in fam.cells))]
    eo, _ = estimate_errors(fam, model, setup, T.snapshots, "oracle")
    checks.append(("oracle training error <= sigma", eo.max() <= sigma * (1 + 1e-8)))
    ubar = model.solve(model.box.center)
    affine = []
    for n in range(setup.m + 1):
        rb = greedy_reduced_basis(T, n, offset=ubar)
        affine.append(PbdwOperator.fit(rb.space(n), setup, offset=ubar).errors(H.snapshots).max())
    es, _ = estimate_errors(fam, model, setup, H.snapshots, "surrogate")
    width = pod_width_proxy(T, setup.m + 1)[setup.m + 1]
    checks.append(("width proxy > 5x piecewise error", width > 5 * es.max()))
    checks.append(("surrogate piecewise < 0.5x affine pbdw", es.max() < 0.5 * min(affine)))
    assert criterion(6, checks)


def test_criterion_7_benchmarks(small_model, small_train, criterion):
    setup = build_observation((Dictionary.uniform(Mesh(63), 15), [1, 4, 7, 10, 13]))
    sig = [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0]
    dt = delta_tilde(small_train, setup, sig + [2 * s for s in sig])
    vals = [dt[s] for s in sorted(dt)]
    checks = [("delta_tilde monotone", all(a <= b for a, b in zip(vals, vals[1:])))]
    fr = [framing_interval(dt[2 * s], s) for s in sig]
    checks.append(("framing reported", all(0 <= lo <= hi for lo, hi in fr)))
    rng = np.random.default_rng(7)
    ok = True
    for _ in range(50):
        X = rng.standard_normal((int(rng.integers(1, 8)), int(rng.integers(2, 60))))
        _, r = chebyshev_finite(X)
        d = diameter(X)
        ok &= 0.5 * d * (1 - 1e-12) <= r <= d
    checks.append(("radius/diameter on 50 sets", bool(ok)))
    a = compare_estimators(small_model, setup, 9, pd_iters=1000).to_dict()
    b = compare_estimators(small_model, setup, 9, pd_iters=1000).to_dict()
    import json
    checks.append(("table reproducible", json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)))
    assert criterion(7, checks)


def test_criterion_8_convergence(criterion):
    y = [0.6, -0.4]
    ref = elliptic_testbed(4095, 2)
    uref = with_boundary(ref.solve(y))
    hs, errs = [], []
    for n in (64, 128, 256, 512):
        m = elliptic_testbed(n - 1, 2)
        errs.append(h1_distance(m.mesh.all_nodes, with_boundary(m.solve(y)), ref.mesh.all_nodes, uref))
        hs.append(m.mesh.h)
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    checks = [("FEM energy slope", abs(slope - 1.0) <= 0.15)]
    rng = np.random.default_rng(8)
    space = h1_space(40)
    ok = True
    for _ in range(5):
        V = Subspace(space, rng.standard_normal((40, 3)))
        W = Subspace(space, rng.standard_normal((40, 5)))
        ok &= beta_brute_force(V.basis, W.basis, space.gram, samples=10_000) >= inf_sup_beta(V, W) - 1e-8
    checks.append(("inf-sup vs brute force", bool(ok)))
    ok_orth = ok_proj = True
    for _ in range(200):
        n = int(rng.integers(2, 13))
        k = int(rng.integers(1, n + 1))
        B = rng.standard_normal((n, n))
        G = B @ B.T + n * np.eye(n)
        sp = InnerProductSpace(G)
        F = Subspace(sp, rng.standard_normal((n, k)) * 10 ** rng.uniform(-3, 3))
        Q = orthonormalize(F)
        ok_orth &= np.abs(Q.basis.T @ G @ Q.basis - np.eye(k)).max() <= 1e-10
        v = rng.standard_normal(n)
        p = project(F, v)
        ok_proj &= sp.norm(project(F, p) - p) <= 1e-10 * sp.norm(v)
    checks.append(("orthonormalization, 200 cases", bool(ok_orth)))
    checks.append(("projection idempotence, 200 cases", bool(ok_proj)))
    assert criterion(8, checks)
