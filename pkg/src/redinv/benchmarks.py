"""Benchmark quantities and estimator comparison tables.

``delta_tilde`` is the largest distance between two training states whose
observations differ by at most ``sigma``; no estimator can have a
worst-case error much below half of it. ``chebyshev_finite`` computes the
smallest ball enclosing a finite point set.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import pdist

from .affine_optimal import build_problem, primal_dual_solve
from .errors import InvalidInputError
from .forward_pde import (ParametricModel, greedy_reduced_basis, pod_lower_bound,
                          pod_width_proxy, sample_training_set)
from .linalg_space import InnerProductSpace
from .pbdw import PbdwOperator
from .piecewise import build_family, estimate_errors
from .sensing import ObservationSetup

logger = logging.getLogger(__name__)

MAX_PAIRS_J = 5000


def delta_tilde(T, setup: ObservationSetup, sigmas) -> dict:
    """``max ||u - v||`` over training pairs with ``||P_W (u - v)|| <= sigma``, for every ``sigma``."""
    S = T.snapshots if hasattr(T, "snapshots") else np.asarray(T, dtype=float)
    if S.shape[1] > MAX_PAIRS_J:
        raise InvalidInputError(f"pair scan limited to {MAX_PAIRS_J} snapshots")
    sig = np.atleast_1d(np.asarray(sigmas, dtype=float))
    if S.shape[1] < 2:
        return {float(s): 0.0 for s in sig}
    D = pdist(setup.space.whiten(S).T)
    P = pdist(setup.coords(S).T)
    order = np.argsort(P, kind="stable")
    P, cmax = P[order], np.maximum.accumulate(D[order])
    cut = np.searchsorted(P, sig, side="right")
    return {float(s): (float(cmax[c - 1]) if c > 0 else 0.0) for s, c in zip(sig, cut)}


def framing_interval(delta_tilde_2sigma: float, sigma: float) -> tuple:
    """Interval ``[dt - 2 sigma, dt + 2 sigma]`` (floored at 0) known to contain the manifold's ``delta_sigma``."""
    return max(delta_tilde_2sigma - 2 * sigma, 0.0), delta_tilde_2sigma + 2 * sigma


def _ball_dual(Y):
    """Minimal enclosing ball of the columns of ``Y`` through the simplex dual (SLSQP)."""
    P = Y.shape[1]
    if P == 1:
        return Y[:, 0].copy()
    K = Y.T @ Y
    dK = np.diag(K)

    def f(lam):
        return -(lam @ dK - lam @ K @ lam), -(dK - 2 * K @ lam)

    res = minimize(f, np.full(P, 1.0 / P), jac=True, method="SLSQP", bounds=[(0.0, 1.0)] * P,
                   constraints=[{"type": "eq", "fun": lambda l: l.sum() - 1.0, "jac": lambda l: np.ones(P)}],
                   options={"ftol": 1e-15, "maxiter": 500})
    lam = np.clip(res.x, 0, None)
    return Y @ (lam / lam.sum())


def _circumcenter(Y, c):
    """Polish ``c`` to the circumcenter of the points lying (to 1e-6) on the current sphere."""
    d = np.linalg.norm(Y - c[:, None], axis=0)
    supp = np.flatnonzero(d >= d.max() * (1 - 1e-6))
    if supp.size < 2:
        return c
    p0 = Y[:, supp[0]]
    A = Y[:, supp[1:]] - p0[:, None]
    G = A.T @ A
    alpha, *_ = np.linalg.lstsq(2 * G, np.diag(G), rcond=None)
    return p0 + A @ alpha


def chebyshev_finite(points, space: InnerProductSpace | None = None):
    """Center and radius of the smallest ball containing the columns of ``points``.

    Works in whitened coordinates. An active set of points is grown from the
    two farthest-apart candidates; on each set the dual problem
    ``max_{lambda in simplex} sum lambda_i ||p_i||^2 - ||sum lambda_i p_i||^2``
    is solved by SLSQP (the center is ``sum lambda_i p_i``) and the farthest
    outside point is added until every point is enclosed. The result is
    polished to the exact circumcenter of the support points when that does
    not enlarge the radius.
    """
    X0 = np.asarray(points, dtype=float)
    if X0.ndim == 1:
        X0 = X0[:, None]
    P = X0.shape[1]
    if P == 0:
        raise InvalidInputError("empty point set")
    if P > 500:
        raise InvalidInputError("at most 500 points")
    X = space.whiten(X0) if space is not None else X0
    shift = X.mean(axis=1, keepdims=True)
    Y = X - shift

    def dists(c):
        return np.linalg.norm(Y - c[:, None], axis=0)

    i0 = int(np.argmax(dists(np.zeros(Y.shape[0]))))
    active = sorted({i0, int(np.argmax(dists(Y[:, i0])))})
    while True:
        c = _ball_dual(Y[:, active])
        c2 = _circumcenter(Y[:, active], c)
        if dists(c2)[active].max() <= dists(c)[active].max():
            c = c2
        d = dists(c)
        r_act = d[active].max()
        out = int(np.argmax(d))
        if d[out] <= r_act * (1 + 1e-10) or out in active:
            break
        active = sorted(set(active) | {out})
    r = float(dists(c).max())
    center = c + shift[:, 0]
    if space is not None:
        center = solve_triangular(space._chol.T, center, lower=False)
    return center, r


def diameter(points, space: InnerProductSpace | None = None) -> float:
    """Largest pairwise distance between the columns of ``points``."""
    X = np.asarray(points, dtype=float)
    X = space.whiten(X) if space is not None else X
    return float(pdist(X.T).max()) if X.shape[1] > 1 else 0.0


@dataclass
class BenchmarkReport:
    """Worst and mean held-out errors per estimator, plus ``delta_tilde`` and width rows."""

    estimator_errors: dict
    delta_tilde: dict
    width_proxy: list
    width_lower: list
    framing: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def rows(self):
        return [(k, v["worst"], v["mean"]) for k, v in self.estimator_errors.items()]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["row", "key", "worst", "mean"])
            for name, worst, mean in self.rows():
                wr.writerow(["estimator", name, repr(float(worst)), repr(float(mean))])
            for s, v in sorted(self.delta_tilde.items()):
                wr.writerow(["delta_tilde", repr(float(s)), repr(float(v)), ""])
            for k, v in enumerate(self.width_proxy):
                wr.writerow(["width_proxy", k, repr(float(v)), ""])

    def to_dict(self):
        return {
            "estimators": self.estimator_errors,
            "delta_tilde": {repr(float(k)): v for k, v in sorted(self.delta_tilde.items())},
            "framing": {repr(float(k)): list(v) for k, v in sorted(self.framing.items())},
            "width_proxy": [float(v) for v in self.width_proxy],
            "width_lower_bound": [float(v) for v in self.width_lower],
            "info": self.info,
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def held_out_points(model: ParametricModel, resolution) -> np.ndarray:
    """Training grid shifted by half a cell: the ``r - 1`` cell midpoints per axis (the centre when ``r = 1``)."""
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (model.d,))
    axes = []
    for lo, hi, r in zip(model.box.lo, model.box.hi, res):
        if r == 1:
            axes.append(np.array([0.5 * (lo + hi)]))
        else:
            edges = np.linspace(lo, hi, r)
            axes.append(0.5 * (edges[:-1] + edges[1:]))
    return np.array(list(itertools.product(*axes))).reshape(-1, model.d)


def _summary(err):
    return {"worst": float(np.max(err)), "mean": float(np.mean(err))}


def compare_estimators(model: ParametricModel, setup: ObservationSetup, resolution, n=None, N=None,
                       sigma=None, sigmas=(0.0, 1e-3, 1e-2, 1e-1), pd_iters=5000, K_max=64,
                       strategy="greedy_coordinate", T=None, held=None, estimators=None, workers=1) -> BenchmarkReport:
    """Fit every estimator on a training grid and evaluate it on the half-shifted grid.

    Parameters
    ----------
    model, setup : the forward model and the observation space.
    resolution : training grid resolution.
    n : reduced dimension of the PBDW variants (default ``m``).
    N : dimension of ``Z_N`` for the optimal affine map (default ``2 m``).
    sigma : piecewise target (default: a quarter of the affine PBDW worst error, at least
        ``1e-8`` times the largest snapshot norm).
    estimators : subset of ``{"pbdw", "pbdw_affine", "affine_opt", "piecewise"}``.
    workers : thread-pool size used for snapshot generation.
    """
    T = T if T is not None else sample_training_set(model, resolution, workers=workers)
    held = held if held is not None else sample_training_set(
        model, points=held_out_points(model, resolution), workers=workers)
    m = setup.m
    n = m if n is None else min(n, m)
    N = 2 * m if N is None else N
    estimators = set(estimators or ("pbdw", "pbdw_affine", "affine_opt", "piecewise"))
    out = {}
    if "pbdw" in estimators:
        rb = greedy_reduced_basis(T, min(n, T.J))
        op = PbdwOperator.fit(rb.space(rb.basis.dim), setup)
        out["pbdw_linear"] = _summary(op.errors(held.snapshots))
    ubar = model.solve(model.box.center)
    aff_worst = None
    if "pbdw_affine" in estimators or "piecewise" in estimators:
        rb = greedy_reduced_basis(T, min(n, T.J), offset=ubar)
        op = PbdwOperator.fit(rb.space(rb.basis.dim), setup, offset=ubar)
        e = op.errors(held.snapshots)
        aff_worst = float(e.max())
        if "pbdw_affine" in estimators:
            out["pbdw_affine"] = _summary(e)
    if "affine_opt" in estimators:
        Z = greedy_reduced_basis(T, min(N, T.J)).basis
        prob = build_problem(T, setup, Z)
        res = primal_dual_solve(prob, iters=pd_iters)
        out["affine_opt"] = _summary(res.map.errors(held.snapshots))
    if "piecewise" in estimators:
        # floored so that round-off-level errors on exactly affine manifolds do not force refinement
        floor = 1e-8 * float(T.space.norm(T.snapshots).max())
        sig = sigma if sigma is not None else max(0.25 * aff_worst, floor)
        fam = build_family(model, T, setup, "sigma", sigma=sig, K_max=K_max, strategy=strategy)
        eo, _ = estimate_errors(fam, model, setup, held.snapshots, "oracle", T=T)
        es, _ = estimate_errors(fam, model, setup, held.snapshots, "surrogate", T=T)
        out["piecewise_oracle"] = _summary(eo)
        out["piecewise_surrogate"] = _summary(es)
    sig_list = sorted(float(s) for s in sigmas)
    dt = delta_tilde(T, setup, sorted(set(sig_list + [2 * s for s in sig_list])))
    framing = {s: framing_interval(dt[2 * s], s) for s in sig_list}
    kmax = min(m + 1, T.J)
    report = BenchmarkReport(out, {s: dt[s] for s in sig_list}, pod_width_proxy(T, kmax).tolist(),
                             pod_lower_bound(T, kmax).tolist(), framing,
                             {"J_train": T.J, "J_held": held.J, "m": m, "n": n, "N": N})
    return report
