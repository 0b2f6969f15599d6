"""Greedy selection of measurement functionals from a dictionary.

Two orthogonal matching pursuit variants grow ``W_m`` one dictionary element
at a time until ``beta(V_n, W_m)`` reaches a target:

* collective OMP scores a candidate ``omega`` by
  ``sum_i <phi_i - P_W phi_i, omega>^2`` over an orthonormal basis of ``V_n``;
* worst-case OMP first finds the unit vector of ``V_n`` worst captured by
  the current ``W`` and scores candidates against its residual only.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .forward_pde import Mesh, h1_space
from .linalg_space import Subspace, inf_sup_beta, least_captured_direction, orthonormalize
from .sensing import Dictionary

logger = logging.getLogger(__name__)

TIE_RTOL = 1e-10


@dataclass
class GreedyRun:
    """Record of a greedy placement: selected indices and per-step ``r_m`` and ``beta``.

    ``rm_history[k]`` and ``beta_history[k]`` refer to the first ``k``
    selected sensors, so both start at ``k = 0``.
    """

    selected: list
    rm_history: list
    beta_history: list
    kappa: float
    target: float
    reached: bool
    locations: list = field(default_factory=list)
    W: Subspace | None = None

    @property
    def m(self) -> int:
        return len(self.selected)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["k", "selected_index", "location", "r_k", "beta_k"])
            for k in range(self.m + 1):
                idx = self.selected[k - 1] if k else ""
                loc = repr(float(self.locations[k - 1])) if k else ""
                wr.writerow([k, idx, loc, repr(float(self.rm_history[k])), repr(float(self.beta_history[k]))])


def _pick(scores, kappa):
    """Index of the selected score: first one within ``kappa^2`` (and round-off) of the maximum."""
    top = np.max(scores)
    if not np.isfinite(top) or top <= 0:
        return None
    thresh = top * (kappa**2 if kappa < 1 else 1.0 - TIE_RTOL)
    return int(np.flatnonzero(scores >= thresh)[0])


class _GrowingW:
    """Orthonormal basis of ``W`` extended one representer at a time."""

    def __init__(self, space):
        self.space = space
        self.cols = []

    def basis(self):
        return np.column_stack(self.cols) if self.cols else np.zeros((self.space.dim, 0))

    def add(self, omega):
        q = np.array(omega, dtype=float)
        nq0 = float(self.space.norm(q))
        if self.cols:
            B = self.basis()
            for _ in range(2):
                q -= B @ (B.T @ (self.space.gram @ q))
        nq = float(self.space.norm(q))
        if nq <= 1e-12 * nq0:
            return False
        self.cols.append(q / nq)
        return True

    def residual(self, X):
        if not self.cols:
            return X.copy()
        B = self.basis()
        return X - B @ (B.T @ (self.space.gram @ X))

    def subspace(self):
        return Subspace(self.space, self.basis(), orthonormal=True)


def _check(Vn, D, kappa, beta_star):
    if not 0 < kappa <= 1:
        raise InvalidInputError("kappa must lie in (0, 1]")
    if not 0 < beta_star <= 1:
        raise InvalidInputError("target beta must lie in (0, 1]")
    if Vn.dim == 0:
        raise InvalidInputError("V_n must have positive dimension")
    if Vn.space.dim != D.space.dim:
        raise InvalidInputError("V_n and the dictionary live in different spaces")
    return Vn if Vn.orthonormal else orthonormalize(Vn)


def _run(Vn, D, beta_star, kappa, m_max, initial, direction):
    V = _check(Vn, D, kappa, beta_star)
    space = D.space
    Om = D.representers
    GOm = space.gram @ Om
    Wg = _GrowingW(space)
    mask = np.zeros(len(D), dtype=bool)
    selected = []

    def status():
        res = Wg.residual(V.basis)
        rm = float(np.sum(space.norm(res) ** 2))
        beta = inf_sup_beta(V, Wg.subspace()) if Wg.cols else 0.0
        return rm, beta

    for i in initial or []:
        i = int(i)
        if not mask[i] and Wg.add(Om[:, i]):
            selected.append(i)
        mask[i] = True
    rm, beta = status()
    rms, betas = [rm], [beta]
    m_max = min(m_max, len(D))
    while beta < beta_star and len(selected) < m_max:
        scores = direction(V, Wg, GOm)
        scores[mask] = -np.inf
        j = _pick(scores, kappa)
        if j is None:
            logger.warning("no dictionary element improves the observation space")
            break
        mask[j] = True
        if not Wg.add(Om[:, j]):
            continue
        selected.append(j)
        rm, beta = status()
        rms.append(rm)
        betas.append(beta)
        if rm <= 1 - beta_star**2 and beta < beta_star:
            logger.warning("sufficient condition r_m <= 1 - beta*^2 met but beta < beta*")
    reached = beta >= beta_star
    if not reached:
        logger.warning("target beta %.3f not reached with m = %d (beta = %.3f)", beta_star, len(selected), beta)
    # with seeded sensors the histories start from the seeded observation space
    return GreedyRun(selected, rms, betas, kappa, beta_star, reached,
                     [float(D.locations[i]) for i in selected], Wg.subspace())


def _collective_scores(V, Wg, GOm):
    A = Wg.residual(V.basis).T @ GOm
    return np.sum(A**2, axis=0)


def _worst_scores(V, Wg, GOm):
    if Wg.cols:
        v = least_captured_direction(V, Wg.subspace())
    else:
        v = V.basis[:, 0]
    r = Wg.residual(v)
    return (r @ GOm) ** 2


def collective_omp(Vn: Subspace, D: Dictionary, beta_star: float, kappa: float = 1.0,
                   m_max: int = 200, initial=None) -> GreedyRun:
    """Collective OMP until ``beta(V_n, W_m) >= beta_star`` or ``m_max`` sensors.

    The score of ``omega`` is ``sum_i <phi_i - P_W phi_i, omega>^2``; it does
    not depend on the orthonormal basis chosen for ``V_n``. With ``kappa < 1``
    the first candidate (in dictionary order) scoring at least ``kappa^2``
    times the maximum is taken. Ties go to the lowest index.
    """
    return _run(Vn, D, beta_star, kappa, m_max, initial, _collective_scores)


def worst_case_omp(Vn: Subspace, D: Dictionary, beta_star: float, kappa: float = 1.0,
                   m_max: int = 200, initial=None) -> GreedyRun:
    """Worst-case OMP: score candidates against the residual of the least captured unit vector of ``V_n``.

    With ``W`` empty every unit vector is equally badly captured; the first
    orthonormal basis vector of ``V_n`` is used. ``initial`` seeds ``W``
    with given dictionary indices.
    """
    return _run(Vn, D, beta_star, kappa, m_max, initial, _worst_scores)


def fourier_space(mesh: Mesh, n: int) -> Subspace:
    """Orthonormalized nodal interpolants of ``sqrt(2) sin(k pi x) / (k pi)``, ``k = 1..n``."""
    x = mesh.nodes
    k = np.arange(1, n + 1)
    Phi = np.sqrt(2.0) * np.sin(np.pi * np.outer(x, k)) / (np.pi * k)
    return orthonormalize(Subspace(h1_space(mesh.n_h), Phi))


def compute_J_fourier(n: int, panels: int = 10_000, order: int = 5) -> float:
    """``int_0^1 (sum_k |phi_k''(x)|^2)^{1/2} dx`` for the normalized sine basis.

    ``|phi_k''(x)|^2 = 2 k^2 pi^2 sin^2(k pi x)``. Composite Gauss-Legendre
    quadrature on ``panels`` equal panels.
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    gx, gw = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, 1.0, panels + 1)
    half = 0.5 * np.diff(edges)
    x = (0.5 * (edges[:-1] + edges[1:])[:, None] + half[:, None] * gx).ravel()
    w = (half[:, None] * gw).ravel()
    total = np.zeros_like(x)
    for k in range(1, n + 1):
        total += 2.0 * (k * np.pi) ** 2 * np.sin(k * np.pi * x) ** 2
    return float(w @ np.sqrt(total))
