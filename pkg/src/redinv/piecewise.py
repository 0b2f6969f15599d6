"""Piecewise affine estimators built by splitting the parameter box.

Every cell ``Y_k`` of a partition of the parameter box carries an affine
reduced space ``u(center) + V_{n,k}`` and PBDW estimate. Cells are split
until each one meets an admissibility test:

* ``sigma`` mode: ``min_n mu_{n,k} eps_{n,k} <= sigma``;
* ``eps_mu`` mode: some ``n`` has ``eps_{n,k} <= eps`` and ``mu_{n,k} <= mu``.

At estimation time every cell produces a candidate and one of them is
selected: by the PDE residual surrogate (data only), by distance to the
training set, or by the true error when the state is known.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EstimationError, InvalidInputError, RefinementStarvationError
from .forward_pde import ParameterBox, ParametricModel, greedy_reduced_basis, residual_surrogate
from .linalg_space import Subspace, inf_sup_beta, stability_constant
from .pbdw import PbdwOperator
from .sensing import ObservationSetup

logger = logging.getLogger(__name__)

MODES = ("sigma", "eps_mu")
STRATEGIES = ("full_dyadic", "greedy_coordinate")
SELECTIONS = ("surrogate", "ideal", "oracle")


@dataclass(eq=False)
class Cell:
    """One parameter cell with its hierarchy of affine reduced spaces."""

    box: ParameterBox
    level: int
    ubar: np.ndarray
    basis: Subspace
    eps: np.ndarray
    mu: np.ndarray
    train_idx: np.ndarray
    chosen_n: int = 0
    tau: float = float("inf")

    @property
    def n_levels(self) -> int:
        return self.eps.size

    def space(self, n=None) -> Subspace:
        return self.basis.leading(self.chosen_n if n is None else n)

    def operator(self, setup: ObservationSetup) -> PbdwOperator:
        return PbdwOperator.fit(self.space(), setup, offset=self.ubar)

    def to_dict(self) -> dict:
        return {
            "lo": self.box.lo.tolist(), "hi": self.box.hi.tolist(), "level": self.level,
            "chosen_n": self.chosen_n, "tau": self.tau,
            "eps": self.eps.tolist(), "mu": [None if not np.isfinite(v) else float(v) for v in self.mu],
            "n_train": int(self.train_idx.size),
        }


def local_indices(T, box: ParameterBox) -> np.ndarray:
    """Training points lying in the closed box."""
    return np.flatnonzero(box.contains(T.params, tol=1e-12 * max(1.0, float(np.abs(box.hi).max()))))


BETA_FLOOR = 1e-3


def build_cell(model: ParametricModel, box: ParameterBox, T, setup: ObservationSetup, n_max=None, level=0,
               beta_floor: float = BETA_FLOOR) -> Cell:
    """Hierarchy ``V_{0..n,k}`` from greedy selection on the local snapshots minus the centre solution.

    ``eps[n]`` is the worst local training distance to ``ubar + V_n`` and
    ``mu[n] = 1 / beta(V_n, W)`` with ``mu[0] = 1``. Dimensions with
    ``beta < beta_floor`` get ``mu = inf``: with few local snapshots a space
    can fit them exactly while being nearly invisible to the sensors, and
    the resulting reconstruction is dominated by round-off.
    """
    n_max = setup.m if n_max is None else min(n_max, setup.m)
    ubar = model.solve(box.center)
    idx = local_indices(T, box)
    S = np.column_stack([T.snapshots[:, idx], ubar]) if idx.size else ubar[:, None]
    n_cap = min(n_max, S.shape[1] - 1)
    rb = greedy_reduced_basis(S, n_cap, offset=ubar, space=model.space)
    eps = rb.errors
    mu = np.ones(eps.size)
    W = setup.W
    for n in range(1, eps.size):
        beta = inf_sup_beta(rb.basis.leading(n), W)
        mu[n] = np.inf if beta < beta_floor else stability_constant(beta)
    return Cell(box, level, ubar, rb.basis, eps, mu, idx)


def _products(cell: Cell, mode: str, sigma=None, eps=None, mu=None) -> np.ndarray:
    if mode == "sigma":
        with np.errstate(invalid="ignore"):
            prod = cell.mu * cell.eps
        return np.where(np.isinf(cell.mu), np.inf, prod)
    if mode == "eps_mu":
        return np.maximum(cell.mu / mu, cell.eps / eps)
    raise InvalidInputError(f"unknown mode {mode!r}")


def tau(cell: Cell, mode: str = "sigma", eps=None, mu=None) -> float:
    """Test quantity of a cell; records the minimizing dimension (lowest on ties) as ``chosen_n``.

    ``sigma`` mode: ``min_n mu_n eps_n`` (with ``inf * 0 = inf``).
    ``eps_mu`` mode: ``min_n max(mu_n / mu, eps_n / eps)``, accepted when ``<= 1``.
    """
    if mode == "eps_mu" and (eps is None or mu is None):
        raise InvalidInputError("eps_mu mode needs eps and mu")
    vals = _products(cell, mode, eps=eps, mu=mu)
    n = int(np.argmin(vals))
    cell.chosen_n = n
    cell.tau = float(vals[n])
    return cell.tau


def _threshold(mode, sigma):
    return sigma if mode == "sigma" else 1.0


def _child_boxes(box: ParameterBox, axes):
    mid = box.center
    out = []
    for sides in itertools.product((0, 1), repeat=len(axes)):
        lo, hi = box.lo.copy(), box.hi.copy()
        for ax, side in zip(axes, sides):
            if side == 0:
                hi[ax] = mid[ax]
            else:
                lo[ax] = mid[ax]
        out.append(ParameterBox(lo, hi))
    return out


def grid_spacing(T) -> np.ndarray:
    """Smallest gap between distinct training coordinates on each axis (``inf`` if only one value)."""
    out = []
    for col in np.atleast_2d(T.params).T:
        u = np.unique(col)
        out.append(np.diff(u).min() if u.size > 1 else np.inf)
    return np.array(out)


def split_cell(cell: Cell, strategy: str, model, T, setup, mode="sigma", eps=None, mu=None, n_max=None) -> list:
    """Children of a cell, built and scored.

    ``full_dyadic`` halves every side. ``greedy_coordinate`` halves one side:
    at even levels the axis ``(level / 2) mod d`` is forced, at odd levels
    the axis whose worse child has the smaller test quantity is taken.

    Raises
    ------
    RefinementStarvationError
        When a child would be narrower than the training grid spacing.
    """
    if strategy not in STRATEGIES:
        raise InvalidInputError(f"unknown split strategy {strategy!r}")
    d = cell.box.d
    spacing = grid_spacing(T)

    def make(axes):
        half = 0.5 * cell.box.widths[list(axes)]
        if np.any(half < spacing[list(axes)] * (1 - 1e-9)):
            raise RefinementStarvationError(
                f"cell {cell.box.lo.tolist()}-{cell.box.hi.tolist()} cannot be split below the "
                f"training grid spacing {spacing.tolist()}; use a denser training grid"
            )
        kids = [build_cell(model, b, T, setup, n_max, cell.level + 1) for b in _child_boxes(cell.box, axes)]
        for k in kids:
            tau(k, mode, eps, mu)
        return kids

    if strategy == "full_dyadic" or d == 1:
        return make(tuple(range(d)))
    if cell.level % 2 == 0:
        return make(((cell.level // 2) % d,))
    best, best_val = None, np.inf
    for i in range(d):
        try:
            kids = make((i,))
        except RefinementStarvationError:
            continue
        val = max(k.tau for k in kids)
        if best is None or val < best_val:
            best, best_val = kids, val
    if best is None:
        return make((0,))
    return best


@dataclass(eq=False)
class AdmissibleFamily:
    """Accepted cells partitioning the parameter box."""

    cells: list
    mode: str
    sigma: float | None = None
    eps: float | None = None
    mu: float | None = None
    partial: bool = False
    box: ParameterBox | None = None
    diagnostics: dict = field(default_factory=dict)
    _ops: list | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return len(self.cells)

    def passes(self, cell) -> bool:
        return cell.tau <= _threshold(self.mode, self.sigma) * (1 + 1e-12)

    def operators(self, setup: ObservationSetup) -> list:
        """PBDW operator per cell, ``None`` for cells whose chosen space is unstable."""
        if self._ops is None:
            ops = []
            for c in self.cells:
                try:
                    ops.append(c.operator(setup))
                except Exception:  # noqa: BLE001 - unstable cells are skipped at estimation
                    ops.append(None)
            self._ops = ops
        return self._ops

    def locate(self, y) -> int:
        """Index of the cell owning ``y``; boundary points go to the lowest index in lexicographic order of ``lo``."""
        y = np.asarray(y, dtype=float)
        order = sorted(range(self.K), key=lambda k: tuple(self.cells[k].box.lo))
        for k in order:
            if self.cells[k].box.contains(y, tol=1e-12):
                return k
        raise InvalidInputError(f"{y} lies outside every cell")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "sigma": self.sigma, "eps": self.eps, "mu": self.mu,
            "partial": self.partial, "K": self.K, "cells": [c.to_dict() for c in self.cells],
        }

    def save(self, path):
        """JSON summary at ``path`` plus per-cell bases in ``<path stem>_cells.npz``."""
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        arrays = {}
        for k, c in enumerate(self.cells):
            arrays[f"ubar_{k}"] = c.ubar
            arrays[f"basis_{k}"] = c.basis.basis
        np.savez(path.with_name(path.stem + "_cells.npz"), **arrays)


def build_family(model: ParametricModel, T, setup: ObservationSetup, mode: str = "sigma", sigma=None,
                 eps=None, mu=None, K_max: int = 64, strategy: str = "greedy_coordinate", n_max=None) -> AdmissibleFamily:
    """Breadth-first refinement of the parameter box until every cell is admissible.

    When the next split would exceed ``K_max`` cells the remaining cells are
    kept as they are and the family is flagged ``partial``.
    """
    if mode not in MODES:
        raise InvalidInputError(f"unknown mode {mode!r}")
    if mode == "sigma" and (sigma is None or sigma <= 0):
        raise InvalidInputError("sigma mode needs sigma > 0")
    if mode == "eps_mu" and (eps is None or mu is None or eps <= 0 or mu < 1):
        raise InvalidInputError("eps_mu mode needs eps > 0 and mu >= 1")
    if K_max < 1:
        raise InvalidInputError("K_max must be >= 1")
    thr = _threshold(mode, sigma)
    root = build_cell(model, model.box, T, setup, n_max)
    tau(root, mode, eps, mu)
    queue = deque([root])
    accepted = []
    partial = False
    splits = 0
    while queue:
        cell = queue.popleft()
        if cell.tau <= thr:
            accepted.append(cell)
            continue
        n_children = 2 ** cell.box.d if strategy == "full_dyadic" else 2
        if len(accepted) + len(queue) + n_children > K_max:
            partial = True
            accepted.append(cell)
            continue
        queue.extend(split_cell(cell, strategy, model, T, setup, mode, eps, mu, n_max))
        splits += 1
    if partial:
        bad = sum(c.tau > thr for c in accepted)
        logger.warning("cell budget %d reached with %d non-admissible cells", K_max, bad)
    accepted.sort(key=lambda c: tuple(c.box.lo))
    return AdmissibleFamily(accepted, mode, sigma, eps, mu, partial, model.box,
                            {"splits": splits, "max_tau": max(c.tau for c in accepted)})


@dataclass
class Estimate:
    u: np.ndarray
    k: int
    values: np.ndarray
    candidates: np.ndarray
    errors: np.ndarray | None = None
    y: np.ndarray | None = None


def candidates(family: AdmissibleFamily, setup: ObservationSetup, w) -> tuple:
    """Affine PBDW candidate of every stable cell for one ambient observation ``w``."""
    ops = family.operators(setup)
    if all(op is None for op in ops):
        raise EstimationError("no cell has a stable reduced space for this observation space")
    cols = [op.reconstruct_affine(w) if op is not None else np.full(setup.space.dim, np.nan) for op in ops]
    return np.column_stack(cols), np.array([op is not None for op in ops])


def estimate(family: AdmissibleFamily, model: ParametricModel, setup: ObservationSetup, w,
             selection: str = "surrogate", truth=None, T=None, surrogate_box: str = "global") -> Estimate:
    """Select one cell candidate for the observation ``w``.

    Parameters
    ----------
    selection : {"surrogate", "ideal", "oracle"}
        ``surrogate`` minimizes the PDE residual over the parameter box
        (``surrogate_box="global"``) or over the candidate's own cell
        (``"cell"``); ``ideal`` minimizes the distance to the training set
        ``T``; ``oracle`` minimizes the true error and needs ``truth``.
    truth : array, optional
        True state; per-cell errors are reported when given.
    """
    if selection not in SELECTIONS:
        raise InvalidInputError(f"unknown selection {selection!r}")
    C, ok = candidates(family, setup, w)
    space = setup.space
    vals = np.full(family.K, np.inf)
    ys = [None] * family.K
    errs = None
    if truth is not None:
        errs = np.where(ok, space.norm(np.nan_to_num(C) - np.asarray(truth)[:, None]), np.inf)
    if selection == "oracle":
        if truth is None:
            raise InvalidInputError("oracle selection needs the true state")
        vals = errs.copy()
    elif selection == "ideal":
        if T is None:
            raise InvalidInputError("ideal selection needs a training set")
        X = space.whiten(T.snapshots)
        for k in np.flatnonzero(ok):
            c = space.whiten(C[:, k])
            vals[k] = float(np.sqrt(np.min(np.sum((X - c[:, None]) ** 2, axis=0))))
    else:
        for k in np.flatnonzero(ok):
            box = family.cells[k].box if surrogate_box == "cell" else model.box
            res = residual_surrogate(model, C[:, k], box=box)
            vals[k], ys[k] = res.value, res.y
    k = int(np.argmin(vals))
    return Estimate(C[:, k].copy(), k, vals, C, errs, ys[k])


def estimate_errors(family, model, setup, S, selection="surrogate", T=None, noise=None, surrogate_box="global"):
    """Errors of the selected candidates for every column of the snapshot matrix ``S``.

    ``noise`` is an optional ``(n_h, J)`` matrix of perturbations added to the observations.
    """
    S = np.asarray(S, dtype=float)
    out = np.empty(S.shape[1])
    ks = np.empty(S.shape[1], dtype=int)
    for j in range(S.shape[1]):
        w = setup.W.basis @ setup.coords(S[:, j])
        if noise is not None:
            w = w + noise[:, j]
        est = estimate(family, model, setup, w, selection, truth=S[:, j], T=T, surrogate_box=surrogate_box)
        out[j] = est.errors[est.k]
        ks[j] = est.k
    return out, ks


def write_diagnostics(path, est: Estimate):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "dist_or_surrogate", "error_if_truth_known"])
        for k, v in enumerate(est.values):
            e = "" if est.errors is None else repr(float(est.errors[k]))
            wr.writerow([k, repr(float(v)), e])
