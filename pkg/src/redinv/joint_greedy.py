"""Joint greedy selection of the reduced space and the sensors.

``nested_greedy`` adds the worst reconstructed training snapshot to ``V``
and, whenever the inf-sup constant falls below a floor, extends ``W`` by
worst-case OMP. ``geim`` adds one snapshot and one sensor per step, the
sensor being the dictionary element best aligned with the new snapshot's
reconstruction residual.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .linalg_space import Subspace, inf_sup_beta
from .pbdw import PbdwOperator
from .sensing import Dictionary, build_observation
from .sensor_greedy import worst_case_omp

logger = logging.getLogger(__name__)


@dataclass
class JointRun:
    """History of a joint selection; entry ``n`` of each list refers to ``V_n``."""

    u_selected: list
    sensor_groups: list
    m_of_n: list
    err_history: list
    beta_history: list
    V: Subspace
    sensors: list
    partial: bool = False
    reason: str = ""
    dictionary: Dictionary | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.u_selected)

    def operator(self) -> PbdwOperator:
        setup = build_observation((self.dictionary, self.sensors))
        return PbdwOperator.fit(self.V, setup)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["n", "snapshot_index", "new_sensor_indices", "m_of_n", "err", "beta"])
            for k in range(len(self.err_history)):
                snap = self.u_selected[k - 1] if k else ""
                group = " ".join(str(i) for i in self.sensor_groups[k - 1]) if k else ""
                wr.writerow([k, snap, group, self.m_of_n[k], repr(float(self.err_history[k])),
                             repr(float(self.beta_history[k]))])


def _errors(S, space, V, D, sensors):
    """Per-snapshot PBDW errors for ``(V, W(sensors))`` and the operator (``None`` if ``W`` is empty)."""
    if not sensors:
        return space.norm(S), None
    op = PbdwOperator.fit(V, build_observation((D, sensors)))
    return op.errors(S), op


def _add_vector(space, Vcols, u):
    q = np.array(u, dtype=float)
    n0 = float(space.norm(q))
    if Vcols:
        B = np.column_stack(Vcols)
        for _ in range(2):
            q -= B @ (B.T @ (space.gram @ q))
    nq = float(space.norm(q))
    if n0 == 0 or nq <= 1e-12 * n0:
        return False
    Vcols.append(q / nq)
    return True


def _setup(T, D):
    S = T.snapshots if hasattr(T, "snapshots") else np.asarray(T, dtype=float)
    if S.ndim != 2 or S.shape[1] == 0:
        raise InvalidInputError("training set is empty")
    return S, D.space


def nested_greedy(T, D: Dictionary, beta_lower: float, eps_stop: float, n_max: int, m_max: int | None = None) -> JointRun:
    """Nested greedy selection of ``(V_n, W_{m(n)})``.

    Parameters
    ----------
    T : TrainingSet or array
    D : Dictionary
    beta_lower : float
        Floor kept on ``beta(V_n, W_{m(n)})`` after every step.
    eps_stop : float
        Stop once the worst training reconstruction error is below this.
    n_max : int
        Largest reduced dimension.
    m_max : int, optional
        Sensor budget (defaults to the dictionary size).
    """
    if not 0 < beta_lower < 1:
        raise InvalidInputError("beta_lower must lie in (0, 1)")
    S, space = _setup(T, D)
    m_max = len(D) if m_max is None else m_max
    Vcols, sensors = [], []
    err = space.norm(S)
    run = JointRun([], [], [0], [float(err.max())], [1.0], Subspace(space, np.zeros((space.dim, 0))), [],
                   dictionary=D)
    while run.n < n_max:
        if run.err_history[-1] < eps_stop:
            run.reason = "tolerance"
            break
        j = int(np.argmax(err))
        if not _add_vector(space, Vcols, S[:, j]):
            run.reason = "training set exhausted"
            break
        V = Subspace(space, np.column_stack(Vcols), orthonormal=True)
        W = Subspace(space, build_observation((D, sensors)).W.basis, orthonormal=True) if sensors else None
        beta = inf_sup_beta(V, W) if W is not None else 0.0
        group = []
        if beta < beta_lower:
            omp = worst_case_omp(V, D, beta_lower, m_max=m_max, initial=sensors)
            group = omp.selected[len(sensors):]
            sensors = list(omp.selected)
            beta = omp.beta_history[-1]
            if not omp.reached:
                run.partial = True
                run.reason = "sensor budget exhausted"
        run.u_selected.append(j)
        run.sensor_groups.append(group)
        run.m_of_n.append(len(sensors))
        run.V = V
        run.sensors = list(sensors)
        if run.partial:
            run.err_history.append(float("nan"))
            run.beta_history.append(float(beta))
            logger.warning("nested greedy aborted at n=%d: %s", run.n, run.reason)
            break
        err, _ = _errors(S, space, V, D, sensors)
        run.err_history.append(float(err.max()))
        run.beta_history.append(float(beta))
    if not run.partial and run.err_history[-1] < eps_stop:
        run.reason = "tolerance"
    run.reason = run.reason or "n_max"
    return run


def geim(T, D: Dictionary, n_max: int, eps_stop: float = 0.0) -> JointRun:
    """Generalized empirical interpolation: one snapshot and one sensor per step (``m(n) = n``).

    The new sensor maximizes ``|<omega, u_n - A_{n-1}(P_W u_n)>|`` over the
    unselected dictionary elements, ``u_n`` being the worst reconstructed
    training snapshot.
    """
    if n_max > len(D):
        raise InvalidInputError("n_max exceeds the dictionary size")
    S, space = _setup(T, D)
    Om = D.representers
    GOm = space.gram @ Om
    Vcols, sensors = [], []
    err, op = space.norm(S), None
    run = JointRun([], [], [0], [float(err.max())], [1.0], Subspace(space, np.zeros((space.dim, 0))), [],
                   dictionary=D)
    mask = np.zeros(len(D), dtype=bool)
    while run.n < n_max:
        if run.err_history[-1] <= eps_stop:
            run.reason = "tolerance"
            break
        j = int(np.argmax(err))
        resid = S[:, j] - op.reconstruct(S[:, j]) if op is not None else S[:, j]
        scores = np.abs(resid @ GOm)
        scores[mask] = -np.inf
        i = int(np.argmax(scores))
        if not np.isfinite(scores[i]) or scores[i] <= 1e-14 * max(float(space.norm(S[:, j])), 1e-300):
            run.reason = "zero residual"
            break
        if not _add_vector(space, Vcols, S[:, j]):
            run.reason = "training set exhausted"
            break
        mask[i] = True
        sensors.append(i)
        V = Subspace(space, np.column_stack(Vcols), orthonormal=True)
        W = build_observation((D, sensors))
        beta = inf_sup_beta(V, W.W)
        run.u_selected.append(j)
        run.sensor_groups.append([i])
        run.m_of_n.append(len(sensors))
        run.V = V
        run.sensors = list(sensors)
        run.beta_history.append(float(beta))
        if beta <= 1e-10:
            run.partial = True
            run.reason = "inf-sup constant vanished"
            run.err_history.append(float("nan"))
            break
        op = PbdwOperator.fit(V, W)
        err = op.errors(S)
        run.err_history.append(float(err.max()))
    if not run.reason:
        run.reason = "n_max"
    return run
