"""Linear and affine PBDW reconstruction.

Given an observation ``w = P_W u`` and a reduced space ``V_n``, the
reconstruction is the element of ``w + W^perp`` closest to ``V_n``. With
orthonormal bases of ``V_n`` and ``W`` and the cross Gram matrix
``C = W.T G V``, its ``V_n`` component solves the least-squares problem
``min_c ||C c - a||`` where ``a`` are the coordinates of ``w``; the
reconstruction is then ``V c + W (a - C c)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .errors import InstabilityError, InvalidInputError
from .linalg_space import Subspace, orthonormalize, stability_constant
from .sensing import ObservationSetup

BETA_MIN = 1e-10


@dataclass(eq=False)
class PbdwOperator:
    """Precomputed PBDW map for a fixed pair ``(V_n, W)``; build it with :meth:`fit`."""

    V: Subspace
    setup: ObservationSetup
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    beta: float
    offset: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.V.dim

    @property
    def m(self) -> int:
        return self.setup.m

    @property
    def mu(self) -> float:
        return stability_constant(self.beta)

    @classmethod
    def fit(cls, Vn: Subspace, setup: ObservationSetup, offset=None, beta_min: float = BETA_MIN) -> "PbdwOperator":
        """Factor the normal equations once.

        Raises
        ------
        InvalidInputError
            If ``n > m``.
        InstabilityError
            If ``beta(V_n, W) <= beta_min``.
        """
        if Vn.dim > setup.m:
            raise InvalidInputError(f"reduced dimension n={Vn.dim} exceeds the number of sensors m={setup.m}")
        V = Vn if Vn.orthonormal else orthonormalize(Vn)
        C = setup.W.basis.T @ (setup.space.gram @ V.basis)
        if V.dim == 0:
            beta = 1.0
            Q, R = np.zeros((setup.m, 0)), np.zeros((0, 0))
        else:
            beta = float(np.clip(la.svdvals(C)[-1], 0.0, 1.0))
            if beta <= beta_min:
                raise InstabilityError(f"inf-sup constant {beta:.3e} too small for a stable reconstruction", beta=beta)
            Q, R = la.qr(C, mode="economic")
        if offset is not None:
            offset = setup.space.check_vector(offset).copy()
        return cls(V, setup, C, Q, R, beta, offset)

    def _solve(self, a):
        if self.n == 0:
            return np.zeros((0,) + a.shape[1:])
        return la.solve_triangular(self.R, self.Q.T @ a)

    def reconstruct_coords(self, a):
        """Reconstruction from coordinates ``a`` of ``w`` in the orthonormal ``W`` basis."""
        a = np.asarray(a, dtype=float)
        c = self._solve(a)
        return self.V.basis @ c + self.setup.W.basis @ (a - self.C @ c)

    def reconstruct(self, w):
        """Linear reconstruction ``A_n(w)`` from an ambient observation (vector or columns)."""
        return self.reconstruct_coords(self.setup.coords(w))

    def reconstruct_data(self, z):
        return self.reconstruct(self.setup.from_z(z))

    def reconstruct_affine(self, w, ubar=None):
        """Affine reconstruction ``ubar + A_n(w - P_W ubar)``; defaults to the fitted offset."""
        ubar = self.offset if ubar is None else self.setup.space.check_vector(ubar)
        if ubar is None:
            return self.reconstruct(w)
        a = self.setup.coords(w)
        abar = self.setup.coords(ubar)
        if a.ndim == 2:
            return ubar[:, None] + self.reconstruct_coords(a - abar[:, None])
        return ubar + self.reconstruct_coords(a - abar)

    def __call__(self, w):
        return self.reconstruct_affine(w) if self.offset is not None else self.reconstruct(w)

    def errors(self, snapshots):
        """Reconstruction error of each column of ``snapshots`` from its exact observation."""
        U = np.asarray(snapshots, dtype=float)
        rec = self(self.setup.W.basis @ self.setup.coords(U))
        return self.setup.space.norm(U - rec)

    def worst_case_error(self, T):
        """Largest training reconstruction error, its index (lowest on ties) and all errors."""
        S = T.snapshots if hasattr(T, "snapshots") else np.asarray(T, dtype=float)
        err = self.errors(S)
        k = int(np.argmax(err))
        return float(err[k]), k, err


def fit(Vn, setup, offset=None):
    return PbdwOperator.fit(Vn, setup, offset)
