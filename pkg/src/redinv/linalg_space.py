"""Finite-dimensional inner-product spaces.

Every ambient vector is a coefficient array in one fixed reference basis
(the finite element hat functions), and the inner product is the Gram
matrix ``G`` of that basis: ``<u, v> = u.T @ G @ v``. Subspaces are stored
as ``(dim, k)`` coefficient matrices whose columns span them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .errors import InvalidInputError, RankError, SingularMatrixError

__all__ = [
    "InnerProductSpace",
    "Subspace",
    "gram_matrix",
    "orthonormalize",
    "project",
    "inf_sup_beta",
    "stability_constant",
    "least_captured_direction",
]

RANK_TOL = 1e-12
BETA_ZERO = 1e-14


@dataclass(frozen=True, eq=False)
class InnerProductSpace:
    """Coefficient space ``R^dim`` equipped with an SPD Gram matrix."""

    gram: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        g = self.gram.toarray() if sp.issparse(self.gram) else np.asarray(self.gram, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1] or g.shape[0] == 0:
            raise InvalidInputError(f"Gram matrix must be square and non-empty, got shape {g.shape}")
        scale = np.abs(g).max()
        if np.abs(g - g.T).max() > 1e-12 * scale:
            raise InvalidInputError("Gram matrix is not symmetric")
        try:
            chol = la.cholesky(g, lower=True)
        except la.LinAlgError as exc:
            raise InvalidInputError("Gram matrix is not positive definite") from exc
        object.__setattr__(self, "gram", g)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.gram.shape[0]

    def inner(self, u, v):
        return np.asarray(u).T @ (self.gram @ np.asarray(v))

    def whiten(self, u):
        """Map coefficients to a frame where the inner product is Euclidean (``L.T @ u``)."""
        return self._chol.T @ np.asarray(u)

    def norm(self, u):
        """Norm of a vector, or of every column of a matrix."""
        return np.linalg.norm(self.whiten(u), axis=0)

    def riesz(self, functional):
        """Coefficients of the Riesz representer of a functional given by its action on the basis."""
        return la.cho_solve((self._chol, True), np.asarray(functional, dtype=float))

    def dual_norm(self, functional):
        """``sqrt(f.T @ G^{-1} @ f)``, computed as ``||L^{-1} f||`` for accuracy."""
        y = la.solve_triangular(self._chol, np.asarray(functional, dtype=float), lower=True)
        return np.linalg.norm(y, axis=0)

    def dual_whiten(self, functional):
        return la.solve_triangular(self._chol, np.asarray(functional, dtype=float), lower=True)

    def check_vector(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.dim:
            raise InvalidInputError(f"expected leading dimension {self.dim}, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("vector has non-finite entries")
        return v


@dataclass(frozen=True, eq=False)
class Subspace:
    """Span of the columns of ``basis`` inside ``space``.

    ``orthonormal=True`` asserts ``basis.T @ G @ basis == I`` and is checked
    at construction. Zero-dimensional subspaces (``k == 0``) are allowed.
    """

    space: InnerProductSpace
    basis: np.ndarray
    orthonormal: bool = False

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=float)
        if b.ndim == 1:
            b = b[:, None]
        if b.ndim != 2 or b.shape[0] != self.space.dim:
            raise InvalidInputError(
                f"basis must have shape ({self.space.dim}, k), got {np.shape(self.basis)}"
            )
        if not np.all(np.isfinite(b)):
            raise InvalidInputError("basis has non-finite entries")
        object.__setattr__(self, "basis", b)
        if self.orthonormal and b.shape[1]:
            err = np.abs(b.T @ self.space.gram @ b - np.eye(b.shape[1])).max()
            if err > 1e-10:
                raise InvalidInputError(f"basis flagged orthonormal but deviates by {err:.2e}")

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def __len__(self):
        return self.dim

    def extend(self, vectors) -> "Subspace":
        """Subspace spanned by the current basis and extra columns (not orthonormalized)."""
        v = np.asarray(vectors, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        return Subspace(self.space, np.hstack([self.basis, v]))

    def leading(self, k: int) -> "Subspace":
        return Subspace(self.space, self.basis[:, :k], self.orthonormal)


def _same_space(F: Subspace, H: Subspace):
    if F.space is H.space:
        return
    if F.space.dim != H.space.dim or not np.array_equal(F.space.gram, H.space.gram):
        raise InvalidInputError("subspaces live in different inner-product spaces")


def gram_matrix(F: Subspace, H: Subspace) -> np.ndarray:
    """Cross Gram matrix ``(<f_i, h_j>)`` of dimensions ``dim F x dim H``."""
    _same_space(F, H)
    return F.basis.T @ (F.space.gram @ H.basis)


def orthonormalize(S: Subspace, drop_dependent: bool = False) -> Subspace:
    """G-orthonormal basis of ``span(S)`` by Gram-Schmidt with one re-orthogonalization pass.

    Columns are processed in order; each output column has its first
    significant coefficient positive, which makes the result reproducible.

    Parameters
    ----------
    S : Subspace
        Spanning set.
    drop_dependent : bool
        If True, columns whose residual falls below ``1e-12`` of their
        original norm are skipped instead of raising.

    Raises
    ------
    RankError
        When a column is (numerically) in the span of the previous ones.
    """
    G = S.space.gram
    B = S.basis
    out = []
    for j in range(B.shape[1]):
        b = B[:, j]
        nb = np.sqrt(max(b @ G @ b, 0.0))
        if nb == 0.0:
            if drop_dependent:
                continue
            raise RankError(f"column {j} is zero", column=j)
        q = b.copy()
        if out:
            Q = np.column_stack(out)
            for _ in range(2):
                q -= Q @ (Q.T @ (G @ q))
        nq = np.sqrt(max(q @ G @ q, 0.0))
        if nq < RANK_TOL * nb:
            if drop_dependent:
                continue
            raise RankError(
                f"column {j} is linearly dependent on the previous columns "
                f"(relative residual {nq / nb:.2e})",
                column=j,
            )
        q /= nq
        big = np.flatnonzero(np.abs(q) > 1e-12 * np.abs(q).max())
        if q[big[0]] < 0:
            q = -q
        out.append(q)
    basis = np.column_stack(out) if out else np.zeros((S.space.dim, 0))
    return Subspace(S.space, basis, orthonormal=True)


def _orth(S: Subspace) -> Subspace:
    return S if S.orthonormal else orthonormalize(S)


def project(F: Subspace, v):
    """Orthogonal projection ``P_F v`` in ambient coefficients (``v`` may be a matrix of columns)."""
    v = F.space.check_vector(v)
    if F.dim == 0:
        return np.zeros_like(v)
    rhs = F.basis.T @ (F.space.gram @ v)
    if F.orthonormal:
        return F.basis @ rhs
    GF = F.basis.T @ F.space.gram @ F.basis
    try:
        coef = la.solve(GF, rhs, assume_a="pos")
    except la.LinAlgError as exc:
        raise SingularMatrixError("Gram matrix of the projection space is singular") from exc
    return F.basis @ coef


def _cross(Vn: Subspace, Wm: Subspace):
    _same_space(Vn, Wm)
    try:
        Vo, Wo = _orth(Vn), _orth(Wm)
    except RankError as exc:
        raise SingularMatrixError(f"degenerate basis in inf-sup computation: {exc}") from exc
    return Vo, Wo, Wo.basis.T @ (Vn.space.gram @ Vo.basis)


def inf_sup_beta(Vn: Subspace, Wm: Subspace) -> float:
    """Inf-sup constant ``beta(Vn, Wm) = min_{v in Vn} ||P_W v|| / ||v||``.

    With orthonormal bases the generalized eigenproblem of the normal
    matrix reduces to the singular values of the cross Gram matrix
    ``C = W.T G V``; ``beta`` is the smallest one (``sqrt`` of the smallest
    eigenvalue of ``C.T C``). ``beta({0}, W) = 1`` by convention.
    """
    if Vn.dim == 0:
        return 1.0
    if Wm.dim < Vn.dim:
        return 0.0
    _, _, C = _cross(Vn, Wm)
    s = la.svdvals(C)
    return float(np.clip(s[Vn.dim - 1], 0.0, 1.0))


def stability_constant(beta: float) -> float:
    """``mu = 1 / beta``, infinite when ``beta`` is numerically zero."""
    return np.inf if beta < BETA_ZERO else 1.0 / beta


def least_captured_direction(Vn: Subspace, Wm: Subspace) -> np.ndarray:
    """Unit vector of ``Vn`` maximizing ``||v - P_W v||``.

    It is the right singular vector of the cross Gram matrix for the
    smallest singular value. With ``Wm = {0}`` every unit vector ties and
    the first orthonormal basis vector is returned.
    """
    Vo = _orth(Vn)
    if Wm.dim == 0:
        return Vo.basis[:, 0].copy()
    _, _, C = _cross(Vo, Wm)
    n = Vo.dim
    if C.shape[0] < n:
        _, _, vt = la.svd(C, full_matrices=True)
        c = vt[-1]
    else:
        _, _, vt = la.svd(C, full_matrices=False)
        c = vt[n - 1]
    return Vo.basis @ c
