"""1D affine-parametric diffusion problem discretized with P1 finite elements.

The model is ``-(a(x; y) u')' = f(x; y)`` on (0, 1) with homogeneous
Dirichlet conditions, where both the diffusion coefficient and the load are
affine in the parameter vector ``y``::

    a(x; y) = abar(x) + sum_j y_j psi_j(x)
    f(x; y) = f0(x)   + sum_j y_j f_j(x)

Coefficient fields are piecewise constant per element. The ambient
inner product is the H^1_0 seminorm, whose Gram matrix is the unit-coefficient
stiffness matrix.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import warnings
from functools import lru_cache
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg as la
from scipy.optimize import lsq_linear

from .errors import CoercivityError, InvalidInputError
from .linalg_space import InnerProductSpace, Subspace

logger = logging.getLogger(__name__)

MAX_TRAINING_SIZE = 10**6


@dataclass(frozen=True)
class Mesh:
    """Uniform mesh of (0, 1) with ``n_h`` interior nodes and ``n_h + 1`` elements."""

    n_h: int

    def __post_init__(self):
        if int(self.n_h) < 1:
            raise InvalidInputError("mesh needs at least one interior node")

    @property
    def h(self) -> float:
        return 1.0 / (self.n_h + 1)

    @property
    def nodes(self) -> np.ndarray:
        """Interior node coordinates."""
        return np.arange(1, self.n_h + 1) * self.h

    @property
    def all_nodes(self) -> np.ndarray:
        return np.arange(self.n_h + 2) * self.h

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_h + 1) + 0.5) * self.h


def stiffness_matrix(a_elem, h):
    """Dense P1 stiffness matrix for element-wise constant coefficients ``a_elem``."""
    a = np.asarray(a_elem, dtype=float)
    diag = (a[:-1] + a[1:]) / h
    off = -a[1:-1] / h
    return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)


def apply_stiffness(a_elem, v, h):
    """Matrix-free product ``K(a) @ v`` for a vector or a matrix of columns."""
    v = np.asarray(v, dtype=float)
    pad = [(1, 1)] + [(0, 0)] * (v.ndim - 1)
    dv = np.diff(np.pad(v, pad), axis=0)  # derivative times h on every element
    a = np.asarray(a_elem, dtype=float).reshape((-1,) + (1,) * (v.ndim - 1))
    flux = a * dv
    return (flux[:-1] - flux[1:]) / h


@lru_cache(maxsize=16)
def h1_space(n_h: int) -> InnerProductSpace:
    """H^1_0 inner product on the hat basis of a uniform mesh (cached, so equal meshes share one object)."""
    return InnerProductSpace(stiffness_matrix(np.ones(n_h + 1), 1.0 / (n_h + 1)))


def load_vector(f_elem, h):
    """Exact load vector of an element-wise constant source."""
    f = np.asarray(f_elem, dtype=float)
    return 0.5 * h * (f[:-1] + f[1:])


def piecewise_constant(breaks, values) -> Callable:
    """Field taking ``values[i]`` between consecutive ``breaks`` (``len(values) == len(breaks) + 1``)."""
    breaks = np.asarray(breaks, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.size != breaks.size + 1:
        raise InvalidInputError("piecewise-constant field needs len(values) == len(breaks) + 1")
    if np.any(np.diff(breaks) <= 0):
        raise InvalidInputError("breakpoints must be strictly increasing")
    return lambda x: values[np.searchsorted(breaks, x, side="right")]


def field_on_elements(field, mesh: Mesh) -> np.ndarray:
    """Evaluate a field description on the elements of ``mesh``.

    Accepted forms: a scalar, a callable of ``x`` (sampled at element
    midpoints), a ``{"breaks": ..., "values": ...}`` table, or an array with
    one value per element.
    """
    if callable(field):
        out = np.asarray(field(mesh.midpoints), dtype=float)
    elif isinstance(field, dict):
        out = piecewise_constant(field["breaks"], field["values"])(mesh.midpoints)
    else:
        arr = np.asarray(field, dtype=float)
        if arr.ndim == 0:
            out = np.full(mesh.n_h + 1, float(arr))
        elif arr.shape == (mesh.n_h + 1,):
            out = arr.copy()
        else:
            raise InvalidInputError(
                f"field array must have one value per element ({mesh.n_h + 1}), got {arr.shape}"
            )
    out = np.broadcast_to(out, (mesh.n_h + 1,)).astype(float)
    if not np.all(np.isfinite(out)):
        raise InvalidInputError("field has non-finite values")
    return out


@dataclass(frozen=True)
class ParameterBox:
    """Axis-parallel rectangle ``prod_j [lo_j, hi_j]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise InvalidInputError("lo and hi must be non-empty vectors of equal length")
        if not np.all(lo < hi):
            bad = int(np.flatnonzero(~(lo < hi))[0])
            raise InvalidInputError(f"box needs lo < hi componentwise (axis {bad})")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def d(self) -> int:
        return self.lo.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def corners(self) -> np.ndarray:
        return np.array(list(itertools.product(*zip(self.lo, self.hi))))

    def contains(self, y, tol=0.0):
        """Closed-box membership test for one point or a ``(J, d)`` array."""
        y = np.asarray(y, dtype=float)
        return np.all((y >= self.lo - tol) & (y <= self.hi + tol), axis=-1)

    def clamp(self, y):
        return np.clip(np.asarray(y, dtype=float), self.lo, self.hi)

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


class ParametricModel:
    """Affine-parametric P1 diffusion model on a uniform mesh.

    Parameters
    ----------
    n_h : int
        Number of interior mesh nodes.
    abar, psis : field descriptions
        Mean coefficient and the ``d`` affine perturbation fields (see
        :func:`field_on_elements`).
    box : ParameterBox
        Parameter domain.
    source : field description
        Parameter-independent part of the load.
    source_psis : list of field descriptions, optional
        Affine load perturbations, one per parameter.
    a_min : float
        Required lower bound of the coefficient over the whole box.
    """

    def __init__(self, n_h, abar, psis, box, source=1.0, source_psis=None, a_min=1e-8, name="model"):
        self.mesh = Mesh(int(n_h))
        self.box = box
        self.name = name
        self.abar = field_on_elements(abar, self.mesh)
        self.psis = np.array([field_on_elements(p, self.mesh) for p in psis]).reshape(-1, self.mesh.n_h + 1)
        if self.psis.shape[0] != box.d:
            raise InvalidInputError(f"{self.psis.shape[0]} coefficient fields for a {box.d}-dimensional box")
        self.f0 = field_on_elements(source, self.mesh)
        if source_psis is None:
            self.fpsis = np.zeros_like(self.psis)
        else:
            self.fpsis = np.array([field_on_elements(p, self.mesh) for p in source_psis]).reshape(-1, self.mesh.n_h + 1)
            if self.fpsis.shape[0] != box.d:
                raise InvalidInputError("need one source field per parameter")
        self.a_min = float(a_min)
        # a is affine in y, so its minimum over the box is attained at a corner
        worst = self.abar + np.minimum(self.box.lo[:, None] * self.psis, self.box.hi[:, None] * self.psis).sum(axis=0)
        if worst.min() < self.a_min:
            e = int(np.argmin(worst))
            raise CoercivityError(
                f"coefficient drops to {worst[e]:.3e} on element {e} at a box corner (need >= {self.a_min})"
            )
        self.space = h1_space(self.mesh.n_h)
        self.description = {}

    @property
    def d(self) -> int:
        return self.box.d

    @property
    def n_h(self) -> int:
        return self.mesh.n_h

    def coefficient(self, y):
        return self.abar + np.asarray(y, dtype=float) @ self.psis

    def source(self, y):
        return self.f0 + np.asarray(y, dtype=float) @ self.fpsis

    def _check_param(self, y):
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.size != self.d:
            raise InvalidInputError(f"parameter must have {self.d} entries, got {y.size}")
        if not self.box.contains(y, tol=1e-12):
            warnings.warn(f"parameter {y} outside the box; clamped", RuntimeWarning, stacklevel=3)
            y = self.box.clamp(y)
        return y

    def solve(self, y) -> np.ndarray:
        """Galerkin solution coefficients for parameter ``y``."""
        y = self._check_param(y)
        a = self.coefficient(y)
        if a.min() <= 0:
            raise CoercivityError(f"non-positive coefficient {a.min():.3e} at y={y}")
        h = self.mesh.h
        ab = np.zeros((2, self.n_h))
        ab[0, 1:] = -a[1:-1] / h
        ab[1] = (a[:-1] + a[1:]) / h
        return la.solveh_banded(ab, load_vector(self.source(y), h))

    def residual_terms(self, v):
        """Affine decomposition ``r(y) = r0 + R @ y`` of the residual ``f(y) - K(y) v``."""
        h = self.mesh.h
        r0 = load_vector(self.f0, h) - apply_stiffness(self.abar, v, h)
        R = np.column_stack(
            [load_vector(fj, h) - apply_stiffness(pj, v, h) for fj, pj in zip(self.fpsis, self.psis)]
        )
        return r0, R

    def residual_norm(self, v, y) -> float:
        r0, R = self.residual_terms(v)
        return float(self.space.dual_norm(r0 + R @ np.asarray(y, dtype=float)))

    def to_dict(self):
        return {
            "name": self.name,
            "n_h": self.n_h,
            "abar": self.abar.tolist(),
            "psis": self.psis.tolist(),
            "source": self.f0.tolist(),
            "source_psis": self.fpsis.tolist(),
            "box": self.box.to_dict(),
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def elliptic_testbed(n_h=255, d=2, box=None) -> ParametricModel:
    """Smooth-coefficient testbed: ``a = 1 + sum_j y_j (0.45 / j) sin(j pi x)``, ``y in [-1, 1]^d``, ``f = 1``."""
    psis = [(lambda x, j=j: (0.45 / j) * np.sin(j * np.pi * x)) for j in range(1, d + 1)]
    box = box or ParameterBox(-np.ones(d), np.ones(d))
    return ParametricModel(n_h, 1.0, psis, box, source=1.0, name=f"elliptic_d{d}")


@dataclass(eq=False)
class TrainingSet:
    """Parameters ``(J, d)`` and snapshot coefficients ``(n_h, J)``."""

    params: np.ndarray
    snapshots: np.ndarray
    space: InnerProductSpace
    resolution: tuple | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.atleast_2d(np.asarray(self.params, dtype=float))
        self.snapshots = np.asarray(self.snapshots, dtype=float)
        if self.snapshots.ndim == 1:
            self.snapshots = self.snapshots[:, None]
        if self.params.shape[0] < 1 or self.params.shape[0] != self.snapshots.shape[1]:
            raise InvalidInputError("need J >= 1 parameters matching J snapshot columns")
        if self.snapshots.shape[0] != self.space.dim:
            raise InvalidInputError("snapshot length does not match the space dimension")
        if not np.all(np.isfinite(self.snapshots)):
            raise InvalidInputError("snapshots contain non-finite values")

    @property
    def J(self) -> int:
        return self.params.shape[0]

    def __len__(self):
        return self.J

    def grid_spacing(self) -> np.ndarray | None:
        if self.resolution is None or "box" not in self.meta:
            return None
        box = self.meta["box"]
        widths = np.asarray(box["hi"]) - np.asarray(box["lo"])
        res = np.asarray(self.resolution, dtype=float)
        return np.where(res > 1, widths / np.maximum(res - 1, 1), widths)

    def subset(self, idx) -> "TrainingSet":
        idx = np.asarray(idx, dtype=int)
        return TrainingSet(self.params[idx], self.snapshots[:, idx], self.space, None, dict(self.meta))

    def save(self, path):
        """Write ``manifest.json`` plus ``params.npy`` and ``snapshots.npy`` into directory ``path``."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        np.save(path / "params.npy", self.params)
        np.save(path / "snapshots.npy", self.snapshots)
        manifest = {
            "kind": "training_set",
            "J": self.J,
            "d": int(self.params.shape[1]),
            "n_h": self.space.dim,
            "resolution": list(self.resolution) if self.resolution is not None else None,
            "meta": self.meta,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path, model: ParametricModel | None = None, check_tol=1e-10) -> "TrainingSet":
        """Read a saved set; with ``model`` given, every snapshot's FEM residual is verified."""
        path = Path(path)
        manifest = json.loads((path / "manifest.json").read_text())
        params = np.load(path / "params.npy")
        snaps = np.load(path / "snapshots.npy")
        if params.shape != (manifest["J"], manifest["d"]) or snaps.shape != (manifest["n_h"], manifest["J"]):
            raise InvalidInputError("stored arrays disagree with the manifest")
        space = model.space if model is not None else h1_space(manifest["n_h"])
        res = manifest.get("resolution")
        T = cls(params, snaps, space, tuple(res) if res else None, manifest.get("meta", {}))
        if model is not None:
            for j in range(T.J):
                r0, R = model.residual_terms(T.snapshots[:, j])
                r = r0 + R @ T.params[j]
                scale = np.linalg.norm(load_vector(model.source(T.params[j]), model.mesh.h)) or 1.0
                if np.linalg.norm(r) > check_tol * scale:
                    raise InvalidInputError(f"snapshot {j} does not solve the model (residual too large)")
        return T


def parameter_grid(box: ParameterBox, resolution) -> np.ndarray:
    """Lexicographic tensor grid, first axis varying slowest.

    A resolution of 1 on an axis gives its midpoint; ``r >= 2`` gives ``r``
    equispaced points including both ends (and the midpoint when ``r`` is odd).
    """
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (box.d,))
    if np.any(res < 1):
        raise InvalidInputError("resolution must be >= 1 on every axis")
    total = int(np.prod(res.astype(float)))
    if np.prod(res.astype(float)) > MAX_TRAINING_SIZE:
        raise InvalidInputError(f"training grid of {np.prod(res.astype(float)):.0f} points exceeds {MAX_TRAINING_SIZE}")
    axes = [
        np.array([c]) if r == 1 else np.linspace(lo, hi, r)
        for lo, hi, c, r in zip(box.lo, box.hi, box.center, res)
    ]
    grid = np.array(list(itertools.product(*axes))).reshape(total, box.d)
    return grid


def sample_training_set(model: ParametricModel, resolution=None, points=None, workers: int = 1) -> TrainingSet:
    """Solve the model on a tensor grid (``resolution``) or an explicit list of ``points``."""
    if (resolution is None) == (points is None):
        raise InvalidInputError("give exactly one of resolution or points")
    if points is not None:
        params = np.atleast_2d(np.asarray(points, dtype=float))
        if params.shape[0] > MAX_TRAINING_SIZE:
            raise InvalidInputError(f"more than {MAX_TRAINING_SIZE} training points")
        res = None
    else:
        params = parameter_grid(model.box, resolution)
        res = tuple(int(r) for r in np.broadcast_to(resolution, (model.d,)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            cols = list(ex.map(model.solve, params))
    else:
        cols = [model.solve(p) for p in params]
    meta = {"model": model.name, "fingerprint": model.fingerprint(), "box": model.box.to_dict()}
    return TrainingSet(params, np.column_stack(cols), model.space, res, meta)


def _snapshots(T, space):
    if isinstance(T, TrainingSet):
        return T.snapshots, T.space
    if space is None:
        raise InvalidInputError("a bare snapshot matrix needs its InnerProductSpace")
    return np.asarray(T, dtype=float), space


def pod_width_proxy(T, n: int, space: InnerProductSpace | None = None) -> np.ndarray:
    """Worst training projection error onto the leading-k (uncentered) POD space, k = 0..n.

    This estimates the width of the training set; it is not a certified
    bound on the width of the full solution manifold. See
    :func:`pod_lower_bound` for a quantity that is.
    """
    S, space = _snapshots(T, space)
    if n > S.shape[1]:
        raise InvalidInputError("n must not exceed the number of snapshots")
    X = space.whiten(S)
    U, s, _ = la.svd(X, full_matrices=False)
    out = np.empty(n + 1)
    R = X.copy()
    out[0] = np.linalg.norm(R, axis=0).max()
    for k in range(1, n + 1):
        if k <= s.size and s[k - 1] > 0:
            u = U[:, k - 1:k]
            R -= u @ (u.T @ R)
        out[k] = np.linalg.norm(R, axis=0).max()
    return np.minimum.accumulate(out)


def pod_lower_bound(T, n: int, space: InnerProductSpace | None = None) -> np.ndarray:
    """Root-mean-square POD tail ``sqrt(sum_{i>k} s_i^2 / J)``, k = 0..n.

    No k-dimensional space approximates the training set better than this
    in the mean-square sense, hence it lower-bounds the worst-case error of
    every k-dimensional space and any affine map with a k-dimensional range.
    """
    S, space = _snapshots(T, space)
    s = la.svdvals(space.whiten(S))
    tail = np.concatenate([np.cumsum((s**2)[::-1])[::-1], [0.0]])
    k = np.minimum(np.arange(n + 1), s.size)
    return np.sqrt(tail[k] / S.shape[1])


@dataclass
class ReducedBasis:
    """Output of the greedy snapshot selection.

    ``basis`` holds the orthonormal nested basis; ``errors[k]`` is the
    worst training distance to the span of the first ``k`` vectors.
    """

    basis: Subspace
    picks: list
    errors: np.ndarray

    def space(self, k: int) -> Subspace:
        return self.basis.leading(k)


def greedy_reduced_basis(T, n_max: int, tol: float = 0.0, offset=None, space=None) -> ReducedBasis:
    """Strong greedy selection on the training set.

    At each step the snapshot farthest from the current space is added.
    Selection stops after ``n_max`` vectors, when the worst error drops to
    ``tol`` or below, or when the remaining snapshots are numerically in
    the span already built.

    Parameters
    ----------
    T : TrainingSet or array
        Snapshots (columns).
    n_max : int
        Largest dimension.
    tol : float
        Target accuracy.
    offset : array, optional
        Subtracted from every snapshot first (affine spaces).
    """
    S, space = _snapshots(T, space)
    if n_max > S.shape[1]:
        raise InvalidInputError("n_max must not exceed the number of snapshots")
    if offset is not None:
        S = S - np.asarray(offset, dtype=float)[:, None]
    R = space.whiten(S)
    norms = np.linalg.norm(R, axis=0)
    errors = [norms.max() if norms.size else 0.0]
    floor = 1e-12 * errors[0]
    Q, picks = [], []
    while len(picks) < n_max and errors[-1] > max(tol, floor) and errors[-1] > 0:
        j = int(np.argmax(norms))
        q = R[:, j].copy()
        if Q:
            Qm = np.column_stack(Q)
            q -= Qm @ (Qm.T @ q)
        q /= np.linalg.norm(q)
        Q.append(q)
        picks.append(j)
        R -= np.outer(q, q @ R)
        norms = np.linalg.norm(R, axis=0)
        errors.append(norms.max())
    errors = np.minimum.accumulate(np.array(errors))
    if Q:
        B = la.solve_triangular(space._chol.T, np.column_stack(Q), lower=False)
    else:
        B = np.zeros((space.dim, 0))
    return ReducedBasis(Subspace(space, B, orthonormal=True), picks, errors)


@dataclass
class SurrogateResult:
    value: float
    y: np.ndarray
    semidefinite: bool


def residual_surrogate(model: ParametricModel, v, box: ParameterBox | None = None, pgd_iters: int = 500) -> SurrogateResult:
    """Minimize the dual-norm PDE residual of ``v`` over the parameter box.

    The residual is affine in ``y``, so its squared dual norm is a convex
    quadratic. The unconstrained least-squares minimizer is used when it
    lies in the box; otherwise projected gradient descent runs from the
    clamped point and a bounded least-squares solve polishes the result.
    """
    box = box or model.box
    r0, R = model.residual_terms(np.asarray(v, dtype=float))
    c0 = model.space.dual_whiten(r0)
    C = model.space.dual_whiten(R)
    sv = la.svdvals(C)
    semidef = bool(sv.size == 0 or sv[-1] <= 1e-12 * max(sv[0], 1e-300))
    y, *_ = np.linalg.lstsq(C, -c0, rcond=None)

    def value(z):
        return float(np.linalg.norm(C @ z + c0))

    if not box.contains(y, tol=1e-14):
        lip = sv[0] ** 2 if sv.size and sv[0] > 0 else 1.0
        z = box.clamp(y)
        for _ in range(pgd_iters):
            z = box.clamp(z - (C.T @ (C @ z + c0)) / lip)
        res = lsq_linear(C, -c0, bounds=(box.lo, box.hi), method="bvls")
        y = res.x if value(box.clamp(res.x)) <= value(z) else z
        y = box.clamp(y)
    return SurrogateResult(value(y), np.asarray(y, dtype=float), semidef)


def h1_distance(xa, ua, xb, ub) -> float:
    """H^1 seminorm distance between two continuous piecewise-linear functions.

    Each function is given by its full nodal values (boundary included) on
    its own mesh; the two meshes need not be nested.
    """
    xa, ua, xb, ub = (np.asarray(t, dtype=float) for t in (xa, ua, xb, ub))
    x = np.union1d(xa, xb)
    mid = 0.5 * (x[:-1] + x[1:])
    da = np.diff(ua) / np.diff(xa)
    db = np.diff(ub) / np.diff(xb)
    ga = da[np.clip(np.searchsorted(xa, mid) - 1, 0, da.size - 1)]
    gb = db[np.clip(np.searchsorted(xb, mid) - 1, 0, db.size - 1)]
    return float(np.sqrt(np.sum((ga - gb) ** 2 * np.diff(x))))


def with_boundary(u) -> np.ndarray:
    """Append the homogeneous Dirichlet values to interior nodal coefficients."""
    return np.concatenate([[0.0], np.asarray(u, dtype=float), [0.0]])


def bump_testbed(n_h=255, delta=0.02, width=0.05, center=0.5) -> ParametricModel:
    """Near-degenerate testbed: ``a = 1 - (1 - delta) y exp(-((x - c) / width)^2)``, ``y in [0, 1]``, ``f = 1``.

    As ``y`` approaches 1 the coefficient nearly vanishes around ``c``, the
    local gradient there grows like ``1 / a`` and the solution becomes very
    sensitive to ``y`` near the top of the interval. The solution set is
    then poorly approximated by low-dimensional linear spaces.
    """
    if not 0 < delta < 1:
        raise InvalidInputError("delta must lie in (0, 1)")
    psi = lambda x: -(1.0 - delta) * np.exp(-(((x - center) / width) ** 2))  # noqa: E731
    return ParametricModel(n_h, 1.0, [psi], ParameterBox([0.0], [1.0]), source=1.0,
                           name=f"bump_delta{delta:g}_w{width:g}")
