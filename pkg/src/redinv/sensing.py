"""Sensor dictionaries, Riesz representers and observation spaces.

A measurement is a linear functional ``l`` on the ambient space. Its
Riesz representer ``omega`` satisfies ``<omega, v> = l(v)`` and is stored
normalized to unit norm, so the recorded datum is ``z = l(u) / ||l||``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la

from .errors import ConditioningError, DomainError, InvalidInputError
from .forward_pde import Mesh, h1_space
from .linalg_space import InnerProductSpace, Subspace, orthonormalize

KINDS = ("point_eval", "local_average")
MOLLIFIER_C = 15.0 / 16.0
_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(3)


def mollifier(s):
    """Quartic bump ``(15/16)(1 - s^2)^2`` on ``|s| <= 1``; integrates to one."""
    s = np.asarray(s, dtype=float)
    return np.where(np.abs(s) <= 1.0, MOLLIFIER_C * (1.0 - s**2) ** 2, 0.0)


def _hat_values(mesh: Mesh, x):
    """Values of the interior hat functions at ``x`` as (indices, weights)."""
    h = mesh.h
    e = min(int(np.floor(x / h)), mesh.n_h)
    t = x / h - e
    idx, wts = [], []
    for node, wt in ((e, 1.0 - t), (e + 1, t)):
        if 1 <= node <= mesh.n_h:
            idx.append(node - 1)
            wts.append(wt)
    return idx, wts


def point_eval_functional(mesh: Mesh, x) -> np.ndarray:
    """Action of ``v -> v(x)`` on the hat basis."""
    if not 0.0 < x < 1.0:
        raise DomainError(f"point sensor location {x} must lie strictly inside (0, 1)")
    e = np.zeros(mesh.n_h)
    idx, wts = _hat_values(mesh, x)
    e[idx] = wts
    return e


def local_average_functional(mesh: Mesh, x, tau) -> np.ndarray:
    """Action of ``v -> int v(s) phi_tau(s - x) ds`` on the hat basis.

    The integrand is a polynomial of degree at most 5 between consecutive
    breakpoints (mesh nodes and the support ends), so three-point Gauss
    quadrature per piece is exact.
    """
    if tau <= 0:
        raise InvalidInputError("local-average width must be positive")
    a, b = x - tau, x + tau
    if a <= 0.0 or b >= 1.0:
        raise DomainError(f"support [{a}, {b}] of the local average leaves (0, 1)")
    nodes = mesh.all_nodes
    inner = nodes[(nodes > a) & (nodes < b)]
    pts = np.concatenate([[a], inner, [b]])
    lo, hi = pts[:-1], pts[1:]
    half = 0.5 * (hi - lo)
    s = 0.5 * (lo + hi)[:, None] + half[:, None] * _GAUSS_X[None, :]
    wq = half[:, None] * _GAUSS_W[None, :] * mollifier((s - x) / tau) / tau
    h = mesh.h
    elem = np.clip(np.floor(0.5 * (lo + hi) / h).astype(int), 0, mesh.n_h)
    t = s / h - elem[:, None]
    out = np.zeros(mesh.n_h + 2)
    np.add.at(out, elem, np.sum(wq * (1.0 - t), axis=1))
    np.add.at(out, elem + 1, np.sum(wq * t, axis=1))
    return out[1:-1]


def _normalized_representers(space: InnerProductSpace, E):
    g = space.riesz(E)
    return g / np.sqrt(np.sum(E * g, axis=0))


def riesz_point_eval(mesh: Mesh, x, space: InnerProductSpace | None = None) -> np.ndarray:
    """Unit-norm representer of point evaluation at ``x``.

    At mesh nodes this is the nodal interpolant of the continuous H^1_0
    Green's function ``t(1-x) / sqrt(x(1-x))`` (for ``t <= x``).
    """
    space = space or h1_space(mesh.n_h)
    return _normalized_representers(space, point_eval_functional(mesh, x)[:, None])[:, 0]


def riesz_local_average(mesh: Mesh, x, tau, space: InnerProductSpace | None = None) -> np.ndarray:
    """Unit-norm representer of the mollified local average of width ``tau`` centred at ``x``."""
    space = space or h1_space(mesh.n_h)
    return _normalized_representers(space, local_average_functional(mesh, x, tau)[:, None])[:, 0]


class Dictionary:
    """Finite candidate set of normalized sensor representers.

    Parameters
    ----------
    mesh : Mesh
    kind : {"point_eval", "local_average"}
    locations : array
        Sensor centres, strictly inside (0, 1).
    widths : float or array, optional
        Half-widths for local averages.
    """

    def __init__(self, mesh: Mesh, kind="point_eval", locations=None, widths=None):
        if kind not in KINDS:
            raise InvalidInputError(f"unknown dictionary kind {kind!r}")
        self.mesh = mesh
        self.space = h1_space(mesh.n_h)
        self.kind = kind
        if locations is None:
            locations = np.arange(1, 512) / 512.0
        self.locations = np.atleast_1d(np.asarray(locations, dtype=float))
        if np.any(self.locations <= 0) or np.any(self.locations >= 1):
            raise DomainError("dictionary locations must lie strictly inside (0, 1)")
        if kind == "local_average":
            if widths is None:
                raise InvalidInputError("local-average dictionary needs widths")
            self.widths = np.broadcast_to(np.asarray(widths, dtype=float), self.locations.shape).copy()
        else:
            self.widths = None
        self._reps = None

    @classmethod
    def uniform(cls, mesh: Mesh, M=511, kind="point_eval", width=None):
        """``M`` equispaced candidates ``i / (M + 1)``."""
        locs = np.arange(1, M + 1) / (M + 1.0)
        if kind == "local_average":
            keep = (locs - width > 0) & (locs + width < 1)
            locs = locs[keep]
        return cls(mesh, kind, locs, width)

    def __len__(self):
        return self.locations.size

    def functionals(self, idx=None) -> np.ndarray:
        idx = range(len(self)) if idx is None else np.atleast_1d(idx)
        if self.kind == "point_eval":
            cols = [point_eval_functional(self.mesh, self.locations[i]) for i in idx]
        else:
            cols = [local_average_functional(self.mesh, self.locations[i], self.widths[i]) for i in idx]
        return np.column_stack(cols) if cols else np.zeros((self.mesh.n_h, 0))

    @property
    def representers(self) -> np.ndarray:
        """All representers as columns, computed on first access."""
        if self._reps is None:
            self._reps = _normalized_representers(self.space, self.functionals())
        return self._reps

    def selection(self, idx) -> dict:
        idx = list(np.atleast_1d(idx).astype(int))
        out = {"kind": self.kind, "locations": [float(self.locations[i]) for i in idx]}
        out["widths"] = [float(self.widths[i]) for i in idx] if self.widths is not None else []
        return out


@dataclass(eq=False)
class ObservationSetup:
    """Selected sensors with their Gram matrix and an orthonormal basis of ``W``."""

    space: InnerProductSpace
    omegas: np.ndarray
    B: np.ndarray
    W: Subspace
    kind: str = "custom"
    locations: np.ndarray = field(default_factory=lambda: np.zeros(0))
    widths: np.ndarray | None = None
    indices: list | None = None

    @property
    def m(self) -> int:
        return self.omegas.shape[1]

    def coords(self, w):
        """Coordinates of ambient ``w`` (or of its projection) in the orthonormal ``W`` basis."""
        return self.W.basis.T @ (self.space.gram @ np.asarray(w, dtype=float))

    def from_coords(self, c):
        return self.W.basis @ np.asarray(c, dtype=float)

    def from_z(self, z):
        """Ambient ``w = P_W u`` from raw data ``z_i = <omega_i, u>``."""
        return self.omegas @ la.solve(self.B, np.asarray(z, dtype=float), assume_a="pos")

    def selection(self) -> dict:
        return {
            "kind": self.kind,
            "locations": [float(x) for x in self.locations],
            "widths": [float(t) for t in self.widths] if self.widths is not None else [],
        }


def build_observation(selection, space: InnerProductSpace | None = None, meta=None) -> ObservationSetup:
    """Assemble the observation space from representers.

    Parameters
    ----------
    selection : array or tuple
        Either an ``(n_h, m)`` array of representers, or a pair
        ``(dictionary, indices)``.

    Raises
    ------
    ConditioningError
        If the Gram matrix has ``lambda_min <= 1e-12 lambda_max``; the most
        collinear pair of sensors is reported.
    """
    meta = meta or {}
    if isinstance(selection, tuple):
        D, idx = selection
        idx = [int(i) for i in np.atleast_1d(idx)]
        omegas = D.representers[:, idx]
        space = D.space
        meta = {"kind": D.kind, "locations": D.locations[idx],
                "widths": None if D.widths is None else D.widths[idx], "indices": idx}
    else:
        if space is None:
            raise InvalidInputError("explicit representers need their InnerProductSpace")
        omegas = np.asarray(selection, dtype=float)
        if omegas.ndim == 1:
            omegas = omegas[:, None]
    if omegas.shape[1] == 0:
        raise InvalidInputError("observation needs at least one sensor")
    B = omegas.T @ space.gram @ omegas
    B = 0.5 * (B + B.T)
    lam = la.eigvalsh(B)
    if lam[0] <= 1e-12 * lam[-1]:
        d = np.sqrt(np.outer(np.diag(B), np.diag(B)))
        cos = np.abs(B) / d
        np.fill_diagonal(cos, -1.0)
        i, j = np.unravel_index(int(np.argmax(cos)), cos.shape)
        pair = (int(min(i, j)), int(max(i, j)))
        raise ConditioningError(
            f"sensors {pair[0]} and {pair[1]} are nearly dependent (cosine {cos[i, j]:.12f})", pair=pair
        )
    W = orthonormalize(Subspace(space, omegas))
    return ObservationSetup(
        space, omegas, B, W,
        kind=meta.get("kind", "custom"),
        locations=np.asarray(meta.get("locations", np.zeros(0)), dtype=float),
        widths=None if meta.get("widths") is None else np.asarray(meta["widths"], dtype=float),
        indices=meta.get("indices"),
    )


def measure(setup: ObservationSetup, u):
    """Data ``z_i = <omega_i, u>`` and the ambient observation ``w = P_W u``."""
    u = setup.space.check_vector(u)
    z = setup.omegas.T @ (setup.space.gram @ u)
    c = la.solve(setup.B, z, assume_a="pos")
    return z, setup.omegas @ c


def noise_vector(setup: ObservationSetup, noise_level: float, seed) -> np.ndarray:
    """Element of ``W`` with norm exactly ``noise_level`` in a uniformly random direction."""
    if noise_level < 0:
        raise InvalidInputError("noise level must be nonnegative")
    g = np.random.default_rng(seed).standard_normal(setup.m)
    return setup.W.basis @ (noise_level * g / np.linalg.norm(g))


def add_noise(setup: ObservationSetup, data, noise_level: float, seed, kind="w"):
    """Perturb an observation by ``eta in W`` with ``||eta|| = noise_level``.

    ``kind="w"`` perturbs an ambient observation, ``kind="z"`` the raw data
    vector by the corresponding ``<omega_i, eta>``.
    """
    if noise_level == 0:
        return np.array(data, dtype=float, copy=True)
    eta = noise_vector(setup, noise_level, seed)
    if kind == "w":
        return np.asarray(data, dtype=float) + eta
    if kind == "z":
        return np.asarray(data, dtype=float) + setup.omegas.T @ (setup.space.gram @ eta)
    raise InvalidInputError(f"unknown data kind {kind!r}")


def setup_from_selection(sel: dict, mesh: Mesh) -> ObservationSetup:
    kind = sel["kind"]
    locs = np.asarray(sel["locations"], dtype=float)
    widths = sel.get("widths") or None
    D = Dictionary(mesh, kind, locs, widths)
    return build_observation((D, list(range(len(D)))))


def save_selection(path, setup: ObservationSetup):
    Path(path).write_text(json.dumps(setup.selection(), indent=2))


def load_selection(path, mesh: Mesh) -> ObservationSetup:
    sel = json.loads(Path(path).read_text())
    missing = {"kind", "locations"} - set(sel)
    if missing:
        raise InvalidInputError(f"selection file lacks {sorted(missing)}")
    return setup_from_selection(sel, mesh)


def write_measurements(path, params, Z):
    """CSV with one row per snapshot: parameter entries then data entries."""
    params = np.atleast_2d(params)
    Z = np.atleast_2d(Z)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"y{i + 1}" for i in range(params.shape[1])] + [f"z{i + 1}" for i in range(Z.shape[1])])
        for y, z in zip(params, Z):
            wr.writerow([repr(float(v)) for v in np.concatenate([y, z])])


def read_measurements(path, d):
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr[:, :d], arr[:, d:]
