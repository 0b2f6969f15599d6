"""Command-line driver: JSON config in, CSV/JSON artifacts out.

Every command takes a config file (``report`` takes a results directory)
and writes into the config's ``output`` directory, which also holds a
``manifest.json`` describing the run. Relative paths in a config are
resolved against the config file's directory. Expensive stages (snapshots,
admissible families) are cached under ``cache_dir`` keyed by a content hash
of everything they depend on.

Exit codes: 0 success, 2 invalid config or input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import pickle
import platform
import sys
import time
import traceback
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__
from .affine_optimal import build_problem, primal_dual_solve, subgradient_baseline
from .benchmarks import compare_estimators, held_out_points
from .errors import DomainError, InvalidInputError, RedinvError
from .forward_pde import (ParameterBox, ParametricModel, TrainingSet, bump_testbed, elliptic_testbed,
                          greedy_reduced_basis, sample_training_set)
from .joint_greedy import geim, nested_greedy
from .pbdw import PbdwOperator
from .piecewise import build_family, estimate_errors
from .sensing import Dictionary, build_observation, load_selection, save_selection
from .sensor_greedy import collective_omp, fourier_space, worst_case_omp

logger = logging.getLogger("redinv")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_FIELD = {
    "oneOf": [
        {"type": "number"},
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["breaks", "values"],
            "properties": {"breaks": {"type": "array", "items": _NUM},
                           "values": {"type": "array", "items": _NUM, "minItems": 1}},
        },
    ]
}
_BOX = {
    "type": "object",
    "additionalProperties": False,
    "required": ["lo", "hi"],
    "properties": {"lo": {"type": "array", "items": _NUM, "minItems": 1},
                   "hi": {"type": "array", "items": _NUM, "minItems": 1}},
}

MODEL_SCHEMAS = {
    "elliptic": {
        "type": "object",
        "additionalProperties": False,
        "required": ["testbed"],
        "properties": {"testbed": {"const": "elliptic"}, "n_h": _INT1, "d": _INT1, "Y": _BOX},
    },
    "bump": {
        "type": "object",
        "additionalProperties": False,
        "required": ["testbed"],
        "properties": {"testbed": {"const": "bump"}, "n_h": _INT1, "delta": _POS, "width": _POS},
    },
    "custom": {
        "type": "object",
        "additionalProperties": False,
        "required": ["n_h", "abar", "psis", "Y"],
        "properties": {
            "n_h": _INT1, "abar": _FIELD, "psis": {"type": "array", "items": _FIELD, "minItems": 1},
            "source": _FIELD, "source_psis": {"type": "array", "items": _FIELD}, "Y": _BOX,
            "a_min": _POS, "name": {"type": "string"},
        },
    },
}

SENSOR_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["point_eval", "local_average"]},
        "M": _INT1,
        "width": _POS,
        "indices": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "locations": {"type": "array", "items": _NUM, "minItems": 1},
        "selection": {"type": "string"},
    },
}

METHOD_SCHEMAS = {
    "pbdw": {"n": {"type": "integer", "minimum": 0}, "offset": {"enum": ["none", "center", "mean"]}},
    "affine_opt": {"N": _INT1, "iters": _INT1, "solver": {"enum": ["primal_dual", "subgradient"]},
                   "gamma_G": _POS, "gamma_F": _POS},
    "omp_place": {"variant": {"enum": ["collective", "worst_case"]}, "n": _INT1,
                  "beta_star": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                  "kappa": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                  "m_max": _INT1, "space": {"enum": ["greedy", "fourier"]}},
    "nested": {"beta_lower": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
               "eps_stop": {"type": "number", "minimum": 0}, "n_max": _INT1, "m_max": _INT1},
    "geim": {"n_max": _INT1, "eps_stop": {"type": "number", "minimum": 0}},
    "piecewise": {"mode": {"enum": ["sigma", "eps_mu"]}, "sigma": _POS, "eps": _POS,
                  "mu": {"type": "number", "minimum": 1}, "K_max": _INT1,
                  "strategy": {"enum": ["greedy_coordinate", "full_dyadic"]}, "n_max": _INT1,
                  "selection": {"enum": ["surrogate", "ideal", "oracle"]},
                  "surrogate_box": {"enum": ["global", "cell"]}},
    "benchmark": {"n": _INT1, "N": _INT1, "sigma": _POS, "sigmas": {"type": "array", "items": {"type": "number", "minimum": 0}},
                  "iters": _INT1, "K_max": _INT1, "strategy": {"enum": ["greedy_coordinate", "full_dyadic"]},
                  "estimators": {"type": "array", "items": {"enum": ["pbdw", "pbdw_affine", "affine_opt", "piecewise"]}}},
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "output", "model", "training", "method"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "output": {"type": "string", "minLength": 1},
        "cache_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "threads": _INT1,
        "model": {"type": "object"},
        "training": {
            "type": "object",
            "additionalProperties": False,
            "required": ["resolution"],
            "properties": {"resolution": {"oneOf": [_INT1, {"type": "array", "items": _INT1, "minItems": 1}]}},
        },
        "sensors": SENSOR_SCHEMA,
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "required": ["level", "seed"],
            "properties": {"level": {"type": "number", "minimum": 0}, "seed": {"type": "integer", "minimum": 0}},
        },
        "method": {
            "type": "object",
            "required": ["name"],
            "properties": {"name": {"enum": sorted(METHOD_SCHEMAS)}},
        },
    },
}


class ConfigError(Exception):
    """Config failed validation; ``path`` is the dotted location of the offending field."""

    def __init__(self, msg, path=""):
        super().__init__(msg)
        self.path = path


def _validate(instance, schema, prefix=""):
    validator = jsonschema.Draft202012Validator(schema)
    err = jsonschema.exceptions.best_match(validator.iter_errors(instance))
    if err is not None:
        path = ".".join([prefix] * bool(prefix) + [str(p) for p in err.absolute_path])
        raise ConfigError(err.message, path)


def validate_config(cfg) -> dict:
    """Schema and consistency checks; raises :class:`ConfigError` naming the field path."""
    _validate(cfg, CONFIG_SCHEMA)
    model = cfg["model"]
    kind = model.get("testbed", "custom")
    if kind not in MODEL_SCHEMAS:
        raise ConfigError(f"unknown testbed {kind!r}", "model.testbed")
    _validate(model, MODEL_SCHEMAS[kind], "model")
    meth = cfg["method"]
    props = dict(METHOD_SCHEMAS[meth["name"]], name={"const": meth["name"]})
    _validate(meth, {"type": "object", "additionalProperties": False, "properties": props}, "method")
    if "Y" in model:
        lo, hi = model["Y"]["lo"], model["Y"]["hi"]
        if len(lo) != len(hi):
            raise ConfigError("lo and hi differ in length", "model.Y.lo")
        for j, (a, b) in enumerate(zip(lo, hi)):
            if not a < b:
                raise ConfigError(f"lo[{j}] = {a} must be < hi[{j}] = {b}", "model.Y.lo")
        if kind == "custom" and len(model["psis"]) != len(lo):
            raise ConfigError("one coefficient field per parameter is required", "model.psis")
    sens = cfg.get("sensors", {})
    given = [k for k in ("indices", "locations", "selection") if k in sens]
    if len(given) > 1:
        raise ConfigError("give at most one of indices, locations, selection", "sensors")
    if sens.get("kind") == "local_average" and "width" not in sens and "selection" not in sens:
        raise ConfigError("local-average sensors need a width", "sensors.width")
    name = meth["name"]
    if name in ("pbdw", "affine_opt", "piecewise", "benchmark") and not given:
        raise ConfigError(f"method {name} needs explicit sensors (indices, locations or selection)", "sensors")
    if name == "piecewise":
        mode = meth.get("mode", "sigma")
        need = ["sigma"] if mode == "sigma" else ["eps", "mu"]
        for k in need:
            if k not in meth:
                raise ConfigError(f"{mode} mode needs {k}", f"method.{k}")
    if name == "nested":
        for k in ("beta_lower", "eps_stop", "n_max"):
            if k not in meth:
                raise ConfigError(f"nested greedy needs {k}", f"method.{k}")
    if name == "geim" and "n_max" not in meth:
        raise ConfigError("geim needs n_max", "method.n_max")
    if name == "omp_place":
        for k in ("n", "beta_star"):
            if k not in meth:
                raise ConfigError(f"omp_place needs {k}", f"method.{k}")
    return cfg


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


class Experiment:
    """Resolved config: model, training sets, observation setup and output paths."""

    def __init__(self, cfg: dict, base: Path, threads: int = 1):
        self.cfg = cfg
        self.base = base
        self.name = cfg["name"]
        self.out = self._path(cfg["output"])
        self.cache = self._path(cfg["cache_dir"]) if "cache_dir" in cfg else self.out / "cache"
        self.threads = threads
        self.method = cfg["method"]
        self.model = self._make_model(cfg["model"])
        self.resolution = cfg["training"]["resolution"]
        self.config_hash = _hash(cfg)
        self._T = self._H = self._setup = self._dict = None

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    @staticmethod
    def _make_model(desc) -> ParametricModel:
        kind = desc.get("testbed", "custom")
        if kind == "elliptic":
            d = desc.get("d", 2)
            box = ParameterBox(desc["Y"]["lo"], desc["Y"]["hi"]) if "Y" in desc else None
            if box is not None and box.d != d:
                raise ConfigError(f"Y has {box.d} entries but d = {d}", "model.Y.lo")
            return elliptic_testbed(desc.get("n_h", 255), d, box)
        if kind == "bump":
            return bump_testbed(desc.get("n_h", 255), desc.get("delta", 0.02), desc.get("width", 0.05))
        box = ParameterBox(desc["Y"]["lo"], desc["Y"]["hi"])
        return ParametricModel(desc["n_h"], desc["abar"], desc["psis"], box, desc.get("source", 1.0),
                               desc.get("source_psis"), desc.get("a_min", 1e-8), desc.get("name", "custom"))

    # ---- cached data -------------------------------------------------------
    def _cached_set(self, tag, points=None):
        key = _hash({"model": self.model.to_dict(), "resolution": self.resolution, "tag": tag})
        d = self.cache / f"{tag}-{key}"
        if (d / "manifest.json").exists():
            logger.info("reusing cached %s set %s", tag, d.name)
            return TrainingSet.load(d)
        if points is None:
            T = sample_training_set(self.model, self.resolution, workers=self.threads)
        else:
            T = sample_training_set(self.model, points=points, workers=self.threads)
        T.save(d)
        return T

    @property
    def T(self) -> TrainingSet:
        if self._T is None:
            self._T = self._cached_set("train")
        return self._T

    @property
    def held(self) -> TrainingSet:
        if self._H is None:
            self._H = self._cached_set("heldout", held_out_points(self.model, self.resolution))
        return self._H

    @property
    def dictionary(self) -> Dictionary:
        if self._dict is None:
            s = self.cfg.get("sensors", {})
            kind = s.get("kind", "point_eval")
            if "locations" in s:
                self._dict = Dictionary(self.model.mesh, kind, s["locations"], s.get("width"))
            else:
                self._dict = Dictionary.uniform(self.model.mesh, s.get("M", 511), kind, s.get("width"))
        return self._dict

    @property
    def setup(self):
        if self._setup is None:
            s = self.cfg.get("sensors", {})
            if "selection" in s:
                self._setup = load_selection(self._path(s["selection"]), self.model.mesh)
            elif "indices" in s:
                D = self.dictionary
                bad = [i for i in s["indices"] if i >= len(D)]
                if bad:
                    raise ConfigError(f"index {bad[0]} outside a dictionary of {len(D)}", "sensors.indices")
                self._setup = build_observation((D, s["indices"]))
            else:
                self._setup = build_observation((self.dictionary, list(range(len(self.dictionary)))))
        return self._setup

    # ---- output helpers ---------------------------------------------------
    def stage_dir(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out

    def write_errors(self, errs_train, errs_held, extra=None):
        path = self.stage_dir() / "errors.csv"
        d = self.model.d
        extra = extra or {}
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["split", "index"] + [f"y{i + 1}" for i in range(d)] + ["error"] + list(extra))
            for split, T, e in (("train", self.T, errs_train), ("heldout", self.held, errs_held)):
                if e is None:
                    continue
                for j in range(T.J):
                    row = [split, j] + [repr(float(v)) for v in T.params[j]] + [repr(float(e[j]))]
                    row += [str(extra[k][split][j]) for k in extra]
                    wr.writerow(row)
        return path

    def update_manifest(self, command, timing, outputs, summary):
        path = self.stage_dir() / "manifest.json"
        man = json.loads(path.read_text()) if path.exists() else {}
        if man.get("config_hash") not in (None, self.config_hash):
            man = {}
        man.update({
            "name": self.name,
            "method": self.method["name"],
            "config_hash": self.config_hash,
            "config": self.cfg,
            "model_fingerprint": self.model.fingerprint(),
            "versions": {"redinv": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
        })
        man.setdefault("stages", {})[command] = {"seconds": round(timing, 3), "outputs": sorted(outputs)}
        if summary:
            man.setdefault("summary", {}).update(summary)
        path.write_text(json.dumps(man, indent=2, sort_keys=True))


def _err_summary(prefix, e):
    if e is None or len(e) == 0:
        return {}
    return {f"{prefix}_worst": float(np.max(e)), f"{prefix}_mean": float(np.mean(e))}


# ---- stages -----------------------------------------------------------------
def stage_snapshots(ex: Experiment):
    T, H = ex.T, ex.held
    out = ex.stage_dir() / "snapshots.csv"
    norms = {"train": T.space.norm(T.snapshots), "heldout": H.space.norm(H.snapshots)}
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["split", "index"] + [f"y{i + 1}" for i in range(ex.model.d)] + ["norm"])
        for split, S in (("train", T), ("heldout", H)):
            for j in range(S.J):
                wr.writerow([split, j] + [repr(float(v)) for v in S.params[j]] + [repr(float(norms[split][j]))])
    return [out.name], {"J_train": T.J, "J_heldout": H.J}


def _reduced_space(ex: Experiment, n, offset=None):
    rb = greedy_reduced_basis(ex.T, min(n, ex.T.J), offset=offset)
    return rb.space(rb.basis.dim)


def _observe(ex: Experiment, S, seed_offset=0):
    """Ambient observations of the columns of ``S``, perturbed when the config asks for noise."""
    setup = ex.setup
    w = setup.W.basis @ setup.coords(S)
    noise = ex.cfg.get("noise")
    if noise and noise["level"] > 0:
        rng = np.random.default_rng([noise["seed"], seed_offset])
        g = rng.standard_normal((setup.m, S.shape[1]))
        w = w + setup.W.basis @ (noise["level"] * g / np.linalg.norm(g, axis=0))
    return w


def _fit_pbdw(ex: Experiment):
    meth = ex.method
    setup = ex.setup
    n = meth.get("n", setup.m)
    offset = {"none": None, "center": lambda: ex.model.solve(ex.model.box.center),
              "mean": lambda: ex.T.snapshots.mean(axis=1)}[meth.get("offset", "none")]
    ubar = offset() if offset is not None else None
    op = PbdwOperator.fit(_reduced_space(ex, n, ubar), setup, offset=ubar)
    errs = [ex.T.space.norm(S - op(_observe(ex, S, k))) for k, S in enumerate((ex.T.snapshots, ex.held.snapshots))]
    path = ex.stage_dir() / "operator.npz"
    np.savez(path, V=op.V.basis, W=setup.W.basis, offset=np.zeros(0) if ubar is None else ubar)
    save_selection(ex.out / "selection.json", setup)
    summary = {"n": op.n, "m": op.m, "beta": op.beta, "mu": op.mu}
    return errs, ["operator.npz", "selection.json"], summary


def _fit_affine(ex: Experiment):
    meth = ex.method
    setup = ex.setup
    Z = greedy_reduced_basis(ex.T, min(meth.get("N", 2 * setup.m), ex.T.J)).basis
    prob = build_problem(ex.T, setup, Z)
    iters = meth.get("iters", 20000)
    if meth.get("solver", "primal_dual") == "subgradient":
        res = subgradient_baseline(prob, iters=iters)
    else:
        res = primal_dual_solve(prob, meth.get("gamma_G"), meth.get("gamma_F"), iters=iters)
    amap = res.map
    errs = [ex.T.space.norm(S - amap.apply_ambient(_observe(ex, S, k)))
            for k, S in enumerate((ex.T.snapshots, ex.held.snapshots))]
    amap.save(ex.stage_dir() / "affine_map")
    with open(ex.out / "objective.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "best_objective"])
        for i, v in enumerate(res.history):
            wr.writerow([10 * i, repr(float(v))])
    summary = {"m": setup.m, "N": prob.N, "objective": float(res.objective), "iterations": res.iterations,
               "eps_N": float(prob.eps_N), "eps_sum": float(prob.eps_sum)}
    return errs, ["affine_map.json", "affine_map.npz", "objective.csv"], summary


def _fit_joint(ex: Experiment):
    meth = ex.method
    D = ex.dictionary
    if meth["name"] == "nested":
        run = nested_greedy(ex.T, D, meth["beta_lower"], meth["eps_stop"], meth["n_max"], meth.get("m_max"))
    else:
        run = geim(ex.T, D, meth["n_max"], meth.get("eps_stop", 0.0))
    run.to_csv(ex.stage_dir() / "greedy.csv")
    outputs = ["greedy.csv"]
    summary = {"n": run.n, "m": len(run.sensors), "m_of_n": list(run.m_of_n), "partial": run.partial,
               "reason": run.reason}
    if run.partial or not run.sensors:
        return [None, None], outputs, summary
    op = run.operator()
    ex._setup = op.setup
    errs = [ex.T.space.norm(S - op(_observe(ex, S, k))) for k, S in enumerate((ex.T.snapshots, ex.held.snapshots))]
    save_selection(ex.out / "selection.json", op.setup)
    summary.update({"beta": op.beta, "mu": op.mu})
    return errs, outputs + ["selection.json"], summary


def stage_fit(ex: Experiment):
    name = ex.method["name"]
    fitters = {"pbdw": _fit_pbdw, "affine_opt": _fit_affine, "nested": _fit_joint, "geim": _fit_joint}
    if name not in fitters:
        raise ConfigError(f"fit does not handle method {name!r}", "method.name")
    (e_train, e_held), outputs, summary = fitters[name](ex)
    if e_train is not None:
        ex.write_errors(e_train, e_held)
        outputs.append("errors.csv")
    summary.update(_err_summary("train", e_train))
    summary.update(_err_summary("heldout", e_held))
    return outputs, summary


def stage_place(ex: Experiment):
    meth = ex.method
    if meth["name"] != "omp_place":
        raise ConfigError("place needs method omp_place", "method.name")
    D = ex.dictionary
    n = meth["n"]
    V = fourier_space(ex.model.mesh, n) if meth.get("space", "greedy") == "fourier" else _reduced_space(ex, n)
    omp = collective_omp if meth.get("variant", "worst_case") == "collective" else worst_case_omp
    initial = ex.cfg.get("sensors", {}).get("indices")
    run = omp(V, D, meth["beta_star"], meth.get("kappa", 1.0), meth.get("m_max", 200), initial=initial)
    run.to_csv(ex.stage_dir() / "placement.csv")
    (ex.out / "selection.json").write_text(json.dumps(D.selection(run.selected), indent=2))
    summary = {"n": V.dim, "m": run.m, "beta": float(run.beta_history[-1]),
               "mu": float(1 / run.beta_history[-1]) if run.beta_history[-1] > 0 else float("inf"),
               "reached": bool(run.reached)}
    return ["placement.csv", "selection.json"], summary


def _family(ex: Experiment):
    meth = ex.method
    fam_params = {k: meth.get(k) for k in ("mode", "sigma", "eps", "mu", "K_max", "strategy", "n_max")}
    key = _hash({"model": ex.model.to_dict(), "resolution": ex.resolution, "sensors": ex.setup.selection(),
                 "params": fam_params})
    path = ex.cache / f"family-{key}.pkl"
    if path.exists():
        logger.info("reusing cached family %s", path.name)
        with open(path, "rb") as fh:
            return pickle.load(fh)
    fam = build_family(ex.model, ex.T, ex.setup, meth.get("mode", "sigma"), meth.get("sigma"), meth.get("eps"),
                       meth.get("mu"), meth.get("K_max", 64), meth.get("strategy", "greedy_coordinate"),
                       meth.get("n_max"))
    fam._ops = None
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump(fam, fh)
    return fam


def stage_family(ex: Experiment):
    if ex.method["name"] != "piecewise":
        raise ConfigError("family needs method piecewise", "method.name")
    fam = _family(ex)
    fam.save(ex.stage_dir() / "family.json")
    with open(ex.out / "cells.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        d = ex.model.d
        wr.writerow(["k", "level"] + [f"lo{i + 1}" for i in range(d)] + [f"hi{i + 1}" for i in range(d)]
                    + ["n", "tau", "J_local"])
        for k, c in enumerate(fam.cells):
            wr.writerow([k, c.level] + [repr(float(v)) for v in c.box.lo] + [repr(float(v)) for v in c.box.hi]
                        + [c.chosen_n, repr(float(c.tau)), len(c.train_idx)])
    summary = {"K": fam.K, "partial": fam.partial, "max_tau": float(fam.diagnostics["max_tau"]), "m": ex.setup.m}
    return ["family.json", "family_cells.npz", "cells.csv"], summary


def stage_estimate(ex: Experiment):
    if ex.method["name"] != "piecewise":
        raise ConfigError("estimate needs method piecewise", "method.name")
    meth = ex.method
    fam = _family(ex)
    sel = meth.get("selection", "surrogate")
    box = meth.get("surrogate_box", "global")
    errs, cells = [], {"train": None, "heldout": None}
    for k, (split, S) in enumerate((("train", ex.T.snapshots), ("heldout", ex.held.snapshots))):
        noise = _observe(ex, S, k) - ex.setup.W.basis @ ex.setup.coords(S) if ex.cfg.get("noise") else None
        e, ks = estimate_errors(fam, ex.model, ex.setup, S, sel, T=ex.T, noise=noise, surrogate_box=box)
        errs.append(e)
        cells[split] = ks
    ex.write_errors(errs[0], errs[1], extra={"cell": cells})
    summary = {"K": fam.K, "m": ex.setup.m, "selection": sel}
    summary.update(_err_summary("train", errs[0]))
    summary.update(_err_summary("heldout", errs[1]))
    return ["errors.csv"], summary


def stage_benchmark(ex: Experiment):
    if ex.method["name"] != "benchmark":
        raise ConfigError("benchmark needs method benchmark", "method.name")
    meth = ex.method
    rep = compare_estimators(ex.model, ex.setup, ex.resolution, n=meth.get("n"), N=meth.get("N"),
                             sigma=meth.get("sigma"), sigmas=meth.get("sigmas", (0.0, 1e-3, 1e-2, 1e-1)),
                             pd_iters=meth.get("iters", 20000), K_max=meth.get("K_max", 64),
                             strategy=meth.get("strategy", "greedy_coordinate"), T=ex.T, held=ex.held,
                             estimators=meth.get("estimators"))
    rep.to_csv(ex.stage_dir() / "benchmark.csv")
    rep.to_json(ex.out / "benchmark.json")
    summary = {"m": ex.setup.m, "estimators": rep.estimator_errors,
               "delta_tilde": {repr(float(k)): v for k, v in sorted(rep.delta_tilde.items())}}
    worst = [v["worst"] for v in rep.estimator_errors.values()]
    if worst:
        summary["heldout_worst"] = float(min(worst))
    return ["benchmark.csv", "benchmark.json"], summary


STAGES = {"snapshots": stage_snapshots, "place": stage_place, "fit": stage_fit, "family": stage_family,
          "estimate": stage_estimate, "benchmark": stage_benchmark}

PIPELINES = {"pbdw": ["snapshots", "fit"], "affine_opt": ["snapshots", "fit"], "nested": ["snapshots", "fit"],
             "geim": ["snapshots", "fit"], "omp_place": ["snapshots", "place"],
             "piecewise": ["snapshots", "family", "estimate"], "benchmark": ["snapshots", "benchmark"]}


def load_config(path) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return validate_config(cfg)


def resolve_threads(flag=None, cfg=None) -> int:
    """Pool size: ``REDINV_THREADS`` beats the ``--threads`` flag, which beats the config value."""
    env = os.environ.get("REDINV_THREADS")
    if env is not None:
        try:
            val = int(env)
        except ValueError:
            raise ConfigError(f"REDINV_THREADS must be a positive integer, got {env!r}", "REDINV_THREADS") from None
        if val < 1:
            raise ConfigError(f"REDINV_THREADS must be a positive integer, got {env!r}", "REDINV_THREADS")
        return val
    if flag is not None:
        return flag
    return (cfg or {}).get("threads", 1)


def run_stages(config_path, stages, threads=None) -> Experiment:
    cfg = load_config(config_path)
    ex = Experiment(cfg, Path(config_path).resolve().parent, resolve_threads(threads, cfg))
    for st in stages:
        t0 = time.perf_counter()
        outputs, summary = STAGES[st](ex)
        ex.update_manifest(st, time.perf_counter() - t0, outputs, summary)
    return ex


# ---- report -----------------------------------------------------------------
REPORT_COLS = [("name", 24, "s"), ("method", 11, "s"), ("worst", 11, "e"), ("mean", 11, "e"), ("beta", 9, "f"),
               ("mu", 9, "f"), ("K", 4, "d"), ("m", 4, "d"), ("n", 4, "d")]


def _fmt(v, w, kind):
    if v is None or v == "":
        return "-".rjust(w)
    if kind == "s":
        return str(v)[:w].ljust(w)
    if kind == "d":
        return str(v).rjust(w)
    if kind == "f":
        return f"{v:{w}.4f}"
    return f"{v:{w}.3e}"


def collect_runs(results_dir) -> list:
    root = Path(results_dir)
    if not root.is_dir():
        raise ConfigError(f"results directory {root} not found")
    mans = sorted(root.glob("manifest.json")) + sorted(root.glob("*/manifest.json"))
    orphans = [p for p in sorted(root.glob("*/errors.csv")) if not (p.parent / "manifest.json").exists()]
    if orphans:
        raise ConfigError(f"missing manifest in {orphans[0].parent}")
    rows = []
    for p in mans:
        man = json.loads(p.read_text())
        s = man.get("summary", {})
        row = {"name": man["name"], "method": man["method"],
               "worst": s.get("heldout_worst"), "mean": s.get("heldout_mean"), "beta": s.get("beta"),
               "mu": s.get("mu"), "K": s.get("K"), "m": s.get("m"), "n": s.get("n"),
               "m_of_n": s.get("m_of_n"), "delta_tilde": s.get("delta_tilde", {}), "path": str(p.parent)}
        rows.append(row)
    return sorted(rows, key=lambda r: r["name"])


def format_report(rows) -> str:
    if not rows:
        return "no runs"
    sigmas = sorted({k for r in rows for k in r["delta_tilde"]}, key=float)
    head = " ".join(c.ljust(w) if k == "s" else c.rjust(w) for c, w, k in REPORT_COLS)
    head += "".join(" " + f"dt[{s}]".rjust(11) for s in sigmas)
    lines = [head, "-" * len(head)]
    for r in rows:
        line = " ".join(_fmt(r[c], w, k) for c, w, k in REPORT_COLS)
        line += "".join(" " + _fmt(r["delta_tilde"].get(s), 11, "e") for s in sigmas)
        lines.append(line)
    return "\n".join(lines)


def cmd_report(results_dir, as_json=False) -> int:
    rows = collect_runs(results_dir)
    payload = json.dumps({"runs": rows}, indent=2, sort_keys=True)
    if rows:
        (Path(results_dir) / "report.json").write_text(payload)
    print(payload if as_json else format_report(rows))
    return EXIT_OK


# ---- entry point --------------------------------------------------------------
def _failing_op(exc) -> str:
    frames = [f for f in traceback.extract_tb(exc.__traceback__)]
    for f in reversed(frames):
        p = Path(f.filename)
        if p.parent.name == "redinv" and p.stem != "cli":
            return f"{p.stem}.{f.name}"
    return "cli"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="redinv", description="Reduced-model state estimation experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in [("snapshots", "solve the model on the training and held-out grids"),
                           ("place", "greedy sensor placement (method omp_place)"),
                           ("fit", "fit pbdw, affine_opt, nested or geim and report errors"),
                           ("family", "build an admissible piecewise family"),
                           ("estimate", "piecewise estimation on the training and held-out sets"),
                           ("benchmark", "estimator comparison table"),
                           ("run", "run the whole pipeline for the config's method")]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="JSON experiment config")
        p.add_argument("--threads", type=int, default=None, help="worker pool size (REDINV_THREADS overrides)")
    p = sub.add_parser("report", help="summarize the runs found in a results directory")
    p.add_argument("results", help="results directory")
    p.add_argument("--json", action="store_true", help="print the machine-readable table")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.results, args.json)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1", "threads")
        if args.command == "run":
            method = load_config(args.config)["method"]["name"]
            stages = PIPELINES[method]
        else:
            stages = [args.command]
        run_stages(args.config, stages, args.threads)
        return EXIT_OK
    except ConfigError as e:
        where = f" at {e.path}" if e.path else ""
        print(f"redinv: config error{where}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (InvalidInputError, DomainError) as e:
        print(f"redinv: invalid input in {_failing_op(e)}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (RedinvError, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"redinv: numerical failure in {_failing_op(e)}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
