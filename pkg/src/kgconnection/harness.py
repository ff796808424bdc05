"""Command line harness: scenario configuration, checks, reports and golden regression.

    kgconnection report --config scenario.toml --out out/ --workers 2 --golden golden.json

Exit codes: 0 all checks pass, 1 a check failed, 2 usage or configuration error,
3 internal error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import ConfigError, KGError, PreconditionError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3

ALL_CHECKS = (
    "validate", "evolve", "bogoliubov", "shale", "implementer", "cocycle",
    "covariance", "locality", "causality", "holonomy", "stress", "sweep",
)
SUBCOMMANDS = {
    "validate": ("validate",),
    "evolve": ("evolve",),
    "bogoliubov": ("bogoliubov", "shale"),
    "implement": ("implementer", "cocycle"),
    "axioms": ("covariance", "locality", "causality", "holonomy"),
    "stress": ("stress",),
    "sweep": ("sweep",),
    "report": None,
}
GROUPS = ("main", "h1", "h2", "h3")

# tolerances: upper bounds unless the key starts with "min_"
DEFAULT_TOLERANCES = {
    "validate.min_margin": 0.1,
    "evolve.symplectic_defect": 1e-7,
    "evolve.flat_exact_defect": 1e-8,
    "evolve.flat_rk4_defect": 1e-8,
    "bogoliubov.qdq_minus_rdr": 1e-8,
    "bogoliubov.K_symmetry": 1e-10,
    "bogoliubov.q_singular_deficit": 1e-10,
    "bogoliubov.op_norm_K": 1.0,
    "bogoliubov.q_inv_dual_formula": 1e-10,
    "shale.tail_fraction": 0.01,
    "shale.min_decay_rate": 4.0,
    "implementer.squeeze_coefficients": 1e-10,
    "implementer.vacuum_overlap": 1e-10,
    "implementer.intertwining": 1e-6,
    "cocycle.phase_mismatch": 1e-6,
    "cocycle.modulus_deviation": 1e-8,
    "covariance.band_defect": 1e-6,
    "covariance.fock_distance": 1e-6,
    "covariance.min_refinement_ratio": 4.0,
    "locality.smooth_defect_outside": 1e-6,
    "locality.fock_commutator": 1e-6,
    "causality.map_defect": 1e-6,
    "causality.fock_distance": 1e-5,
    "holonomy.off_scalar_defect": 1e-6,
    "holonomy.abs_scalar_deviation": 1e-8,
    "holonomy.path_independence": 1e-6,
    "holonomy.reverse_conjugation": 1e-6,
    "stress.min_convergence_order": 1.95,
    "stress.linearity_defect": 1e-6,
    "stress.lie_derivative_norm": 1e-5,
    "stress.sector_leakage": 1e-4,
    "sweep.min_median_order": 1.95,
    "sweep.vacuum_chain_rule_defect": 1e-8,
}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SchemaIssue:
    code: str
    path: str
    line: int | None
    message: str

    def __str__(self):
        where = f" (line {self.line})" if self.line else ""
        return f"[{self.code}] {self.path}{where}: {self.message}"


class ConfigSchemaError(ConfigError):
    def __init__(self, issues: list[SchemaIssue]):
        self.issues = issues
        super().__init__("; ".join(str(i) for i in issues), issues[0].code)

    def __str__(self):
        return "\n".join(str(i) for i in self.issues)


_SCHEMA = {
    "scenario": "str",
    "seed": "int",
    "checks": "list[str]",
    "grid": {"n_x": "int", "circumference": "float", "t_min": "float", "t_max": "float",
             "dt": "float", "mass": "float", "substeps": "int"},
    "fock": {"k_max": "int", "n_max": "int", "n_interior": "int"},
    "perturbations": [{"kind": "str", "center": "pair", "radii": "pair", "amplitude": "float",
                       "sharpness": "pair", "profile": "str", "group": "str"}],
    "covariance": {"t0": "float", "x0": "float", "r_t": "float", "r_x": "float",
                   "beta_t": "float", "beta_x": "float", "s": "float"},
    "shale": {"cutoffs": "list[int]"},
    "tolerances": "table[float]",
}


def default_config() -> dict:
    return {
        "scenario": "unnamed",
        "seed": 0,
        "checks": list(ALL_CHECKS),
        "grid": {"n_x": 64, "circumference": 8 * math.pi, "t_min": -3.0, "t_max": 3.0,
                 "dt": 0.02, "mass": 1.0, "substeps": 5},
        "fock": {"k_max": 3, "n_max": 8, "n_interior": 2},
        "perturbations": [],
        "covariance": {"t0": 0.0, "x0": 0.0, "r_t": 2.0, "r_x": 4.0, "beta_t": 4.0, "beta_x": 8.0, "s": 0.2},
        "shale": {"cutoffs": [3, 7, 11, 15]},
        "tolerances": {},
    }


_PERT_DEFAULTS = {"amplitude": 0.1, "sharpness": [1.0, 1.0], "profile": "bump", "group": "main",
                  "center": [0.0, 0.0], "radii": [1.0, 1.0]}


def _line_index(text: str) -> dict:
    """Map (table path, key) -> line number from a plain scan of the TOML text."""
    out = {}
    table: tuple = ()
    counts: dict = {}
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.match(r"^\[\[\s*([\w.-]+)\s*\]\]$", line)
        if m:
            name = m.group(1)
            counts[name] = counts.get(name, -1) + 1
            table = (name, counts[name])
            out.setdefault((table, None), i)
            continue
        m = re.match(r"^\[\s*([\w.-]+)\s*\]$", line)
        if m:
            table = (m.group(1),)
            out.setdefault((table, None), i)
            continue
        m = re.match(r'^"?([\w-]+)"?\s*=', line)
        if m:
            out.setdefault((table, m.group(1)), i)
    return out


def _typecheck(value, kind: str) -> bool:
    num = (int, float)
    if kind == "str":
        return isinstance(value, str)
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "float":
        return isinstance(value, num) and not isinstance(value, bool)
    if kind == "pair":
        return isinstance(value, list) and len(value) == 2 and all(_typecheck(v, "float") for v in value)
    if kind == "list[str]":
        return isinstance(value, list) and all(isinstance(v, str) for v in value)
    if kind == "list[int]":
        return isinstance(value, list) and all(_typecheck(v, "int") for v in value)
    raise AssertionError(kind)


def _coerce(value, kind: str):
    if kind == "float":
        return float(value)
    if kind == "pair":
        return [float(v) for v in value]
    if kind == "list[int]":
        return [int(v) for v in value]
    if kind == "list[str]":
        return list(value)
    return value


def parse_config(text: str) -> "ScenarioConfig":
    """Parse and validate a TOML scenario; raises ConfigSchemaError listing every problem."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigSchemaError([SchemaIssue("CFG_SYNTAX", "<document>", int(m.group(1)) if m else None, str(e))])
    lines = _line_index(text)
    issues: list[SchemaIssue] = []

    def issue(code, table, key, msg):
        path = ".".join(str(p) for p in table + ((key,) if key else ()))
        ln = lines.get((table, key)) or lines.get((table, None))
        issues.append(SchemaIssue(code, path or "<document>", ln, msg))

    cfg = default_config()
    for key, value in raw.items():
        kind = _SCHEMA.get(key)
        if kind is None:
            issue("CFG_UNKNOWN_KEY", (), key, "unknown key")
        elif isinstance(kind, dict):
            if not isinstance(value, dict):
                issue("CFG_TYPE", (), key, "expected a table")
                continue
            for k, v in value.items():
                if k not in kind:
                    issue("CFG_UNKNOWN_KEY", (key,), k, "unknown key")
                elif not _typecheck(v, kind[k]):
                    issue("CFG_TYPE", (key,), k, f"expected {kind[k]}")
                else:
                    cfg[key][k] = _coerce(v, kind[k])
        elif isinstance(kind, list):
            if not isinstance(value, list) or not all(isinstance(t, dict) for t in value):
                issue("CFG_TYPE", (), key, "expected an array of tables")
                continue
            cfg[key] = []
            for idx, tab in enumerate(value):
                entry = dict(_PERT_DEFAULTS)
                where = (key, idx)
                for k, v in tab.items():
                    if k not in kind[0]:
                        issue("CFG_UNKNOWN_KEY", where, k, "unknown key")
                    elif not _typecheck(v, kind[0][k]):
                        issue("CFG_TYPE", where, k, f"expected {kind[0][k]}")
                    else:
                        entry[k] = _coerce(v, kind[0][k])
                if "kind" not in tab:
                    issue("CFG_MISSING", where, None, "perturbation needs a kind")
                cfg[key].append(entry)
        elif kind == "table[float]":
            if not isinstance(value, dict):
                issue("CFG_TYPE", (), key, "expected a table")
                continue
            for k, v in value.items():
                if k not in DEFAULT_TOLERANCES:
                    issue("CFG_UNKNOWN_KEY", (key,), k, "unknown tolerance name")
                elif not _typecheck(v, "float"):
                    issue("CFG_TYPE", (key,), k, "expected float")
                elif not v > 0:
                    issue("CFG_TOLERANCE", (key,), k, "tolerances must be positive")
                else:
                    cfg[key][k] = float(v)
        elif not _typecheck(value, kind):
            issue("CFG_TYPE", (), key, f"expected {kind}")
        else:
            cfg[key] = _coerce(value, kind)
    if issues:
        raise ConfigSchemaError(issues)
    return _constrain(cfg, lines)


def _constrain(cfg: dict, lines: dict | None = None) -> "ScenarioConfig":
    """Semantic constraints; reuses the domain constructors' error codes."""
    from .geometry import GridSpec, PerturbationSpec, TimeBumpFlow, build_metric

    lines = lines or {}
    issues: list[SchemaIssue] = []

    def issue(code, table, key, msg):
        path = ".".join(str(p) for p in table + ((key,) if key else ()))
        ln = lines.get((table, key)) or lines.get((table, None))
        issues.append(SchemaIssue(code, path, ln, msg))

    field_of = {"CFG_NX": "n_x", "CFG_CIRCUMFERENCE": "circumference", "CFG_DT": "dt",
                "CFG_TIME": "t_max", "CFG_MASS": "mass"}
    g = cfg["grid"]
    grid = None
    try:
        grid = GridSpec(**{k: v for k, v in g.items() if k != "substeps"})
    except ConfigError as e:
        issue(e.code, ("grid",), field_of.get(e.code), e.args[0])
    if g["substeps"] < 1:
        issue("CFG_SUBSTEPS", ("grid",), "substeps", "substeps must be >= 1")
    f = cfg["fock"]
    if grid is not None and not 0 <= f["k_max"] <= grid.n_x // 2 - 1:
        issue("CFG_KMAX", ("fock",), "k_max", f"k_max must lie in [0, {grid.n_x // 2 - 1}]")
    if not 0 <= f["n_max"] <= 16:
        issue("CFG_NMAX", ("fock",), "n_max", "n_max must lie in [0, 16]")
    if not 0 <= f["n_interior"] <= f["n_max"]:
        issue("CFG_NMAX", ("fock",), "n_interior", "n_interior must lie in [0, n_max]")
    bad = [c for c in cfg["checks"] if c not in ALL_CHECKS]
    if bad:
        issue("CFG_CHECK", (), "checks", f"unknown checks {bad}")
    if grid is not None:
        for c in cfg["shale"]["cutoffs"]:
            if not 1 <= c <= grid.n_x // 2 - 1:
                issue("CFG_KMAX", ("shale",), "cutoffs", f"cutoff {c} outside [1, {grid.n_x // 2 - 1}]")
                break
    specs = []
    for idx, p in enumerate(cfg["perturbations"]):
        where = ("perturbations", idx)
        if p["group"] not in GROUPS:
            issue("CFG_GROUP", where, "group", f"group must be one of {GROUPS}")
        try:
            s = PerturbationSpec(p["kind"], tuple(p["center"]), tuple(p["radii"]), p["amplitude"],
                                 tuple(p["sharpness"]), p["profile"])
            specs.append(s)
            if grid is not None:
                build_metric(grid, (s,))
        except ConfigError as e:
            issue(e.code, where, None, e.args[0])
    if grid is not None:
        try:
            TimeBumpFlow.from_params(grid, **cfg["covariance"]).check_admissible(grid)
        except KGError as e:
            issue("CFG_COVARIANCE", ("covariance",), None, e.args[0])
    if issues:
        raise ConfigSchemaError(issues)
    return ScenarioConfig(cfg)


@dataclass
class ScenarioConfig:
    data: dict

    @property
    def name(self) -> str:
        return self.data["scenario"]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def checks(self) -> list[str]:
        return list(self.data["checks"])

    def tolerance(self, key: str) -> float:
        return self.data["tolerances"].get(key, DEFAULT_TOLERANCES[key])

    def grid(self):
        from .geometry import GridSpec

        return GridSpec(**{k: v for k, v in self.data["grid"].items() if k != "substeps"})

    def lab(self, **kw):
        from .connection import Lab

        f = self.data["fock"]
        args = dict(grid=self.grid(), k_max=f["k_max"], n_max=f["n_max"],
                    substeps=self.data["grid"]["substeps"], n_interior=f["n_interior"])
        args.update(kw)
        return Lab(**args)

    def specs(self, group: str = "main") -> tuple:
        from .geometry import PerturbationSpec

        return tuple(PerturbationSpec(p["kind"], tuple(p["center"]), tuple(p["radii"]), p["amplitude"],
                                      tuple(p["sharpness"]), p["profile"])
                     for p in self.data["perturbations"] if p["group"] == group)

    def canonical(self) -> dict:
        return json.loads(json.dumps(self.data))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.canonical())

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, **top) -> "ScenarioConfig":
        d = self.canonical()
        d.update(top)
        return _constrain(d)


def load_config(path: str | Path | None) -> ScenarioConfig:
    if path is None:
        text = resources.files("kgconnection").joinpath("data/canonical.toml").read_text()
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_config(text)


# ---------------------------------------------------------------------------
# checks


@dataclass
class Outcome:
    measured: dict
    bounds: dict  # tolerance key -> measured key
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    message: str = ""


def _check_validate(cfg: ScenarioConfig) -> Outcome:
    from .geometry import blend, build_metric, flat_metric, validate, validate_components

    grid = cfg.grid()
    m = {}
    margins = []
    for group in GROUPS:
        specs = cfg.specs(group)
        if specs or group == "main":
            rep = validate(build_metric(grid, specs))
            margins.append(rep.worst_margin)
    all_specs = sum((cfg.specs(gname) for gname in GROUPS), ())
    rep = validate(build_metric(grid, all_specs))
    margins.append(rep.worst_margin)
    m["worst_margin"] = float(min(margins))
    # blending with the flat metric through a smooth spatial weight
    C = grid.circumference
    chi = lambda t, x: 0.5 + 0.5 * np.cos(2 * np.pi * np.asarray(x) / C) * np.ones_like(np.asarray(t))
    brep = validate(blend(build_metric(grid, cfg.specs()), flat_metric(grid), chi))
    m["blend_margin"] = float(brep.worst_margin)
    # two Lorentzian metrics sharing a time function whose average is degenerate
    one = np.ones(4)
    r1 = validate_components(one, one, 0 * one)
    r2 = validate_components(one, -one, 0 * one)
    avg = validate_components(one, 0 * one, 0 * one)
    m["counterexample_inputs_lorentzian"] = float(r1.lorentzian and r2.lorentzian)
    m["counterexample_average_rejected"] = float(not avg.lorentzian)
    m["min_margin_all"] = float(min(m["worst_margin"], m["blend_margin"]))
    ok_ce = m["counterexample_inputs_lorentzian"] == 1.0 and m["counterexample_average_rejected"] == 1.0
    m["counterexample_deficit"] = 0.0 if ok_ce else 1.0
    return Outcome(m, {"validate.min_margin": "min_margin_all"},
                   message="" if ok_ce else "convexity counterexample not rejected")


def _check_evolve(cfg: ScenarioConfig) -> Outcome:
    from .geometry import flat_metric
    from .wavesolver import EvolutionConfig, evolution_map, flat_evolution_exact, symplectic_defect

    lab = cfg.lab()
    grid = lab.grid
    specs = cfg.specs()
    W = lab.full_map(specs)
    Wb = lab.band_map(specs)
    flat = flat_metric(grid)
    span = grid.t_max - grid.t_min
    exact = flat_evolution_exact(grid, span)
    V = evolution_map(flat, grid.t_min, grid.t_max, lab.full_cfg).matrix
    # the RK4 integrator itself on a two-unit span at doubled substeps
    t1 = min(grid.t_max, grid.t_min + 2.0)
    V4 = evolution_map(flat, grid.t_min, t1, EvolutionConfig(substeps_per_dt=2 * lab.substeps,
                                                            exact_flat_steps=False)).matrix
    m = {
        "symplectic_defect": max(symplectic_defect(W.matrix), symplectic_defect(Wb.matrix)),
        "symplectic_defect_full": symplectic_defect(W.matrix),
        "symplectic_defect_band": symplectic_defect(Wb.matrix),
        "flat_exact_defect": float(np.abs(V - exact).max()),
        "flat_rk4_defect": float(np.abs(V4 - flat_evolution_exact(grid, t1 - grid.t_min)).max()),
        "det_minus_one": float(abs(np.linalg.det(W.matrix) - 1.0)),
    }
    return Outcome(m, {"evolve.symplectic_defect": "symplectic_defect",
                       "evolve.flat_exact_defect": "flat_exact_defect",
                       "evolve.flat_rk4_defect": "flat_rk4_defect"})


def _check_bogoliubov(cfg: ScenarioConfig) -> Outcome:
    lab = cfg.lab()
    b = lab.band_blocks(cfg.specs())
    d = b.identity_defects()
    m = dict(d)
    m["q_singular_deficit"] = max(0.0, 1.0 - d["min_singular_q"])
    m["hs_norm_r"] = b.hs_norm_r
    m["det_factor"] = b.det_factor
    return Outcome(m, {"bogoliubov.qdq_minus_rdr": "qdq_minus_rdr", "bogoliubov.K_symmetry": "K_symmetry",
                       "bogoliubov.q_singular_deficit": "q_singular_deficit",
                       "bogoliubov.op_norm_K": "op_norm_K",
                       "bogoliubov.q_inv_dual_formula": "q_inv_dual_formula"})


def _check_shale(cfg: ScenarioConfig) -> Outcome:
    from .bogoliubov import shale_from_map

    lab = cfg.lab()
    W = lab.full_map(cfg.specs())
    rep = shale_from_map(W, lab.grid, cfg.data["shale"]["cutoffs"])
    m = {
        "tail_fraction": rep.tail_fraction,
        "decay_rate": -rep.tail_decay_exponent,
        "hs_norm_r": rep.hs_norm_r[-1],
        "monotone_hs": float(rep.monotone),
    }
    rows = rep.csv_rows()
    return Outcome(m, {"shale.tail_fraction": "tail_fraction", "shale.min_decay_rate": "decay_rate"},
                   {"row_norms": (("k", "row_norm", "omega"), rows)})


def squeeze_coefficients_defect(ops, basis, theta: float) -> float:
    """Natural implementer of a zero-mode squeeze against the squeezed-vacuum closed form."""
    from math import factorial

    from .bogoliubov import blocks, squeeze_map
    from .fock import NaturalImplementer

    U = NaturalImplementer(blocks(squeeze_map(ops, 0, np.exp(theta)), ops), basis)
    psi = U.vacuum_image()
    j = ops.index(0)
    worst = 0.0
    for n in range(basis.n_max // 2 + 1):
        occ = [0] * ops.M
        occ[j] = 2 * n
        ref = (-np.tanh(theta)) ** n * math.sqrt(factorial(2 * n)) / (2**n * factorial(n)) / math.sqrt(np.cosh(theta))
        worst = max(worst, abs(psi[basis.index(occ)] - ref))
    return float(worst)


def _check_implementer(cfg: ScenarioConfig) -> Outcome:
    from .fock import intertwining_defect
    from .oneparticle import mode_data

    lab = cfg.lab()
    specs = cfg.specs()
    m = {"squeeze_coefficients": squeeze_coefficients_defect(lab.ops, lab.basis, 0.05)}
    U = lab.implementer(specs)
    b = U.b
    det = np.linalg.det(np.eye(b.M) - b.K.conj().T @ b.K).real
    ov = U.vacuum_image()[0]
    m["vacuum_overlap_value"] = float(ov.real)
    m["vacuum_overlap"] = float(abs(ov - det**0.25))
    m["vacuum_overlap_positive"] = float(ov.real > 0 and abs(ov.imag) < 1e-14)
    rows = []
    levels = sorted({max(2, lab.n_max - 4), max(2, lab.n_max - 2), lab.n_max})
    data = [mode_data(lab.ops, k, kind) for k in range(lab.k_max + 1) for kind in ("cos", "sin") if k or kind == "cos"]
    W = lab.band_map(specs)
    for nm in levels:
        sub = cfg.lab(n_max=nm)
        Us = sub.implementer(specs)
        d = max(intertwining_defect(Us, W, v, sub.basis.vacuum(), sub.ops) for v in data)
        rows.append((nm, d))
    m["intertwining"] = rows[-1][1]
    mono = all(b2 <= b1 or b2 < 1e-13 for (_, b1), (_, b2) in zip(rows[:-1], rows[1:]))
    m["intertwining_monotone"] = float(mono)
    out = Outcome(m, {"implementer.squeeze_coefficients": "squeeze_coefficients",
                      "implementer.vacuum_overlap": "vacuum_overlap",
                      "implementer.intertwining": "intertwining"},
                  {"intertwining": (("n_max", "defect"), rows)})
    if not mono or not m["vacuum_overlap_positive"]:
        out.message = "intertwining not monotone in n_max" if not mono else "vacuum overlap not positive"
        out.measured["structural_failure"] = 1.0
    return out


def random_scenario(rng: np.random.Generator, grid, amp_max: float = 0.08) -> tuple:
    from .geometry import PerturbationSpec

    kind = rng.choice(["conformal_bump", "lapse_bump", "shift_bump"])
    t0 = float(rng.uniform(-1.0, 1.0))
    x0 = float(rng.uniform(0.0, grid.circumference))
    amp = float(rng.uniform(0.02, amp_max)) * float(rng.choice([-1, 1]))
    return (PerturbationSpec(str(kind), (t0, x0), (1.0, 3.0), amp, (1.0, 4.0)),)


def _check_cocycle(cfg: ScenarioConfig) -> Outcome:
    from .fock import cocycle, fock_cocycle

    lab = cfg.lab()
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for i in range(3):
        b1 = lab.band_blocks(random_scenario(rng, lab.grid))
        b2 = lab.band_blocks(random_scenario(rng, lab.grid))
        s = cocycle(b1, b2)
        f = fock_cocycle(b1, b2, lab.basis)
        rows.append((i, s.real, s.imag, f.real, f.imag, abs(s - f / abs(f)), abs(abs(s) - 1)))
    m = {"phase_mismatch": max(r[5] for r in rows), "modulus_deviation": max(r[6] for r in rows)}
    return Outcome(m, {"cocycle.phase_mismatch": "phase_mismatch", "cocycle.modulus_deviation": "modulus_deviation"},
                   {"pairs": (("pair", "sigma_re", "sigma_im", "fock_re", "fock_im", "mismatch", "modulus_dev"), rows)})


def _check_covariance(cfg: ScenarioConfig) -> Outcome:
    from .connection import covariance_check

    r = covariance_check(cfg.data["covariance"], cfg.lab())
    m = {k: float(v) for k, v in r.items()}
    return Outcome(m, {"covariance.band_defect": "band_defect", "covariance.fock_distance": "fock_distance",
                       "covariance.min_refinement_ratio": "refinement_ratio"})


def _check_locality(cfg: ScenarioConfig) -> Outcome:
    from .connection import locality_check

    specs = cfg.specs()
    bounds = {"locality.smooth_defect_outside": "smooth_defect_outside", "locality.fock_commutator": "fock_commutator"}
    if not specs:
        return Outcome({"smooth_defect_outside": 0.0, "fock_commutator": 0.0}, bounds, message="flat scenario")
    r = locality_check(specs, cfg.lab())
    s = r["support"]
    m = {
        "smooth_defect_outside": s["smooth_defect_outside"],
        "max_entry_outside_shadow": s["max_entry_outside_shadow"],
        "max_entry_inside_shadow": s["max_entry_inside_shadow"],
        "n_frame": float(s["n_frame"]),
        "fock_commutator": r.get("fock_commutator", 0.0),
    }
    return Outcome(m, bounds, message="shadow covers the circle" if s["vacuous"] else "")


def _check_causality(cfg: ScenarioConfig) -> Outcome:
    from .connection import causality_check

    h1, h2, h3 = cfg.specs("h1"), cfg.specs("h2"), cfg.specs("h3")
    if not (h1 or h2 or h3):
        h1 = cfg.specs()
    r = causality_check(h1, h2, h3, cfg.lab())
    m = {
        "map_defect": r["map_defect"],
        "map_defect_band": r["map_defect_band"],
        "map_defect_reverse_order": r["map_defect_reverse_order"],
        "fock_distance": r["fock_distance"],
        "fock_phase_re": r["fock_phase"].real,
        "fock_phase_im": r["fock_phase"].imag,
        "speed_bound": r["speed_bound"],
    }
    return Outcome(m, {"causality.map_defect": "map_defect", "causality.fock_distance": "fock_distance"})


def _loop(cfg: ScenarioConfig, lab):
    from .geometry import MetricPath, PathSegment

    specs = cfg.specs()
    if len(specs) >= 2:
        pts = [specs[: i + 1] for i in range(len(specs))] + [specs[i + 1:] for i in range(len(specs))]
    elif specs:
        pts = [specs, (specs[0].scaled(0.5),), ()]
    else:
        pts = [()]
    return MetricPath(lab.flat, tuple(PathSegment(p, 3) for p in pts), ())


def _check_holonomy(cfg: ScenarioConfig) -> Outcome:
    from .connection import holonomy_centrality, phase_aligned_distance, transport
    from .geometry import MetricPath, PathSegment

    lab = cfg.lab()
    loop = _loop(cfg, lab)
    h = holonomy_centrality(loop, lab)
    hr = holonomy_centrality(loop.reversed(), lab)
    specs = cfg.specs()
    direct = MetricPath(lab.flat, (PathSegment(specs, 3),), ())
    steps = [specs[: i + 1] for i in range(len(specs))] if len(specs) > 1 else [tuple(p.scaled(0.5) for p in specs), specs]
    stepped = MetricPath(lab.flat, tuple(PathSegment(p, 3) for p in steps), ())
    A = transport(direct, lab).interior_block(lab)
    B = transport(stepped, lab).interior_block(lab)
    m = {
        "scalar_re": h["scalar"].real,
        "scalar_im": h["scalar"].imag,
        "off_scalar_defect": h["off_scalar_defect"],
        "abs_scalar_deviation": abs(h["abs_scalar"] - 1.0),
        "reverse_conjugation": abs(hr["scalar"] - np.conj(h["scalar"])),
        "path_independence": phase_aligned_distance(A, B).value,
    }
    return Outcome(m, {"holonomy.off_scalar_defect": "off_scalar_defect",
                       "holonomy.abs_scalar_deviation": "abs_scalar_deviation",
                       "holonomy.path_independence": "path_independence",
                       "holonomy.reverse_conjugation": "reverse_conjugation"})


def _lie_spec(cfg: ScenarioConfig):
    from .geometry import PerturbationSpec

    c = cfg.data["covariance"]
    return PerturbationSpec("lie_derivative", (c["t0"], c["x0"]), (c["r_t"], c["r_x"]), 1.0, (c["beta_t"], c["beta_x"]))


def _check_stress(cfg: ScenarioConfig) -> Outcome:
    from .connection import stress_energy_action

    lab = cfg.lab()
    specs = cfg.specs()
    Z = _lie_spec(cfg)
    parts = [(p,) for p in specs] if len(specs) > 1 else [specs, (Z,)] if specs else [()]
    r = stress_energy_action((), parts, lab) if specs else stress_energy_action((), (), lab)
    rl = stress_energy_action((), (Z,), lab)
    m = {
        "derivative_norm": r["derivative_norm"],
        "convergence_order": r["convergence_order"],
        "linearity_defect": r.get("linearity_defect", 0.0),
        "sector_leakage": r["sector_leakage"],
        "lie_derivative_norm": rl["derivative_norm"],
        "lie_derivative_order": rl["convergence_order"],
    }
    return Outcome(m, {"stress.min_convergence_order": "convergence_order",
                       "stress.linearity_defect": "linearity_defect",
                       "stress.lie_derivative_norm": "lie_derivative_norm",
                       "stress.sector_leakage": "sector_leakage"})


def _check_sweep(cfg: ScenarioConfig) -> Outcome:
    from .connection import scaled_family, smoothness_sweep

    r = smoothness_sweep(scaled_family(cfg.specs()), cfg.lab(), np.linspace(0.0, 1.0, 11))
    m = {"median_order": r["median_order"], "vacuum_chain_rule_defect": r["vacuum_chain_rule_defect"]}
    return Outcome(m, {"sweep.min_median_order": "median_order", "sweep.vacuum_chain_rule_defect": "vacuum_chain_rule_defect"},
                   {"profile": (("s", "norm", "diff1", "diff2", "richardson_order"), r["rows"])})


CHECK_FUNCTIONS = {
    "validate": _check_validate,
    "evolve": _check_evolve,
    "bogoliubov": _check_bogoliubov,
    "shale": _check_shale,
    "implementer": _check_implementer,
    "cocycle": _check_cocycle,
    "covariance": _check_covariance,
    "locality": _check_locality,
    "causality": _check_causality,
    "holonomy": _check_holonomy,
    "stress": _check_stress,
    "sweep": _check_sweep,
}


# ---------------------------------------------------------------------------
# running and reporting


def _clean(x):
    """JSON-safe plain values; non-finite floats become strings."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, complex):
        return {"re": _clean(x.real), "im": _clean(x.imag)}
    return x


def _satisfied(value: float, key: str, tol: float) -> bool:
    if not isinstance(value, (int, float)) or math.isnan(value):
        return False
    short = key.split(".", 1)[1]
    return value >= tol if short.startswith("min_") else value <= tol


def run_check(name: str, cfg: ScenarioConfig) -> dict:
    t0 = time.perf_counter()
    try:
        out = CHECK_FUNCTIONS[name](cfg)
    except PreconditionError as e:
        return {"name": name, "status": "fail", "measured": {}, "tolerance": {}, "message": str(e),
                "tables": {}, "runtime_s": time.perf_counter() - t0}
    except KGError as e:
        return {"name": name, "status": "fail", "measured": {}, "tolerance": {}, "message": str(e),
                "tables": {}, "runtime_s": time.perf_counter() - t0}
    except Exception as e:  # recorded, mapped to the internal-error exit code
        return {"name": name, "status": "error", "measured": {}, "tolerance": {},
                "message": f"{type(e).__name__}: {e}", "tables": {}, "runtime_s": time.perf_counter() - t0}
    tol = {k: cfg.tolerance(k) for k in out.bounds}
    ok = all(_satisfied(out.measured[v], k, tol[k]) for k, v in out.bounds.items())
    ok = ok and not out.measured.get("structural_failure") and not out.measured.get("counterexample_deficit")
    return {
        "name": name,
        "status": "pass" if ok else "fail",
        "measured": {k: float(v) for k, v in out.measured.items()},
        "tolerance": tol,
        "message": out.message,
        "tables": {k: (list(h), [list(map(float, r)) for r in rows]) for k, (h, rows) in out.tables.items()},
        "runtime_s": time.perf_counter() - t0,
    }


def _run_one(args):
    name, cfg_data = args
    return run_check(name, ScenarioConfig(cfg_data))


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([format(float(v), ".17g") for v in r])


RUNTIME_FIELDS = {"runtime_s", "total_runtime_s", "artifacts", "golden"}


def run(cfg: ScenarioConfig, checks=None, out_dir: str | Path | None = None, workers: int = 1) -> dict:
    checks = list(cfg.checks if checks is None else checks)
    unknown = [c for c in checks if c not in CHECK_FUNCTIONS]
    if unknown:
        raise ConfigError(f"unknown checks {unknown}", "USAGE_CHECK")
    t0 = time.perf_counter()
    jobs = [(c, cfg.canonical()) for c in checks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    artifacts = []
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in results:
            r["artifacts"] = []
            for tname, (header, rows) in r["tables"].items():
                p = out / f"{r['name']}_{tname}.csv"
                write_csv(p, header, rows)
                r["artifacts"].append(str(p))
                artifacts.append(str(p))
    for r in results:
        r.pop("tables", None)
    report = {
        "scenario": cfg.name,
        "tool_version": __version__,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "checks": results,
        "all_pass": all(r["status"] == "pass" for r in results),
        "artifacts": artifacts,
        "total_runtime_s": time.perf_counter() - t0,
    }
    report = _clean(report)
    if out_dir is not None:
        artifacts.append(str(Path(out_dir) / "report.json"))
        report["artifacts"] = artifacts
        (Path(out_dir) / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def strip_runtime(x):
    if isinstance(x, dict):
        return {k: strip_runtime(v) for k, v in x.items() if k not in RUNTIME_FIELDS}
    if isinstance(x, list):
        return [strip_runtime(v) for v in x]
    return x


def golden_diff(report: dict, golden: dict, prefix: str = "") -> list[str]:
    """Paths where the report differs from the golden file, ignoring runtime fields."""
    a, b = strip_runtime(report), strip_runtime(golden)
    out = []

    def walk(x, y, path):
        if isinstance(x, dict) and isinstance(y, dict):
            for k in sorted(set(x) | set(y)):
                if k not in x or k not in y:
                    out.append(f"{path}.{k}: missing")
                else:
                    walk(x[k], y[k], f"{path}.{k}")
        elif isinstance(x, list) and isinstance(y, list):
            if len(x) != len(y):
                out.append(f"{path}: length {len(x)} != {len(y)}")
            for i, (u, v) in enumerate(zip(x, y)):
                walk(u, v, f"{path}[{i}]")
        elif x != y:
            out.append(f"{path}: {x!r} != {y!r}")

    walk(a, b, prefix or "report")
    return out


# ---------------------------------------------------------------------------
# CLI


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kgconnection", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=list(SUBCOMMANDS))
    p.add_argument("--config", help="scenario TOML (default: packaged canonical scenario)")
    p.add_argument("--check", help="comma separated check names, overriding the subcommand's selection")
    p.add_argument("--out", default="kg_out", help="output directory for report.json and CSVs")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--golden", help="golden report to compare against (written if absent)")
    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and EXIT_USAGE
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        if args.check:
            checks = [c.strip() for c in args.check.split(",") if c.strip()]
        else:
            checks = SUBCOMMANDS[args.command] or cfg.checks
        bad = [c for c in checks if c not in CHECK_FUNCTIONS]
        if bad:
            print(f"unknown check(s): {', '.join(bad)}; known: {', '.join(ALL_CHECKS)}", file=sys.stderr)
            return EXIT_USAGE
        if args.workers < 1:
            print("--workers must be >= 1", file=sys.stderr)
            return EXIT_USAGE
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = run(cfg, checks, args.out, args.workers)
    except Exception as e:
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    for r in report["checks"]:
        print(f"{r['name']:<12} {r['status'].upper():<5} {r['runtime_s']:7.2f}s  {r['message']}")
    code = EXIT_OK if report["all_pass"] else EXIT_FAIL
    if any(r["status"] == "error" for r in report["checks"]):
        code = EXIT_INTERNAL
    if args.golden:
        gp = Path(args.golden)
        if gp.exists():
            diffs = golden_diff(report, json.loads(gp.read_text()))
            report["golden"] = {"path": str(gp), "match": not diffs, "mismatches": diffs[:50]}
            print(f"golden {'MATCH' if not diffs else 'MISMATCH'} ({len(diffs)} differences)")
            if diffs and code == EXIT_OK:
                code = EXIT_FAIL
        else:
            gp.parent.mkdir(parents=True, exist_ok=True)
            gp.write_text(json.dumps(strip_runtime(report), indent=2, sort_keys=True))
            report["golden"] = {"path": str(gp), "created": True}
            print(f"golden written to {gp}")
        (Path(args.out) / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
