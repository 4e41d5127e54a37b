"""Scenario registry, end-to-end runs, report emission and the command line.

A scenario file is a handful of ``key = value`` header lines followed by the
potential (mechanical kind) or conformal exponent rho (conformal kind) in the
prefix grammar of :mod:`conjlab.fields`.  Numeric header values may use
``pi`` and ``sqrt``; vectors are comma separated.
"""
from __future__ import annotations

import argparse
import ast
import csv
import json
import math
import operator
import sys
from dataclasses import dataclass, field, fields as dc_fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .bifurcation import (
    SHOOT_TOL, RETURN_TOL, Branch, NoReturnInWindow, PlaneNotInvariant, ScanResult,
    analyse_certificate, branch_converges, certificate_integral, classify,
    nonbifurcation_scan, ray_name, trace_branch,
)
from .dynamics import (
    DEFAULT_TOL, energy, integrate_geodesic, integrate_pgeodesic, mechanical_energy,
    mechanical_from_conformal, tolerances, verify_correspondence,
)
from .fields import ParseError, ScalarField, exp2, parse, render
from .geometry import AxisConditionError, ConformalMetric, MechanicalSystem, Signature
from .variational import BISECT_TOL, RANK_TOL, detect_conjugates, jacobi_flow, variational_flow

BUILTINS = ("mpp-perturbed", "mpp-conformal", "new-perturbed", "new-conformal")
SIGN_VARIANTS = ("derived", "printed")
TOOL = f"conjlab {__version__}"


class ScenarioError(ValueError):
    pass


# -- header values ----------------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_NAMES = {"pi": math.pi}
_FUNCS = {"sqrt": math.sqrt}


def _eval_node(node):
    if isinstance(node, ast.Expression):
        return _eval_node(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval_node(node.left), _eval_node(node.right))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
        return _UNARY[type(node.op)](_eval_node(node.operand))
    if isinstance(node, ast.Name) and node.id in _NAMES:
        return _NAMES[node.id]
    if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
            and node.func.id in _FUNCS and len(node.args) == 1 and not node.keywords):
        return _FUNCS[node.func.id](_eval_node(node.args[0]))
    raise ValueError("unsupported numeric expression")


def number(text: str) -> float:
    """Evaluate a header number such as ``pi/sqrt(2) - 0.3``."""
    try:
        return float(_eval_node(ast.parse(text.strip(), mode="eval")))
    except (SyntaxError, ValueError, ZeroDivisionError, TypeError) as exc:
        raise ScenarioError(f"bad number {text.strip()!r}") from exc


def numbers(text: str, n: int | None = None) -> tuple[float, ...]:
    vals = tuple(number(t) for t in text.split(","))
    if n is not None and len(vals) != n:
        raise ScenarioError(f"expected {n} comma-separated numbers, got {text.strip()!r}")
    return vals


def _ray(token: str) -> tuple[float, float]:
    token = token.strip()
    if token == "x":
        return (1.0, 0.0)
    if token == "y":
        return (0.0, 1.0)
    a = math.radians(number(token))
    return (math.cos(a), math.sin(a))


def _flag(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ScenarioError(f"bad boolean {text!r}")


# -- scenario ---------------------------------------------------------------

@dataclass(frozen=True)
class EnergyCurve:
    label: str
    v0: tuple[float, float, float]
    interval: tuple[float, float]


@dataclass(frozen=True)
class Scenario:
    id: str
    title: str
    kind: str                                   # mechanical | conformal
    signature: Signature
    expression: ScalarField                     # potential V, or rho
    q0: tuple[float, float, float]
    v0: tuple[float, float, float]
    interval: tuple[float, float]
    energy_level: float = 0.0
    mech_v0: tuple[float, float, float] | None = None
    mech_interval: tuple[float, float] | None = None
    printed_potential: ScalarField | None = None
    certificate_form: str = "new"
    exploratory: bool = False
    branch_rays: tuple[tuple[float, float], ...] = ((1.0, 0.0), (0.0, 1.0))
    branch_alphas: tuple[float, ...] = (0.4, 0.2, 0.1, 0.05, 0.025)
    scan_window: tuple[float, float] | None = None
    scan_radius: float = 0.4
    scan_grid: int = 64
    scan_lambdas: int = 17
    scan_seeds: int = 16
    scan_seed_radius: float | None = None
    scan_floor: float = 1e-4
    energies: tuple[EnergyCurve, ...] = ()
    sign_variant: str = "derived"
    tol: float = DEFAULT_TOL
    header: tuple[tuple[str, str], ...] = ()

    @property
    def metric(self) -> ConformalMetric | None:
        if self.kind != "conformal":
            return None
        return ConformalMetric(self.signature, self.expression)

    def potential(self, variant: str = "derived") -> ScalarField:
        """Potential of the mechanical system whose shooting problem is studied."""
        if variant == "printed" and self.printed_potential is not None:
            return self.printed_potential
        if self.kind == "mechanical":
            return self.expression
        return mechanical_from_conformal(self.metric, self.energy_level).potential

    def system(self, variant: str = "derived") -> MechanicalSystem:
        return MechanicalSystem(self.signature, self.potential(variant))

    @property
    def base_velocity(self) -> tuple[float, float, float]:
        return self.mech_v0 or self.v0

    @property
    def base_interval(self) -> tuple[float, float]:
        return self.mech_interval or self.interval

    @property
    def speed(self) -> float:
        return float(self.base_velocity[2])

    @property
    def certificate_weight(self) -> ScalarField | None:
        if self.kind != "conformal":
            return None
        return 2.0 * exp2(self.expression.as_poly())


_KEYS = {
    "title", "kind", "signature", "q0", "v0", "interval", "energy_level", "mech_v0",
    "mech_interval", "printed_potential", "certificate_form", "exploratory", "branch_rays",
    "branch_alphas", "scan_window", "scan_radius", "scan_grid", "scan_lambdas", "scan_seeds",
    "scan_seed_radius", "scan_floor", "sign_variant", "tol",
}


def _split_text(text: str) -> tuple[list[tuple[str, str, int]], str, int]:
    header, body, body_offset, offset = [], [], None, 0
    for lineno, line in enumerate(text.splitlines(keepends=True), start=1):
        stripped = line
        if "#" in line:
            # blank the comment but keep offsets for error positions
            cut = line.index("#")
            body_len = len(line.rstrip("\n"))
            stripped = line[:cut] + " " * (body_len - cut) + line[body_len:]
        if "=" in stripped and body_offset is None:
            key, value = stripped.split("=", 1)
            header.append((key.strip(), value.strip(), lineno))
        elif stripped.strip():
            if body_offset is None:
                body_offset = offset
            body.append(stripped)
        elif body_offset is not None:
            body.append(stripped)
        offset += len(line)
    return header, "".join(body), body_offset or 0


def parse_scenario(text: str, scenario_id: str, overrides: dict[str, str] | None = None) -> Scenario:
    header, body, body_offset = _split_text(text)
    values: dict[str, str] = {}
    energies: dict[str, str] = {}
    for key, value, lineno in header:
        if key.startswith("energy."):
            energies[key[len("energy."):]] = value
        elif key in _KEYS:
            values[key] = value
        else:
            raise ScenarioError(f"{scenario_id}:{lineno}: unknown key {key!r}")
    for key, value in (overrides or {}).items():
        if key.startswith("energy."):
            energies[key[len("energy."):]] = value
        elif key in _KEYS:
            values[key] = value
        else:
            raise ScenarioError(f"unknown override key {key!r}; known: {', '.join(sorted(_KEYS))}")
    if not body.strip():
        raise ScenarioError(f"{scenario_id}: missing expression")
    try:
        expr = parse(body)
    except ParseError as exc:
        pos = body_offset + exc.position
        line = text.count("\n", 0, pos) + 1
        col = pos - (text.rfind("\n", 0, pos) + 1) + 1
        raise ParseError(f"{scenario_id}:{line}:{col}: {exc.reason}", pos) from exc

    for required in ("kind", "signature", "q0", "v0", "interval"):
        if required not in values:
            raise ScenarioError(f"{scenario_id}: missing key {required!r}")
    kind = values["kind"]
    if kind not in ("mechanical", "conformal"):
        raise ScenarioError(f"{scenario_id}: kind must be mechanical or conformal, got {kind!r}")
    if kind == "conformal" and not expr.is_polynomial():
        raise ScenarioError(f"{scenario_id}: rho must be a polynomial")
    opt = values.get
    printed = None
    if "printed_potential" in values:
        try:
            printed = parse(values["printed_potential"])
        except ParseError as exc:
            raise ParseError(f"{scenario_id}: printed_potential: {exc.reason}", exc.position) from exc
    form = opt("certificate_form", "new")
    if form not in ("mpp", "new"):
        raise ScenarioError(f"{scenario_id}: certificate_form must be mpp or new")
    variant = opt("sign_variant", "derived")
    if variant not in (*SIGN_VARIANTS, "both"):
        raise ScenarioError(f"{scenario_id}: sign_variant must be printed, derived or both")
    curves = []
    for label in sorted(energies):
        try:
            v, iv = energies[label].split(";")
        except ValueError as exc:
            raise ScenarioError(f"{scenario_id}: energy.{label} needs 'v0; interval'") from exc
        curves.append(EnergyCurve(label, numbers(v, 3), numbers(iv, 2)))
    try:
        sig = Signature(tuple(int(round(s)) for s in numbers(values["signature"], 3)))
    except ValueError as exc:
        raise ScenarioError(f"{scenario_id}: {exc}") from exc
    seed_r = opt("scan_seed_radius")
    return Scenario(
        id=scenario_id,
        title=opt("title", scenario_id),
        kind=kind,
        signature=sig,
        expression=expr,
        q0=numbers(values["q0"], 3),
        v0=numbers(values["v0"], 3),
        interval=numbers(values["interval"], 2),
        energy_level=number(opt("energy_level", "0")),
        mech_v0=numbers(values["mech_v0"], 3) if "mech_v0" in values else None,
        mech_interval=numbers(values["mech_interval"], 2) if "mech_interval" in values else None,
        printed_potential=printed,
        certificate_form=form,
        exploratory=_flag(opt("exploratory", "false")),
        branch_rays=tuple(_ray(t) for t in opt("branch_rays", "x, y").split(",") if t.strip()),
        branch_alphas=numbers(opt("branch_alphas", "0.4, 0.2, 0.1, 0.05, 0.025")),
        scan_window=numbers(values["scan_window"], 2) if "scan_window" in values else None,
        scan_radius=number(opt("scan_radius", "0.4")),
        scan_grid=int(number(opt("scan_grid", "64"))),
        scan_lambdas=int(number(opt("scan_lambdas", "17"))),
        scan_seeds=int(number(opt("scan_seeds", "16"))),
        scan_seed_radius=number(seed_r) if seed_r is not None else None,
        scan_floor=number(opt("scan_floor", "1e-4")),
        energies=tuple(curves),
        sign_variant=variant,
        tol=number(opt("tol", repr(DEFAULT_TOL))),
        header=tuple(sorted(values.items())),
    )


def scenario_text(scenario_id: str) -> str:
    if scenario_id in BUILTINS:
        return resources.files("conjlab").joinpath("scenarios", f"{scenario_id}.scn").read_text()
    path = Path(scenario_id)
    if path.suffix == ".scn" and path.is_file():
        return path.read_text()
    raise ScenarioError(f"unknown scenario {scenario_id!r}; built-ins: {', '.join(BUILTINS)}")


def load_scenario(scenario_id: str, overrides: dict[str, str] | None = None) -> Scenario:
    text = scenario_text(scenario_id)
    sid = scenario_id if scenario_id in BUILTINS else Path(scenario_id).stem
    return parse_scenario(text, sid, overrides)


# -- report -----------------------------------------------------------------

def _clean(obj):
    """Plain JSON data: python floats (non-finite as strings), lists, dicts."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return obj


@dataclass
class Report:
    scenario: str
    title: str = ""
    kind: str = ""
    tool_version: str = TOOL
    tolerances: dict = field(default_factory=dict)
    expression: str = ""
    equations: dict = field(default_factory=dict)
    energies: list = field(default_factory=list)
    conjugate_points: list = field(default_factory=list)
    branches: list = field(default_factory=list)
    certificates: dict = field(default_factory=dict)
    scans: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    grids: dict = field(default_factory=dict, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {f.name: _clean(getattr(self, f.name)) for f in dc_fields(self) if f.name != "grids"}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> Report:
        names = {f.name for f in dc_fields(cls)} - {"grids"}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown report fields {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> Report:
        return cls.from_dict(json.loads(text))

    def conjugates(self, picture: str | None = None, sign_variant: str | None = None) -> list[dict]:
        return [c for c in self.conjugate_points
                if (picture is None or c["picture"] == picture)
                and (sign_variant is None or c["sign_variant"] == sign_variant)]

    def verdict(self, sign_variant: str = "derived", index: int = 0) -> dict:
        return [v for v in self.verdicts if v["sign_variant"] == sign_variant][index]

    @property
    def primary_picture(self) -> str:
        return "geodesic" if self.kind == "conformal" else "mechanical"


def _cp(c, picture, variant) -> dict:
    return {"picture": picture, "sign_variant": variant, "t_star": c.t_star,
            "multiplicity": c.multiplicity, "position": list(c.position)}


def _equations(sys: MechanicalSystem) -> dict:
    acc = [-e * g for e, g in zip(sys.signature.eps, sys.grad_fields)]
    return {"potential": render(sys.potential),
            "x''": render(acc[0]), "y''": render(acc[1]), "z''": render(acc[2])}


def _analysis_dict(a) -> dict:
    return {"density": a.density, "sign": a.sign, "form": a.form, "definite": a.definite,
            "semidefinite": a.semidefinite, "certifies": a.certifies}


def _branch_dict(b: Branch, variant: str, t_star: float | None) -> dict:
    return {"sign_variant": variant, "ray": b.name, "direction": list(b.ray),
            "points": [{"alpha": p.alpha, "T_alpha": p.T_alpha} for p in b.points],
            "converges": bool(t_star is not None and branch_converges(b, t_star)),
            "error": None}


def _scan_dict(scan: ScanResult, variant: str, sc: Scenario, seed_radius: float) -> dict:
    shots = scan.shots
    return {
        "sign_variant": variant,
        "lambdas": list(scan.lambdas),
        "radius": sc.scan_radius, "grid": sc.scan_grid, "seed_radius": seed_radius,
        "floor": sc.scan_floor,
        "min_miss": scan.min_miss,
        "min_miss_per_lambda": list(scan.min_miss_per_lambda),
        "escaped": int(np.isinf(scan.miss_norm).sum()),
        "newton": {
            "runs": len(shots),
            "converged": sum(s.status == "converged" for s in shots),
            "singular_family": sum(s.status == "singular-family" for s in shots),
            "no_convergence": sum(s.status == "no-convergence" for s in shots),
            "trivial": sum(s.trivial for s in shots),
        },
        "basins": [{"lambda": s.lam, "w": list(s.w), "status": s.status, "miss": s.miss,
                    "iterations": s.iterations} for s in shots],
        "nontrivial": scan.nontrivial,
    }


def _variants(requested: str) -> list[str]:
    return ["printed"] if requested == "printed" else ["derived", "printed"]


def run_scenario(scenario_id: str, overrides: dict[str, str] | None = None, *,
                 tol: float | None = None, sign_variant: str | None = None) -> Report:
    """Run the full pipeline for a built-in id or a ``.scn`` path."""
    overrides = dict(overrides or {})
    if tol is not None:
        overrides["tol"] = repr(float(tol))
    if sign_variant is not None:
        overrides["sign_variant"] = sign_variant
    sc = load_scenario(scenario_id, overrides)
    if sc.tol <= 0:
        raise ScenarioError("tol must be positive")
    rtol, atol = tolerances(sc.tol)
    rep = Report(
        scenario=sc.id, title=sc.title, kind=sc.kind,
        tolerances={"tol": sc.tol, "rtol": rtol, "atol": atol, "shoot_tol": SHOOT_TOL,
                    "bisect_tol": BISECT_TOL, "rank_tol": RANK_TOL, "return_tol": RETURN_TOL,
                    "scan_floor": sc.scan_floor},
        expression=render(sc.expression),
    )
    variants = _variants(sc.sign_variant)
    systems = {v: sc.system(v) for v in variants}
    same_signs = render(sc.potential("printed")) == render(sc.potential("derived"))
    rep.equations = {v: _equations(systems[v]) for v in variants}
    if same_signs:
        rep.notes.append("printed and derived potential terms coincide")
    else:
        rep.notes.append("printed potential differs from the derived one: "
                         f"{render(sc.potential('printed'))} vs {render(sc.potential('derived'))}")
    if sc.kind == "conformal":
        rep.notes.append("certificate integrals carry the weight 2*exp(2 rho) produced by the "
                         "cross-Wronskian of the mechanical equations")
    if sc.exploratory:
        rep.notes.append("bifurcation of true geodesics is exploratory: verdicts concern the "
                         "mechanical p-geodesic problem only")

    _energies(sc, rep)
    geo_cps = _geodesic_picture(sc, rep) if sc.kind == "conformal" else []

    # conjugate parameter of the derived equations, used when a variant has none
    ref = _window_conjugates(sc, sc.system("derived"))
    ref_t = ref[0].t_star if ref else None
    cache: dict[str, dict] = {}
    for v in variants:
        key = render(systems[v].potential)
        if key not in cache:
            cache[key] = _mechanical_picture(sc, systems[v], v, ref_t)
        res = cache[key]
        rep.conjugate_points.extend({**c, "sign_variant": v} for c in res["conjugates"])
        rep.branches.extend({**b, "sign_variant": v} for b in res["branches"])
        rep.certificates.setdefault("analysis", {})[v] = res["analysis"]
        rep.certificates.setdefault("integrals", []).extend(
            {**c, "sign_variant": v} for c in res["integrals"])
        if res["scan"] is not None:
            rep.scans.append({**res["scan"], "sign_variant": v})
            rep.grids[v] = res["grid"]
        rep.verdicts.extend({**d, "sign_variant": v} for d in res["verdicts"])

    if sc.kind == "conformal":
        _correspondence(sc, rep, geo_cps)
    return rep


def _energies(sc: Scenario, rep: Report) -> None:
    for curve in sc.energies:
        if sc.kind == "conformal":
            traj = integrate_geodesic(sc.metric, sc.q0, curve.v0, curve.interval, sc.tol)
            rep.energies.append({"label": curve.label, "functional": "geodesic",
                                 "v0": list(curve.v0), "interval": list(curve.interval),
                                 "value": energy(sc.metric, traj)})
        else:
            sys_ = sc.system("derived")
            traj = integrate_pgeodesic(sys_, sc.q0, curve.v0, curve.interval, sc.tol)
            rep.energies.append({"label": curve.label, "functional": "p-geodesic",
                                 "v0": list(curve.v0), "interval": list(curve.interval),
                                 "value": energy(sys_, traj),
                                 "mechanical_energy": float(mechanical_energy(
                                     sys_, traj, curve.interval[0]))})


def _geodesic_picture(sc: Scenario, rep: Report) -> list:
    metric = sc.metric
    flow = variational_flow(metric, sc.q0, sc.v0, sc.interval, sc.tol)
    cps = detect_conjugates(flow.M, flow.interval, flow.base.position)
    rep.conjugate_points.extend(_cp(c, "geodesic", None) for c in cps)
    try:
        mj = jacobi_flow(metric, flow.base, sc.tol)
        alt = detect_conjugates(mj, flow.interval)
        rep.checks["jacobi_cross_check"] = {
            "t_star": [c.t_star for c in alt],
            "max_difference": max((abs(a.t_star - b.t_star) for a, b in zip(cps, alt)),
                                  default=0.0) if len(alt) == len(cps) else "count mismatch",
        }
    except AxisConditionError as exc:
        rep.checks["jacobi_cross_check"] = {"error": str(exc)}
    return cps


def _mechanical_conjugates(sc: Scenario, sys_: MechanicalSystem):
    flow = variational_flow(sys_, sc.q0, sc.base_velocity, sc.base_interval, sc.tol)
    return detect_conjugates(flow.M, flow.interval, flow.base.position)


def _in_window(sc: Scenario, cps):
    w = sc.scan_window
    return [c for c in cps if w is not None and w[0] <= c.t_star <= w[1]]


def _window_conjugates(sc: Scenario, sys_: MechanicalSystem):
    return _in_window(sc, _mechanical_conjugates(sc, sys_))


def _mechanical_picture(sc: Scenario, sys_: MechanicalSystem, variant: str,
                        ref_t: float | None = None) -> dict:
    out = {"conjugates": [], "branches": [], "integrals": [], "scan": None, "grid": None,
           "verdicts": []}
    cps = _mechanical_conjugates(sc, sys_)
    out["conjugates"] = [_cp(c, "mechanical", variant) for c in cps]
    analysis = analyse_certificate(sys_)
    out["analysis"] = _analysis_dict(analysis)

    window = sc.scan_window
    in_window = _in_window(sc, cps)
    if in_window:
        t_ref = in_window[0].t_star
    elif ref_t is not None:
        t_ref = ref_t
    else:
        t_ref = 0.5 * (window[0] + window[1]) if window else None

    branches = []
    if t_ref is not None:
        for u in sc.branch_rays:
            try:
                b = trace_branch(sys_, sc.q0, u, sc.branch_alphas, (0.5 * t_ref, 1.5 * t_ref),
                                 speed=sc.speed, tol=sc.tol)
            except (PlaneNotInvariant, NoReturnInWindow) as exc:
                out["branches"].append({"sign_variant": variant, "ray": ray_name(u),
                                        "direction": list(u), "points": [],
                                        "converges": False, "error": str(exc)})
                continue
            branches.append(b)
            out["branches"].append(_branch_dict(b, variant, t_ref))
            for p in b.points:
                traj = integrate_pgeodesic(sys_, sc.q0, (*p.w, sc.speed), (0.0, p.T_alpha), sc.tol)
                c = certificate_integral(sc.certificate_form, traj, p.T_alpha, sc.certificate_weight)
                out["integrals"].append({"source": f"branch {b.name} alpha={p.alpha!r}",
                                         "variant": c.variant, "lambda": c.lam, "value": c.value,
                                         "integrand_min": c.integrand_min})

    scan = None
    if window is not None:
        seed_r = sc.scan_seed_radius if sc.scan_seed_radius is not None else 0.75 * sc.scan_radius
        scan = nonbifurcation_scan(sys_, sc.q0, window, sc.scan_radius, sc.scan_grid,
                                   speed=sc.speed, n_lambda=sc.scan_lambdas, n_seeds=sc.scan_seeds,
                                   seed_radius=seed_r, weight=sc.certificate_weight, tol=sc.tol)
        out["scan"] = _scan_dict(scan, variant, sc, seed_r)
        out["grid"] = scan
        for n in scan.nontrivial:
            out["integrals"].append({"source": f"newton lambda={n['lambda']!r}",
                                     "variant": sc.certificate_form, "lambda": n["lambda"],
                                     "value": n["certificate"][sc.certificate_form],
                                     "integrand_min": None})

    if in_window:
        targets = in_window
    elif not cps and t_ref is not None:
        targets = [None]        # no conjugate point in this variant
    else:
        targets = []
    for c in cps:
        if c not in in_window:
            out["verdicts"].append({
                "scenario": sc.id, "t_star": c.t_star, "position": list(c.position),
                "classification": "undecided", "reason": "outside the scan window",
                "branches": [], "min_miss": None, "floor": sc.scan_floor, "newton_runs": 0,
                "newton_trivial": 0, "certifies": analysis.certifies})
    for c in targets:
        t_star = c.t_star if c is not None else t_ref
        v = classify(sc.id, variant, t_star, branches, scan, analysis, sc.scan_floor)
        out["verdicts"].append({
            "scenario": sc.id, "t_star": t_star,
            "position": list(c.position) if c is not None else None,
            "classification": v.classification, "reason": v.reason, "branches": v.branches,
            "min_miss": v.min_miss, "floor": v.floor, "newton_runs": v.newton_runs,
            "newton_trivial": v.newton_trivial, "certifies": analysis.certifies})
    out["verdicts"].sort(key=lambda d: d["t_star"])
    if not cps and t_ref is not None:
        for d in out["verdicts"]:
            d["reason"] += "; this variant has no conjugate point, t* is the derived one"
    return out


def _correspondence(sc: Scenario, rep: Report, geo_cps) -> None:
    derived = sc.system("derived")
    ptraj = integrate_pgeodesic(derived, sc.q0, sc.base_velocity, sc.base_interval, sc.tol)
    corr = verify_correspondence(sc.metric, sc.energy_level, ptraj)
    entry = {"residual": corr.max_residual, "energy_error": corr.energy_error}
    mech = rep.conjugates("mechanical", "derived")
    if mech:
        t = mech[0]["t_star"]
        entry["mechanical_t_star"] = t
        entry["arc_at_t_star"] = float(np.interp(t, corr.time_map[:, 0], corr.time_map[:, 1]))
        if geo_cps:
            gap = np.abs(np.asarray(mech[0]["position"]) - np.asarray(geo_cps[0].position))
            entry["position_difference"] = float(np.max(gap))
    rep.checks["correspondence"] = entry


# -- emission ---------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows) -> Path:
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def emit(report: Report, fmt: str, out_dir) -> list[Path]:
    """Write report.json, plus the CSV bundle when ``fmt`` is csv-bundle."""
    if fmt not in ("json", "csv-bundle"):
        raise ValueError(f"unknown format {fmt!r}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "report.json"
        path.write_text(report.to_json())
    except OSError as exc:
        raise OSError(f"cannot write {out}: {exc.strerror}") from exc
    written = [path]
    if fmt == "json":
        return written

    pic = report.primary_picture
    variant = None if pic == "geodesic" else (
        "derived" if report.conjugates(pic, "derived") or not report.conjugates(pic) else "printed")
    rows = [(c["t_star"], c["multiplicity"], *c["position"])
            for c in report.conjugates(pic, variant)]
    written.append(_write_csv(out / "conjugates.csv",
                              ["t_star", "multiplicity", "pos_x", "pos_y", "pos_z"], rows))
    variants = sorted({b["sign_variant"] for b in report.branches})
    main_variant = "derived" if "derived" in variants else (variants[0] if variants else None)
    for b in report.branches:
        if b["sign_variant"] != main_variant:
            continue
        rows = [(p["alpha"], p["T_alpha"]) for p in b["points"]]
        written.append(_write_csv(out / f"branch_{b['ray']}.csv", ["alpha", "T_alpha"], rows))
    grid_variants = list(report.grids) or ["derived"]
    for v in grid_variants:
        name = "scan.csv" if v == grid_variants[0] else f"scan_{v}.csv"
        scan = report.grids.get(v)
        rows = list(scan.rows()) if scan is not None else []
        written.append(_write_csv(out / name, ["lambda", "angle", "radius", "miss_norm"], rows))
    return written


# -- command line -----------------------------------------------------------

def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ScenarioError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _describe(sc: Scenario) -> str:
    lines = [f"{sc.id}: {sc.title}", f"  kind        {sc.kind}",
             f"  signature   {sc.signature.eps}",
             f"  {'potential' if sc.kind == 'mechanical' else 'rho':<11} {render(sc.expression)}"]
    for key, value in sc.header:
        if key not in ("title", "kind", "signature"):
            lines.append(f"  {key:<11} {value}")
    for v in SIGN_VARIANTS:
        eq = _equations(sc.system(v))
        lines.append(f"  {v} equations:")
        lines.extend(f"    {k} = {eq[k]}" for k in ("x''", "y''", "z''"))
    return "\n".join(lines)


def _summary(rep: Report) -> str:
    lines = [f"{rep.scenario} ({rep.tool_version})"]
    for c in rep.conjugate_points:
        tag = c["picture"] + (f"/{c['sign_variant']}" if c["sign_variant"] else "")
        lines.append(f"  conjugate [{tag}] t*={c['t_star']!r} mult={c['multiplicity']} "
                     f"at {tuple(round(p, 9) for p in c['position'])}")
    for v in rep.verdicts:
        lines.append(f"  verdict [{v['sign_variant']}] t*={v['t_star']:.9f}: {v['classification']}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conjlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=TOOL)
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario and write its report")
    run.add_argument("scenario", help="built-in id or path to a .scn file")
    run.add_argument("--out", default=None, help="output directory (default: ./<id>)")
    run.add_argument("--tol", type=float, default=None)
    run.add_argument("--sign-variant", choices=("printed", "derived", "both"), default=None)
    run.add_argument("--format", choices=("json", "csv-bundle"), default="csv-bundle")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sub.add_parser("list", help="list built-in scenarios")
    desc = sub.add_parser("describe", help="show a scenario and its equations")
    desc.add_argument("scenario")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list":
            for sid in BUILTINS:
                print(f"{sid:<15} {load_scenario(sid).title}")
            return 0
        if args.command == "describe":
            print(_describe(load_scenario(args.scenario)))
            return 0
        rep = run_scenario(args.scenario, _parse_sets(args.set), tol=args.tol,
                           sign_variant=args.sign_variant)
        out = args.out or rep.scenario
        paths = emit(rep, args.format, out)
        print(_summary(rep))
        for path in paths:
            print(f"  wrote {path}")
        return 0
    except (ScenarioError, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


__all__ = ["BUILTINS", "Report", "Scenario", "ScenarioError", "emit", "load_scenario",
           "main", "parse_scenario", "run_scenario"]
