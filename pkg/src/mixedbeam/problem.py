"""Generic problem documents for ``beam run``.

A problem document is TOML with five sections::

    [geometry]
    builder = "straight"        # straight | arc | helix | polyline | fork
    length = 1.0
    nelem = 8
    k = 2

    [cross_section]
    EA = 1e4
    GA2 = 5e3
    GA3 = 5e3
    GIt = 1e2
    EI2 = 1e2
    EI3 = 1e2

    [[bcs]]
    type = "clamp_position"     # clamp_position | clamp_rotation | prescribe_rotation
    node = "root"

    [[loads]]
    type = "point_moment"       # point_force | point_moment | distributed_force
    node = "tip"
    m = [0.0, 0.0, 12.566370614359172]
    frame = "spatial"
    label = "load"

    [solver]
    steps = 4                   # or [[solver.phases]] tables with steps and labels
    condense = true
    integration = "reduced"

Builder parameters:

* ``straight``: ``length``, ``nelem``, ``k``, optional ``origin``
* ``arc``: ``radius``, ``angle`` (radians), ``nelem``, ``k``, optional ``plane``
* ``helix``: ``R0``, ``h0``, ``coils``, ``nelem``, ``k``
* ``polyline``: ``points`` (list of 3-vectors), ``nelem_per_segment``, ``k``
* ``fork``: ``length``, ``radius``, ``nelem_shaft``, ``nelem_tine``, ``k``

Nodes are referred to by marker name (``root``, ``tip``, ``PB``, ``P1``,
``P2``, ``kink1``, ...) or integer index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import tomli
import tomli_w

from .constitutive import CrossSection
from .model import (
    ClampPosition,
    ClampRotation,
    DistributedForce,
    LoadCase,
    LoadPhase,
    Mesh,
    PointForce,
    PointMoment,
    PrescribeRotation,
    build_arc,
    build_fork,
    build_helix,
    build_polyline,
    build_straight,
)
from .solver import SolverConfig

SECTIONS = ("geometry", "cross_section", "bcs", "loads", "solver")
BUILDERS = ("straight", "arc", "helix", "polyline", "fork")
_STIFFNESS = ("EA", "GA2", "GA3", "GIt", "EI2", "EI3")
_SOLVER_KEYS = ("steps", "phases", "tol_res", "tol_inc", "max_iter", "condense", "integration", "max_cuts")


class ProblemError(ValueError):
    """Malformed or inconsistent problem document."""


@dataclass
class Problem:
    geometry: dict
    cross_section: dict
    bcs: list[dict] = field(default_factory=list)
    loads: list[dict] = field(default_factory=list)
    solver: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry,
            "cross_section": self.cross_section,
            "bcs": self.bcs,
            "loads": self.loads,
            "solver": self.solver,
        }


def parse_problem(text: str) -> Problem:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ProblemError(f"not a valid problem document: {exc}") from exc
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ProblemError(f"unknown sections: {', '.join(sorted(unknown))}")
    for sec in ("geometry", "cross_section"):
        if sec not in doc:
            raise ProblemError(f"missing section [{sec}]")
    problem = Problem(
        geometry=dict(doc["geometry"]),
        cross_section=dict(doc["cross_section"]),
        bcs=[dict(b) for b in doc.get("bcs", [])],
        loads=[dict(b) for b in doc.get("loads", [])],
        solver=dict(doc.get("solver", {})),
    )
    _validate(problem)
    return problem


def dump_problem(problem: Problem) -> str:
    d = problem.to_dict()
    if not d["solver"]:
        d.pop("solver")
    for key in ("bcs", "loads"):
        if not d[key]:
            d.pop(key)
    return tomli_w.dumps(d)


def load_problem(path: str) -> Problem:
    with open(path, encoding="utf-8") as f:
        return parse_problem(f.read())


def _validate(p: Problem) -> None:
    builder = p.geometry.get("builder")
    if builder not in BUILDERS:
        raise ProblemError(f"geometry.builder must be one of {', '.join(BUILDERS)}, got {builder!r}")
    missing = [k for k in _STIFFNESS if k not in p.cross_section]
    if missing:
        raise ProblemError(f"cross_section is missing {', '.join(missing)}")
    for b in p.bcs:
        if b.get("type") not in ("clamp_position", "clamp_rotation", "prescribe_rotation"):
            raise ProblemError(f"unknown boundary condition type {b.get('type')!r}")
        if "node" not in b:
            raise ProblemError(f"boundary condition {b['type']} needs a node")
    for ld in p.loads:
        if ld.get("type") not in ("point_force", "point_moment", "distributed_force"):
            raise ProblemError(f"unknown load type {ld.get('type')!r}")
    unknown = set(p.solver) - set(_SOLVER_KEYS)
    if unknown:
        raise ProblemError(f"unknown solver keys: {', '.join(sorted(unknown))}")


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise ProblemError(f"{where} needs '{key}'")
    return d[key]


def build_mesh(p: Problem) -> Mesh:
    g = p.geometry
    cs = CrossSection(**{k: float(p.cross_section[k]) for k in _STIFFNESS})
    b = g["builder"]
    k = int(_need(g, "k", "geometry"))
    if b == "straight":
        return build_straight(float(_need(g, "length", "geometry")), int(_need(g, "nelem", "geometry")), k, cs,
                              origin=g.get("origin", (0.0, 0.0, 0.0)))
    if b == "arc":
        return build_arc(float(_need(g, "radius", "geometry")), float(_need(g, "angle", "geometry")),
                         int(_need(g, "nelem", "geometry")), k, cs, plane=g.get("plane", "x1x2"))
    if b == "helix":
        mesh, _ = build_helix(float(_need(g, "R0", "geometry")), float(_need(g, "h0", "geometry")),
                              float(_need(g, "coils", "geometry")), int(_need(g, "nelem", "geometry")), k, cs)
        return mesh
    if b == "polyline":
        return build_polyline(_need(g, "points", "geometry"), int(_need(g, "nelem_per_segment", "geometry")), k, cs)
    return build_fork(float(_need(g, "length", "geometry")), float(_need(g, "radius", "geometry")),
                      int(_need(g, "nelem_shaft", "geometry")), int(_need(g, "nelem_tine", "geometry")), k, cs)


def _node(v):
    return v if isinstance(v, str) else int(v)


def build_load_case(p: Problem) -> LoadCase:
    bcs = []
    for b in p.bcs:
        t = b["type"]
        if t == "clamp_position":
            bcs.append(ClampPosition(_node(b["node"]), b.get("value")))
        elif t == "clamp_rotation":
            bcs.append(ClampRotation(_node(b["node"])))
        else:
            bcs.append(PrescribeRotation(_node(b["node"]), _need(b, "psi", "prescribe_rotation"), b.get("label", "load")))
    for ld in p.loads:
        t, label = ld["type"], ld.get("label", "load")
        if t == "point_force":
            bcs.append(PointForce(_node(_need(ld, "node", t)), _need(ld, "F", t), label))
        elif t == "point_moment":
            bcs.append(PointMoment(_node(_need(ld, "node", t)), _need(ld, "m", t), ld.get("frame", "spatial"), label))
        else:
            bcs.append(DistributedForce(int(_need(ld, "element", t)), _need(ld, "q", t), label))
    s = p.solver
    if "phases" in s:
        phases = tuple(LoadPhase(int(ph["steps"]), tuple(ph["labels"]) if "labels" in ph else None) for ph in s["phases"])
    else:
        phases = (LoadPhase(int(s.get("steps", 1))),)
    return LoadCase(tuple(bcs), phases)


def solver_config(p: Problem) -> SolverConfig:
    s = p.solver
    integ = s.get("integration", "reduced")
    if integ not in ("full", "reduced"):
        raise ProblemError(f"solver.integration must be 'full' or 'reduced', got {integ!r}")
    return SolverConfig(
        tol_res=float(s.get("tol_res", 1e-10)),
        tol_inc=float(s.get("tol_inc", 1e-10)),
        max_iter=int(s.get("max_iter", 50)),
        condense=bool(s.get("condense", True)),
        integration="full" if integ == "full" else "reduced_gamma",
        max_cuts=int(s.get("max_cuts", 6)),
    )


def rollup_problem(nelem: int = 8, k: int = 1) -> Problem:
    """Example document: the roll-up cantilever (unit length, EI = 1, slenderness 10)."""
    EA = 12.0 * 100.0
    return Problem(
        geometry={"builder": "straight", "length": 1.0, "nelem": nelem, "k": k},
        cross_section={"EA": EA, "GA2": EA / 2, "GA3": EA / 2, "GIt": 1.0, "EI2": 1.0, "EI3": 1.0},
        bcs=[{"type": "clamp_position", "node": "root"}, {"type": "clamp_rotation", "node": "root"}],
        loads=[{"type": "point_moment", "node": "tip", "m": [0.0, 0.0, 4.0 * math.pi], "frame": "spatial", "label": "load"}],
        solver={"steps": 4, "condense": True, "integration": "reduced"},
    )
