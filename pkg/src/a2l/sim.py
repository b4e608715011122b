"""Deterministic desk-scale 4-DoF manipulation stand-in.

Point objects, a box workspace, and a gripper that attaches the nearest object
within its grasp radius when it closes. Environments are immutable; ``step``
returns a new one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

from a2l.core import Action, ActionChunk
from a2l.errors import InvariantViolation, UnknownEntity

Vec = tuple[float, float, float]

GRASP_RADIUS = 0.03
CONTACT_RADIUS = 0.02
LIFT_THRESHOLD = 0.05


def dist(a: Vec, b: Vec) -> float:
    return math.dist(a, b)


@dataclass(frozen=True)
class Box:
    lo: Vec
    hi: Vec

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise InvariantViolation("box", "bounds", f"{self.lo} not <= {self.hi}")

    def contains(self, p: Vec, tol: float = 0.0) -> bool:
        return all(l - tol <= v <= h + tol for l, v, h in zip(self.lo, p, self.hi))


@dataclass(frozen=True)
class Region:
    name: str
    box: Box


@dataclass(frozen=True)
class SimObject:
    """A point object plus the episode statistics the scorer needs."""

    name: str
    position: Vec
    initial: Vec
    grasp_radius: float = GRASP_RADIUS
    start_dist: float = math.inf
    min_dist: float = math.inf
    max_lift: float = 0.0


@dataclass(frozen=True)
class SimEnv:
    ee: Vec
    gripper: float
    objects: tuple[SimObject, ...]
    workspace: Box
    regions: tuple[Region, ...] = ()
    held: str | None = None
    contact_radius: float = CONTACT_RADIUS
    lift_threshold: float = LIFT_THRESHOLD

    def __post_init__(self):
        if not self.workspace.contains(self.ee, 1e-12):
            raise InvariantViolation("env", "ee", f"{self.ee} outside workspace")

    @classmethod
    def create(cls, ee, objects, workspace: Box, regions=(), gripper: float = 1.0, **kw) -> "SimEnv":
        """Fresh environment; ``objects`` maps name -> position (or (position, grasp_radius))."""
        ee = tuple(float(v) for v in ee)
        objs = []
        for name, spec in dict(objects).items():
            pos, radius = (spec, GRASP_RADIUS) if len(spec) == 3 else spec
            pos = tuple(float(v) for v in pos)
            d0 = dist(ee, pos)
            objs.append(SimObject(name, pos, pos, radius, d0, d0, 0.0))
        return cls(ee, float(gripper), tuple(objs), workspace, tuple(regions), **kw)

    def obj(self, name: str) -> SimObject:
        for o in self.objects:
            if o.name == name:
                return o
        raise UnknownEntity(name)

    def region(self, name: str) -> Region:
        for r in self.regions:
            if r.name == name:
                return r
        raise UnknownEntity(name)

    def snapshot(self) -> dict:
        return {
            "ee": list(self.ee),
            "gripper": self.gripper,
            "held": self.held,
            "objects": [
                {
                    "name": o.name,
                    "position": list(o.position),
                    "initial": list(o.initial),
                    "grasp_radius": o.grasp_radius,
                    "start_dist": o.start_dist,
                    "min_dist": o.min_dist,
                    "max_lift": o.max_lift,
                }
                for o in self.objects
            ],
            "workspace": {"lo": list(self.workspace.lo), "hi": list(self.workspace.hi)},
            "regions": [{"name": r.name, "lo": list(r.box.lo), "hi": list(r.box.hi)} for r in self.regions],
            "contact_radius": self.contact_radius,
            "lift_threshold": self.lift_threshold,
        }

    @classmethod
    def from_snapshot(cls, d: dict) -> "SimEnv":
        return cls(
            ee=tuple(d["ee"]),
            gripper=d["gripper"],
            objects=tuple(
                SimObject(
                    o["name"], tuple(o["position"]), tuple(o["initial"]), o["grasp_radius"],
                    o["start_dist"], o["min_dist"], o["max_lift"],
                )
                for o in d["objects"]
            ),
            workspace=Box(tuple(d["workspace"]["lo"]), tuple(d["workspace"]["hi"])),
            regions=tuple(Region(r["name"], Box(tuple(r["lo"]), tuple(r["hi"]))) for r in d["regions"]),
            held=d["held"],
            contact_radius=d["contact_radius"],
            lift_threshold=d["lift_threshold"],
        )

    def describe(self) -> str:
        """Scene descriptor handed to backends in place of a camera image."""
        body = {
            "end_effector": [round(v, 3) for v in self.ee],
            "gripper": "open" if self.gripper == 1.0 else "closed",
            "holding": self.held,
            "objects": {o.name: [round(v, 3) for v in o.position] for o in self.objects},
        }
        return json.dumps(body, sort_keys=True)


def _clamp_axis(p: float, d: float, lo: float, hi: float) -> float:
    if p + d > hi:
        d = hi - p
        while p + d > hi:
            d = math.nextafter(d, -math.inf)
    elif p + d < lo:
        d = lo - p
        while p + d < lo:
            d = math.nextafter(d, math.inf)
    return d + 0.0


def safety_filter(chunk: ActionChunk | Sequence[Action], env: SimEnv) -> ActionChunk:
    """Clamp each displacement so the end-effector stays inside the workspace box.

    Offending components are shortened to land exactly on the boundary (zeroed
    when already there); gripper commands pass through.
    """
    out = []
    p = list(env.ee)
    lo, hi = env.workspace.lo, env.workspace.hi
    for a in chunk:
        d = [_clamp_axis(p[i], a.delta[i], lo[i], hi[i]) for i in range(3)]
        p = [p[i] + d[i] for i in range(3)]
        out.append(Action(d[0], d[1], d[2], a.gripper))
    return ActionChunk(tuple(out))


def step(env: SimEnv, action: Action) -> SimEnv:
    ee = tuple(env.ee[i] + action.delta[i] for i in range(3))
    held = env.held
    objs = [replace(o, position=ee) if o.name == held else o for o in env.objects]

    if action.gripper == 0.0 and env.gripper == 1.0 and held is None:
        near = [(dist(ee, o.position), k) for k, o in enumerate(objs) if dist(ee, o.position) < o.grasp_radius]
        if near:
            _, k = min(near)
            held = objs[k].name
            objs[k] = replace(objs[k], position=ee)
    elif action.gripper == 1.0 and held is not None:
        held = None

    updated = []
    for o in objs:
        lift = o.position[2] - o.initial[2] if o.name == held else 0.0
        updated.append(replace(o, min_dist=min(o.min_dist, dist(ee, o.position)), max_lift=max(o.max_lift, lift)))
    return replace(env, ee=ee, gripper=action.gripper, objects=tuple(updated), held=held)


def execute(env: SimEnv, chunk: ActionChunk | Sequence[Action]) -> SimEnv:
    for a in chunk:
        env = step(env, a)
    return env
