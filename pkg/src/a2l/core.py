"""Trajectory and annotation types plus their newline-delimited JSON storage."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from a2l.errors import (
    EmptyInput,
    InvariantViolation,
    IoFailure,
    MalformedRecord,
    MissingPath,
    SerializationFailure,
)

SCHEMA_VERSION = 1
MAX_STEP = 0.10
DATA_FILE = "data.jsonl"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class Action:
    """Relative end-effector displacement in the base frame plus a gripper command.

    +x forward, +y left, +z up (meters). gripper is 1.0 for open, 0.0 for closed.
    """

    dx: float
    dy: float
    dz: float
    gripper: float

    def __post_init__(self):
        for name in ("dx", "dy", "dz"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise InvariantViolation("action", name, f"not a finite number: {v!r}")
            if abs(v) > MAX_STEP:
                raise InvariantViolation("action", name, f"|{v}| exceeds {MAX_STEP} m")
            object.__setattr__(self, name, float(v))
        g = self.gripper
        if isinstance(g, bool) or g not in (0, 1):
            raise InvariantViolation("action", "gripper", f"{g!r} not in {{0, 1}}")
        object.__setattr__(self, "gripper", float(g))

    @property
    def delta(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    def as_list(self) -> list[float]:
        return [self.dx, self.dy, self.dz, self.gripper]

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "Action":
        if len(values) != 4:
            raise InvariantViolation("action", "arity", f"expected 4 values, got {len(values)}")
        return cls(*values)


@dataclass(frozen=True)
class ActionChunk:
    actions: tuple[Action, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))

    def __iter__(self) -> Iterator[Action]:
        return iter(self.actions)

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i):
        return self.actions[i]

    def to_lists(self) -> list[list[float]]:
        return [a.as_list() for a in self.actions]

    def net(self) -> tuple[float, float, float]:
        return tuple(math.fsum(a.delta[d] for a in self.actions) for d in range(3))

    @classmethod
    def from_lists(cls, rows: Iterable[Sequence[float]]) -> "ActionChunk":
        return cls(tuple(Action.from_seq(r) for r in rows))


@dataclass(frozen=True)
class Frame:
    obs: str
    action: Action


@dataclass(frozen=True)
class RawTrajectory:
    id: str
    instruction: str
    frames: tuple[Frame, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise InvariantViolation(self.id, "frames", "trajectory has no frames")
        refs = [f.obs for f in self.frames]
        if len(set(refs)) != len(refs):
            raise InvariantViolation(self.id, "frames.obs", "observation locators are not unique")

    @property
    def actions(self) -> list[Action]:
        return [f.action for f in self.frames]


@dataclass(frozen=True)
class AnnotatedStep:
    index: int
    subtask: str
    reasoning: str
    main_movements: str
    obs: str
    chunk: ActionChunk

    def __post_init__(self):
        subject = f"step {self.index}"
        if not self.subtask.strip():
            raise InvariantViolation(subject, "subtask", "empty")
        if not self.main_movements.strip():
            raise InvariantViolation(subject, "main_movements", "empty")
        if len(self.chunk) == 0:
            raise InvariantViolation(subject, "actions", "empty chunk")


@dataclass(frozen=True)
class Provenance:
    model: str
    prompt_version: str
    ts: str
    attempts: int = 1


@dataclass(frozen=True)
class AnnotatedTrajectory:
    id: str
    instruction: str
    steps: tuple[AnnotatedStep, ...]
    provenance: Provenance
    final_obs: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise InvariantViolation(self.id, "steps", "no steps")
        for expected, step in enumerate(self.steps):
            if step.index != expected:
                raise InvariantViolation(self.id, "steps.index", f"expected {expected}, got {step.index}")

    @property
    def subtasks(self) -> list[str]:
        return [s.subtask for s in self.steps]

    def flat_actions(self) -> list[Action]:
        return [a for s in self.steps for a in s.chunk]


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    counts: dict[str, int]
    schema_version: int = SCHEMA_VERSION
    source: str = ""

    def __post_init__(self):
        if any(n < 0 for n in self.counts.values()):
            raise InvariantViolation(self.dataset_id, "counts", "negative count")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_json(self) -> str:
        body = {
            "dataset_id": self.dataset_id,
            "counts": dict(sorted(self.counts.items())),
            "schema_version": self.schema_version,
            "source": self.source,
        }
        return json.dumps(body, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("schema_version", 0) > SCHEMA_VERSION:
            raise InvariantViolation(d.get("dataset_id", "?"), "schema_version", "newer than supported")
        return cls(d["dataset_id"], dict(d["counts"]), d["schema_version"], d.get("source", ""))


# --- number formatting ----------------------------------------------------

_DECIMAL = re.compile(r"-?\d+\.\d{1,6}")


class _Num(str):
    """Pre-formatted number text that the writer emits verbatim."""


def fmt3(v: float) -> str:
    """Displacement as stored on disk: exactly three fractional digits."""
    s = f"{v:.3f}"
    return "0.000" if s == "-0.000" else s


def fmt_gripper(g: float) -> str:
    return "1.0" if g == 1.0 else "0.0"


def action_json(a: Action) -> list[_Num]:
    return [_Num(fmt3(a.dx)), _Num(fmt3(a.dy)), _Num(fmt3(a.dz)), _Num(fmt_gripper(a.gripper))]


def dumps(obj) -> str:
    """Compact, key-ordered JSON writer that honours pre-formatted numbers."""
    if isinstance(obj, _Num):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if obj is None or isinstance(obj, (bool, int, float)):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{dumps(k)}: {dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _parse_float(text: str) -> float:
    if not _DECIMAL.fullmatch(text):
        raise ValueError(f"number {text!r} must have 1-6 fractional digits")
    return float(text)


def _reject_constant(name: str):
    raise ValueError(f"non-finite constant {name}")


def loads_line(line: str):
    return json.loads(line, parse_float=_parse_float, parse_constant=_reject_constant)


def _number(v, what: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"{what} is not numeric: {v!r}")
    return float(v)


def _action_from_json(v, traj_id: str, where: str) -> Action:
    if not isinstance(v, list) or len(v) != 4:
        raise ValueError(f"{where} must be a 4-element array")
    nums = [_number(x, f"{where}[{k}]") for k, x in enumerate(v)]
    try:
        return Action(*nums)
    except InvariantViolation as exc:
        raise InvariantViolation(traj_id, f"{where}.{exc.field}", str(exc)) from None


# --- files ----------------------------------------------------------------


def _data_files(path: Path) -> list[Path]:
    if not path.exists():
        raise MissingPath(path)
    if path.is_file():
        return [path]
    return sorted(p for p in path.glob("*.jsonl"))


def _iter_lines(path: Path) -> Iterator[tuple[Path, int, str]]:
    for f in _data_files(Path(path)):
        with open(f, encoding="utf-8", newline="\n") as fh:
            for n, line in enumerate(fh, start=1):
                if line.strip():
                    yield f, n, line


def _require(d: dict, key: str, kind, where: str):
    if key not in d:
        raise ValueError(f"missing key {key!r} in {where}")
    if not isinstance(d[key], kind):
        raise ValueError(f"key {key!r} in {where} has wrong type")
    return d[key]


def raw_from_dict(d: dict) -> RawTrajectory:
    if not isinstance(d, dict):
        raise ValueError("record is not an object")
    tid = _require(d, "id", str, "record")
    instruction = _require(d, "instruction", str, "record")
    frames_in = _require(d, "frames", list, "record")
    frames = []
    for t, fr in enumerate(frames_in):
        if not isinstance(fr, dict):
            raise ValueError(f"frame {t} is not an object")
        obs = _require(fr, "obs", str, f"frame {t}")
        act = _action_from_json(_require(fr, "action", list, f"frame {t}"), tid, f"frames[{t}].action")
        frames.append(Frame(obs, act))
    return RawTrajectory(tid, instruction, tuple(frames))


def raw_to_dict(raw: RawTrajectory) -> dict:
    return {
        "id": raw.id,
        "instruction": raw.instruction,
        "frames": [{"obs": f.obs, "action": action_json(f.action)} for f in raw.frames],
    }


def load_raw_dataset(path) -> list[RawTrajectory]:
    """Read every raw trajectory under ``path`` (a .jsonl file or a directory of them).

    Fails on the first malformed line; nothing is returned in that case.
    """
    out = []
    for f, n, line in _iter_lines(Path(path)):
        try:
            out.append(raw_from_dict(loads_line(line)))
        except InvariantViolation:
            raise
        except (ValueError, TypeError) as exc:
            raise MalformedRecord(n, str(exc), str(f)) from None
    return out


def annotated_to_dict(traj: AnnotatedTrajectory) -> dict:
    return {
        "id": traj.id,
        "instruction": traj.instruction,
        "provenance": {
            "model": traj.provenance.model,
            "prompt_version": traj.provenance.prompt_version,
            "ts": traj.provenance.ts,
            "attempts": traj.provenance.attempts,
        },
        "steps": [
            {
                "index": s.index,
                "subtask": s.subtask,
                "reasoning": s.reasoning,
                "main_movements": s.main_movements,
                "obs": s.obs,
                "actions": [action_json(a) for a in s.chunk],
            }
            for s in traj.steps
        ],
        "final_obs": traj.final_obs,
    }


def annotated_from_dict(d: dict) -> AnnotatedTrajectory:
    if not isinstance(d, dict):
        raise ValueError("record is not an object")
    tid = _require(d, "id", str, "record")
    prov = _require(d, "provenance", dict, "record")
    steps = []
    for k, s in enumerate(_require(d, "steps", list, "record")):
        where = f"steps[{k}]"
        rows = _require(s, "actions", list, where)
        chunk = ActionChunk(tuple(_action_from_json(r, tid, f"{where}.actions[{j}]") for j, r in enumerate(rows)))
        try:
            steps.append(
                AnnotatedStep(
                    index=_require(s, "index", int, where),
                    subtask=_require(s, "subtask", str, where),
                    reasoning=_require(s, "reasoning", str, where),
                    main_movements=_require(s, "main_movements", str, where),
                    obs=_require(s, "obs", str, where),
                    chunk=chunk,
                )
            )
        except InvariantViolation as exc:
            raise InvariantViolation(tid, exc.field, str(exc)) from None
    return AnnotatedTrajectory(
        id=tid,
        instruction=_require(d, "instruction", str, "record"),
        steps=tuple(steps),
        provenance=Provenance(
            model=_require(prov, "model", str, "provenance"),
            prompt_version=_require(prov, "prompt_version", str, "provenance"),
            ts=_require(prov, "ts", str, "provenance"),
            attempts=prov.get("attempts", 1),
        ),
        final_obs=d.get("final_obs"),
    )


def load_annotated_dataset(path) -> list[AnnotatedTrajectory]:
    out = []
    for f, n, line in _iter_lines(Path(path)):
        try:
            out.append(annotated_from_dict(loads_line(line)))
        except InvariantViolation:
            raise
        except (ValueError, TypeError, KeyError) as exc:
            raise MalformedRecord(n, str(exc), str(f)) from None
    return out


def content_id(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()[:16]


def write_dataset(lines: Sequence[str], path, counts: dict[str, int], source: str = "") -> DatasetManifest:
    """Write ``lines`` to ``<path>/data.jsonl`` plus a manifest; returns the manifest."""
    out = Path(path)
    data = "".join(line + "\n" for line in lines).encode("utf-8")
    manifest = DatasetManifest(content_id(data), counts, SCHEMA_VERSION, source)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / DATA_FILE).write_bytes(data)
        (out / MANIFEST_FILE).write_bytes(manifest.to_json().encode("utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot write dataset to {out}: {exc}") from exc
    return manifest


def save_annotated_dataset(records: Sequence[AnnotatedTrajectory], path, source: str = "") -> DatasetManifest:
    if not records:
        raise EmptyInput("no annotated trajectories to save")
    lines = []
    for r in records:
        try:
            lines.append(dumps(annotated_to_dict(r)))
        except (TypeError, ValueError) as exc:
            raise SerializationFailure(r.id, str(exc)) from exc
    return write_dataset(lines, path, {"trajectories": len(lines)}, source)


def save_raw_dataset(records: Sequence[RawTrajectory], path, source: str = "") -> DatasetManifest:
    if not records:
        raise EmptyInput("no raw trajectories to save")
    lines = [dumps(raw_to_dict(r)) for r in records]
    return write_dataset(lines, path, {"trajectories": len(lines)}, source)


def load_manifest(path) -> DatasetManifest:
    p = Path(path) / MANIFEST_FILE
    if not p.exists():
        raise MissingPath(p)
    return DatasetManifest.from_json(p.read_text(encoding="utf-8"))
