"""Actions as text: coalescing, canonical list serialization, parsing, and the
reserved-token digit encoding used by the action-token variant."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

from a2l.core import Action, ActionChunk
from a2l.errors import (
    BadArity,
    EmptyChunk,
    GripperNotBinary,
    InvariantViolation,
    NoListFound,
    NonNumeric,
)

GRIPPER_TOL = 1e-6


@dataclass(frozen=True)
class CoalesceConfig:
    axis_cap: float = 0.05
    sign_conflict_enabled: bool = True
    # Recorded for provenance only; the default boundary rule does not use it.
    per_axis_note: float = 0.025
    partition_tolerance: float = 5e-4

    def __post_init__(self):
        if self.axis_cap <= 0:
            raise ValueError("axis_cap must be positive")
        if self.per_axis_note <= 0:
            raise ValueError("per_axis_note must be positive")


def _sign(v: float) -> int:
    return (v > 0) - (v < 0)


def coalesce_groups(raw: Sequence[Action], cfg: CoalesceConfig = CoalesceConfig()) -> list[list[int]]:
    """Partition ``raw`` into contiguous groups; returns the member indices of each group.

    A new group starts before action ``a`` when its gripper differs from the
    group's, when any axis would flip sign against the running sum, or when any
    running per-axis sum would exceed ``cfg.axis_cap`` in magnitude.
    """
    groups: list[list[int]] = []
    acc = [0.0, 0.0, 0.0]
    grip = None
    for k, a in enumerate(raw):
        if not isinstance(a, Action):
            raise InvariantViolation("coalesce", f"input[{k}]", "not an Action")
        d = a.delta
        cut = False
        if groups:
            if a.gripper != grip:
                cut = True
            elif cfg.sign_conflict_enabled and any(
                acc[i] != 0 and d[i] != 0 and _sign(acc[i]) != _sign(d[i]) for i in range(3)
            ):
                cut = True
            elif any(abs(acc[i] + d[i]) > cfg.axis_cap for i in range(3)):
                cut = True
        if not groups or cut:
            groups.append([])
            acc = [0.0, 0.0, 0.0]
            grip = a.gripper
        groups[-1].append(k)
        acc = [acc[i] + d[i] for i in range(3)]
    return groups


def coalesce(raw: Sequence[Action], cfg: CoalesceConfig = CoalesceConfig()) -> ActionChunk:
    raw = list(raw)
    out = []
    for members in coalesce_groups(raw, cfg):
        s = [0.0, 0.0, 0.0]
        for k in members:
            s = [s[i] + raw[k].delta[i] for i in range(3)]
        out.append(Action(s[0], s[1], s[2], raw[members[0]].gripper))
    return ActionChunk(tuple(out))


def quantize(chunk: ActionChunk, places: int = 3) -> ActionChunk:
    """Round displacements to the stored precision (removes float summation noise)."""
    return ActionChunk(
        tuple(
            Action(round(a.dx, places) + 0.0, round(a.dy, places) + 0.0, round(a.dz, places) + 0.0, a.gripper)
            for a in chunk
        )
    )


# --- text form ------------------------------------------------------------


def format_component(v: float) -> str:
    v = round(v, 3)
    if v == 0:
        return "0.0"
    return f"{v:.3f}"


def serialize_chunk(chunk: ActionChunk | Iterable[Action]) -> str:
    actions = list(chunk)
    if not actions:
        raise EmptyChunk()
    rows = []
    for a in actions:
        g = "1.0" if a.gripper == 1.0 else "0.0"
        rows.append(f"[{format_component(a.dx)}, {format_component(a.dy)}, {format_component(a.dz)}, {g}]")
    return "[" + ", ".join(rows) + "]"


@dataclass(frozen=True)
class ParseDiagnostics:
    stripped_fences: bool
    source_span: tuple[int, int]


_NUMBER = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?")
_FENCE_OPEN = re.compile(r"\A\s*```[^\n]*\n")


def _to_number(v) -> float:
    if isinstance(v, bool):
        raise NonNumeric(str(v))
    if isinstance(v, (int, float)):
        return float(v)
    text = str(v).strip()
    if not _NUMBER.fullmatch(text):
        raise NonNumeric(text)
    return float(text)


def chunk_from_rows(rows: Sequence) -> ActionChunk:
    """Validate already-split rows (strings or numbers) into a chunk."""
    if not rows:
        raise EmptyChunk()
    actions = []
    for i, row in enumerate(rows):
        if not isinstance(row, (list, tuple)):
            raise BadArity(i)
        if len(row) != 4:
            raise BadArity(i, len(row))
        dx, dy, dz, g = (_to_number(x) for x in row)
        if abs(g) <= GRIPPER_TOL:
            g = 0.0
        elif abs(g - 1.0) <= GRIPPER_TOL:
            g = 1.0
        else:
            raise GripperNotBinary(g)
        actions.append(Action(dx, dy, dz, g))
    return ActionChunk(tuple(actions))


def _balanced_span(text: str, start: int) -> tuple[int, int]:
    depth = 0
    for k in range(start, len(text)):
        c = text[k]
        if c == "[":
            depth += 1
        elif c == "]":
            depth -= 1
            if depth == 0:
                return start, k + 1
    raise NoListFound("unbalanced brackets")


def _split_top(body: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for c in body:
        if c == "[":
            depth += 1
        elif c == "]":
            depth -= 1
        if c == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(c)
    parts.append("".join(cur))
    return [p.strip() for p in parts]


def parse_chunk(text: str) -> tuple[ActionChunk, ParseDiagnostics]:
    """Extract the first bracketed list-of-lists from model output.

    Surrounding code fences and prose are tolerated; anything after the first
    balanced list is ignored.
    """
    fenced = False
    offset = 0
    m = _FENCE_OPEN.match(text)
    if m:
        fenced = True
        offset = m.end()
    start = text.find("[", offset)
    if start < 0:
        raise NoListFound()
    lo, hi = _balanced_span(text, start)
    body = text[lo + 1 : hi - 1]
    items = [p for p in _split_top(body)] if body.strip() else []
    rows = []
    for i, item in enumerate(items):
        if not (item.startswith("[") and item.endswith("]")):
            raise BadArity(i)
        inner = item[1:-1]
        fields = _split_top(inner) if inner.strip() else []
        if len(fields) != 4:
            raise BadArity(i, len(fields))
        rows.append(fields)
    return chunk_from_rows(rows), ParseDiagnostics(fenced, (lo, hi))


# --- reserved-token encoding ------------------------------------------------


@dataclass(frozen=True)
class TokenMap:
    digit_to_token: dict[str, str]
    token_id_base: int
    token_ids: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if sorted(self.digit_to_token) != list("0123456789"):
            raise ValueError("token map must cover exactly the digits 0-9")
        if len(set(self.digit_to_token.values())) != 10:
            raise ValueError("token map is not injective")
        if any(not t for t in self.digit_to_token.values()):
            raise ValueError("empty token string")

    @property
    def token_to_digit(self) -> dict[str, str]:
        return {t: d for d, t in self.digit_to_token.items()}

    @classmethod
    def default(cls) -> "TokenMap":
        return cls.from_table(resources.files("a2l").joinpath("assets/digit_tokens.tsv").read_text("utf-8"))

    @classmethod
    def from_table(cls, text: str) -> "TokenMap":
        """Parse a tab-separated ``digit  token  token_id`` table (header optional)."""
        d2t, ids = {}, {}
        for line in text.splitlines():
            cols = line.split("\t")
            if len(cols) != 3 or not cols[0].strip().isdigit():
                continue
            digit, token, tid = (c.strip() for c in cols)
            d2t[digit] = token
            ids[digit] = int(tid)
        return cls(d2t, min(ids.values()) if ids else 0, ids)

    def to_table(self) -> str:
        lines = ["digit\ttoken\ttoken_id"]
        for d in "9876543210":
            lines.append(f"{d}\t{self.digit_to_token[d]}\t{self.token_ids.get(d, self.token_id_base + int(d))}")
        return "\n".join(lines) + "\n"


def encode_at(text: str, token_map: TokenMap | None = None) -> str:
    m = (token_map or _default_map()).digit_to_token
    return "".join(m.get(c, c) for c in text)


def decode_at(text: str, token_map: TokenMap | None = None) -> str:
    tm = token_map or _default_map()
    inv = tm.token_to_digit
    pattern = re.compile("|".join(re.escape(t) for t in sorted(inv, key=len, reverse=True)))
    return pattern.sub(lambda m: inv[m.group(0)], text)


_DEFAULT: TokenMap | None = None


def _default_map() -> TokenMap:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = TokenMap.default()
    return _DEFAULT
