"""Relabel raw teleoperation trajectories into hierarchical annotations with an
external chat model, check the returned actions against the raw log, and
derive the two augmentation sets (subtask-completion pairs and direction labels)."""

from __future__ import annotations

import json
import logging
import random
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Sequence

from a2l import prompts
from a2l.backend import Backend, ChatRequest, Clock, SystemClock, assistant, image, text, user
from a2l.codec import CoalesceConfig, chunk_from_rows, coalesce, quantize
from a2l.core import ActionChunk, AnnotatedStep, AnnotatedTrajectory, Provenance, RawTrajectory
from a2l.errors import (
    ActionParseError,
    AnnotationError,
    AnnotationExhausted,
    CodecError,
    CountMismatch,
    InvariantViolation,
    SchemaViolation,
    TooFewSteps,
    ValueMismatch,
)
from a2l.prompts import AXIS_WORDS

log = logging.getLogger(__name__)

STEP_KEYS = ("STEP_DESCRIPTION", "REASONING", "MAIN_MOVEMENTS", "ACTIONS")
DIRECTION_THRESHOLD = 0.025


@dataclass(frozen=True)
class AnnotationJobConfig:
    model: str = "annotator"
    max_attempts: int = 3
    concurrency: int = 4
    prompt_version: str = prompts.ANNOTATION_PROMPT_VERSION
    coalesce: CoalesceConfig = field(default_factory=CoalesceConfig)
    apply_coalesce: bool = True
    temperature: float = 0.0
    max_tokens: int = 8192

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")


@dataclass(frozen=True)
class StepFragment:
    subtask: str
    reasoning: str
    main_movements: str
    chunk: ActionChunk


def build_annotation_request(raw: RawTrajectory, cfg: AnnotationJobConfig = AnnotationJobConfig()) -> ChatRequest:
    body = prompts.annotation_prompt(raw.instruction, raw.actions, cfg.prompt_version)
    parts = [image(f.obs) for f in raw.frames] + [text(body)]
    return ChatRequest(cfg.model, (user(*parts),), cfg.temperature, 1.0, cfg.max_tokens)


_FENCE = re.compile(r"```[^\n]*\n(.*?)```", re.S)


def parse_annotation(reply: str) -> list[StepFragment]:
    m = _FENCE.search(reply)
    body = m.group(1) if m else reply
    start = body.find("[")
    if start < 0:
        raise SchemaViolation("<array>", None)
    try:
        data, _ = json.JSONDecoder().raw_decode(body[start:])
    except json.JSONDecodeError:
        raise SchemaViolation("<array>", None) from None
    if not isinstance(data, list) or not data:
        raise SchemaViolation("<array>", None)

    out = []
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            raise SchemaViolation("<object>", i)
        norm = {str(k).upper(): v for k, v in item.items()}
        for key in STEP_KEYS:
            if key not in norm:
                raise SchemaViolation(key, i)
        for key in STEP_KEYS[:3]:
            if not isinstance(norm[key], str):
                raise SchemaViolation(key, i)
        if not norm["STEP_DESCRIPTION"].strip():
            raise SchemaViolation("STEP_DESCRIPTION", i)
        if not norm["MAIN_MOVEMENTS"].strip():
            raise SchemaViolation("MAIN_MOVEMENTS", i)
        if not isinstance(norm["ACTIONS"], list):
            raise ActionParseError(i, TypeError("ACTIONS is not a list"))
        try:
            chunk = chunk_from_rows(norm["ACTIONS"])
        except (CodecError, InvariantViolation) as exc:
            raise ActionParseError(i, exc) from None
        out.append(
            StepFragment(
                norm["STEP_DESCRIPTION"].strip(),
                norm["REASONING"].strip(),
                norm["MAIN_MOVEMENTS"].strip(),
                chunk,
            )
        )
    return out


def validate_partition(raw: RawTrajectory, fragments: Sequence[StepFragment], tolerance: float = 5e-4) -> list[int]:
    """Check that the fragments re-partition the raw actions; return each step's first frame index."""
    if not fragments:
        raise ValueError("no fragments")
    flat = [a for f in fragments for a in f.chunk]
    expected = raw.actions
    if len(flat) != len(expected):
        raise CountMismatch(len(expected), len(flat))
    for k, (got, want) in enumerate(zip(flat, expected)):
        for axis, (g, w) in enumerate(zip(got.as_list(), want.as_list())):
            if abs(g - w) > tolerance:
                raise ValueMismatch(k, axis, g - w)
    starts, pos = [], 0
    for f in fragments:
        starts.append(pos)
        pos += len(f.chunk)
    return starts


def check_partition(raw: RawTrajectory, traj: AnnotatedTrajectory, tolerance: float = 5e-4) -> None:
    """Re-check a stored annotation against its source.

    Uncoalesced steps must echo the raw actions element-wise; coalesced steps
    must conserve the per-axis sum and final gripper of their frame span.
    """
    index = {f.obs: t for t, f in enumerate(raw.frames)}
    starts = []
    for s in traj.steps:
        if s.obs not in index:
            raise InvariantViolation(traj.id, f"steps[{s.index}].obs", "not a frame of the raw trajectory")
        starts.append(index[s.obs])
    if starts[0] != 0 or starts != sorted(starts):
        raise InvariantViolation(traj.id, "steps.obs", "steps do not start at frame 0 in order")
    bounds = starts[1:] + [len(raw.frames)]
    for s, lo, hi in zip(traj.steps, starts, bounds):
        span = raw.actions[lo:hi]
        if len(span) == len(s.chunk):
            pairs = zip(s.chunk, span)
            for k, (a, b) in enumerate(pairs):
                if any(abs(x - y) > tolerance for x, y in zip(a.as_list(), b.as_list())):
                    raise ValueMismatch(lo + k, 0, a.dx - b.dx)
            continue
        want = ActionChunk(tuple(span)).net()
        got = s.chunk.net()
        for axis in range(3):
            if abs(got[axis] - want[axis]) > tolerance:
                raise ValueMismatch(lo, axis, got[axis] - want[axis])
        if s.chunk[-1].gripper != span[-1].gripper:
            raise ValueMismatch(hi - 1, 3, s.chunk[-1].gripper - span[-1].gripper)


def iso_ts(t: float) -> str:
    return datetime.fromtimestamp(t, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class Progress:
    """Thread-safe attempt counter plus an optional per-attempt JSON-lines sink."""

    def __init__(self, sink: Callable[[str], None] | None = None):
        self.sink = sink
        self.attempts = 0
        self._lock = threading.Lock()

    def record(self, traj_id: str, attempt: int, outcome: str, resp=None) -> None:
        line = json.dumps(
            {
                "traj": traj_id,
                "attempt": attempt,
                "outcome": outcome,
                "prompt_tokens": getattr(resp, "prompt_tokens", None),
                "completion_tokens": getattr(resp, "completion_tokens", None),
            }
        )
        with self._lock:
            self.attempts += 1
            if self.sink:
                self.sink(line)
        log.info(line)


def annotate(
    raw: RawTrajectory,
    backend: Backend,
    cfg: AnnotationJobConfig = AnnotationJobConfig(),
    ts: str | None = None,
    progress: Progress | None = None,
) -> AnnotatedTrajectory:
    req = build_annotation_request(raw, cfg)
    messages = list(req.messages)
    last: Exception | None = None
    for attempt in range(1, cfg.max_attempts + 1):
        resp = backend.complete(ChatRequest(req.model, tuple(messages), req.temperature, req.top_p, req.max_tokens))
        try:
            fragments = parse_annotation(resp.text)
            starts = validate_partition(raw, fragments, cfg.coalesce.partition_tolerance)
        except AnnotationError as exc:
            last = exc
            if progress:
                progress.record(raw.id, attempt, f"rejected: {exc}", resp)
            messages += [
                assistant(resp.text),
                user(
                    text(
                        f"Your previous answer was rejected: {exc}. Return the full JSON array again, "
                        "with every action copied exactly from the trajectory log."
                    )
                ),
            ]
            continue
        if progress:
            progress.record(raw.id, attempt, "ok", resp)
        steps = []
        for i, (frag, start) in enumerate(zip(fragments, starts)):
            chunk = quantize(coalesce(frag.chunk, cfg.coalesce)) if cfg.apply_coalesce else frag.chunk
            steps.append(AnnotatedStep(i, frag.subtask, frag.reasoning, frag.main_movements, raw.frames[start].obs, chunk))
        return AnnotatedTrajectory(
            raw.id,
            raw.instruction,
            tuple(steps),
            Provenance(cfg.model, cfg.prompt_version, ts or iso_ts(SystemClock().now()), attempt),
            final_obs=raw.frames[-1].obs,
        )
    raise AnnotationExhausted(raw.id, last)


def annotate_many(
    raws: Sequence[RawTrajectory],
    backend: Backend,
    cfg: AnnotationJobConfig = AnnotationJobConfig(),
    clock: Clock | None = None,
    progress: Progress | None = None,
) -> list[AnnotatedTrajectory]:
    """Annotate with at most ``cfg.concurrency`` calls in flight; results keep input order."""
    ts = iso_ts((clock or SystemClock()).now())
    progress = progress or Progress()
    with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
        futures = [pool.submit(annotate, r, backend, cfg, ts, progress) for r in raws]
        return [f.result() for f in futures]


# --- augmentation -----------------------------------------------------------


@dataclass(frozen=True)
class VerifierPairSample:
    traj: str
    step: int
    after_index: int
    obs_before: str
    obs_after: str
    subtask: str
    next_subtask: str | None
    label: bool

    def __post_init__(self):
        if not self.label and self.after_index == self.step:
            raise InvariantViolation(self.traj, "verifier_pair", "negative pair with j == i")


def _observations(traj: AnnotatedTrajectory) -> list[str]:
    if traj.final_obs is None:
        raise TooFewSteps(f"{traj.id}: no terminal observation")
    return [s.obs for s in traj.steps] + [traj.final_obs]


def make_verifier_pairs(
    traj: AnnotatedTrajectory,
    seed: int,
    negatives_per_positive: int = 1,
    include_next: bool = True,
    strict: bool = True,
) -> list[VerifierPairSample]:
    """One positive (j = i+1) per step and ``negatives_per_positive`` seeded negatives
    with j drawn from the observation indices other than i and i+1.

    With ``strict`` a trajectory too short to supply negatives raises TooFewSteps;
    otherwise such steps get positives only.
    """
    obs = _observations(traj)
    n = len(traj.steps)
    if n < 2 and strict and negatives_per_positive > 0:
        raise TooFewSteps(f"{traj.id}: {n} step(s), negatives need at least 2")
    rng = random.Random(f"{seed}:{traj.id}")
    out = []
    for i, s in enumerate(traj.steps):
        nxt = traj.steps[i + 1].subtask if include_next and i + 1 < n else None
        out.append(VerifierPairSample(traj.id, i, i + 1, obs[i], obs[i + 1], s.subtask, nxt, True))
        candidates = [j for j in range(n + 1) if j not in (i, i + 1)]
        if not candidates:
            continue
        for _ in range(negatives_per_positive):
            j = rng.choice(candidates)
            out.append(VerifierPairSample(traj.id, i, j, obs[i], obs[j], s.subtask, nxt, False))
    return out


@dataclass(frozen=True)
class DirectionSample:
    traj: str
    step: int
    obs: str
    subtask: str
    axis: str
    label: str
    net: float


def direction_label(net: float, axis: str, threshold: float = DIRECTION_THRESHOLD) -> str:
    # rounding strips float noise from sums of 3-decimal values
    v = round(net, 9)
    if abs(v) < threshold:
        return "none"
    pos, neg = AXIS_WORDS[axis]
    return pos if v > 0 else neg


def make_direction_samples(traj: AnnotatedTrajectory, threshold: float = DIRECTION_THRESHOLD) -> list[DirectionSample]:
    out = []
    for s in traj.steps:
        net = s.chunk.net()
        for k, axis in enumerate("xyz"):
            out.append(DirectionSample(traj.id, s.index, s.obs, s.subtask, axis, direction_label(net[k], axis, threshold), net[k]))
    return out
