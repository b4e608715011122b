"""Closed-loop three-stage rollout: plan subtasks once, then per subtask
motion plan -> actions -> safety filter -> execute -> verify."""

from __future__ import annotations

import ast
import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from a2l import prompts
from a2l.backend import Backend, ChatRequest, Clock, Part, SystemClock, assistant, document, text, user
from a2l.codec import parse_chunk
from a2l.core import ActionChunk
from a2l.errors import (
    BackendError,
    CodecError,
    EmptyPlan,
    EpisodeAborted,
    MissingPath,
    ParseFailure,
)
from a2l.sim import Box, Region, SimEnv, execute, safety_filter

log = logging.getLogger(__name__)

try:
    import tomllib
except ModuleNotFoundError:  # py < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class RolloutConfig:
    subtask_temperature: float = 0.5
    ood_subtask_temperature: float = 1.0
    ood: bool = False
    motion_temperature: float = 0.1
    action_temperature: float = 0.5
    verifier_temperature: float = 0.0
    top_p: float = 0.95
    max_retries: int = 3
    max_cycles: int = 64
    max_tokens: int = 512
    policy_model: str = "policy"
    verifier_model: str = "verifier"

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be >= 1")

    @property
    def planning_temperature(self) -> float:
        return self.ood_subtask_temperature if self.ood else self.subtask_temperature


@dataclass(frozen=True)
class VerifierVerdict:
    success: bool
    confidence: str
    reasoning: str
    parse_failed: bool = False


@dataclass
class Cycle:
    subtask_index: int
    attempt: int
    started: float
    motion_plan: str
    raw_actions: str
    parsed: ActionChunk | None
    filtered: ActionChunk | None
    verdict: VerifierVerdict
    latency: dict[str, float]
    before: dict
    after: dict
    outcome: str = ""

    def to_dict(self) -> dict:
        return {
            "subtask_index": self.subtask_index,
            "attempt": self.attempt,
            "started": round(self.started, 3),
            "motion_plan": self.motion_plan,
            "raw_actions": self.raw_actions,
            "parsed": self.parsed.to_lists() if self.parsed is not None else None,
            "filtered": self.filtered.to_lists() if self.filtered is not None else None,
            "verdict": {
                "success": self.verdict.success,
                "confidence": self.verdict.confidence,
                "reasoning": self.verdict.reasoning,
                "parse_failed": self.verdict.parse_failed,
            },
            "latency": {k: round(v, 3) for k, v in self.latency.items()},
            "before": self.before,
            "after": self.after,
            "outcome": self.outcome,
        }


@dataclass
class RolloutLog:
    episode_id: str
    instruction: str
    plan: list[str] = field(default_factory=list)
    cycles: list[Cycle] = field(default_factory=list)
    status: str = "running"
    scenario: str = ""
    rubric: str = ""
    params: dict = field(default_factory=dict)
    final: dict | None = None

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "scenario": self.scenario,
            "rubric": self.rubric,
            "params": self.params,
            "instruction": self.instruction,
            "plan": list(self.plan),
            "status": self.status,
            "cycles": [c.to_dict() for c in self.cycles],
            "final": self.final,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"


def descriptor_part(env: SimEnv, name: str = "observation.json") -> Part:
    return document(env.describe(), name)


# --- stage 1: subtasks ------------------------------------------------------


def parse_subtask_list(reply: str) -> list[str]:
    start = reply.find("[")
    end = reply.rfind("]")
    while start >= 0 and end > start:
        try:
            value = ast.literal_eval(reply[start : end + 1])
        except (ValueError, SyntaxError):
            end = reply.rfind("]", 0, end)
            continue
        if not isinstance(value, list) or not all(isinstance(s, str) for s in value):
            raise ParseFailure("subtask reply is not a list of strings")
        items = [s.strip() for s in value if s.strip()]
        if not items:
            raise EmptyPlan("subtask list is empty")
        return items
    raise ParseFailure("no bracketed list in subtask reply")


def plan_subtasks(policy: Backend, obs: Part, instruction: str, cfg: RolloutConfig) -> list[str]:
    messages = [user(obs, text(prompts.subtask_prompt(instruction)))]
    last = None
    for _ in range(cfg.max_retries + 1):
        req = ChatRequest(
            cfg.policy_model, tuple(messages), cfg.planning_temperature, cfg.top_p, cfg.max_tokens
        )
        reply = policy.complete(req).text
        try:
            return parse_subtask_list(reply)
        except ParseFailure as exc:
            last = exc
            log.info("subtask plan unparseable: %s", exc)
    raise ParseFailure(f"no usable subtask plan after {cfg.max_retries + 1} tries: {last}")


# --- stage 2: motion plan ---------------------------------------------------


def gen_motion_plan(policy: Backend, obs: Part, subtask: str, cfg: RolloutConfig) -> str:
    if not subtask.strip():
        raise ValueError("subtask is empty")
    req = ChatRequest(
        cfg.policy_model,
        (user(obs, text(prompts.motion_prompt(subtask))),),
        cfg.motion_temperature,
        cfg.top_p,
        cfg.max_tokens,
    )
    return policy.complete(req).text.strip()


# --- stage 3: actions -------------------------------------------------------


@dataclass(frozen=True)
class ActionGeneration:
    chunk: ActionChunk
    raw_text: str
    reprompted: bool = False


def gen_actions(policy: Backend, obs: Part, subtask: str, motion_plan: str, cfg: RolloutConfig) -> ActionGeneration:
    if not motion_plan.strip():
        raise ValueError("motion plan is empty")
    messages = [user(obs, text(prompts.action_prompt(subtask, motion_plan)))]
    raws = []
    for attempt in range(2):
        req = ChatRequest(cfg.policy_model, tuple(messages), cfg.action_temperature, cfg.top_p, cfg.max_tokens)
        reply = policy.complete(req).text
        raws.append(reply)
        try:
            chunk, _ = parse_chunk(reply)
            return ActionGeneration(chunk, reply, attempt > 0)
        except CodecError as exc:
            messages += [
                assistant(reply),
                user(text(f"Your reply could not be parsed ({exc}). PROVIDE ONLY THE PYTHON LIST.")),
            ]
    raise ParseFailure("action reply unparseable after reprompt: " + " | ".join(r[:80] for r in raws))


# --- verifier ---------------------------------------------------------------

_FENCE = re.compile(r"^\s*```[^\n]*\n(.*?)\n?```\s*$", re.S)


def parse_verdict(reply: str) -> VerifierVerdict:
    m = _FENCE.match(reply)
    body = m.group(1) if m else reply.strip()
    try:
        d = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ParseFailure(f"verifier reply is not JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ParseFailure("verifier reply is not an object")
    if not isinstance(d.get("success"), bool):
        raise ParseFailure("'success' must be a boolean")
    if d.get("confidence") not in ("High", "Medium", "Low"):
        raise ParseFailure("'confidence' must be High, Medium or Low")
    if not isinstance(d.get("reasoning"), str):
        raise ParseFailure("'reasoning' must be a string")
    return VerifierVerdict(d["success"], d["confidence"], d["reasoning"])


def verify(
    verifier: Backend,
    before: Part,
    after: Part,
    subtask: str,
    next_subtask: str | None,
    cfg: RolloutConfig,
) -> VerifierVerdict:
    messages = [
        user(
            text(prompts.verifier_instructions()),
            text(prompts.verifier_query(subtask, next_subtask)),
            before,
            after,
        )
    ]
    last = None
    for _ in range(2):
        req = ChatRequest(cfg.verifier_model, tuple(messages), cfg.verifier_temperature, 1.0, cfg.max_tokens)
        reply = verifier.complete(req).text
        try:
            return parse_verdict(reply)
        except ParseFailure as exc:
            last = exc
            messages += [assistant(reply), user(text(f"Invalid reply ({exc}). " + prompts.VERDICT_FORMAT))]
    log.warning("verifier reply unparseable, treating as failure: %s", last)
    return VerifierVerdict(False, "Low", f"unparseable verifier reply: {last}", parse_failed=True)


# --- episode ----------------------------------------------------------------


def run_episode(
    policy: Backend,
    verifier: Backend,
    env: SimEnv,
    instruction: str,
    cfg: RolloutConfig = RolloutConfig(),
    clock: Clock | None = None,
    episode_id: str = "episode",
    observe: Callable[[SimEnv], Part] = descriptor_part,
) -> tuple[RolloutLog, SimEnv]:
    """Run one episode; returns the log and the final environment.

    Subtasks that never verify are abandoned after ``cfg.max_retries`` retries
    (status ``forced-advance``) so the episode still yields a scoreable log.
    """
    clock = clock or SystemClock()
    rlog = RolloutLog(episode_id, instruction)
    try:
        plan = plan_subtasks(policy, observe(env), instruction, cfg)
    except (ParseFailure, BackendError) as exc:
        rlog.status = "aborted"
        rlog.final = env.snapshot()
        raise EpisodeAborted(str(exc), rlog) from exc
    rlog.plan = list(plan)

    i, attempt, forced = 0, 0, False
    while i < len(plan):
        if len(rlog.cycles) >= cfg.max_cycles:
            rlog.status = "cap-exceeded"
            break
        subtask = plan[i]
        nxt = plan[i + 1] if i + 1 < len(plan) else None
        before_env = env
        obs = observe(env)
        started = clock.now()
        try:
            t0 = clock.now()
            motion = gen_motion_plan(policy, obs, subtask, cfg)
            t1 = clock.now()
            parsed = filtered = None
            try:
                gen = gen_actions(policy, obs, subtask, motion, cfg)
                raw, parsed = gen.raw_text, gen.chunk
            except ParseFailure as exc:
                raw = str(exc)
            t2 = clock.now()
            if parsed is not None:
                filtered = safety_filter(parsed, env)
                env = execute(env, filtered)
                verdict = verify(verifier, obs, observe(env), subtask, nxt, cfg)
            else:
                verdict = VerifierVerdict(False, "Low", "no executable actions")
            t3 = clock.now()
        except BackendError as exc:
            rlog.status = "aborted"
            rlog.final = env.snapshot()
            raise EpisodeAborted(str(exc), rlog) from exc

        cycle = Cycle(
            subtask_index=i,
            attempt=attempt,
            started=started,
            motion_plan=motion,
            raw_actions=raw,
            parsed=parsed,
            filtered=filtered,
            verdict=verdict,
            latency={"motion": t1 - t0, "action": t2 - t1, "cycle": t2 - t0, "verify": t3 - t2},
            before=before_env.snapshot(),
            after=env.snapshot(),
        )
        if verdict.success:
            cycle.outcome = "advance"
            i, attempt = i + 1, 0
        elif attempt >= cfg.max_retries:
            cycle.outcome = "forced-advance"
            forced = True
            i, attempt = i + 1, 0
        else:
            cycle.outcome = "retry"
            attempt += 1
        rlog.cycles.append(cycle)
    else:
        rlog.status = "forced-advance" if forced else "complete"
    rlog.final = env.snapshot()
    return rlog, env


# --- scenarios --------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    id: str
    instruction: str
    rubric: str
    ood: bool
    seeds: tuple[int, ...]
    start: tuple[float, float, float]
    workspace: Box
    objects: dict
    regions: tuple[Region, ...]
    jitter: float = 0.0
    params: dict = field(default_factory=dict)

    def make_env(self, seed: int) -> SimEnv:
        rng = random.Random(seed)
        objs = {}
        for name, pos in self.objects.items():
            if self.jitter:
                pos = (pos[0] + rng.uniform(-self.jitter, self.jitter), pos[1] + rng.uniform(-self.jitter, self.jitter), pos[2])
            objs[name] = tuple(pos)
        return SimEnv.create(self.start, objs, self.workspace, self.regions)


def scenario_from_dict(d: dict, default_id: str = "scenario") -> Scenario:
    ws = d["workspace"]
    return Scenario(
        id=d.get("id", default_id),
        instruction=d["instruction"],
        rubric=d.get("rubric", ""),
        ood=bool(d.get("ood", False)),
        seeds=tuple(d.get("seeds", [0])),
        start=tuple(d["start"]),
        workspace=Box(tuple(ws["lo"]), tuple(ws["hi"])),
        objects={o["name"]: tuple(o["position"]) for o in d.get("objects", [])},
        regions=tuple(Region(r["name"], Box(tuple(r["lo"]), tuple(r["hi"]))) for r in d.get("regions", [])),
        jitter=float(d.get("jitter", 0.0)),
        params=dict(d.get("params", {})),
    )


def load_scenario(path) -> Scenario:
    """Load a scenario TOML file; bare names resolve to the bundled scenarios."""
    from importlib import resources

    p = Path(path)
    if not p.exists():
        name = p.name if p.suffix == ".toml" else p.name + ".toml"
        bundled = resources.files("a2l").joinpath(f"assets/scenarios/{name}")
        if not bundled.is_file():
            raise MissingPath(p)
        return scenario_from_dict(tomllib.loads(bundled.read_text("utf-8")), Path(name).stem)
    return scenario_from_dict(tomllib.loads(p.read_text(encoding="utf-8")), p.stem)
