"""Rubric scoring of rollout logs, keyword checks on plans, latency summaries,
and the language-vs-reserved-token log-probability probe."""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from a2l.backend import Backend, Message, score_completion
from a2l.codec import TokenMap, encode_at, serialize_chunk
from a2l.core import ActionChunk
from a2l.errors import EmptyInput, MissingPath
from a2l.sim import SimEnv

try:
    import tomllib
except ModuleNotFoundError:  # py < 3.11
    import tomli as tomllib


# --- keywords ---------------------------------------------------------------


@dataclass(frozen=True)
class KeywordSpec:
    groups: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(g) for g in self.groups))
        if any(not g for g in self.groups):
            raise ValueError("every keyword group needs at least one synonym")


def synonyms() -> dict[str, list[str]]:
    return tomllib.loads(resources.files("a2l").joinpath("assets/keywords.toml").read_text("utf-8"))


def keyword_spec(entities: Sequence[str], table: Mapping[str, Sequence[str]] | None = None) -> KeywordSpec:
    table = synonyms() if table is None else table
    return KeywordSpec(tuple(tuple(table.get(e, [e])) for e in entities))


def keyword_score(text: str, spec: KeywordSpec) -> bool:
    low = text.lower()
    return bool(text) and all(any(w.lower() in low for w in group) for group in spec.groups)


# --- rubrics ----------------------------------------------------------------


@dataclass(frozen=True)
class Milestone:
    points: int
    name: str
    require: tuple[str, ...]


@dataclass(frozen=True)
class Rubric:
    id: str
    max_points: int
    milestones: tuple[Milestone, ...]
    keywords: tuple[str, ...] = ()
    title: str = ""

    def __post_init__(self):
        pts = [m.points for m in self.milestones]
        if pts != list(range(1, self.max_points + 1)):
            raise ValueError(f"rubric {self.id}: milestone points must be 1..{self.max_points}, got {pts}")

    @classmethod
    def from_dict(cls, d: dict) -> "Rubric":
        return cls(
            id=d["id"],
            max_points=int(d["max"]),
            milestones=tuple(Milestone(int(m["points"]), m["name"], tuple(m["require"])) for m in d["milestones"]),
            keywords=tuple(d.get("keywords", ())),
            title=d.get("title", ""),
        )


def load_rubric(name_or_path) -> Rubric:
    p = Path(name_or_path)
    if p.exists():
        return Rubric.from_dict(tomllib.loads(p.read_text(encoding="utf-8")))
    stem = p.stem
    res = resources.files("a2l").joinpath(f"assets/rubrics/{stem}.toml")
    if not res.is_file():
        raise MissingPath(p)
    return Rubric.from_dict(tomllib.loads(res.read_text("utf-8")))


def bundled_rubrics() -> list[str]:
    root = resources.files("a2l").joinpath("assets/rubrics")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


@dataclass(frozen=True)
class ScoreCard:
    episode_id: str
    rubric_id: str
    points: int
    max_points: int
    trace: tuple[tuple[str, bool], ...]
    keyword_ok: bool | None = None

    def __post_init__(self):
        if not 0 <= self.points <= self.max_points:
            raise ValueError("points out of range")

    @property
    def fraction(self) -> float:
        return self.points / self.max_points

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "rubric": self.rubric_id,
            "points": self.points,
            "max": self.max_points,
            "milestones": [{"name": n, "met": ok} for n, ok in self.trace],
            "keywords": self.keyword_ok,
        }


def _as_dict(log) -> dict:
    return log if isinstance(log, dict) else log.to_dict()


def planning_text(log) -> str:
    """Everything the policy said about its plan: subtasks plus motion plans."""
    d = _as_dict(log)
    return "\n".join(list(d.get("plan", [])) + [c.get("motion_plan", "") for c in d.get("cycles", [])])


def _subst(token: str, params: Mapping[str, object]) -> str:
    for k, v in params.items():
        token = token.replace(f"${k}", str(v))
    return token


APPROACH_MARGIN = 0.05


def _predicate(expr: str, env: SimEnv, planned: bool | None) -> bool:
    kind, _, arg = expr.partition(":")
    if kind == "planned":
        return bool(planned)
    if kind == "contacted":
        return env.obj(arg).min_dist < env.contact_radius
    if kind == "lifted":
        return env.obj(arg).max_lift >= env.lift_threshold
    if kind == "approached":
        o = env.obj(arg)
        return o.min_dist <= o.start_dist - APPROACH_MARGIN
    if kind == "placed":
        obj, _, region = arg.partition("@")
        o = env.obj(obj)
        return env.held != o.name and env.region(region).box.contains(o.position)
    raise ValueError(f"unknown milestone predicate {expr!r}")


def score_trial(log, env_final: SimEnv, rubric: Rubric) -> ScoreCard:
    """Points are the highest milestone reached with every lower milestone also met."""
    d = _as_dict(log)
    params = d.get("params", {}) or {}
    check_entities(rubric, env_final, params)
    planned = None
    if rubric.keywords:
        spec = keyword_spec([_subst(k, params) for k in rubric.keywords])
        planned = keyword_score(planning_text(d), spec)
    trace, points, broken = [], 0, False
    for m in rubric.milestones:
        met = all(_predicate(_subst(r, params), env_final, planned) for r in m.require)
        trace.append((m.name, met))
        if met and not broken:
            points = m.points
        else:
            broken = True
    return ScoreCard(d.get("episode_id", ""), rubric.id, points, rubric.max_points, tuple(trace), planned)


def check_entities(rubric: Rubric, env: SimEnv, params: Mapping[str, object] | None = None) -> None:
    for m in rubric.milestones:
        for r in m.require:
            kind, _, arg = _subst(r, params or {}).partition(":")
            if kind == "planned":
                continue
            obj, _, region = arg.partition("@")
            env.obj(obj)
            if region:
                env.region(region)


def aggregate(cards: Sequence[tuple[str, ScoreCard]]) -> dict:
    """Per-scenario trial count and mean points fraction."""
    out: dict[str, dict] = {}
    for scenario, card in cards:
        row = out.setdefault(scenario, {"trials": 0, "points": 0, "max": 0, "fractions": []})
        row["trials"] += 1
        row["points"] += card.points
        row["max"] += card.max_points
        row["fractions"].append(card.fraction)
    return {
        k: {
            "trials": v["trials"],
            "points": v["points"],
            "max": v["max"],
            "mean_fraction": round(math.fsum(v["fractions"]) / v["trials"], 6),
        }
        for k, v in sorted(out.items())
    }


def report_table(summary: Mapping[str, dict]) -> str:
    lines = [f"{'scenario':<24} {'trials':>6} {'points':>8} {'mean':>7}"]
    for k, v in summary.items():
        lines.append(f"{k:<24} {v['trials']:>6} {v['points']:>4}/{v['max']:<3} {v['mean_fraction']:>7.3f}")
    return "\n".join(lines) + "\n"


# --- latency ------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyStats:
    median: float
    mean: float
    std: float
    p25: float
    p75: float
    min: float
    max: float
    n: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("n", "median", "mean", "std", "p25", "p75", "min", "max")}

    def table(self) -> str:
        return (
            f"Median               {self.median:.1f} [s]\n"
            f"Mean (Average)       {self.mean:.1f} [s]\n"
            f"Standard Deviation   {self.std:.1f} [s]\n"
            f"Interquartile Range  {self.p25:.1f} - {self.p75:.1f} [s]\n"
            f"Minimum              {self.min:.1f} [s]\n"
            f"Maximum              {self.max:.1f} [s]\n"
            f"Cycles               {self.n}\n"
        )


def _percentile(xs: Sequence[float], q: float) -> float:
    h = (len(xs) - 1) * q
    lo = math.floor(h)
    if lo + 1 >= len(xs):
        return xs[-1]
    return xs[lo] + (h - lo) * (xs[lo + 1] - xs[lo])


def latency_stats(durations: Sequence[float]) -> LatencyStats:
    """Summary of per-cycle wall-clock durations (seconds).

    Percentiles interpolate linearly between order statistics; the standard
    deviation uses the n-1 denominator and is 0 for a single sample.
    """
    xs = sorted(float(x) for x in durations)
    if not xs:
        raise EmptyInput("no durations")
    if any(not (x > 0 and math.isfinite(x)) for x in xs):
        raise ValueError("durations must be positive and finite")
    n = len(xs)
    mean = min(max(math.fsum(xs) / n, xs[0]), xs[-1])
    std = math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / (n - 1)) if n > 1 else 0.0
    return LatencyStats(
        median=_percentile(xs, 0.5),
        mean=mean,
        std=std,
        p25=_percentile(xs, 0.25),
        p75=_percentile(xs, 0.75),
        min=xs[0],
        max=xs[-1],
        n=n,
    )


def cycle_durations(logs: Sequence) -> list[float]:
    return [c["latency"]["cycle"] for log in logs for c in _as_dict(log).get("cycles", [])]


# --- representation probe -------------------------------------------------------


def representation_probe(
    backend: Backend,
    messages: Sequence[Message],
    chunk: ActionChunk,
    token_map: TokenMap | None = None,
) -> tuple[float, float]:
    """Mean per-token log-probability of the chunk written as language vs. as reserved tokens."""
    lang = serialize_chunk(chunk)
    _, lang_mean = score_completion(backend, messages, lang)
    _, at_mean = score_completion(backend, messages, encode_at(lang, token_map))
    return lang_mean, at_mean


def histogram(values: Sequence[float], width: float = 0.5) -> list[tuple[float, int]]:
    counts: dict[float, int] = {}
    for v in values:
        lo = math.floor(v / width) * width
        counts[lo] = counts.get(lo, 0) + 1
    return sorted(counts.items())
