import random
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from a2l.backend import make_mock
from a2l.backend import text, user
from a2l.core import Action, ActionChunk
from a2l.errors import EmptyInput, MissingPath, UnknownEntity
from a2l.evaluation import (
    Milestone,
    Rubric,
    aggregate,
    bundled_rubrics,
    cycle_durations,
    histogram,
    latency_stats,
    load_rubric,
    representation_probe,
    score_trial,
)
from a2l.rollout import load_scenario

durations = st.lists(st.floats(0.01, 100.0, allow_nan=False), min_size=1, max_size=50)


@given(durations, st.randoms())
def test_latency_stats_ignore_order(xs, rnd):
    ys = list(xs)
    rnd.shuffle(ys)
    assert latency_stats(xs) == latency_stats(ys)


@given(durations)
def test_latency_stats_are_ordered(xs):
    s = latency_stats(xs)
    assert s.min <= s.p25 <= s.median <= s.p75 <= s.max
    assert s.min <= s.mean <= s.max and s.std >= 0


def test_latency_stats_against_numpy_small_cases():
    for xs in ([1.0, 2.0], [5.0, 1.0, 3.0], [2.0, 2.0, 2.0, 9.0]):
        s = latency_stats(xs)
        assert s.p25 == pytest.approx(np.percentile(xs, 25), abs=1e-12)
        assert s.std == pytest.approx(np.std(xs, ddof=1), abs=1e-12)


def test_latency_stats_errors():
    with pytest.raises(EmptyInput, match="no durations"):
        latency_stats([])
    with pytest.raises(ValueError):
        latency_stats([1.0, -2.0])


def test_latency_table_rounds_to_tenths():
    table = latency_stats([10.0, 11.0, 12.5]).table()
    assert "Median               11.0 [s]" in table
    assert "Interquartile Range  10.5 - 11.8 [s]" in table


def test_cycle_durations_flatten_logs():
    logs = [{"cycles": [{"latency": {"cycle": 1.5}}, {"latency": {"cycle": 2.0}}]}, {"cycles": []}]
    assert cycle_durations(logs) == [1.5, 2.0]


def test_bundled_rubrics():
    assert set(bundled_rubrics()) >= {"pick_up", "pick_place", "pick_place_lift", "pick_up_t", "pick_up_a"}
    assert load_rubric("pick_place_lift").max_points == 5
    with pytest.raises(MissingPath):
        load_rubric("dance")
    with pytest.raises(ValueError):
        Rubric("x", 2, (Milestone(1, "a", ()), Milestone(3, "b", ())))


def _env(**objs):
    env = load_scenario("pick_place_lift").make_env(0)
    return replace(env, objects=tuple(replace(o, **objs.get(o.name, {})) for o in env.objects))


STAGES = [
    {},
    {"eggplant": {"min_dist": 0.0}},
    {"eggplant": {"min_dist": 0.0, "position": (0.27, -0.11, 0.03)}},
    {"eggplant": {"min_dist": 0.0, "position": (0.27, -0.11, 0.03)}, "fish": {"min_dist": 0.01}},
    {"eggplant": {"min_dist": 0.0, "position": (0.27, -0.11, 0.03)}, "fish": {"min_dist": 0.0, "max_lift": 0.1}},
]


def test_rubric_is_monotone():
    rubric = load_rubric("pick_place_lift")
    log = {"plan": ["eggplant to the pan, then the fish"], "cycles": []}
    points = [score_trial(log, _env(**s), rubric).points for s in STAGES]
    assert points == [1, 2, 3, 4, 5]
    card = score_trial(log, _env(**STAGES[3]), rubric)
    assert [met for _, met in card.trace] == [True, True, True, True, False]
    assert card.keyword_ok is True and card.fraction == 0.8


def test_cumulative_points_need_every_lower_milestone():
    rubric = load_rubric("pick_place_lift")
    log = {"plan": ["grab it"], "cycles": []}
    assert score_trial(log, _env(**STAGES[4]), rubric).points == 0


def test_unknown_entities_are_rejected():
    env = load_scenario("pick_up").make_env(0)
    with pytest.raises(UnknownEntity):
        score_trial({"plan": []}, env, load_rubric("pick_place_lift"))


def test_aggregate():
    rubric = load_rubric("pick_place_lift")
    cards = [("ppl", score_trial({"plan": ["eggplant pan fish"]}, _env(**s), rubric)) for s in STAGES[:2]]
    summary = aggregate(cards)
    assert summary == {"ppl": {"trials": 2, "points": 3, "max": 10, "mean_fraction": 0.3}}


def test_probe_is_unbiased_under_equal_scores():
    backend = make_mock([{"response": "", "token_logprob": -1.25, "repeat": True}])
    chunk = ActionChunk((Action(0.01, -0.02, 0.0, 1),))
    lang, at = representation_probe(backend, (user(text("act")),), chunk)
    assert lang == at == -1.25
    forced = [r.forced_completion for r in backend.transcript]
    assert forced[0] == "[[0.010, -0.020, 0.0, 1.0]]" and "<unused6134>" in forced[1]


def test_histogram():
    assert histogram([-0.1, -0.4, -0.6, -2.0], 0.5) == [(-2.0, 1), (-1.0, 1), (-0.5, 2)]


def test_probe_reflects_scripted_gap():
    backend = make_mock(
        [
            {"match": "<unused", "response": "", "token_logprob": -5.0, "repeat": True},
            {"response": "", "token_logprob": -0.5, "repeat": True},
        ]
    )
    rng = random.Random(0)
    chunk = ActionChunk(tuple(Action(round(rng.uniform(-0.05, 0.05), 3), 0, 0, 1) for _ in range(3)))
    lang, at = representation_probe(backend, (user(text("act")),), chunk)
    assert lang > at
