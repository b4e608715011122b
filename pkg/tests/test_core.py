import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from a2l.core import (
    Action,
    ActionChunk,
    AnnotatedStep,
    AnnotatedTrajectory,
    DatasetManifest,
    Frame,
    Provenance,
    RawTrajectory,
    annotated_from_dict,
    annotated_to_dict,
    dumps,
    fmt3,
    load_annotated_dataset,
    load_manifest,
    load_raw_dataset,
    save_annotated_dataset,
    save_raw_dataset,
)
from a2l.errors import EmptyInput, InvariantViolation, MalformedRecord, MissingPath

milli = st.integers(-100, 100).map(lambda k: k / 1000 + 0.0)
actions = st.builds(Action, milli, milli, milli, st.sampled_from([0.0, 1.0]))


@pytest.mark.parametrize("bad", [(0.2, 0, 0, 1), (0, 0, 0, 0.5), (float("nan"), 0, 0, 1), (0, float("inf"), 0, 0)])
def test_action_rejects_out_of_range(bad):
    with pytest.raises(InvariantViolation):
        Action(*bad)


def test_negative_zero_is_written_as_zero():
    assert fmt3(-0.0) == "0.000"
    assert fmt3(-0.0004) == "0.000"
    assert fmt3(-0.0006) == "-0.001"


def test_raw_trajectory_requires_unique_observations():
    a = Action(0, 0, 0, 1)
    with pytest.raises(InvariantViolation):
        RawTrajectory("t", "x", (Frame("o.jpg", a), Frame("o.jpg", a)))
    with pytest.raises(InvariantViolation):
        RawTrajectory("t", "x", ())


def _annotated(chunks) -> AnnotatedTrajectory:
    steps = tuple(
        AnnotatedStep(i, f"step {i}", "why", "how", f"obs_{i}.jpg", ActionChunk(tuple(c))) for i, c in enumerate(chunks)
    )
    return AnnotatedTrajectory("traj", "do it", steps, Provenance("m", "v1", "2025-01-01T00:00:00Z"), "obs_end.jpg")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(actions, min_size=1, max_size=5), min_size=1, max_size=5))
def test_annotated_round_trip(tmp_path_factory, chunks):
    traj = _annotated(chunks)
    out = tmp_path_factory.mktemp("ds")
    save_annotated_dataset([traj], out)
    assert load_annotated_dataset(out) == [traj]
    assert annotated_from_dict(json.loads(dumps(annotated_to_dict(traj)))) == traj


@settings(max_examples=60, deadline=None)
@given(st.lists(actions, min_size=1, max_size=12))
def test_raw_round_trip_and_three_decimals(tmp_path_factory, acts):
    raw = RawTrajectory("r", "go", tuple(Frame(f"o{k}", a) for k, a in enumerate(acts)))
    out = tmp_path_factory.mktemp("raw")
    save_raw_dataset([raw], out)
    assert load_raw_dataset(out) == [raw]
    line = (out / "data.jsonl").read_text()
    for frame in json.loads(line)["frames"]:
        assert len(frame["action"]) == 4
    assert "-0.000" not in line


def test_malformed_line_reports_location(tmp_path):
    good = dumps({"id": "a", "instruction": "x", "frames": [{"obs": "o", "action": [0.0, 0.0, 0.0, 1.0]}]})
    p = tmp_path / "d.jsonl"
    p.write_text(good + "\n" + '{"id": "b", "instruction": "x"}\n')
    with pytest.raises(MalformedRecord) as err:
        load_raw_dataset(p)
    assert err.value.line == 2


@pytest.mark.parametrize(
    "action", ["[0.0001234, 0.0, 0.0, 1.0]", "[NaN, 0.0, 0.0, 1.0]", '["0.1", 0.0, 0.0, 1.0]', "[0.0, 0.0, 1.0]"]
)
def test_bad_numbers_are_malformed(tmp_path, action):
    p = tmp_path / "d.jsonl"
    p.write_text('{"id": "a", "instruction": "x", "frames": [{"obs": "o", "action": %s}]}\n' % action)
    with pytest.raises(MalformedRecord):
        load_raw_dataset(p)


def test_out_of_range_value_is_an_invariant_violation(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"id": "a", "instruction": "x", "frames": [{"obs": "o", "action": [0.5, 0.0, 0.0, 1.0]}]}\n')
    with pytest.raises(InvariantViolation):
        load_raw_dataset(p)


def test_missing_and_empty(tmp_path):
    with pytest.raises(MissingPath):
        load_raw_dataset(tmp_path / "nope")
    with pytest.raises(EmptyInput):
        save_annotated_dataset([], tmp_path / "out")


def test_manifest_is_content_addressed(tmp_path):
    traj = _annotated([[Action(0.01, 0, 0, 1)]])
    m1 = save_annotated_dataset([traj], tmp_path / "a")
    m2 = save_annotated_dataset([traj], tmp_path / "b")
    assert m1.dataset_id == m2.dataset_id
    assert load_manifest(tmp_path / "a") == m1
    assert DatasetManifest.from_json(m1.to_json()) == m1
    assert m1.counts == {"trajectories": 1}


def test_annotated_step_indices_must_be_contiguous():
    s = AnnotatedStep(1, "a", "", "m", "o", ActionChunk((Action(0, 0, 0, 1),)))
    with pytest.raises(InvariantViolation):
        AnnotatedTrajectory("t", "x", (s,), Provenance("m", "v1", "ts"))
