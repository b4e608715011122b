"""Regenerate the deterministic fixtures under tests/fixtures and scripts/all_success.

    python3 scripts/make_fixtures.py

Everything is derived from fixed seeds, so rerunning produces identical bytes.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

from a2l.core import Action, Frame, RawTrajectory, save_raw_dataset

ROOT = Path(__file__).resolve().parent.parent
FIX = ROOT / "tests" / "fixtures"

PEPPER = [
    [0.000, 0.000, 0.000, 1.0],
    [-0.002, 0.000, -0.007, 1.0],
    [0.000, -0.004, -0.016, 1.0],
    [0.002, -0.002, -0.014, 1.0],
    [0.003, 0.000, -0.008, 1.0],
    [0.002, 0.000, -0.011, 1.0],
    [0.000, 0.000, -0.005, 1.0],
    [0.000, 0.000, -0.007, 1.0],
    [0.000, 0.000, -0.006, 1.0],
    [0.001, -0.003, -0.003, 0.0],
]

# (id, instruction, [(subtask, main movements, n_actions, direction, gripper)])
CORPUS = [
    (
        "traj_carrot",
        "pick up the carrot",
        [
            ("Move to Carrot", "forward and down; gripper open", 6, (1, 0, -1), 1.0),
            ("Grasp Carrot", "close gripper", 1, (0, 0, 0), 0.0),
            ("Lift Carrot", "up; gripper closed", 4, (0, 0, 1), 0.0),
        ],
    ),
    (
        "traj_eggplant",
        "put the eggplant in the pan",
        [
            ("Move to Eggplant", "right and down; gripper open", 5, (0, -1, -1), 1.0),
            ("Grasp Eggplant", "close gripper", 1, (0, 0, 0), 0.0),
            ("Move Eggplant to Pan", "forward and up; gripper closed", 7, (1, 0, 1), 0.0),
            ("Release Eggplant", "open gripper", 1, (0, 0, 0), 1.0),
        ],
    ),
    (
        "traj_fish",
        "lift the fish",
        [
            ("Move to Fish", "left and down; gripper open", 4, (0, 1, -1), 1.0),
            ("Grasp Fish", "close gripper", 1, (0, 0, 0), 0.0),
        ],
    ),
]


def _actions(rng: random.Random, n: int, direction, gripper: float) -> list[list[float]]:
    out = []
    for _ in range(n):
        row = [round(s * rng.uniform(0.004, 0.024), 3) if s else round(rng.uniform(-0.002, 0.002), 3) for s in direction]
        out.append([v + 0.0 for v in row] + [gripper])
    return out


def build_corpus(seed: int = 7):
    rng = random.Random(seed)
    raws, replies = [], []
    for tid, instruction, plan in CORPUS:
        steps, frames = [], []
        for subtask, moves, n, direction, grip in plan:
            acts = _actions(rng, n, direction, grip)
            steps.append(
                {
                    "STEP_DESCRIPTION": subtask,
                    "REASONING": f"{subtask} next; {moves}.",
                    "MAIN_MOVEMENTS": moves,
                    "ACTIONS": acts,
                }
            )
            for a in acts:
                frames.append(Frame(f"{tid}/obs_{len(frames)}.jpg", Action(*a)))
        raws.append(RawTrajectory(tid, instruction, tuple(frames)))
        replies.append((instruction, steps))
    return raws, replies


def annotator_script(replies) -> list[dict]:
    script = []
    for k, (instruction, steps) in enumerate(replies):
        match = f"Instruction: {instruction}\n"
        if k == 1:
            # first answer drops an action; the job must retry and succeed
            bad = json.loads(json.dumps(steps))
            bad[0]["ACTIONS"] = bad[0]["ACTIONS"][:-1]
            script.append({"match": match, "response": "```json\n" + json.dumps(bad, indent=1) + "\n```", "latency": 4.0})
        script.append({"match": match, "response": "```json\n" + json.dumps(steps, indent=1) + "\n```", "latency": 6.0})
    return script


PLAN = ["Move to the carrot", "Grasp the carrot", "Lift the carrot"]
MOTION = [
    "Carrot is ahead, slightly left and below: move forward, left and down with the gripper open.",
    "Gripper is around the carrot: close it.",
    "Carrot is held: move straight up.",
]
ACTIONS = [
    "[[0.05, 0.02, -0.06, 1.0], [0.05, 0.02, -0.06, 1.0]]",
    "[[0.0, 0.0, 0.0, 0.0]]",
    "[[0.0, 0.0, 0.03, 0.0], [0.0, 0.0, 0.03, 0.0]]",
]


def policy_script() -> list[dict]:
    script = [{"response": repr(PLAN), "latency": 0.8}]
    for k, (m, a) in enumerate(zip(MOTION, ACTIONS)):
        script.append({"response": m, "latency": 1.1 + 0.2 * k})
        script.append({"response": a, "latency": 2.0 + 0.3 * k})
    return script


def verifier_script() -> list[dict]:
    return [
        {
            "response": json.dumps({"success": True, "confidence": "High", "reasoning": "subtask visibly done"}),
            "latency": 0.5,
            "repeat": True,
        }
    ]


def scorer_script() -> list[dict]:
    # reserved-token strings score lower than plain digits, as a text model would
    return [
        {"match": "<unused", "response": "", "token_logprob": -6.5, "repeat": True},
        {"response": "", "token_logprob": -0.75, "repeat": True},
    ]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def main() -> None:
    pepper = RawTrajectory(
        "pepper", "grasp the yellow pepper", tuple(Frame(f"pepper/obs_{k}.jpg", Action(*a)) for k, a in enumerate(PEPPER))
    )
    save_raw_dataset([pepper], FIX / "pepper_raw", source="fixture")

    raws, replies = build_corpus()
    save_raw_dataset(raws, FIX / "corpus" / "raw", source="fixture")
    mocks = FIX / "corpus" / "mocks"
    _write_json(mocks / "annotator.json", annotator_script(replies))
    for d in (mocks, ROOT / "scripts" / "all_success"):
        _write_json(d / "policy.json", policy_script())
        _write_json(d / "verifier.json", verifier_script())
        _write_json(d / "scorer.json", scorer_script())
    print(f"fixtures written under {FIX}")


if __name__ == "__main__":
    main()
