"""Prompt templates shipped as text assets and their renderers."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

from a2l.core import Action, fmt3, fmt_gripper

ANNOTATION_PROMPT_VERSION = "v1"


@lru_cache(maxsize=None)
def template(name: str) -> str:
    return resources.files("a2l").joinpath(f"assets/{name}").read_text("utf-8")


def annotation_prompt(instruction: str, actions: list[Action], version: str = ANNOTATION_PROMPT_VERSION) -> str:
    lines = "\n".join(
        f"[{fmt3(a.dx)}, {fmt3(a.dy)}, {fmt3(a.dz)}, {fmt_gripper(a.gripper)}]" for a in actions
    )
    log = template(f"trajectory_log_{version}.txt").format(instruction=instruction, action_lines=lines)
    return template(f"annotation_prompt_{version}.txt").format(trajectory_log_content=log)


def subtask_prompt(main_task: str) -> str:
    return template("subtask_prompt.txt").format(main_task=main_task)


def motion_prompt(subtask: str) -> str:
    return template("motion_prompt.txt").format(subtask=subtask)


def action_prompt(subtask: str, motion_plan: str) -> str:
    return template("action_prompt.txt").format(subtask=subtask, motion_plan=motion_plan)


def verifier_instructions() -> str:
    return template("verifier_prompt.txt")


VERDICT_FORMAT = (
    'Reply with a single JSON object: {"success": true or false, '
    '"confidence": "High" | "Medium" | "Low", "reasoning": "<one or two sentences>"}.'
)


def verifier_query(subtask: str, next_subtask: str | None) -> str:
    nxt = next_subtask if next_subtask else "None (this is the final subtask)"
    return (
        f"Current Subtask: {subtask}\n"
        f"Next Subtask: {nxt}\n"
        "The first attached observation is before execution, the second is after.\n"
        + VERDICT_FORMAT
    )


AXIS_WORDS = {"x": ("forward", "backward"), "y": ("left", "right"), "z": ("up", "down")}


def direction_prompt(subtask: str, axis: str) -> str:
    pos, neg = AXIS_WORDS[axis]
    return (
        f"Which way should the robot move along the {axis} axis to complete the subtask "
        f"'{subtask}'? Answer with one word: {pos}, {neg}, or none."
    )
