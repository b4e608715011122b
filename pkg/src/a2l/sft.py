"""Turn annotated trajectories into stage-tagged chat samples for fine-tuning."""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from a2l import prompts
from a2l.annotation import DirectionSample, VerifierPairSample
from a2l.codec import TokenMap, encode_at, serialize_chunk
from a2l.core import AnnotatedTrajectory, DatasetManifest, write_dataset
from a2l.errors import EmptyInput, IoFailure, UnknownField, WrongStage

STAGES = ("subtask", "motion_plan", "action", "verifier_pair", "direction_aux")
_STAGE_ORDER = {s: k for k, s in enumerate(STAGES)}


@dataclass(frozen=True)
class Turn:
    role: str
    text: str
    images: tuple[str, ...] = ()


@dataclass(frozen=True)
class SftSample:
    stage: str
    messages: tuple[Turn, ...]
    traj: str
    step: int
    variant: str = "language"

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.variant not in ("language", "action_token"):
            raise ValueError(f"unknown variant {self.variant!r}")
        roles = [t.role for t in self.messages]
        if roles.count("assistant") != 1 or roles[-1] != "assistant":
            raise ValueError("sample needs exactly one assistant turn, in last position")
        if not any(t.role == "user" and t.images for t in self.messages):
            raise ValueError("user turn must carry at least one observation")

    @property
    def assistant_text(self) -> str:
        return self.messages[-1].text

    @property
    def user_text(self) -> str:
        return next(t.text for t in self.messages if t.role == "user")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "variant": self.variant,
            "source": {"traj": self.traj, "step": self.step},
            "messages": [{"role": t.role, "text": t.text, "images": list(t.images)} for t in self.messages],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SftSample":
        return cls(
            stage=d["stage"],
            variant=d["variant"],
            traj=d["source"]["traj"],
            step=d["source"]["step"],
            messages=tuple(Turn(m["role"], m["text"], tuple(m["images"])) for m in d["messages"]),
        )


def render_subtask_list(subtasks: Sequence[str]) -> str:
    return "[" + ", ".join(repr(s) for s in subtasks) + "]"


def _pair(stage, traj, step, prompt, images, answer) -> SftSample:
    return SftSample(stage, (Turn("user", prompt, tuple(images)), Turn("assistant", answer)), traj, step)


def export_stage_samples(traj: AnnotatedTrajectory, remaining_lists: bool = False) -> list[SftSample]:
    """One subtask-list sample per trajectory (at the first observation), then
    a motion-plan and an action sample per step.

    With ``remaining_lists`` every later step also gets a subtask sample whose
    target is the list of steps still to do.
    """
    out = []
    prompt = prompts.subtask_prompt(traj.instruction)
    for s in traj.steps:
        if s.index == 0 or remaining_lists:
            out.append(_pair("subtask", traj.id, s.index, prompt, [s.obs], render_subtask_list(traj.subtasks[s.index :])))
        out.append(_pair("motion_plan", traj.id, s.index, prompts.motion_prompt(s.subtask), [s.obs], s.main_movements))
        out.append(
            _pair(
                "action",
                traj.id,
                s.index,
                prompts.action_prompt(s.subtask, s.main_movements),
                [s.obs],
                serialize_chunk(s.chunk),
            )
        )
    return out


def verifier_pair_sample(p: VerifierPairSample) -> SftSample:
    prompt = prompts.verifier_instructions() + "\n" + prompts.verifier_query(p.subtask, p.next_subtask)
    answer = json.dumps({"success": p.label})
    return _pair("verifier_pair", p.traj, p.step, prompt, [p.obs_before, p.obs_after], answer)


def direction_sample(d: DirectionSample) -> SftSample:
    return _pair("direction_aux", d.traj, d.step, prompts.direction_prompt(d.subtask, d.axis), [d.obs], d.label)


def to_at_variant(sample: SftSample, token_map: TokenMap | None = None) -> SftSample:
    if sample.stage != "action":
        raise WrongStage(f"action-token variant applies to action samples, not {sample.stage!r}")
    turns = list(sample.messages)
    turns[-1] = replace(turns[-1], text=encode_at(turns[-1].text, token_map))
    return replace(sample, messages=tuple(turns), variant="action_token")


def sort_key(s: SftSample):
    return (s.traj, s.step, _STAGE_ORDER[s.stage], s.variant)


def write_sft_jsonl(samples: Iterable[SftSample], path, seed: int = 0, source: str = "") -> DatasetManifest:
    """Deterministic merge, seeded shuffle, one conversation per line."""
    ordered = sorted(samples, key=sort_key)
    if not ordered:
        raise EmptyInput("no SFT samples to write")
    random.Random(seed).shuffle(ordered)
    lines = [json.dumps(s.to_dict(), ensure_ascii=False) for s in ordered]
    counts = Counter(s.stage for s in ordered)
    return write_dataset(lines, path, dict(counts), source)


def load_sft_jsonl(path) -> list[SftSample]:
    p = Path(path)
    if p.is_dir():
        p = p / "data.jsonl"
    return [SftSample.from_dict(json.loads(line)) for line in p.read_text(encoding="utf-8").splitlines() if line]


# --- training manifest ------------------------------------------------------


@dataclass(frozen=True)
class TrainingManifest:
    base_model: str = "Gemma-3-12B-IT"
    frameworks: str = "TRL, Accelerate, DeepSpeed (ZeRO Stage 2)"
    fine_tuning_method: str = "PEFT (LoRA)"
    precision: str = "bfloat16"
    lora_rank: int = 16
    lora_alpha: int = 32
    target_modules: str = "q_proj, k_proj, v_proj, o_proj, up_proj, down_proj, gate_proj"
    optimizer: str = "AdamW"
    learning_rate: float = 5e-5
    lr_scheduler: str = "linear decay"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    global_batch_size: int = 1
    per_device_batch_size: int = 1
    gradient_accumulation_steps: int = 2
    effective_global_batch_size: int = 8
    max_sequence_length: int = 1024
    epochs: int = 1

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def loads(cls, text: str) -> "TrainingManifest":
        values = {}
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            k, _, v = line.partition("=")
            values[k.strip()] = v.strip()
        return emit_training_manifest(values)


def emit_training_manifest(overrides: Mapping[str, object] | None = None, path=None) -> TrainingManifest:
    types = {f.name: {"int": int, "float": float, "str": str}[f.type] for f in fields(TrainingManifest)}
    clean = {}
    for k, v in (overrides or {}).items():
        if k not in types:
            raise UnknownField(k)
        clean[k] = types[k](v)
    manifest = TrainingManifest(**clean)
    if path is not None:
        try:
            Path(path).write_text(manifest.dumps(), encoding="utf-8")
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
    return manifest
