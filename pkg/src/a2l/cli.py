"""Command-line entry point: ``a2l <subcommand> ...``.

Settings are layered: a flat TOML file (``--config``) is overridden by
``A2L_<KEY>`` environment variables, which are overridden by flags.

Exit codes: 0 ok, 2 usage, 3 data, 4 annotation, 5 backend, 6 rollout, 7 empty input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Sequence

from a2l import prompts
from a2l.annotation import AnnotationJobConfig, Progress, annotate_many, make_direction_samples, make_verifier_pairs
from a2l.backend import Backend, BackendConfig, HttpTransport, VirtualClock, image, load_mock_script, make_mock, text, user
from a2l.codec import CoalesceConfig, coalesce, quantize, serialize_chunk
from a2l.core import (
    _Num,
    dumps,
    load_annotated_dataset,
    load_manifest,
    load_raw_dataset,
    loads_line,
    save_annotated_dataset,
    write_dataset,
)
from a2l.errors import A2LError, EmptyInput, EpisodeAborted, MalformedRecord, MissingPath, UnknownField
from a2l.evaluation import aggregate, cycle_durations, histogram, latency_stats, load_rubric, report_table, representation_probe, score_trial
from a2l.rollout import RolloutConfig, load_scenario, run_episode
from a2l.sft import direction_sample, emit_training_manifest, export_stage_samples, to_at_variant, verifier_pair_sample, write_sft_jsonl
from a2l.sim import SimEnv

try:
    import tomllib
except ModuleNotFoundError:  # py < 3.11
    import tomli as tomllib

log = logging.getLogger("a2l")

EXIT_USAGE = 2


@dataclass(frozen=True)
class Settings:
    seed: int = 0
    jobs: int = 1
    endpoint: str = "http://localhost:8000/v1"
    api_key_env: str = "A2L_API_KEY"
    annotator_model: str = "annotator"
    policy_model: str = "policy"
    verifier_model: str = "verifier"
    timeout: float = 120.0
    max_retries: int = 3
    max_attempts: int = 3
    max_cycles: int = 64
    subtask_temperature: float = 0.5
    ood_subtask_temperature: float = 1.0
    motion_temperature: float = 0.1
    action_temperature: float = 0.5
    top_p: float = 0.95
    axis_cap: float = 0.05
    negatives_per_positive: int = 1


def _coerce(name: str, value) -> object:
    kinds = {f.name: f.type for f in fields(Settings)}
    if name not in kinds:
        raise UnknownField(name)
    kind = {"int": int, "float": float, "str": str}[kinds[name]]
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise UnknownField(f"{name}={value!r} (expected {kinds[name]})") from None


def load_settings(config: str | None, overrides: dict, environ=os.environ) -> Settings:
    values: dict = {}
    if config:
        p = Path(config)
        if not p.is_file():
            raise MissingPath(p)
        for k, v in tomllib.loads(p.read_text(encoding="utf-8")).items():
            values[k] = _coerce(k, v)
    for f in fields(Settings):
        env = environ.get(f"A2L_{f.name.upper()}")
        if env is not None:
            values[f.name] = _coerce(f.name, env)
    values.update({k: _coerce(k, v) for k, v in overrides.items() if v is not None})
    return Settings(**values)


# --- backends ---------------------------------------------------------------


def _backend(args, settings: Settings, role: str, model: str, logprobs: bool = False, clock=None) -> Backend:
    """Scripted backend from ``<mock>/<role>.json`` when --mock is given, else HTTP."""
    if args.mock:
        script = load_mock_script(Path(args.mock) / f"{role}.json")
        return make_mock(script, BackendConfig(model=model, logprobs=True), clock or VirtualClock())
    cfg = BackendConfig(
        endpoint=settings.endpoint,
        model=model,
        api_key_env=settings.api_key_env,
        timeout=settings.timeout,
        max_retries=settings.max_retries,
        logprobs=logprobs,
    )
    return Backend(HttpTransport(), cfg, clock)


# --- subcommands ------------------------------------------------------------


def _source(path) -> str:
    """Provenance of an input: its content id when it has a manifest, else its name.

    Never the full path, so outputs do not depend on where the inputs live.
    """
    p = Path(path)
    try:
        return load_manifest(p if p.is_dir() else p.parent).dataset_id
    except (MissingPath, ValueError, KeyError):
        return p.name


def cmd_annotate(args, s: Settings) -> int:
    raws = load_raw_dataset(args.inp)
    if not raws:
        raise EmptyInput(f"no trajectories under {args.inp}")
    backend = _backend(args, s, "annotator", s.annotator_model)
    cfg = AnnotationJobConfig(
        model=s.annotator_model,
        max_attempts=s.max_attempts,
        concurrency=s.jobs,
        coalesce=CoalesceConfig(axis_cap=s.axis_cap),
    )
    sink = None
    if args.progress:
        fh = open(args.progress, "w", encoding="utf-8")
        sink = lambda line: fh.write(line + "\n")  # noqa: E731
    try:
        out = annotate_many(raws, backend, cfg, backend.clock, Progress(sink))
    finally:
        if sink:
            fh.close()
    m = save_annotated_dataset(out, args.out, source=_source(args.inp))
    print(f"annotated {m.total} trajectories -> {args.out} ({m.dataset_id})")
    return 0


def _is_annotated(path: Path) -> bool:
    files = [path] if path.is_file() else sorted(path.glob("*.jsonl"))
    for f in files:
        for n, line in enumerate(f.read_text(encoding="utf-8").splitlines(), 1):
            if line.strip():
                try:
                    rec = loads_line(line)
                except ValueError as exc:
                    raise MalformedRecord(n, str(exc), str(f)) from None
                return isinstance(rec, dict) and "steps" in rec
    raise EmptyInput(f"no records under {path}")


def cmd_chunk(args, s: Settings) -> int:
    src = Path(args.inp)
    if not src.exists():
        raise MissingPath(src)
    cfg = CoalesceConfig(axis_cap=s.axis_cap)
    if _is_annotated(src):
        trajs = load_annotated_dataset(src)
        out = [
            replace(t, steps=tuple(replace(st, chunk=quantize(coalesce(st.chunk, cfg))) for st in t.steps))
            for t in trajs
        ]
        m = save_annotated_dataset(out, args.out, source=_source(src))
    else:
        raws = load_raw_dataset(src)
        lines = [
            dumps({"id": r.id, "instruction": r.instruction, "actions": _Num(serialize_chunk(coalesce(r.actions, cfg)))})
            for r in raws
        ]
        m = write_dataset(lines, args.out, {"trajectories": len(lines)}, _source(src))
    print(f"chunked {m.total} trajectories -> {args.out}")
    return 0


def cmd_export_sft(args, s: Settings) -> int:
    trajs = load_annotated_dataset(args.inp)
    samples = []
    for t in trajs:
        stage = export_stage_samples(t)
        samples += stage
        if args.at:
            samples += [to_at_variant(x) for x in stage if x.stage == "action"]
        pairs = make_verifier_pairs(t, s.seed, s.negatives_per_positive, strict=False)
        samples += [verifier_pair_sample(p) for p in pairs]
        samples += [direction_sample(d) for d in make_direction_samples(t)]
    m = write_sft_jsonl(samples, args.out, s.seed, _source(args.inp))
    if args.manifest:
        emit_training_manifest(path=args.manifest)
    counts = ", ".join(f"{k}={v}" for k, v in sorted(m.counts.items()))
    print(f"wrote {m.total} samples -> {args.out} ({counts})")
    return 0


def _run_one(args, s: Settings, scenario, seed: int):
    # one clock per episode, so mock latencies of both backends land on it
    clock = VirtualClock() if args.mock else None
    policy = _backend(args, s, "policy", s.policy_model, clock=clock)
    verifier = _backend(args, s, "verifier", s.verifier_model, clock=clock)
    cfg = RolloutConfig(
        subtask_temperature=s.subtask_temperature,
        ood_subtask_temperature=s.ood_subtask_temperature,
        ood=scenario.ood,
        motion_temperature=s.motion_temperature,
        action_temperature=s.action_temperature,
        top_p=s.top_p,
        max_retries=s.max_retries,
        max_cycles=s.max_cycles,
        policy_model=s.policy_model,
        verifier_model=s.verifier_model,
    )
    episode_id = f"{scenario.id}-seed{seed}"
    try:
        rlog, _ = run_episode(policy, verifier, scenario.make_env(seed), scenario.instruction, cfg, policy.clock, episode_id)
        err = None
    except EpisodeAborted as exc:
        rlog, err = exc.log, exc
    rlog.scenario, rlog.rubric, rlog.params = scenario.id, scenario.rubric, dict(scenario.params)
    return rlog, err


def cmd_rollout(args, s: Settings) -> int:
    scenario = load_scenario(args.scenario)
    seeds = [args.seed] if args.seed is not None else list(scenario.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, s.jobs)) as pool:
        results = list(pool.map(lambda seed: _run_one(args, s, scenario, seed), seeds))
    failed = None
    for rlog, err in results:
        (out / f"{rlog.episode_id}.json").write_text(rlog.dumps(), encoding="utf-8")
        print(f"{rlog.episode_id}: {rlog.status}, {len(rlog.cycles)} cycles")
        failed = failed or err
    if failed:
        raise failed
    return 0


def _log_files(path) -> list[Path]:
    p = Path(path)
    if not p.exists():
        raise MissingPath(p)
    return [p] if p.is_file() else sorted(p.glob("*.json"))


def _read_logs(path) -> list[dict]:
    return [json.loads(f.read_text(encoding="utf-8")) for f in _log_files(path)]


def cmd_eval(args, s: Settings) -> int:
    logs = _read_logs(args.inp)
    if not logs:
        raise EmptyInput(f"no rollout logs under {args.inp}")
    cards = []
    for d in logs:
        rubric = load_rubric(args.rubric or d["rubric"])
        card = score_trial(d, SimEnv.from_snapshot(d["final"]), rubric)
        cards.append((d.get("scenario") or rubric.id, card))
    summary = aggregate(cards)
    table = report_table(summary)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "scores.jsonl").write_text(
            "".join(json.dumps(c.to_dict(), sort_keys=True) + "\n" for _, c in cards), encoding="utf-8"
        )
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (out / "report.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def cmd_stats(args, s: Settings) -> int:
    stats = latency_stats(cycle_durations(_read_logs(args.inp)))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "latency.json").write_text(json.dumps(stats.to_dict(), indent=2) + "\n", encoding="utf-8")
        (out / "latency.txt").write_text(stats.table(), encoding="utf-8")
    sys.stdout.write(stats.table())
    return 0


def cmd_probe(args, s: Settings) -> int:
    trajs = load_annotated_dataset(args.inp)
    backend = _backend(args, s, "scorer", s.policy_model, logprobs=True)
    rows = []
    for t in trajs:
        for st in t.steps:
            msgs = (user(image(st.obs), text(prompts.action_prompt(st.subtask, st.main_movements))),)
            lang, at = representation_probe(backend, msgs, st.chunk)
            rows.append({"traj": t.id, "step": st.index, "language": lang, "action_token": at})
    if not rows:
        raise EmptyInput(f"no steps to probe under {args.inp}")
    hist = {
        key: [[lo, n] for lo, n in histogram([r[key] for r in rows])] for key in ("language", "action_token")
    }
    body = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "probe.jsonl").write_text(body, encoding="utf-8")
        (out / "histogram.json").write_text(json.dumps(hist, indent=2) + "\n", encoding="utf-8")
    for key in ("language", "action_token"):
        mean = sum(r[key] for r in rows) / len(rows)
        print(f"{key:<13} mean logprob {mean:.4f} over {len(rows)} chunks")
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="a2l", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="<command>")

    def add(name, fn, help, inp=True, inp_required=True):
        p = sub.add_parser(name, help=help, description=help)
        p.set_defaults(fn=fn)
        if inp:
            p.add_argument("--in", dest="inp", required=inp_required, help="input file or directory")
        p.add_argument("--out", help="output directory")
        p.add_argument("--config", help="flat TOML settings file")
        p.add_argument("--seed", type=int, help="random seed")
        return p

    p = add("annotate", cmd_annotate, "relabel raw trajectories with the annotator model")
    p.add_argument("--jobs", type=int, help="concurrent annotation calls")
    p.add_argument("--mock", help="directory holding scripted backend replies (annotator.json)")
    p.add_argument("--progress", help="write per-attempt JSON lines here")

    add("chunk", cmd_chunk, "coalesce the actions of a raw or annotated dataset")

    p = add("export-sft", cmd_export_sft, "write the fine-tuning corpus from annotated trajectories")
    p.add_argument("--at", action="store_true", help="also emit reserved-token variants of action samples")
    p.add_argument("--manifest", help="write the training hyperparameter manifest to this file")

    p = add("rollout", cmd_rollout, "run closed-loop episodes for a scenario", inp=False)
    p.add_argument("--scenario", required=True, help="scenario TOML file or bundled scenario name")
    p.add_argument("--jobs", type=int, help="episodes run concurrently")
    p.add_argument("--mock", help="directory holding scripted replies (policy.json, verifier.json)")

    p = add("eval", cmd_eval, "score rollout logs against their rubrics")
    p.add_argument("--rubric", help="rubric file or bundled rubric name (default: the one named in each log)")

    p = add("stats", cmd_stats, "latency statistics over rollout logs", inp_required=False)
    p.add_argument("--logs", dest="inp", help="alias of --in")

    p = add("probe", cmd_probe, "compare log-probabilities of language and reserved-token action text")
    p.add_argument("--mock", help="directory holding scripted scorer replies (scorer.json)")
    return parser


_NEEDS_OUT = (cmd_annotate, cmd_chunk, cmd_export_sft, cmd_rollout)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "inp", "") is None:
        print(f"a2l {args.command}: --in is required", file=sys.stderr)
        return EXIT_USAGE
    if args.fn in _NEEDS_OUT and not args.out:
        print(f"a2l {args.command}: --out is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        overrides = {"seed": args.seed, "jobs": getattr(args, "jobs", None)}
        settings = load_settings(args.config, overrides)
        return args.fn(args, settings)
    except A2LError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
