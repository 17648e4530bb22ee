"""Turns curated trajectories into loss-masked training samples.

Every step stays in the rendered sample (full context is preserved); only
loss participation changes. Assistant segments of steps whose observation
matched an execution-error pattern are excluded from the loss, except for
steps in the reproduction or testing phases: those observations are
*supposed* to show failures (a failing repro script is the point), so their
errors never mask anything.

Masking is whole-step: the entire assistant message of an erroneous step is
taken out of the loss. Oversize samples are dropped rather than truncated,
because truncation severs action/observation causality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Callable, Sequence

from .errors import ForgeError
from .registries import ErrorPattern, PhaseRule, load_error_patterns, load_phase_patterns
from .schema import Step, ToolCall, Trajectory

LOSS_EXEMPT_PHASES = ("reproduction", "testing")

_EDITOR_VIEW_COMMANDS = ("view",)


class EmptySampleError(ForgeError):
    """The trajectory has no assistant steps to train on."""


@dataclass(frozen=True)
class Segment:
    source: str  # system | user | assistant | observation
    step_index: int | None
    text: str
    in_loss: bool


@dataclass(frozen=True)
class TrainingSample:
    trajectory_id: str
    rendered: tuple[Segment, ...]
    token_estimate: int


@dataclass(frozen=True)
class Overflow:
    """Marker for a sample that exceeds the context limit and was dropped."""

    trajectory_id: str
    token_estimate: int
    context_limit: int


def whitespace_token_count(text: str) -> int:
    """Reference token counter: whitespace-separated chunks."""
    return len(text.split())


# ---------------------------------------------------------------------------
# Phase assignment and error detection


def assign_phases(traj: Trajectory, rules: Sequence[PhaseRule] | None = None) -> Trajectory:
    """Tag each step with a phase.

    Editor calls are phased structurally (view -> exploration, any edit ->
    editing); bash commands go through the phase-pattern registry, first
    match wins; think/finish and plain messages are "other".
    """
    if rules is None:
        rules = load_phase_patterns()
    steps = []
    for step in traj.steps:
        steps.append(replace(step, phase=_phase_for(step, rules)))
    return replace(traj, steps=tuple(steps))


def _phase_for(step: Step, rules: Sequence[PhaseRule]) -> str:
    action = step.action
    if not isinstance(action, ToolCall):
        return "other"
    if action.tool == "str_replace_editor":
        command = action.arguments.get("command", "")
        return "exploration" if command in _EDITOR_VIEW_COMMANDS else "editing"
    if action.tool == "execute_bash":
        command = action.arguments.get("command", "")
        if isinstance(command, str):
            for rule in rules:
                if rule.regex.search(command):
                    return rule.phase
        return "other"
    return "other"


def detect_step_errors(
    traj: Trajectory, patterns: Sequence[ErrorPattern] | None = None
) -> Trajectory:
    """Set each step's error_flag from its observation.

    A step is flagged exactly when its observation matches at least one
    registry pattern. Deterministic; returns a new trajectory.
    """
    if patterns is None:
        patterns = load_error_patterns()
    steps = tuple(
        replace(step, error_flag=any(p.regex.search(step.observation) for p in patterns))
        for step in traj.steps
    )
    return replace(traj, steps=steps)


# ---------------------------------------------------------------------------
# Rendering


def render_action(action: ToolCall | str) -> str:
    if isinstance(action, ToolCall):
        args = json.dumps(action.arguments, ensure_ascii=False, sort_keys=True)
        return f"{action.tool}({args})"
    return action


def _segment_text(text: str) -> str:
    return text if text.endswith("\n") else text + "\n"


def render_trajectory(traj: Trajectory, problem_statement: str | None = None) -> str:
    """Canonical unmasked rendering: the concatenation every sample's
    segment texts must reproduce exactly."""
    parts = []
    if problem_statement is not None:
        parts.append(_segment_text(problem_statement))
    for step in traj.steps:
        parts.append(_segment_text(render_action(step.action)))
        if step.observation:
            parts.append(_segment_text(step.observation))
    return "".join(parts)


def build_loss_mask(traj: Trajectory, problem_statement: str | None = None) -> TrainingSample:
    """Render a trajectory with per-segment loss participation.

    Expects error flags and phases to be assigned already. Assistant
    segments are in the loss unless their step is error-flagged in a
    non-exempt phase; system/user/observation segments never are.
    """
    segments: list[Segment] = []
    if problem_statement is not None:
        segments.append(
            Segment(source="user", step_index=None, text=_segment_text(problem_statement), in_loss=False)
        )
    assistant_count = 0
    for step in traj.steps:
        masked = step.error_flag and step.phase not in LOSS_EXEMPT_PHASES
        segments.append(
            Segment(
                source="assistant",
                step_index=step.index,
                text=_segment_text(render_action(step.action)),
                in_loss=not masked,
            )
        )
        assistant_count += 1
        if step.observation:
            segments.append(
                Segment(
                    source="observation",
                    step_index=step.index,
                    text=_segment_text(step.observation),
                    in_loss=False,
                )
            )
    if assistant_count == 0:
        raise EmptySampleError(f"{traj.trajectory_id}: no assistant steps")
    full_text = "".join(s.text for s in segments)
    return TrainingSample(
        trajectory_id=traj.trajectory_id,
        rendered=tuple(segments),
        token_estimate=whitespace_token_count(full_text),
    )


# ---------------------------------------------------------------------------
# Serialization


def serialize_sample(
    sample: TrainingSample,
    context_limit: int,
    tokenizer: Callable[[str], int] = whitespace_token_count,
) -> dict | Overflow:
    """Emit a sample record if it fits the context limit, else Overflow.

    The token estimate is recomputed with the supplied tokenizer over the
    full rendering. Per-segment in_loss markers are preserved bit-exactly.
    """
    full_text = "".join(s.text for s in sample.rendered)
    try:
        estimate = tokenizer(full_text)
    except Exception as exc:
        raise ForgeError(f"tokenizer failed on {sample.trajectory_id}: {exc}") from exc
    if estimate > context_limit:
        return Overflow(
            trajectory_id=sample.trajectory_id,
            token_estimate=estimate,
            context_limit=context_limit,
        )
    return {
        "trajectory_id": sample.trajectory_id,
        "token_estimate": estimate,
        "rendered": [
            {
                "source": s.source,
                "step_index": s.step_index,
                "text": s.text,
                "in_loss": s.in_loss,
            }
            for s in sample.rendered
        ],
    }


def parse_sample_record(record: dict) -> TrainingSample:
    """Rebuild a TrainingSample from an emitted record (round-trip exact)."""
    segments = tuple(
        Segment(
            source=seg["source"],
            step_index=seg["step_index"],
            text=seg["text"],
            in_loss=seg["in_loss"],
        )
        for seg in record["rendered"]
    )
    return TrainingSample(
        trajectory_id=record["trajectory_id"],
        rendered=segments,
        token_estimate=record["token_estimate"],
    )
