"""Five-way failure classification for unsuccessful trajectories.

The cascade is strict, first match wins:
1. failed_to_reproduce - no reproduction/testing-phase step ever showed a
   failure signature;
2. read_localization_error - reproduced, but not every golden-patch file
   was opened or inspected;
3. write_localization_error - inspected everything, but no golden file was
   edited or the edited lines share nothing with the golden patch;
4. ran_out_of_max_turns - localized correctly but hit the turn budget;
5. incorrect_implementation - everything else: right place, wrong fix.

"Inspected" counts editor tool calls, registered file-reading bash
commands, and files touched by the final patch (editing a file is the
strongest form of inspecting it; this also guarantees a trajectory that
edited every golden file can never land in read_localization_error).
"""

from __future__ import annotations

import re
import shlex
from typing import Sequence

from . import patch_analysis
from .schema import TaskInstance, ToolCall, Trajectory

FAILURE_LABELS = (
    "failed_to_reproduce",
    "read_localization_error",
    "write_localization_error",
    "ran_out_of_max_turns",
    "incorrect_implementation",
)

# Observation text that evidences a reproduced failure.
_FAILURE_SIGNATURE_RE = re.compile(
    r"Traceback \(most recent call last\)"
    r"|\bFAILED\b"
    r"|\bFAIL\b"
    r"|\bAssertionError\b"
    r"|\b[A-Z][A-Za-z]*Error\b"
    r"|\bassert(?:ion)? failed\b"
)

# Bash commands whose file arguments count as "inspecting" a file.
READER_COMMANDS = (
    "cat",
    "head",
    "tail",
    "less",
    "more",
    "nl",
    "sed",
    "awk",
    "grep",
    "rg",
    "view",
    "vi",
    "vim",
)


def _exhibits_failure(observation: str, fail_to_pass: Sequence[str]) -> bool:
    if _FAILURE_SIGNATURE_RE.search(observation):
        return True
    lower = observation.lower()
    return any(t in observation and "fail" in lower for t in fail_to_pass)


def reproduced_issue(traj: Trajectory, inst: TaskInstance) -> bool:
    """True when some reproduction/testing-phase observation shows a failure
    signature or a failing fail_to_pass test id."""
    return any(
        step.phase in ("reproduction", "testing")
        and _exhibits_failure(step.observation, inst.fail_to_pass)
        for step in traj.steps
    )


def _bash_read_paths(command: str, reader_commands: Sequence[str]) -> set[str]:
    try:
        tokens = shlex.split(command)
    except ValueError:
        tokens = command.split()
    if not tokens:
        return set()
    readers = set(reader_commands)
    paths: set[str] = set()
    reading = False
    for i, token in enumerate(tokens):
        base = token.rsplit("/", 1)[-1]
        if base in readers:
            reading = True
            continue
        if token in ("|", "&&", "||", ";"):
            reading = False
            continue
        if reading and not token.startswith("-") and ("/" in token or "." in token):
            paths.add(token.lstrip("./"))
    return paths


def viewed_files(
    traj: Trajectory, reader_commands: Sequence[str] = READER_COMMANDS
) -> set[str]:
    """Files the agent opened: editor calls (any command), file-reading bash
    commands, and files touched by the final patch."""
    seen: set[str] = set()
    for step in traj.steps:
        action = step.action
        if not isinstance(action, ToolCall):
            continue
        if action.tool == "str_replace_editor":
            path = action.arguments.get("path")
            if isinstance(path, str) and path:
                seen.add(path.lstrip("./"))
        elif action.tool == "execute_bash":
            command = action.arguments.get("command", "")
            if isinstance(command, str):
                seen |= _bash_read_paths(command, reader_commands)
    if traj.final_patch.strip():
        try:
            final = patch_analysis.parse_patch(traj.final_patch)
        except patch_analysis.PatchParseError:
            final = None
        if final is not None:
            seen |= {fd.display_path for fd in final.file_diffs}
    return seen


def _covers(viewed: set[str], golden_path: str) -> bool:
    return any(v == golden_path or v.endswith("/" + golden_path) for v in viewed)


def classify_failure(
    traj: Trajectory,
    inst: TaskInstance,
    *,
    reader_commands: Sequence[str] = READER_COMMANDS,
    max_turns: int | None = None,
) -> str:
    """Classify one failed trajectory into exactly one failure label."""
    return explain_failure(
        traj, inst, reader_commands=reader_commands, max_turns=max_turns
    )["label"]


def explain_failure(
    traj: Trajectory,
    inst: TaskInstance,
    *,
    reader_commands: Sequence[str] = READER_COMMANDS,
    max_turns: int | None = None,
) -> dict:
    """classify_failure plus the rule evidence, for auditable reports."""
    if traj.outcome == "resolved":
        raise ValueError(f"{traj.trajectory_id} is resolved; only failures are classified")
    golden = patch_analysis.parse_patch(inst.golden_patch)
    golden_paths = sorted({fd.display_path for fd in golden.file_diffs})

    if not reproduced_issue(traj, inst):
        return {"label": "failed_to_reproduce", "golden_files": golden_paths}

    seen = viewed_files(traj, reader_commands)
    missing = [g for g in golden_paths if not _covers(seen, g)]
    if missing:
        return {
            "label": "read_localization_error",
            "golden_files": golden_paths,
            "unviewed_files": missing,
        }

    overlap = None
    if traj.final_patch.strip():
        try:
            final = patch_analysis.parse_patch(traj.final_patch)
            overlap = patch_analysis.line_overlap(final, golden)
        except patch_analysis.PatchParseError:
            overlap = None
    if overlap is None or overlap.golden_files_touched == 0 or overlap.total_overlap == 0:
        return {
            "label": "write_localization_error",
            "golden_files": golden_paths,
            "golden_files_touched": 0 if overlap is None else overlap.golden_files_touched,
            "total_overlap": 0 if overlap is None else overlap.total_overlap,
        }

    limit = max_turns if max_turns is not None else traj.max_turns
    if traj.turn_count >= limit:
        return {
            "label": "ran_out_of_max_turns",
            "turn_count": traj.turn_count,
            "max_turns": limit,
        }

    return {
        "label": "incorrect_implementation",
        "golden_files_touched": overlap.golden_files_touched,
        "total_overlap": overlap.total_overlap,
    }


def failure_distribution(labels: Sequence[str]) -> dict[str, float]:
    """Fractions per observed label; they sum to 1 within 1e-12."""
    if not labels:
        raise ValueError("cannot compute a distribution over zero labels")
    for label in labels:
        if label not in FAILURE_LABELS:
            raise ValueError(f"unknown failure label {label!r}")
    total = len(labels)
    out: dict[str, float] = {}
    for label in FAILURE_LABELS:
        count = sum(1 for x in labels if x == label)
        if count:
            out[label] = count / total
    return out
