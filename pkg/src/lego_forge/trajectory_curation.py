"""Repairs malformed tool calls, prunes the tool set, classifies outcomes,
and aggregates rollout statistics.

Outcome classification is a strict cascade: empty patch first, then a clean
full pass (resolved), then pass-with-cheating demoted to unresolved, then
100% golden-file recall (semi_resolved), then unresolved. A trajectory that
passes every test but edited test files or read git history is kept in the
corpus as unresolved rather than deleted, so accounting stays exhaustive.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

from .errors import ForgeError
from . import patch_analysis
from .registries import HackPattern
from .repo_sanitizer import HackFinding, detect_git_hacking, has_high_finding
from .schema import ALLOWED_TOOLS, TaskInstance, TestReport, ToolCall, Trajectory

_INT_RE = re.compile(r"-?\d+")

_TEST_DIR_SEGMENTS = ("tests", "test", "testing")


class UnrepairableCallError(ForgeError):
    """The call's view_range cannot be interpreted as a range at all."""

    def __init__(self, call: ToolCall, message: str):
        self.call = call
        super().__init__(message)


class ClassificationError(ForgeError):
    """Outcome classification is impossible (e.g. missing final report)."""


@dataclass(frozen=True)
class CurationReport:
    avg_turns: float | None
    valid_rate: float | None
    counts: dict[str, int]
    repaired_calls: int
    hack_invalidated: int

    def to_record(self) -> dict:
        return {
            "avg_turns": self.avg_turns,
            "valid_rate": self.valid_rate,
            "counts": dict(self.counts),
            "repaired_calls": self.repaired_calls,
            "hack_invalidated": self.hack_invalidated,
        }


# ---------------------------------------------------------------------------
# Tool-call repair


def _coerce_ints(raw) -> list[int] | None:
    if isinstance(raw, str):
        found = _INT_RE.findall(raw)
        return [int(x) for x in found] if found else None
    if isinstance(raw, (list, tuple)):
        out = []
        for item in raw:
            if isinstance(item, bool):
                return None
            if isinstance(item, int):
                out.append(item)
            elif isinstance(item, float) and item.is_integer():
                out.append(int(item))
            elif isinstance(item, str):
                found = _INT_RE.findall(item)
                if not found:
                    return None
                out.extend(int(x) for x in found)
            else:
                return None
        return out or None
    if isinstance(raw, int) and not isinstance(raw, bool):
        return [raw]
    return None


def repair_tool_call(
    call: ToolCall, context: Mapping[str, int] | None = None
) -> tuple[ToolCall, bool]:
    """Normalize a str_replace_editor view_range argument.

    Text-encoded ranges become integer pairs, reversed bounds are swapped,
    and bounds are clipped to [1, file_line_count] when the context supplies
    a file length (without it only the lower bound is enforced). Idempotent:
    repairing a repaired call changes nothing. Calls without a view_range
    pass through untouched; a view_range with no extractable integers raises
    UnrepairableCallError.
    """
    if call.tool != "str_replace_editor" or "view_range" not in call.arguments:
        return call, False
    raw = call.arguments["view_range"]
    values = _coerce_ints(raw)
    if values is None or len(values) < 2:
        raise UnrepairableCallError(call, f"view_range {raw!r} is not a range")
    start, end = values[0], values[1]
    if start > end:
        start, end = end, start
    start = max(start, 1)
    end = max(end, 1)
    if context is not None and "file_line_count" in context:
        limit = context["file_line_count"]
        start = min(start, limit)
        end = min(end, limit)
    repaired_range = [start, end]
    already_canonical = (
        isinstance(raw, list)
        and len(raw) == 2
        and all(type(v) is int for v in raw)
        and raw == repaired_range
    )
    if already_canonical:
        return call, False
    arguments = dict(call.arguments)
    arguments["view_range"] = repaired_range
    return ToolCall(tool=call.tool, arguments=arguments), True


# ---------------------------------------------------------------------------
# Tool-set pruning


def prune_toolset(traj: Trajectory) -> Trajectory:
    """Drop steps using tools outside the four-tool set, re-packing indices.

    Plain assistant messages are kept. The observation of a pruned step is
    removed with it. Pruning twice equals pruning once.
    """
    kept = [
        step
        for step in traj.steps
        if not (isinstance(step.action, ToolCall) and step.action.tool not in ALLOWED_TOOLS)
    ]
    steps = tuple(replace(step, index=i) for i, step in enumerate(kept))
    return replace(traj, steps=steps, turn_count=len(steps))


# ---------------------------------------------------------------------------
# Cheating detection


def default_test_path_matcher(path: str) -> bool:
    """Conservative test-file conventions: a test directory segment in the
    path, or a test_*/*_test.py / conftest.py file name."""
    segments = path.split("/")
    if any(seg in _TEST_DIR_SEGMENTS for seg in segments[:-1]):
        return True
    name = segments[-1]
    return name.startswith("test_") or name.endswith("_test.py") or name == "conftest.py"


def _f2p_module_paths(inst: TaskInstance) -> set[str]:
    paths = set()
    for test_id in inst.fail_to_pass:
        module = test_id.split("::")[0]
        if module.endswith(".py"):
            paths.add(module)
        elif "." in module and "/" not in module:
            paths.add(module.replace(".", "/") + ".py")
    return paths


def detect_test_modification(
    final_patch: patch_analysis.Patch,
    inst: TaskInstance,
    test_path_rules: Callable[[str], bool] | None = None,
) -> bool:
    """True when the patch touches any test file or any file holding a
    fail_to_pass test id's module."""
    matcher = test_path_rules or default_test_path_matcher
    f2p_paths = _f2p_module_paths(inst)
    for fd in final_patch.file_diffs:
        path = fd.display_path
        if matcher(path):
            return True
        if path in f2p_paths:
            return True
        if any(path.endswith("/" + fp) or fp.endswith("/" + path) for fp in f2p_paths):
            return True
    return False


# ---------------------------------------------------------------------------
# Outcome classification


def _tests_pass(report: TestReport, test_ids: Sequence[str]) -> bool:
    return all(report.results.get(t) == "pass" for t in test_ids)


def classify_outcome(
    traj: Trajectory,
    inst: TaskInstance,
    final_report: TestReport | None,
    *,
    hack_findings: Sequence[HackFinding] | None = None,
    hack_patterns: Sequence[HackPattern] | None = None,
    test_path_rules: Callable[[str], bool] | None = None,
) -> str:
    """Classify one trajectory: empty_patch, resolved, semi_resolved, or
    unresolved. `final_report` must reflect the trajectory's final patch
    state; precomputed hack findings can be passed to avoid a rescan."""
    if final_report is None:
        raise ClassificationError(f"{traj.trajectory_id}: missing final test report")
    if not traj.final_patch.strip():
        return "empty_patch"
    try:
        final = patch_analysis.parse_patch(traj.final_patch)
    except patch_analysis.PatchParseError:
        return "unresolved"
    tests_ok = _tests_pass(final_report, inst.fail_to_pass) and _tests_pass(
        final_report, inst.pass_to_pass
    )
    if tests_ok:
        if hack_findings is None:
            hack_findings = detect_git_hacking(traj, hack_patterns)
        cheated = detect_test_modification(final, inst, test_path_rules)
        if not cheated and not has_high_finding(hack_findings):
            return "resolved"
        return "unresolved"
    try:
        golden = patch_analysis.parse_patch(inst.golden_patch)
    except patch_analysis.PatchParseError:
        return "unresolved"
    overlap = patch_analysis.line_overlap(final, golden)
    if overlap.golden_files_total > 0 and overlap.golden_files_touched == overlap.golden_files_total:
        return "semi_resolved"
    return "unresolved"


# ---------------------------------------------------------------------------
# Statistics


def rollout_stats(
    trajs: Sequence[Trajectory],
    *,
    recycle_semi_resolved: bool = False,
    repaired_calls: int = 0,
    hack_invalidated: int = 0,
) -> CurationReport:
    """Aggregate classified trajectories into a curation report.

    valid_rate counts resolved trajectories, plus semi_resolved ones when
    recycling is enabled. Empty input yields zero counts with rates set to
    None (the undefined-rate flag).
    """
    counts = {
        "resolved": 0,
        "semi_resolved": 0,
        "unresolved": 0,
        "error": 0,
        "empty_patch": 0,
        "unclassified": 0,
    }
    for traj in trajs:
        counts[traj.outcome] = counts.get(traj.outcome, 0) + 1
    total = len(trajs)
    if total == 0:
        return CurationReport(
            avg_turns=None,
            valid_rate=None,
            counts=counts,
            repaired_calls=repaired_calls,
            hack_invalidated=hack_invalidated,
        )
    avg_turns = sum(t.turn_count for t in trajs) / total
    valid = counts["resolved"]
    if recycle_semi_resolved:
        valid += counts["semi_resolved"]
    return CurationReport(
        avg_turns=avg_turns,
        valid_rate=valid / total,
        counts=counts,
        repaired_calls=repaired_calls,
        hack_invalidated=hack_invalidated,
    )
