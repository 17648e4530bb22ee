"""Removes solution leakage from exported git histories and detects
history-reading ("git hacking") behavior in trajectories.

Histories are consumed as exported CommitRecord lists, not on-disk object
databases; `export_history` is the plumbing adapter that produces such a
list from a real repository.

For real instances, every commit authored after the issue-creation cutoff
is dropped so future fixes stay invisible; parent links of survivors are
rewritten to their nearest retained ancestor. For synthetic instances the
entire history collapses to a single neutral snapshot commit, because the
buggy tree is ahead of the clean one and any history would reveal the
injection.
"""

from __future__ import annotations

import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import ForgeError
from .registries import HackPattern, load_hack_patterns
from .schema import ToolCall, Trajectory, parse_timestamp

SNAPSHOT_MESSAGE = "initial snapshot"
SNAPSHOT_DATE = "1970-01-01T00:00:00+00:00"


class EmptyHistoryError(ForgeError):
    """Sanitization removed every commit; the instance must be dropped."""


@dataclass(frozen=True)
class CommitRecord:
    commit_id: str
    author_date: str
    message: str
    parent_ids: tuple[str, ...] = ()

    @classmethod
    def from_record(cls, record: dict) -> "CommitRecord":
        return cls(
            commit_id=record["commit_id"],
            author_date=record["author_date"],
            message=record["message"],
            parent_ids=tuple(record.get("parent_ids", [])),
        )

    def to_record(self) -> dict:
        return {
            "commit_id": self.commit_id,
            "author_date": self.author_date,
            "message": self.message,
            "parent_ids": list(self.parent_ids),
        }


@dataclass(frozen=True)
class HackFinding:
    step_index: int
    command: str
    pattern_id: str
    severity: str


def sanitize_real_history(
    history: Sequence[CommitRecord], cutoff: str
) -> list[CommitRecord]:
    """Drop commits authored after the cutoff; rewrite dangling parents.

    The input must be topologically ordered (parents before children).
    Retained messages are unchanged. A removed commit's survivors point at
    its nearest retained ancestor, found by walking parent chains in order.
    """
    cutoff_dt = parse_timestamp(cutoff)
    # Maps every commit id to its retained stand-in (itself when kept,
    # nearest retained ancestor when dropped, None when no ancestor is kept).
    stand_in: dict[str, str | None] = {}
    retained: list[CommitRecord] = []
    for commit in history:
        if parse_timestamp(commit.author_date) <= cutoff_dt:
            parents = []
            for parent in commit.parent_ids:
                resolved = stand_in.get(parent)
                if resolved is not None and resolved not in parents:
                    parents.append(resolved)
            retained.append(
                CommitRecord(
                    commit_id=commit.commit_id,
                    author_date=commit.author_date,
                    message=commit.message,
                    parent_ids=tuple(parents),
                )
            )
            stand_in[commit.commit_id] = commit.commit_id
        else:
            resolved = None
            for parent in commit.parent_ids:
                resolved = stand_in.get(parent)
                if resolved is not None:
                    break
            stand_in[commit.commit_id] = resolved
    if not retained:
        raise EmptyHistoryError(f"no commits remain at or before {cutoff}")
    return retained


def sanitize_synthetic_history(
    history: Sequence[CommitRecord], snapshot_id: str
) -> list[CommitRecord]:
    """Collapse the history to one parentless snapshot commit with a fixed
    neutral message, independent of the input."""
    return [
        CommitRecord(
            commit_id=snapshot_id,
            author_date=SNAPSHOT_DATE,
            message=SNAPSHOT_MESSAGE,
            parent_ids=(),
        )
    ]


def detect_git_hacking(
    traj: Trajectory, patterns: Sequence[HackPattern] | None = None
) -> list[HackFinding]:
    """Scan every execute_bash command against the leakage-pattern registry.

    Findings come back ordered by step index; clean trajectories yield an
    empty list. One command can trigger several distinct patterns.
    """
    if patterns is None:
        patterns = load_hack_patterns()
    findings: list[HackFinding] = []
    for step in traj.steps:
        action = step.action
        if not isinstance(action, ToolCall) or action.tool != "execute_bash":
            continue
        command = action.arguments.get("command", "")
        if not isinstance(command, str) or not command:
            continue
        for pattern in patterns:
            if pattern.regex.search(command):
                findings.append(
                    HackFinding(
                        step_index=step.index,
                        command=command,
                        pattern_id=pattern.pattern_id,
                        severity=pattern.severity,
                    )
                )
    return findings


def has_high_finding(findings: Sequence[HackFinding]) -> bool:
    return any(f.severity == "high" for f in findings)


def export_history(repo_dir: str | Path) -> list[CommitRecord]:
    """Export a real repository's history as CommitRecords (topological,
    parents first). Plumbing for feeding sanitize_real_history."""
    fmt = "%H%x1f%aI%x1f%P%x1f%B%x1e"
    proc = subprocess.run(
        ["git", "log", "--topo-order", "--reverse", f"--format={fmt}"],
        cwd=str(repo_dir),
        capture_output=True,
        text=True,
    )
    if proc.returncode != 0:
        raise ForgeError(f"git log failed in {repo_dir}: {proc.stderr.strip()}")
    records = []
    for chunk in proc.stdout.split("\x1e"):
        chunk = chunk.strip("\n")
        if not chunk.strip():
            continue
        commit_id, author_date, parents, message = chunk.split("\x1f")
        records.append(
            CommitRecord(
                commit_id=commit_id,
                author_date=author_date,
                message=message.strip("\n"),
                parent_ids=tuple(parents.split()) if parents.strip() else (),
            )
        )
    return records
