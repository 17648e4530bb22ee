"""Loaders for the versioned pattern registries shipped with the toolkit.

Registries are plain text files, one entry per line, with `#` comments and
blank lines ignored. Shipping them as data rather than code keeps the
pattern sets auditable and lets a corpus directory pin its own copies.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from .errors import ForgeError

_DATA_DIR = Path(__file__).parent / "data"

DEFAULT_HACK_PATTERNS = _DATA_DIR / "hack_patterns.txt"
DEFAULT_ERROR_PATTERNS = _DATA_DIR / "error_patterns.txt"
DEFAULT_PHASE_PATTERNS = _DATA_DIR / "phase_patterns.txt"

HACK_SEVERITIES = ("high", "medium")


class RegistryError(ForgeError):
    """Malformed registry file or invalid pattern."""


@dataclass(frozen=True)
class HackPattern:
    pattern_id: str
    severity: str
    regex: re.Pattern


@dataclass(frozen=True)
class ErrorPattern:
    pattern_id: str
    regex: re.Pattern


@dataclass(frozen=True)
class PhaseRule:
    phase: str
    regex: re.Pattern


def _registry_lines(path: str | Path) -> list[tuple[int, str]]:
    file_path = Path(path)
    try:
        text = file_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RegistryError(f"cannot read registry {file_path}: {exc}") from exc
    out = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        out.append((line_no, stripped))
    return out


def _compile(pattern: str, path: str | Path, line_no: int, flags: int = 0) -> re.Pattern:
    try:
        return re.compile(pattern, flags)
    except re.error as exc:
        raise RegistryError(f"{path}:{line_no}: bad regex {pattern!r}: {exc}") from exc


def load_hack_patterns(path: str | Path | None = None) -> list[HackPattern]:
    """Load `<id> <severity> <regex>` lines; registry order is preserved."""
    file_path = Path(path) if path else DEFAULT_HACK_PATTERNS
    patterns = []
    for line_no, line in _registry_lines(file_path):
        parts = line.split(None, 2)
        if len(parts) != 3:
            raise RegistryError(f"{file_path}:{line_no}: expected '<id> <severity> <regex>'")
        pattern_id, severity, regex = parts
        if severity not in HACK_SEVERITIES:
            raise RegistryError(f"{file_path}:{line_no}: unknown severity {severity!r}")
        patterns.append(HackPattern(pattern_id, severity, _compile(regex, file_path, line_no)))
    if not patterns:
        raise RegistryError(f"{file_path}: registry is empty")
    return patterns


def load_error_patterns(path: str | Path | None = None) -> list[ErrorPattern]:
    """Load `<id> <regex>` lines used for step-level error detection."""
    file_path = Path(path) if path else DEFAULT_ERROR_PATTERNS
    patterns = []
    for line_no, line in _registry_lines(file_path):
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise RegistryError(f"{file_path}:{line_no}: expected '<id> <regex>'")
        pattern_id, regex = parts
        patterns.append(ErrorPattern(pattern_id, _compile(regex, file_path, line_no, re.MULTILINE)))
    if not patterns:
        raise RegistryError(f"{file_path}: registry is empty")
    return patterns


def load_phase_patterns(path: str | Path | None = None) -> list[PhaseRule]:
    """Load `<phase> <regex>` lines that map bash commands to phases."""
    from .schema import PHASES

    file_path = Path(path) if path else DEFAULT_PHASE_PATTERNS
    rules = []
    for line_no, line in _registry_lines(file_path):
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise RegistryError(f"{file_path}:{line_no}: expected '<phase> <regex>'")
        phase, regex = parts
        if phase not in PHASES:
            raise RegistryError(f"{file_path}:{line_no}: unknown phase {phase!r}")
        rules.append(PhaseRule(phase, _compile(regex, file_path, line_no)))
    if not rules:
        raise RegistryError(f"{file_path}: registry is empty")
    return rules
