"""Best-of-K selection with pluggable verifier scoring, TTS@K / Pass@K
metrics, and a sequential/parallel latency model with budget allocation.

Latency is modeled as c * T^alpha * K^beta: super-linear in interaction
turns T (growing context makes each turn costlier, so 1 < alpha <= 2) and
sub-linear in parallel rollouts K (batched execution, 0 < beta < 1).

Verifiers are external scoring endpoints speaking a line-delimited JSON
protocol; the deterministic stub verifier (hash of the patch text) and the
oracle verifier (reads the ground-truth resolved label, metrics harness
only) exist so selection math is testable without any model.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .errors import ForgeError

SCORE_PROVENANCES = ("generative", "regressive", "oracle", "stub")


class DegenerateScoreError(ForgeError):
    """Both yes/no probabilities are zero; no score is defined."""


class InfeasibleBudgetError(ForgeError):
    """No grid point fits under the latency budget."""


@dataclass(frozen=True)
class Candidate:
    """One rollout for one instance. `resolved` is ground truth used only by
    metrics and the oracle verifier, never by real verifiers."""

    instance_id: str
    rollout_index: int
    trajectory_summary: str
    final_patch: str
    resolved: bool

    @classmethod
    def from_record(cls, record: dict) -> "Candidate":
        return cls(
            instance_id=record["instance_id"],
            rollout_index=record["rollout_index"],
            trajectory_summary=record.get("trajectory_summary", ""),
            final_patch=record.get("final_patch", ""),
            resolved=bool(record["resolved"]),
        )

    def to_record(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "rollout_index": self.rollout_index,
            "trajectory_summary": self.trajectory_summary,
            "final_patch": self.final_patch,
            "resolved": self.resolved,
        }


@dataclass(frozen=True)
class VerifierScore:
    score: float
    provenance: str

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.provenance not in SCORE_PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class LatencyModel:
    """latency(T, K) = c * T^alpha * K^beta."""

    c: float = 1.0
    alpha: float = 1.5
    beta: float = 0.5

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("c must be positive")
        if not 1.0 < self.alpha <= 2.0:
            raise ValueError("alpha must lie in (1, 2]")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")


@dataclass(frozen=True)
class AllocationPlan:
    turns: int
    rollouts: int
    predicted_latency: float
    predicted_rate: float


# ---------------------------------------------------------------------------
# Scoring


def generative_score(p_yes: float, p_no: float) -> VerifierScore:
    """Score from yes/no token probabilities: p_yes / (p_yes + p_no)."""
    if p_yes < 0 or p_no < 0:
        raise ValueError("probabilities must be non-negative")
    total = p_yes + p_no
    if total == 0:
        raise DegenerateScoreError("p_yes + p_no is zero")
    return VerifierScore(score=p_yes / total, provenance="generative")


def regressive_score(value: float) -> VerifierScore:
    """Scalar score from a scoring-head response."""
    return VerifierScore(score=value, provenance="regressive")


class OracleVerifier:
    """Scores 1.0 for resolved candidates, 0.0 otherwise. Metrics harness
    only: it reads the ground-truth label."""

    def score(self, candidate: Candidate) -> VerifierScore:
        return VerifierScore(score=1.0 if candidate.resolved else 0.0, provenance="oracle")


class StubVerifier:
    """Deterministic pseudo-verifier: hashes the patch text into [0, 1]."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def score(self, candidate: Candidate) -> VerifierScore:
        digest = hashlib.sha256(
            f"{self.seed}:{candidate.final_patch}".encode("utf-8")
        ).hexdigest()
        return VerifierScore(score=int(digest[:8], 16) / 0xFFFFFFFF, provenance="stub")


def build_trajectory_summary(
    problem_statement: str,
    final_patch: str,
    observations: Sequence[str],
    last_n: int = 5,
) -> str:
    """Render the verifier's input: problem statement, final patch, and the
    last N observation excerpts."""
    parts = [problem_statement.rstrip("\n"), "", "Final patch:", final_patch.rstrip("\n")]
    tail = list(observations)[-last_n:] if last_n > 0 else []
    if tail:
        parts.extend(["", f"Last {len(tail)} observations:"])
        parts.extend(obs.rstrip("\n") for obs in tail)
    return "\n".join(parts)


def encode_score_request(candidate: Candidate) -> str:
    """One request line of the verifier wire protocol."""
    return json.dumps(
        {
            "instance_id": candidate.instance_id,
            "rollout_index": candidate.rollout_index,
            "trajectory_summary": candidate.trajectory_summary,
            "final_patch": candidate.final_patch,
        },
        ensure_ascii=False,
        separators=(",", ":"),
    )


def decode_score_response(line: str) -> VerifierScore:
    """Parse a response line: either {"p_yes", "p_no"} (generative) or
    {"score"} (regressive)."""
    record = json.loads(line)
    if "p_yes" in record or "p_no" in record:
        return generative_score(record.get("p_yes", 0.0), record.get("p_no", 0.0))
    if "score" in record:
        return regressive_score(record["score"])
    raise ForgeError(f"verifier response carries neither probabilities nor a score: {line!r}")


class LineDelimitedVerifier:
    """Adapter speaking the line protocol through a transport callable that
    maps one request line to one response line."""

    def __init__(self, transport: Callable[[str], str]):
        self.transport = transport

    def score(self, candidate: Candidate) -> VerifierScore:
        return decode_score_response(self.transport(encode_score_request(candidate)))


# ---------------------------------------------------------------------------
# Selection and metrics


def select_top1(
    candidates: Sequence[Candidate], scores: Sequence[VerifierScore]
) -> Candidate:
    """The candidate with the maximal score; ties break to the lowest
    rollout_index, so selection is deterministic and permutation-stable."""
    if not candidates:
        raise ValueError("no candidates to select from")
    if len(candidates) != len(scores):
        raise ValueError("candidates and scores differ in length")
    best = min(zip(candidates, scores), key=lambda pair: (-pair[1].score, pair[0].rollout_index))
    return best[0]


def tts_at_k(
    instances: Sequence[tuple[Sequence[Candidate], Sequence[VerifierScore]]],
) -> dict[str, float]:
    """TTS@K and Pass@K over instances with exactly K candidates each.

    tts is the fraction of instances whose top-1 selected candidate is
    resolved; pass is the fraction with any resolved candidate. tts <= pass
    always, with equality under the oracle verifier.
    """
    if not instances:
        raise ValueError("no instances")
    k = len(instances[0][0])
    resolved_by_selection = 0
    resolved_by_any = 0
    for candidates, scores in instances:
        if len(candidates) != k:
            raise ValueError(
                f"ragged candidate counts: expected {k}, got {len(candidates)}"
            )
        if select_top1(candidates, scores).resolved:
            resolved_by_selection += 1
        if any(c.resolved for c in candidates):
            resolved_by_any += 1
    total = len(instances)
    return {"tts": resolved_by_selection / total, "pass": resolved_by_any / total}


# ---------------------------------------------------------------------------
# Latency model and allocation


def latency(model: LatencyModel, turns: int, rollouts: int) -> float:
    """Predicted wall-clock cost of running `rollouts` trajectories of up to
    `turns` turns. Strictly increasing in both arguments."""
    if turns < 1 or rollouts < 1:
        raise ValueError("turns and rollouts must be at least 1")
    return model.c * turns**model.alpha * rollouts**model.beta


def iso_latency_contour(
    model: LatencyModel, budget: float, turn_grid: Sequence[int]
) -> tuple[tuple[int, float], ...]:
    """For each grid T, the continuous K where latency(T, K) equals the
    budget: the iso-latency contour sampled on the grid."""
    out = []
    for turns in sorted(set(turn_grid)):
        k = (budget / (model.c * turns**model.alpha)) ** (1.0 / model.beta)
        out.append((turns, k))
    return tuple(out)


def allocate(
    model: LatencyModel,
    budget: float,
    surface: Mapping[tuple[int, int], float],
) -> tuple[AllocationPlan, tuple[tuple[int, float], ...]]:
    """Pick the measured (turns, rollouts) grid point that maximizes the
    resolve rate under the latency budget.

    Ties break to the smaller latency, then the smaller rollout count. Also
    returns the iso-latency contour sampled at the grid's turn values.
    Raises InfeasibleBudgetError when nothing fits.
    """
    if not surface:
        raise ValueError("empty allocation surface")
    if budget <= 0:
        raise ValueError("budget must be positive")
    best: tuple[float, float, int, int] | None = None  # (-rate, latency, K, T)
    for (turns, rollouts), rate in surface.items():
        cost = latency(model, turns, rollouts)
        if cost > budget:
            continue
        key = (-rate, cost, rollouts, turns)
        if best is None or key < best:
            best = key
    if best is None:
        raise InfeasibleBudgetError(f"no (turns, rollouts) point fits budget {budget}")
    neg_rate, cost, rollouts, turns = best
    plan = AllocationPlan(
        turns=turns,
        rollouts=rollouts,
        predicted_latency=cost,
        predicted_rate=-neg_rate,
    )
    contour = iso_latency_contour(model, budget, [t for t, _ in surface])
    return plan, contour
