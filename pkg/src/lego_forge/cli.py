"""Pipeline orchestration: `forge <stage> --config <path>`.

Stages run over corpora on disk, write their outputs atomically (temp file
plus rename, so an interrupted stage leaves nothing partial), and are
deterministic: identical inputs produce byte-identical outputs. The
`pipeline` command runs every configured stage in dependency order and
skips stages whose recorded input content hashes are unchanged.

Exit codes: 0 success, 1 internal error, 2 missing input, 3 validation
failure (a rejection report is written next to the stage outputs).

The config file is a plain `key = value` text file; paths resolve relative
to the config file's directory. Keys:

  out_dir            output directory (default: out)
  repo, base_commit  repository identity for the inject stage
  real_inputs        JSONL of PR fixtures for build-tasks
  snapshot_dir       clean repository snapshot for inject
  mutations          JSONL of mutation specs (+ buggy/restored reports)
  histories          JSONL of exported commit histories for sanitize
  trajectories       JSONL of rollout trajectories for curate
  final_reports      JSONL of final-state test reports for curate
  instances          optional extra instance corpus (pre-built)
  rollouts           JSONL of best-of-K candidates for tts-select
  surface            JSONL of (turns, rollouts, rate) triples (optional)
  latency_budget     budget in seconds for allocation (optional)
  max_turns          turn budget (default 100)
  context_limit      token budget for mask (default 128000)
  easy_upper, medium_upper   difficulty bin boundaries (default 50, 70)
  bucket_width       correlation bucket width in turns (default 10)
  latency_c, latency_alpha, latency_beta   latency model (1.0, 1.5, 0.5)
  recycle_semi_resolved      keep semi-resolved for training (default true)
  verifier           stub | oracle (default stub)
  summary_observations       observation excerpts per summary (default 5)
  workers, seed      worker pool size and RNG seed (defaults 1, 0)
  hack_patterns, error_patterns, phase_patterns   registry overrides
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path
from typing import Callable, Sequence

from . import curriculum as curriculum_mod
from . import error_taxonomy, patch_analysis, repo_sanitizer, sft_masking, task_builder, trajectory_curation, tts
from .errors import ForgeError
from .registries import load_error_patterns, load_hack_patterns, load_phase_patterns
from .schema import (
    Rejection,
    TaskInstance,
    TestReport,
    ToolCall,
    Trajectory,
    atomic_write_text,
    load_corpus,
    load_jsonl,
    save_corpus,
    save_jsonl,
)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_MISSING_INPUT = 2
EXIT_VALIDATION = 3

PIPELINE_ORDER = (
    "build-tasks",
    "inject",
    "sanitize",
    "curate",
    "mask",
    "curriculum",
    "classify-errors",
    "tts-select",
    "stats",
)

_REPORT_NAMES = {
    "build-tasks": "build_tasks_report.json",
    "inject": "inject_report.json",
    "sanitize": "sanitize_report.json",
    "curate": "curation_report.json",
    "mask": "mask_report.json",
    "curriculum": "curriculum_report.json",
    "classify-errors": "classify_errors_report.json",
    "tts-select": "tts_select_report.json",
    "stats": "corpus_stats.json",
}


class MissingInputError(ForgeError):
    pass


class ValidationFailure(ForgeError):
    def __init__(self, message: str, rejection_path: Path | None = None):
        self.rejection_path = rejection_path
        super().__init__(message)


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class PipelineConfig:
    base_dir: Path
    config_path: Path
    out_dir: Path
    repo: str = ""
    base_commit: str = ""
    real_inputs: Path | None = None
    snapshot_dir: Path | None = None
    mutations: Path | None = None
    histories: Path | None = None
    trajectories: Path | None = None
    final_reports: Path | None = None
    instances: Path | None = None
    rollouts: Path | None = None
    surface: Path | None = None
    latency_budget: float | None = None
    max_turns: int = 100
    context_limit: int = 128000
    easy_upper: int = 50
    medium_upper: int = 70
    bucket_width: int = 10
    latency_c: float = 1.0
    latency_alpha: float = 1.5
    latency_beta: float = 0.5
    recycle_semi_resolved: bool = True
    verifier: str = "stub"
    summary_observations: int = 5
    workers: int = 1
    seed: int = 0
    hack_patterns: Path | None = None
    error_patterns: Path | None = None
    phase_patterns: Path | None = None

    def bins(self) -> tuple[curriculum_mod.DifficultyBin, ...]:
        return (
            curriculum_mod.DifficultyBin("easy", 0, self.easy_upper),
            curriculum_mod.DifficultyBin("medium", self.easy_upper, self.medium_upper),
            curriculum_mod.DifficultyBin("hard", self.medium_upper, self.max_turns),
        )

    def latency_model(self) -> tts.LatencyModel:
        return tts.LatencyModel(c=self.latency_c, alpha=self.latency_alpha, beta=self.latency_beta)


_PATH_KEYS = {
    "real_inputs",
    "snapshot_dir",
    "mutations",
    "histories",
    "trajectories",
    "final_reports",
    "instances",
    "rollouts",
    "surface",
    "hack_patterns",
    "error_patterns",
    "phase_patterns",
}
_INT_KEYS = {
    "max_turns",
    "context_limit",
    "easy_upper",
    "medium_upper",
    "bucket_width",
    "summary_observations",
    "workers",
    "seed",
}
_FLOAT_KEYS = {"latency_c", "latency_alpha", "latency_beta", "latency_budget"}
_BOOL_KEYS = {"recycle_semi_resolved"}
_STR_KEYS = {"repo", "base_commit", "verifier", "out_dir"}


def load_config(path: str | Path) -> PipelineConfig:
    """Parse the key-value config file and validate the invariants that can
    be checked at load time (bin partition, registry files, enums)."""
    config_path = Path(path).resolve()
    try:
        text = config_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise MissingInputError(f"cannot read config {config_path}: {exc}") from exc
    base_dir = config_path.parent
    values: dict = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ForgeError(f"{config_path}:{line_no}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in _PATH_KEYS:
            values[key] = (base_dir / value).resolve() if value else None
        elif key in _INT_KEYS:
            values[key] = int(value)
        elif key in _FLOAT_KEYS:
            values[key] = float(value)
        elif key in _BOOL_KEYS:
            lowered = value.lower()
            if lowered in ("true", "yes", "1"):
                values[key] = True
            elif lowered in ("false", "no", "0"):
                values[key] = False
            else:
                raise ForgeError(f"{config_path}:{line_no}: bad boolean {value!r}")
        elif key in _STR_KEYS:
            values[key] = value
        else:
            raise ForgeError(f"{config_path}:{line_no}: unknown key {key!r}")
    out_dir = (base_dir / values.pop("out_dir", "out")).resolve()
    cfg = PipelineConfig(base_dir=base_dir, config_path=config_path, out_dir=out_dir, **values)
    if not 0 < cfg.easy_upper < cfg.medium_upper < cfg.max_turns:
        raise ForgeError(
            "bin boundaries must satisfy 0 < easy_upper < medium_upper < max_turns"
        )
    if cfg.verifier not in ("stub", "oracle"):
        raise ForgeError(f"unknown verifier {cfg.verifier!r}")
    for key in ("hack_patterns", "error_patterns", "phase_patterns"):
        registry = getattr(cfg, key)
        if registry is not None and not registry.exists():
            raise MissingInputError(f"registry file {registry} does not exist")
    # Compile the registries now so bad patterns fail at load, not mid-stage.
    load_hack_patterns(cfg.hack_patterns)
    load_error_patterns(cfg.error_patterns)
    load_phase_patterns(cfg.phase_patterns)
    return cfg


# ---------------------------------------------------------------------------
# Helpers


def _dump_report(report: dict) -> str:
    return json.dumps(report, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def _pmap(fn: Callable, items: Sequence, workers: int) -> list:
    """Order-preserving map, fanned out to a bounded pool when workers > 1."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _require_input(path: Path | None, what: str) -> Path:
    if path is None:
        raise MissingInputError(f"config does not set {what}")
    if not path.exists():
        raise MissingInputError(f"{what} {path} does not exist")
    return path


def _write_rejections(
    cfg: PipelineConfig, stage: str, entries: list[dict]
) -> Path:
    path = cfg.out_dir / f"{stage.replace('-', '_')}_rejections.jsonl"
    save_jsonl(entries, path)
    return path


def _fail_on_rejections(
    cfg: PipelineConfig, stage: str, source: Path, rejections: Sequence[Rejection]
) -> None:
    if not rejections:
        return
    entries = [
        {
            "file": str(source),
            "line_no": r.line_no,
            "codes": list(r.codes),
            "message": r.message,
        }
        for r in rejections
    ]
    path = _write_rejections(cfg, stage, entries)
    raise ValidationFailure(
        f"{source}: {len(rejections)} rejected line(s); see {path}", rejection_path=path
    )


def _load_instances_union(cfg: PipelineConfig, stage: str) -> dict[str, TaskInstance]:
    sources = [
        cfg.out_dir / "instances_real.jsonl",
        cfg.out_dir / "instances_synth.jsonl",
    ]
    if cfg.instances is not None:
        sources.append(cfg.instances)
    existing = [p for p in sources if p.exists()]
    if not existing:
        raise MissingInputError(
            "no instance corpus found (run build-tasks/inject or set `instances`)"
        )
    by_id: dict[str, TaskInstance] = {}
    for source in existing:
        result = load_corpus(source, "instances")
        _fail_on_rejections(cfg, stage, source, result.rejections)
        for inst in result.records:
            by_id.setdefault(inst.instance_id, inst)
    return by_id


def _read_snapshot(snapshot_dir: Path) -> dict[str, str]:
    snapshot: dict[str, str] = {}
    for file_path in sorted(snapshot_dir.rglob("*")):
        if not file_path.is_file():
            continue
        rel = file_path.relative_to(snapshot_dir).as_posix()
        try:
            snapshot[rel] = file_path.read_text(encoding="utf-8")
        except UnicodeDecodeError:
            continue  # binary assets play no part in mutation
    return snapshot


# ---------------------------------------------------------------------------
# Stages


def _stage_build_tasks(cfg: PipelineConfig) -> dict:
    source = _require_input(cfg.real_inputs, "real_inputs")
    instances: list[TaskInstance] = []
    skipped: list[dict] = []
    for idx, record in enumerate(load_jsonl(source)):
        try:
            pre = TestReport.from_record(record["pre_report"])
            post = TestReport.from_record(record["post_report"])
            instances.append(task_builder.build_real_instance(record, pre, post))
        except (task_builder.InvisibleBugError, ValueError, KeyError, patch_analysis.PatchParseError) as exc:
            skipped.append({"record": idx, "reason": str(exc)})
    save_corpus(instances, cfg.out_dir / "instances_real.jsonl")
    return {"stage": "build-tasks", "built": len(instances), "skipped": skipped}


def _stage_inject(cfg: PipelineConfig) -> dict:
    snapshot_dir = _require_input(cfg.snapshot_dir, "snapshot_dir")
    mutations_path = _require_input(cfg.mutations, "mutations")
    if not cfg.repo or not cfg.base_commit:
        raise MissingInputError("inject needs `repo` and `base_commit` in the config")
    snapshot = _read_snapshot(snapshot_dir)
    statements = task_builder.TemplateStatementProvider()
    instances: list[TaskInstance] = []
    invisible: list[dict] = []
    bad_specs: list[dict] = []
    for idx, record in enumerate(load_jsonl(mutations_path)):
        target = None
        if record.get("target"):
            t = record["target"]
            target = task_builder.NodeLocator(
                path=t["path"],
                start_line=t["start_line"],
                start_col=t["start_col"],
                end_line=t["end_line"],
                end_col=t["end_col"],
            )
        spec = task_builder.MutationSpec(
            mutator=record["mutator"],
            target=target,
            seed=record.get("seed", cfg.seed),
            path=record.get("path"),
        )
        try:
            reports = (
                TestReport.from_record(record["buggy_report"]),
                TestReport.from_record(record["restored_report"]),
            )
            instances.append(
                task_builder.build_synthetic_instance(
                    snapshot,
                    spec,
                    reports,
                    statements,
                    repo=cfg.repo,
                    base_commit=cfg.base_commit,
                )
            )
        except task_builder.InvisibleBugError as exc:
            invisible.append({"record": idx, "reason": str(exc)})
        except (task_builder.LocatorError, task_builder.MutatorKindError, task_builder.MutationError, KeyError, ValueError) as exc:
            bad_specs.append({"record": idx, "reason": str(exc)})
    if bad_specs:
        path = _write_rejections(cfg, "inject", bad_specs)
        raise ValidationFailure(
            f"{len(bad_specs)} mutation spec(s) could not be applied; see {path}",
            rejection_path=path,
        )
    save_corpus(instances, cfg.out_dir / "instances_synth.jsonl")
    return {"stage": "inject", "built": len(instances), "invisible_bugs": invisible}


def _stage_sanitize(cfg: PipelineConfig) -> dict:
    source = _require_input(cfg.histories, "histories")
    sanitized_lines: list[dict] = []
    dropped: list[dict] = []
    for record in load_jsonl(source):
        commits = [repo_sanitizer.CommitRecord.from_record(c) for c in record["commits"]]
        policy = record["policy"]
        if policy == "cutoff":
            try:
                clean = repo_sanitizer.sanitize_real_history(commits, record["cutoff"])
            except repo_sanitizer.EmptyHistoryError as exc:
                dropped.append({"instance_id": record["instance_id"], "reason": str(exc)})
                continue
        elif policy == "single_snapshot":
            clean = repo_sanitizer.sanitize_synthetic_history(commits, record["snapshot_id"])
        else:
            raise ValidationFailure(f"unknown history policy {policy!r}")
        out = {
            "instance_id": record["instance_id"],
            "policy": policy,
            "commits": [c.to_record() for c in clean],
        }
        sanitized_lines.append(out)
    save_jsonl(sanitized_lines, cfg.out_dir / "sanitized_histories.jsonl")
    return {"stage": "sanitize", "sanitized": len(sanitized_lines), "dropped": dropped}


def _stage_curate(cfg: PipelineConfig) -> dict:
    traj_path = _require_input(cfg.trajectories, "trajectories")
    reports_path = _require_input(cfg.final_reports, "final_reports")
    instances = _load_instances_union(cfg, "curate")
    result = load_corpus(traj_path, "trajectories")
    _fail_on_rejections(cfg, "curate", traj_path, result.rejections)
    reports_by_tid = {
        rec["trajectory_id"]: TestReport.from_record(rec) for rec in load_jsonl(reports_path)
    }
    hack_patterns = load_hack_patterns(cfg.hack_patterns)
    error_patterns = load_error_patterns(cfg.error_patterns)
    phase_rules = load_phase_patterns(cfg.phase_patterns)

    def curate_one(traj: Trajectory) -> dict:
        repaired_count = 0
        unrepairable_notes: list[dict] = []
        steps = []
        for step in traj.steps:
            action = step.action
            if isinstance(action, ToolCall):
                try:
                    action, repaired = trajectory_curation.repair_tool_call(action)
                    if repaired:
                        repaired_count += 1
                except trajectory_curation.UnrepairableCallError as exc:
                    unrepairable_notes.append(
                        {"trajectory_id": traj.trajectory_id, "step": step.index, "reason": str(exc)}
                    )
            steps.append(dc_replace(step, action=action))
        work = dc_replace(traj, steps=tuple(steps))
        work = trajectory_curation.prune_toolset(work)
        work = sft_masking.assign_phases(work, phase_rules)
        work = sft_masking.detect_step_errors(work, error_patterns)
        findings = repo_sanitizer.detect_git_hacking(work, hack_patterns)

        inst = instances.get(work.instance_id)
        report = reports_by_tid.get(work.trajectory_id)
        note = None
        demoted_by_hack = False
        if inst is None or report is None:
            outcome = "unclassified"
            note = {
                "trajectory_id": work.trajectory_id,
                "reason": "missing instance" if inst is None else "missing final report",
            }
        else:
            outcome = trajectory_curation.classify_outcome(
                work, inst, report, hack_findings=findings
            )
            if outcome == "unresolved" and repo_sanitizer.has_high_finding(findings):
                demoted_by_hack = all(
                    report.results.get(t) == "pass"
                    for t in (*inst.fail_to_pass, *inst.pass_to_pass)
                )
        return {
            "trajectory": dc_replace(work, outcome=outcome),
            "repaired": repaired_count,
            "unrepairable": unrepairable_notes,
            "note": note,
            "demoted_by_hack": demoted_by_hack,
        }

    results = _pmap(curate_one, result.records, cfg.workers)
    curated = [r["trajectory"] for r in results]
    repaired_calls = sum(r["repaired"] for r in results)
    unrepairable = [entry for r in results for entry in r["unrepairable"]]
    notes = [r["note"] for r in results if r["note"] is not None]
    hack_invalidated = sum(1 for r in results if r["demoted_by_hack"])

    save_corpus(curated, cfg.out_dir / "curated.jsonl")
    stats = trajectory_curation.rollout_stats(
        curated,
        recycle_semi_resolved=cfg.recycle_semi_resolved,
        repaired_calls=repaired_calls,
        hack_invalidated=hack_invalidated,
    )
    report = stats.to_record()
    report["stage"] = "curate"
    report["unrepairable_calls"] = unrepairable
    report["notes"] = notes
    return report


def _curated(cfg: PipelineConfig, stage: str) -> list[Trajectory]:
    path = cfg.out_dir / "curated.jsonl"
    _require_input(path, "curated corpus (run the curate stage first)")
    result = load_corpus(path, "trajectories")
    _fail_on_rejections(cfg, stage, path, result.rejections)
    return result.records


def _stage_mask(cfg: PipelineConfig) -> dict:
    curated = _curated(cfg, "mask")
    wanted = {"resolved"}
    if cfg.recycle_semi_resolved:
        wanted.add("semi_resolved")
    selected = [t for t in curated if t.outcome in wanted]

    def render(traj: Trajectory):
        try:
            sample = sft_masking.build_loss_mask(traj)
        except sft_masking.EmptySampleError as exc:
            return {"trajectory_id": traj.trajectory_id, "reason": f"empty: {exc}"}
        emitted = sft_masking.serialize_sample(sample, cfg.context_limit)
        if isinstance(emitted, sft_masking.Overflow):
            return {
                "trajectory_id": emitted.trajectory_id,
                "reason": "overflow",
                "token_estimate": emitted.token_estimate,
                "context_limit": emitted.context_limit,
            }
        if not any(seg["in_loss"] for seg in emitted["rendered"]):
            return {"trajectory_id": traj.trajectory_id, "reason": "fully_masked"}
        return emitted

    outcomes = _pmap(render, selected, cfg.workers)
    samples = [o for o in outcomes if "rendered" in o]
    drops = [o for o in outcomes if "rendered" not in o]
    save_jsonl(samples, cfg.out_dir / "samples.jsonl")
    save_jsonl(drops, cfg.out_dir / "mask_drops.jsonl")
    return {
        "stage": "mask",
        "emitted": len(samples),
        "dropped": len(drops),
        "context_limit": cfg.context_limit,
    }


def _stage_curriculum(cfg: PipelineConfig) -> dict:
    curated = _curated(cfg, "curriculum")
    selected = curriculum_mod.select_for_training(
        curated, recycle_semi_resolved=cfg.recycle_semi_resolved
    )
    plan = curriculum_mod.build_stages(selected, cfg.bins())
    by_id = {t.trajectory_id: t for t in selected}
    for stage_no, stage_ids in enumerate(plan.stages, start=1):
        save_corpus([by_id[tid] for tid in stage_ids], cfg.out_dir / f"stage{stage_no}.jsonl")

    records = [(t.turn_count, t.outcome == "resolved") for t in curated]
    try:
        corr = curriculum_mod.turn_resolve_correlation(records, cfg.bucket_width)
        corr_report = {
            "r": round(corr.r, 6),
            "n": corr.n,
            "bucket_width": cfg.bucket_width,
            "bins": [[mid, rate] for mid, rate in corr.bins],
        }
    except curriculum_mod.UndefinedCorrelationError as exc:
        corr_report = {"r": None, "n": len(records), "error": str(exc)}
    atomic_write_text(cfg.out_dir / "correlation_report.json", _dump_report(corr_report))
    return {
        "stage": "curriculum",
        "selected": len(selected),
        "stage_sizes": [len(s) for s in plan.stages],
    }


def _stage_classify_errors(cfg: PipelineConfig) -> dict:
    curated = _curated(cfg, "classify-errors")
    instances = _load_instances_union(cfg, "classify-errors")
    failed = [t for t in curated if t.outcome in ("unresolved", "error", "empty_patch")]

    def label_one(traj: Trajectory) -> dict:
        inst = instances.get(traj.instance_id)
        if inst is None:
            return {"trajectory_id": traj.trajectory_id, "reason": "missing instance"}
        evidence = error_taxonomy.explain_failure(traj, inst)
        return {
            "trajectory_id": traj.trajectory_id,
            "label": evidence.pop("label"),
            "evidence": evidence,
            "tag": str(traj.extra.get("checkpoint", "all")),
        }

    labeled = _pmap(label_one, failed, cfg.workers)
    failures = [
        {"trajectory_id": r["trajectory_id"], "label": r["label"], "evidence": r["evidence"]}
        for r in labeled
        if "label" in r
    ]
    skipped = [r for r in labeled if "label" not in r]
    labels_by_tag: dict[str, list[str]] = {}
    for r in labeled:
        if "label" in r:
            labels_by_tag.setdefault(r["tag"], []).append(r["label"])
    save_jsonl(failures, cfg.out_dir / "failures.jsonl")
    distribution = {
        tag: error_taxonomy.failure_distribution(labels)
        for tag, labels in sorted(labels_by_tag.items())
    }
    atomic_write_text(cfg.out_dir / "distribution.json", _dump_report(distribution))
    return {
        "stage": "classify-errors",
        "failed": len(failed),
        "labeled": len(failures),
        "skipped": skipped,
    }


def _stage_tts_select(cfg: PipelineConfig) -> dict:
    rollouts_path = _require_input(cfg.rollouts, "rollouts")
    grouped: dict[str, list[tts.Candidate]] = {}
    for record in load_jsonl(rollouts_path):
        candidate = tts.Candidate.from_record(record)
        grouped.setdefault(candidate.instance_id, []).append(candidate)
    sizes = {len(v) for v in grouped.values()}
    if not grouped:
        raise ValidationFailure("rollouts file holds no candidates")
    if len(sizes) != 1:
        raise ValidationFailure(f"ragged candidate counts per instance: {sorted(sizes)}")
    for instance_id, candidates in grouped.items():
        candidates.sort(key=lambda c: c.rollout_index)
        if len({c.rollout_index for c in candidates}) != len(candidates):
            raise ValidationFailure(f"duplicate rollout_index for {instance_id}")
    verifier = tts.StubVerifier(cfg.seed) if cfg.verifier == "stub" else tts.OracleVerifier()

    instance_ids = sorted(grouped)
    scored = _pmap(
        lambda iid: [verifier.score(c) for c in grouped[iid]], instance_ids, cfg.workers
    )
    selection_lines = []
    pairs = []
    for instance_id, scores in zip(instance_ids, scored):
        candidates = grouped[instance_id]
        chosen = tts.select_top1(candidates, scores)
        chosen_score = scores[candidates.index(chosen)]
        selection_lines.append(
            {
                "instance_id": instance_id,
                "selected_rollout_index": chosen.rollout_index,
                "score": chosen_score.score,
                "provenance": chosen_score.provenance,
                "resolved": chosen.resolved,
            }
        )
        pairs.append((candidates, scores))
    metrics = tts.tts_at_k(pairs)
    k = len(pairs[0][0])
    save_jsonl(selection_lines, cfg.out_dir / "selection.jsonl")
    metrics_report = {
        "k": k,
        "instances": len(pairs),
        "tts": metrics["tts"],
        "pass": metrics["pass"],
        "verifier": cfg.verifier,
    }
    atomic_write_text(cfg.out_dir / "tts_metrics.json", _dump_report(metrics_report))

    report = {"stage": "tts-select", "instances": len(pairs), "k": k}
    if cfg.surface is not None and cfg.latency_budget is not None:
        surface_path = _require_input(cfg.surface, "surface")
        surface: dict[tuple[int, int], float] = {}
        for record in load_jsonl(surface_path):
            turns = record.get("turns", record.get("T"))
            rollouts = record.get("rollouts", record.get("K"))
            surface[(int(turns), int(rollouts))] = float(record["rate"])
        try:
            plan, contour = tts.allocate(cfg.latency_model(), cfg.latency_budget, surface)
        except tts.InfeasibleBudgetError as exc:
            raise ValidationFailure(str(exc)) from exc
        allocation_report = {
            "budget": cfg.latency_budget,
            "plan": {
                "turns": plan.turns,
                "rollouts": plan.rollouts,
                "predicted_latency": plan.predicted_latency,
                "predicted_rate": plan.predicted_rate,
            },
            "contour": [[t, k_cont] for t, k_cont in contour],
        }
        atomic_write_text(cfg.out_dir / "allocation.json", _dump_report(allocation_report))
        report["allocation"] = allocation_report["plan"]
    return report


def _stage_stats(cfg: PipelineConfig) -> dict:
    instances = _load_instances_union(cfg, "stats")

    def aggregate(group: list[TaskInstance]) -> dict:
        if not group:
            return {"instances": 0}
        stats = [
            patch_analysis.patch_stats(patch_analysis.parse_patch(i.golden_patch))
            for i in group
        ]
        n = len(group)
        means = patch_analysis.mean_patch_stats(stats)
        return {
            "instances": n,
            "issue_words": sum(len(i.problem_statement.split()) for i in group) / n,
            "golden_patch": means,
            "tests": {
                "fail_to_pass": sum(len(i.fail_to_pass) for i in group) / n,
                "pass_to_pass": sum(len(i.pass_to_pass) for i in group) / n,
                "total": sum(len(i.fail_to_pass) + len(i.pass_to_pass) for i in group) / n,
            },
        }

    everyone = list(instances.values())
    report = {
        "stage": "stats",
        "conventions": {
            "lines": "added + removed (a modified line counts twice)",
            "renames": "counted in files, not hunks or lines",
        },
        "real": aggregate([i for i in everyone if i.origin == "real"]),
        "synthetic": aggregate([i for i in everyone if i.origin == "synthetic"]),
        "combined": aggregate(everyone),
    }
    return report


_STAGE_FNS = {
    "build-tasks": _stage_build_tasks,
    "inject": _stage_inject,
    "sanitize": _stage_sanitize,
    "curate": _stage_curate,
    "mask": _stage_mask,
    "curriculum": _stage_curriculum,
    "classify-errors": _stage_classify_errors,
    "tts-select": _stage_tts_select,
    "stats": _stage_stats,
}


# ---------------------------------------------------------------------------
# Stage runner and pipeline


def run_stage(stage: str, cfg: PipelineConfig) -> tuple[int, dict]:
    """Run one stage; returns (exit_code, report). The report is also
    written to the stage's report file in out_dir."""
    if stage not in _STAGE_FNS:
        raise ValueError(f"unknown stage {stage!r}")
    try:
        report = _STAGE_FNS[stage](cfg)
        code = EXIT_OK
    except MissingInputError as exc:
        report = {"stage": stage, "error": str(exc)}
        code = EXIT_MISSING_INPUT
    except ValidationFailure as exc:
        report = {"stage": stage, "error": str(exc)}
        if exc.rejection_path is not None:
            report["rejection_report"] = str(exc.rejection_path)
        code = EXIT_VALIDATION
    except ForgeError as exc:
        report = {"stage": stage, "error": str(exc)}
        code = EXIT_INTERNAL
    report["exit_code"] = code
    atomic_write_text(cfg.out_dir / _REPORT_NAMES[stage], _dump_report(report))
    return code, report


def _hash_path(path: Path) -> str:
    digest = hashlib.sha256()
    if path.is_dir():
        for file_path in sorted(path.rglob("*")):
            if file_path.is_file():
                digest.update(file_path.relative_to(path).as_posix().encode())
                digest.update(file_path.read_bytes())
    else:
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _stage_inputs(stage: str, cfg: PipelineConfig) -> list[Path]:
    out = cfg.out_dir
    instance_sources = [out / "instances_real.jsonl", out / "instances_synth.jsonl"]
    if cfg.instances is not None:
        instance_sources.append(cfg.instances)
    table: dict[str, list[Path | None]] = {
        "build-tasks": [cfg.real_inputs],
        "inject": [cfg.snapshot_dir, cfg.mutations],
        "sanitize": [cfg.histories],
        "curate": [cfg.trajectories, cfg.final_reports, *instance_sources],
        "mask": [out / "curated.jsonl"],
        "curriculum": [out / "curated.jsonl"],
        "classify-errors": [out / "curated.jsonl", *instance_sources],
        "tts-select": [cfg.rollouts, cfg.surface],
        "stats": instance_sources,
    }
    return [p for p in table[stage] if p is not None]


def _stage_outputs(stage: str, cfg: PipelineConfig) -> list[Path]:
    out = cfg.out_dir
    table = {
        "build-tasks": [out / "instances_real.jsonl"],
        "inject": [out / "instances_synth.jsonl"],
        "sanitize": [out / "sanitized_histories.jsonl"],
        "curate": [out / "curated.jsonl"],
        "mask": [out / "samples.jsonl", out / "mask_drops.jsonl"],
        "curriculum": [
            out / "stage1.jsonl",
            out / "stage2.jsonl",
            out / "stage3.jsonl",
            out / "correlation_report.json",
        ],
        "classify-errors": [out / "failures.jsonl", out / "distribution.json"],
        "tts-select": [out / "selection.jsonl", out / "tts_metrics.json"],
        "stats": [],
    }
    outputs = list(table[stage])
    outputs.append(out / _REPORT_NAMES[stage])
    return outputs


def _input_fingerprint(stage: str, cfg: PipelineConfig) -> str:
    digest = hashlib.sha256()
    digest.update(stage.encode())
    digest.update(cfg.config_path.read_bytes())
    for path in _stage_inputs(stage, cfg):
        if path.exists():
            digest.update(path.name.encode())
            digest.update(_hash_path(path).encode())
    return digest.hexdigest()


def run_pipeline(cfg: PipelineConfig, echo: Callable[[str], None] = print) -> int:
    """Run every stage in dependency order, skipping stages whose input
    content hashes match the recorded state and whose outputs are intact.
    Propagates the first failing stage's exit code."""
    state_path = cfg.out_dir / ".forge_state.json"
    state: dict = {}
    if state_path.exists():
        state = json.loads(state_path.read_text(encoding="utf-8"))

    def save_state():
        atomic_write_text(state_path, _dump_report(state))

    def output_key(path: Path) -> str:
        return path.relative_to(cfg.out_dir).as_posix()

    for stage in PIPELINE_ORDER:
        fingerprint = _input_fingerprint(stage, cfg)
        recorded = state.get(stage, {})
        outputs = _stage_outputs(stage, cfg)
        intact = all(p.exists() for p in outputs) and all(
            recorded.get("outputs", {}).get(output_key(p)) == _hash_path(p) for p in outputs
        )
        if recorded.get("inputs") == fingerprint and intact:
            echo(f"[skip] {stage}: inputs unchanged")
            continue
        code, report = run_stage(stage, cfg)
        if code != EXIT_OK:
            echo(f"[fail] {stage}: {report.get('error', 'unknown error')} (exit {code})")
            state.pop(stage, None)
            save_state()
            return code
        state[stage] = {
            "inputs": fingerprint,
            "outputs": {output_key(p): _hash_path(p) for p in outputs if p.exists()},
        }
        echo(f"[ok]   {stage}")
    save_state()
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def _summarize(report: dict) -> str:
    keys = [k for k in ("built", "sanitized", "emitted", "selected", "labeled", "instances") if k in report]
    parts = [f"{k}={report[k]}" for k in keys]
    if "valid_rate" in report and report["valid_rate"] is not None:
        parts.append(f"valid_rate={report['valid_rate']:.2f}")
    return " ".join(parts)


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="forge",
        description="Build SWE task instances, curate trajectories, and run best-of-K selection.",
    )
    parser.add_argument(
        "stage",
        choices=[*PIPELINE_ORDER, "pipeline", "export-history"],
        help="pipeline stage to run ('pipeline' runs all stages in order)",
    )
    parser.add_argument("--config", help="path to the key-value config file")
    parser.add_argument("--workers", type=int, help="override worker pool size")
    parser.add_argument("--seed", type=int, help="override RNG seed (wildcard mutations, stub verifier)")
    parser.add_argument("--repo", help="repository path (export-history only)")
    parser.add_argument("--out", help="output file (export-history only)")
    args = parser.parse_args(argv)

    if args.stage == "export-history":
        if not args.repo or not args.out:
            parser.error("export-history requires --repo and --out")
        try:
            records = repo_sanitizer.export_history(args.repo)
        except ForgeError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INTERNAL
        save_jsonl([r.to_record() for r in records], args.out)
        print(f"exported {len(records)} commits to {args.out}")
        return EXIT_OK

    if not args.config:
        parser.error("--config is required")
    try:
        cfg = load_config(args.config)
    except MissingInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except ForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    if args.workers is not None:
        cfg = dc_replace(cfg, workers=args.workers)
    if args.seed is not None:
        cfg = dc_replace(cfg, seed=args.seed)

    if args.stage == "pipeline":
        return run_pipeline(cfg)

    code, report = run_stage(args.stage, cfg)
    if code == EXIT_OK:
        print(f"[ok]   {args.stage} {_summarize(report)}".rstrip())
    else:
        print(f"[fail] {args.stage}: {report.get('error', '')} (exit {code})", file=sys.stderr)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
