"""Assembles task instances from real PRs and deterministic bug injection.

Test labels are derived by differencing pre/post test reports. Synthetic
bugs are injected through syntax-tree-guided source splicing: the tree
provider parses a file, enumerates eligible nodes, and the mutator rewrites
the exact character span of the chosen node. Splicing the original text
(rather than re-printing the tree) keeps the round-trip lossless and the
injection diff minimal.

Mutators and their fixed rules:
- operator_swap: arithmetic + <-> -, * <-> /; comparison < <-> >=, > <-> <=,
  == <-> !=; boolean and <-> or.
- conditional_removal: an if-statement is replaced by its else branch when
  one exists, otherwise deleted (a lone statement becomes `pass` so the
  block stays parseable).
- loop_removal: the loop statement is deleted, post-loop code kept.

The seed selects among eligible targets when a MutationSpec carries no
explicit target; identical (tree, spec) inputs always produce identical
output.
"""

from __future__ import annotations

import ast
import hashlib
import io
import random
import tokenize
from dataclasses import dataclass, field, replace
from typing import Mapping, Protocol, Sequence

from .errors import ForgeError
from .patch_analysis import Patch, invert_patch, make_patch, parse_patch, render_patch
from .schema import TaskInstance, TestReport, validate_instance

MUTATORS = ("operator_swap", "conditional_removal", "loop_removal")

SWAP_TABLE = {
    "+": "-",
    "-": "+",
    "*": "/",
    "/": "*",
    "<": ">=",
    ">=": "<",
    ">": "<=",
    "<=": ">",
    "==": "!=",
    "!=": "==",
    "and": "or",
    "or": "and",
}

SYNTHETIC_EPOCH = "1970-01-01T00:00:00+00:00"

_BINOP_SYMBOLS = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/"}
_CMP_SYMBOLS = {ast.Lt: "<", ast.Gt: ">", ast.Eq: "==", ast.NotEq: "!=", ast.GtE: ">=", ast.LtE: "<="}
_BOOL_SYMBOLS = {ast.And: "and", ast.Or: "or"}


class LocatorError(ForgeError):
    """The mutation target does not exist in the tree."""


class MutatorKindError(ForgeError):
    """The target exists but is not the mutator's node kind."""


class MutationError(ForgeError):
    """The mutation could not be applied or produced no change."""


class InvisibleBugError(ForgeError):
    """The injected bug changes no test outcome; the instance is unusable."""


@dataclass(frozen=True)
class NodeLocator:
    """File path plus the character span of one syntax-tree node."""

    path: str
    start_line: int
    start_col: int
    end_line: int
    end_col: int
    kind: str = ""
    detail: str = ""

    def span(self) -> tuple[int, int, int, int]:
        return (self.start_line, self.start_col, self.end_line, self.end_col)


@dataclass(frozen=True)
class MutationSpec:
    """Which mutator to run and where. A None target is a wildcard resolved
    by the seed; `path` optionally narrows a wildcard to one file."""

    mutator: str
    target: NodeLocator | None = None
    seed: int = 0
    path: str | None = None


class SyntaxTreeProvider(Protocol):
    def parse(self, path: str, source: str) -> "PythonSyntaxTree": ...

    def render(self, tree: "PythonSyntaxTree") -> str: ...

    def enumerate(self, tree: "PythonSyntaxTree", kind: str) -> list[NodeLocator]: ...


class ProblemStatementProvider(Protocol):
    def generate(self, golden_patch: str, failing_tests: Sequence[str], logs: Sequence[str]) -> str: ...


# ---------------------------------------------------------------------------
# Test-label derivation


def derive_test_labels(pre: TestReport, post: TestReport) -> tuple[list[str], list[str]]:
    """Difference two test reports into (fail_to_pass, pass_to_pass).

    A test is fail_to_pass when it fails or errors before and passes after;
    pass_to_pass when it passes in both states. "error" counts as a failure.
    Tests absent from either report are excluded. Both lists come back
    sorted, and no test can appear in both.
    """
    if pre.code_state not in ("pre_patch", "buggy"):
        raise ValueError(f"pre report has code_state {pre.code_state!r}")
    if post.code_state not in ("post_patch", "restored"):
        raise ValueError(f"post report has code_state {post.code_state!r}")
    shared = set(pre.results) & set(post.results)
    fail_to_pass = sorted(
        t for t in shared if pre.results[t] in ("fail", "error") and post.results[t] == "pass"
    )
    pass_to_pass = sorted(
        t for t in shared if pre.results[t] == "pass" and post.results[t] == "pass"
    )
    return fail_to_pass, pass_to_pass


# ---------------------------------------------------------------------------
# Python syntax trees


@dataclass(frozen=True)
class PythonSyntaxTree:
    """A parsed Python file that keeps its exact source text, so rendering
    an unmutated tree is byte-identical to the input."""

    path: str
    source: str
    root: ast.Module = field(repr=False, compare=False, default=None)


class PythonAstProvider:
    """Tree provider backed by the stdlib ast module with source splicing."""

    def parse(self, path: str, source: str) -> PythonSyntaxTree:
        try:
            root = ast.parse(source)
        except SyntaxError as exc:
            raise MutationError(f"{path}: cannot parse: {exc}") from exc
        return PythonSyntaxTree(path=path, source=source, root=root)

    def render(self, tree: PythonSyntaxTree) -> str:
        return tree.source

    def enumerate(self, tree: PythonSyntaxTree, kind: str) -> list[NodeLocator]:
        """List mutable nodes of one kind: operator, conditional, or loop."""
        locators = []
        for node in ast.walk(tree.root):
            locator = _locator_for(tree, node, kind)
            if locator is not None:
                locators.append(locator)
        locators.sort(key=lambda loc: loc.span())
        return locators


def _locator_for(tree: PythonSyntaxTree, node: ast.AST, kind: str) -> NodeLocator | None:
    if kind == "operator":
        symbol = _operator_symbol(node)
        if symbol is None:
            return None
        return _make_locator(tree.path, node, kind, symbol)
    if kind == "conditional":
        if isinstance(node, ast.If) and not _is_elif(tree.source, node):
            return _make_locator(tree.path, node, kind)
        return None
    if kind == "loop":
        if isinstance(node, (ast.For, ast.While, ast.AsyncFor)):
            return _make_locator(tree.path, node, kind)
        return None
    raise ValueError(f"unknown node kind {kind!r}")


def _operator_symbol(node: ast.AST) -> str | None:
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOP_SYMBOLS:
        return _BINOP_SYMBOLS[type(node.op)]
    if isinstance(node, ast.Compare) and len(node.ops) == 1 and type(node.ops[0]) in _CMP_SYMBOLS:
        return _CMP_SYMBOLS[type(node.ops[0])]
    if isinstance(node, ast.BoolOp) and type(node.op) in _BOOL_SYMBOLS:
        return _BOOL_SYMBOLS[type(node.op)]
    return None


def _make_locator(path: str, node: ast.AST, kind: str, detail: str = "") -> NodeLocator:
    return NodeLocator(
        path=path,
        start_line=node.lineno,
        start_col=node.col_offset,
        end_line=node.end_lineno,
        end_col=node.end_col_offset,
        kind=kind,
        detail=detail,
    )


def _is_elif(source: str, node: ast.If) -> bool:
    lines = source.splitlines()
    line = lines[node.lineno - 1]
    return line[node.col_offset:].startswith("elif")


_KIND_FOR_MUTATOR = {
    "operator_swap": "operator",
    "conditional_removal": "conditional",
    "loop_removal": "loop",
}


# ---------------------------------------------------------------------------
# Mutation application


def _line_offsets(source: str) -> list[int]:
    offsets = [0]
    for line in source.splitlines(keepends=True):
        offsets.append(offsets[-1] + len(line))
    return offsets


def _span_offsets(source: str, locator: NodeLocator) -> tuple[int, int]:
    offsets = _line_offsets(source)
    return (
        offsets[locator.start_line - 1] + locator.start_col,
        offsets[locator.end_line - 1] + locator.end_col,
    )


def _node_at(tree: PythonSyntaxTree, locator: NodeLocator, kind: str) -> ast.AST | None:
    for node in ast.walk(tree.root):
        candidate = _locator_for(tree, node, kind)
        if candidate is not None and candidate.span() == locator.span():
            return node
    return None


def _operator_token_start(source: str, window: tuple[int, int], symbol: str) -> int:
    # Token positions never point inside comments or strings, unlike a raw
    # text search over the operand gap.
    offsets = _line_offsets(source)
    for tok in tokenize.generate_tokens(io.StringIO(source).readline):
        if tok.string != symbol or tok.type not in (tokenize.OP, tokenize.NAME):
            continue
        start = offsets[tok.start[0] - 1] + tok.start[1]
        if window[0] <= start < window[1]:
            return start
    return -1


def _swap_operator(tree: PythonSyntaxTree, node: ast.AST) -> str:
    source = tree.source
    offsets = _line_offsets(source)

    def offset(n: ast.AST, end: bool = False) -> int:
        if end:
            return offsets[n.end_lineno - 1] + n.end_col_offset
        return offsets[n.lineno - 1] + n.col_offset

    if isinstance(node, ast.BinOp):
        symbol = _BINOP_SYMBOLS[type(node.op)]
        window = (offset(node.left, end=True), offset(node.right))
    elif isinstance(node, ast.Compare):
        symbol = _CMP_SYMBOLS[type(node.ops[0])]
        window = (offset(node.left, end=True), offset(node.comparators[0]))
    else:
        symbol = _BOOL_SYMBOLS[type(node.op)]
        window = (offset(node.values[0], end=True), offset(node.values[1]))
    start = _operator_token_start(source, window, symbol)
    if start < 0:
        raise MutationError(f"{tree.path}: operator {symbol!r} not found in its expression")
    return source[:start] + SWAP_TABLE[symbol] + source[start + len(symbol):]


def _containing_block(root: ast.Module, node: ast.AST) -> tuple[ast.AST, list] | None:
    for parent in ast.walk(root):
        for _, value in ast.iter_fields(parent):
            if isinstance(value, list) and any(child is node for child in value):
                return parent, value
    return None


def _remove_statement(tree: PythonSyntaxTree, node: ast.AST) -> str:
    lines = tree.source.splitlines(keepends=True)
    replacement: list[str] = []
    if isinstance(node, ast.If) and node.orelse:
        replacement = _else_branch_lines(tree, node)
    else:
        found = _containing_block(tree.root, node)
        if found is not None:
            parent, block = found
            if len(block) == 1 and not isinstance(parent, ast.Module):
                indent = " " * node.col_offset
                replacement = [f"{indent}pass\n"]
    return "".join(lines[: node.lineno - 1] + replacement + lines[node.end_lineno:])


def _else_branch_lines(tree: PythonSyntaxTree, node: ast.If) -> list[str]:
    lines = tree.source.splitlines(keepends=True)
    first = node.orelse[0]
    last = node.orelse[-1]
    if isinstance(first, ast.If) and _is_elif(tree.source, first):
        # Keep the elif chain, promoting its head to a plain if.
        out = list(lines[first.lineno - 1 : node.end_lineno])
        head = out[0]
        col = first.col_offset
        out[0] = head[:col] + "if" + head[col + len("elif"):]
        return out
    prefix = lines[first.lineno - 1][: first.col_offset]
    if prefix.strip():
        # Inline else ("else: stmt"): splice the statement text onto its own line.
        start_off, _ = _span_offsets(tree.source, _make_locator(tree.path, first, "conditional"))
        _, end_off = _span_offsets(tree.source, _make_locator(tree.path, last, "conditional"))
        indent = " " * node.col_offset
        return [indent + tree.source[start_off:end_off].rstrip("\n") + "\n"]
    dedent = first.col_offset - node.col_offset
    out = []
    for line in lines[first.lineno - 1 : last.end_lineno]:
        if line.strip() and line[:dedent].isspace():
            out.append(line[dedent:])
        else:
            out.append(line)
    return out


def inject_bug(
    tree: PythonSyntaxTree,
    spec: MutationSpec,
    provider: SyntaxTreeProvider | None = None,
) -> tuple[PythonSyntaxTree, Patch]:
    """Apply one mutation to a parsed file and return the mutated tree plus
    the injection diff. Deterministic given (tree, spec)."""
    provider = provider or PythonAstProvider()
    if spec.mutator not in MUTATORS:
        raise MutationError(f"unknown mutator {spec.mutator!r}")
    kind = _KIND_FOR_MUTATOR[spec.mutator]
    if spec.target is None:
        candidates = provider.enumerate(tree, kind)
        if not candidates:
            raise LocatorError(f"{tree.path}: no eligible {kind} targets")
        locator = random.Random(spec.seed).choice(candidates)
    else:
        if spec.target.path != tree.path:
            raise LocatorError(
                f"target path {spec.target.path!r} does not match tree {tree.path!r}"
            )
        matches = [
            loc for loc in provider.enumerate(tree, kind) if loc.span() == spec.target.span()
        ]
        if matches:
            locator = matches[0]
        else:
            for other_kind in ("operator", "conditional", "loop"):
                if other_kind == kind:
                    continue
                if any(
                    loc.span() == spec.target.span()
                    for loc in provider.enumerate(tree, other_kind)
                ):
                    raise MutatorKindError(
                        f"target at {spec.target.span()} is a {other_kind}, "
                        f"not a {kind} ({spec.mutator})"
                    )
            raise LocatorError(f"{tree.path}: no node at span {spec.target.span()}")

    node = _node_at(tree, locator, kind)
    if node is None:
        raise LocatorError(f"{tree.path}: no node at span {locator.span()}")
    if spec.mutator == "operator_swap":
        mutated_source = _swap_operator(tree, node)
    else:
        mutated_source = _remove_statement(tree, node)
    if mutated_source == tree.source:
        raise MutationError(f"{tree.path}: mutation produced no change")
    mutated_tree = provider.parse(tree.path, mutated_source)
    injection = parse_patch(make_patch(tree.source, mutated_source, tree.path))
    return mutated_tree, injection


def resolve_target(
    snapshot: Mapping[str, str],
    spec: MutationSpec,
    provider: SyntaxTreeProvider | None = None,
) -> tuple[str, NodeLocator]:
    """Pick the concrete (path, locator) for a spec against a whole snapshot.

    Explicit targets are returned as-is after existence checks; wildcards
    enumerate eligible nodes across the snapshot's Python files (or the one
    file named by spec.path) and select by seed.
    """
    provider = provider or PythonAstProvider()
    kind = _KIND_FOR_MUTATOR[spec.mutator]
    if spec.target is not None:
        if spec.target.path not in snapshot:
            raise LocatorError(f"target file {spec.target.path!r} not in snapshot")
        return spec.target.path, spec.target
    if spec.path is not None:
        paths = [spec.path]
        if spec.path not in snapshot:
            raise LocatorError(f"file {spec.path!r} not in snapshot")
    else:
        paths = sorted(p for p in snapshot if p.endswith(".py"))
    candidates: list[tuple[str, NodeLocator]] = []
    for path in paths:
        try:
            tree = provider.parse(path, snapshot[path])
        except MutationError:
            continue
        candidates.extend((path, loc) for loc in provider.enumerate(tree, kind))
    if not candidates:
        raise LocatorError(f"no eligible {kind} targets in snapshot")
    return random.Random(spec.seed).choice(candidates)


# ---------------------------------------------------------------------------
# Problem statements


class TemplateStatementProvider:
    """Deterministic statement generator: first failing test as the title,
    then a fixed template listing the observed failures. Never includes any
    diff text, so the golden fix cannot leak into the statement."""

    def generate(
        self, golden_patch: str, failing_tests: Sequence[str], logs: Sequence[str]
    ) -> str:
        if not failing_tests:
            raise ValueError("at least one failing test is required")
        title = failing_tests[0].split("::")[-1].split(".")[-1]
        lines = [f"{title} fails", ""]
        lines.append("The following tests fail on the current revision:")
        lines.extend(f"- {t}" for t in failing_tests)
        lines.append("")
        lines.append("Observed output:")
        if logs:
            lines.extend(f"    {entry}" for entry in logs)
        else:
            lines.append("    (no captured output)")
        lines.append("")
        lines.append(
            "The failures are reproducible on a clean checkout. A fix should make "
            "these tests pass without breaking the rest of the suite."
        )
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Instance assembly


def _repo_slug(repo: str) -> str:
    return repo.replace("/", "__")


def shared_image_name(repo: str, base_commit: str) -> str:
    """Sandbox id shared by every synthetic instance of one (repo, commit)."""
    return f"sandbox.{_repo_slug(repo)}.{base_commit[:12]}"


def build_synthetic_instance(
    repo_snapshot: Mapping[str, str],
    spec: MutationSpec,
    reports: tuple[TestReport, TestReport],
    statements: ProblemStatementProvider,
    *,
    repo: str,
    base_commit: str,
    created_at: str = SYNTHETIC_EPOCH,
    provider: SyntaxTreeProvider | None = None,
) -> TaskInstance:
    """Build one synthetic instance by injecting a bug into the snapshot.

    `reports` is (buggy, restored): the suite run on the mutated tree and on
    the clean tree. The golden patch is the inverse of the injection diff,
    so applying it to the buggy snapshot restores the clean snapshot
    byte-exactly. Raises InvisibleBugError when no test changes status.
    """
    provider = provider or PythonAstProvider()
    buggy_report, restored_report = reports
    fail_to_pass, pass_to_pass = derive_test_labels(buggy_report, restored_report)
    if not fail_to_pass:
        raise InvisibleBugError(
            f"{spec.mutator} mutation (seed {spec.seed}) changes no test outcome"
        )

    path, locator = resolve_target(repo_snapshot, spec, provider)
    tree = provider.parse(path, repo_snapshot[path])
    _, injection = inject_bug(tree, replace(spec, target=locator, path=None), provider)
    injection_text = render_patch(injection)
    golden_patch = render_patch(invert_patch(injection))

    logs = [f"{t}: {buggy_report.results[t]}" for t in fail_to_pass]
    statement = statements.generate(golden_patch, fail_to_pass, logs)
    if not statement:
        raise ValueError("problem statement provider returned empty text")

    digest = hashlib.sha256(
        f"{path}:{locator.span()}:{spec.mutator}".encode("utf-8")
    ).hexdigest()[:8]
    instance = TaskInstance(
        instance_id=f"{_repo_slug(repo)}-{base_commit[:8]}-{spec.mutator}-{spec.seed:04d}-{digest}",
        repo=repo,
        base_commit=base_commit,
        origin="synthetic",
        problem_statement=statement,
        golden_patch=golden_patch,
        fail_to_pass=tuple(fail_to_pass),
        pass_to_pass=tuple(pass_to_pass),
        image_name=shared_image_name(repo, base_commit),
        created_at=created_at,
        extra={
            "history_policy": "single_snapshot",
            "injection_patch": injection_text,
            "target_path": path,
        },
    )
    violations = validate_instance(instance)
    if violations:
        raise ForgeError(f"built instance fails validation: {violations}")
    return instance


def build_real_instance(
    pr: Mapping, pre: TestReport, post: TestReport
) -> TaskInstance:
    """Build one real instance from a merged PR and its pre/post reports.

    `pr` carries repo, base_commit, merged_diff, issue_text,
    issue_created_at, and optionally number. The merged diff is the golden
    patch and the linked issue is the problem statement.
    """
    issue_text = pr.get("issue_text", "")
    if not issue_text.strip():
        raise ValueError("issue text is empty")
    merged_diff = pr["merged_diff"]
    parse_patch(merged_diff)  # unparseable diffs fail here

    fail_to_pass, pass_to_pass = derive_test_labels(pre, post)
    if not fail_to_pass:
        raise InvisibleBugError("PR changes no test outcome")

    repo = pr["repo"]
    base_commit = pr["base_commit"]
    number = pr.get("number")
    suffix = f"pr{number}" if number is not None else base_commit[:12]
    instance_id = f"{_repo_slug(repo)}-{suffix}"
    instance = TaskInstance(
        instance_id=instance_id,
        repo=repo,
        base_commit=base_commit,
        origin="real",
        problem_statement=issue_text,
        golden_patch=merged_diff,
        fail_to_pass=tuple(fail_to_pass),
        pass_to_pass=tuple(pass_to_pass),
        image_name=f"sandbox.{instance_id}",
        created_at=pr["issue_created_at"],
        extra={
            "history_policy": "cutoff",
            "history_cutoff": pr["issue_created_at"],
        },
    )
    violations = validate_instance(instance)
    if violations:
        raise ForgeError(f"built instance fails validation: {violations}")
    return instance
