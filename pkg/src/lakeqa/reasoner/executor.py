"""Relational plan execution with standard semantics.

Rows flow through operators in insertion order so results are
deterministic without an explicit Sort. Aggregates over empty input follow
SQL conventions (count 0, everything else null); fuzzy joins pair rows
whose text keys are within a normalized edit distance bound.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from ..corpus import Corpus, Table, Value, canonical_value
from .ir import (
    AGGREGATE_ON_TEXT,
    EMPTY_JOIN_KEY,
    MALFORMED_PLAN,
    TYPE_MISMATCH,
    UNKNOWN_COLUMN,
    Aggregate,
    Distinct,
    ExecError,
    ExecResult,
    Filter,
    Join,
    Limit,
    PlanNode,
    Project,
    RelationalPlan,
    Scan,
    Sort,
    UnionCluster,
    validate_plan,
)


def normalized_edit_distance(a: str, b: str) -> float:
    """Levenshtein distance divided by the longer length, on folded text."""
    a = a.strip().casefold()
    b = b.strip().casefold()
    if a == b:
        return 0.0
    if not a or not b:
        return 1.0
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cost = 0 if ca == cb else 1
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost))
        prev = cur
    return prev[-1] / max(len(a), len(b))


def fuzzy_match(a: str, b: str, delta: float = 0.2) -> bool:
    """True when two strings agree up to a normalized edit distance delta.

    Exact (case-fold, trimmed) equality always matches; delta 0 reduces to
    that normalized equality.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must be in [0, 1]")
    if a.strip().casefold() == b.strip().casefold():
        return True
    return normalized_edit_distance(a, b) <= delta


@dataclass
class Relation:
    headers: list[str]
    rows: list[tuple[Value, ...]]

    def column(self, name: str, node_id: str) -> int:
        hits = [i for i, h in enumerate(self.headers) if h == name]
        if not hits:
            raise ExecError(
                UNKNOWN_COLUMN,
                f"column {name!r} not in {self.headers}",
                node_id,
            )
        if len(hits) > 1:
            raise ExecError(
                UNKNOWN_COLUMN,
                f"column {name!r} is ambiguous in {self.headers}",
                node_id,
            )
        return hits[0]


def _relation_from_table(table: Table) -> Relation:
    return Relation(list(table.headers), list(table.rows()))


def _is_number(v: Value) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _union_alignment(
    base: Table, member: Table, explicit: Optional[list[int]], node_id: str
) -> list[int]:
    """Column order mapping member columns onto the base header layout."""
    if explicit is not None:
        if sorted(explicit) != list(range(member.n_cols)) or len(explicit) != base.n_cols:
            raise ExecError(
                MALFORMED_PLAN,
                f"alignment for {member.id!r} is not a permutation of its columns",
                node_id,
            )
        return explicit
    if member.n_cols != base.n_cols:
        raise ExecError(
            TYPE_MISMATCH,
            f"cannot union {member.id!r}: {member.n_cols} columns vs "
            f"{base.n_cols} in {base.id!r}",
            node_id,
        )
    if member.headers == base.headers:
        return list(range(base.n_cols))
    if sorted(member.headers) == sorted(base.headers) and len(
        set(member.headers)
    ) == len(member.headers):
        return [member.headers.index(h) for h in base.headers]
    # headers differ; positional alignment is the documented fallback
    return list(range(base.n_cols))


def _eval_predicate(
    pred: dict, relation: Relation, row: tuple[Value, ...], node_id: str
) -> bool:
    op = pred.get("op")
    if op in ("and", "or"):
        args = pred.get("args", [])
        if not isinstance(args, list) or not args:
            raise ExecError(MALFORMED_PLAN, f"{op} needs args", node_id)
        results = (_eval_predicate(p, relation, row, node_id) for p in args)
        return all(results) if op == "and" else any(results)
    if op == "not":
        args = pred.get("args", [])
        if len(args) != 1:
            raise ExecError(MALFORMED_PLAN, "not needs one arg", node_id)
        return not _eval_predicate(args[0], relation, row, node_id)

    column = pred.get("col")
    if not isinstance(column, str):
        raise ExecError(MALFORMED_PLAN, f"comparison needs 'col': {pred}", node_id)
    value = pred.get("value")
    cell = row[relation.column(column, node_id)]

    if op in ("=", "!="):
        if cell is None:
            match = value is None
        elif _is_number(cell) and _is_number(value):
            match = float(cell) == float(value)
        else:
            match = canonical_value(cell).strip().casefold() == canonical_value(
                value
            ).strip().casefold() if value is not None else False
        return match if op == "=" else not match
    if op == "fuzzy=":
        delta = float(pred.get("delta", 0.2))
        if cell is None or value is None:
            return False
        return fuzzy_match(canonical_value(cell), canonical_value(value), delta)
    if op == "contains":
        if cell is None or value is None:
            return False
        return str(value).casefold() in canonical_value(cell).casefold()
    if op in (">", ">=", "<", "<="):
        if cell is None:
            return False
        if not _is_number(cell) or not _is_number(value):
            raise ExecError(
                TYPE_MISMATCH,
                f"ordered comparison on non-numeric operands: "
                f"{column}={cell!r} vs {value!r}",
                node_id,
            )
        left, right = float(cell), float(value)
        return {
            ">": left > right,
            ">=": left >= right,
            "<": left < right,
            "<=": left <= right,
        }[op]
    raise ExecError(MALFORMED_PLAN, f"unknown predicate op {op!r}", node_id)


def _aggregate_values(
    function: str, values: list[Value], node_id: str
) -> Value:
    non_null = [v for v in values if v is not None]
    if function == "count":
        return len(values)
    if not non_null:
        return None
    if function in ("sum", "avg"):
        bad = [v for v in non_null if not _is_number(v)]
        if bad:
            raise ExecError(
                AGGREGATE_ON_TEXT,
                f"{function} over non-numeric value {bad[0]!r}",
                node_id,
            )
        total = sum(float(v) for v in non_null)
        if function == "sum":
            return total
        return total / len(non_null)
    if function in ("min", "max"):
        numbers = all(_is_number(v) for v in non_null)
        texts = all(isinstance(v, str) for v in non_null)
        if not numbers and not texts:
            raise ExecError(
                TYPE_MISMATCH, f"{function} over mixed types", node_id
            )
        return min(non_null) if function == "min" else max(non_null)
    raise ExecError(MALFORMED_PLAN, f"unknown aggregate {function!r}", node_id)


def _suffix_duplicates(left: list[str], right: list[str]) -> list[str]:
    taken = set(left)
    out = []
    for h in right:
        name = h
        while name in taken:
            name += "_r"
        taken.add(name)
        out.append(name)
    return out


class _Executor:
    def __init__(self, plan: RelationalPlan, corpus: Corpus):
        self.plan = plan
        self.corpus = corpus
        self.memo: dict[str, Relation] = {}

    def run(self, node_id: str) -> Relation:
        if node_id in self.memo:
            return self.memo[node_id]
        node = self.plan.nodes[node_id]
        result = self._dispatch(node)
        self.memo[node_id] = result
        return result

    def _dispatch(self, node: PlanNode) -> Relation:
        if isinstance(node, Scan):
            return _relation_from_table(self.corpus[node.table_id])
        if isinstance(node, UnionCluster):
            return self._union(node)
        if isinstance(node, Filter):
            rel = self.run(node.inputs[0])
            rows = [
                row
                for row in rel.rows
                if _eval_predicate(node.predicate, rel, row, node.id)
            ]
            return Relation(list(rel.headers), rows)
        if isinstance(node, Join):
            return self._join(node)
        if isinstance(node, Project):
            rel = self.run(node.inputs[0])
            indices = [rel.column(c, node.id) for c in node.columns]
            return Relation(
                [rel.headers[i] for i in indices],
                [tuple(row[i] for i in indices) for row in rel.rows],
            )
        if isinstance(node, Aggregate):
            return self._aggregate(node)
        if isinstance(node, Sort):
            rel = self.run(node.inputs[0])
            rows = list(rel.rows)
            for col, asc in reversed(node.keys):
                idx = rel.column(col, node.id)
                # None sorts first; mixed types order by canonical text
                rows.sort(
                    key=lambda r: (
                        r[idx] is not None,
                        (float(r[idx]), "")
                        if _is_number(r[idx])
                        else (float("inf"), canonical_value(r[idx]))
                        if r[idx] is not None
                        else (float("-inf"), ""),
                    ),
                    reverse=not asc,
                )
            return Relation(list(rel.headers), rows)
        if isinstance(node, Limit):
            rel = self.run(node.inputs[0])
            return Relation(list(rel.headers), rel.rows[: node.n])
        if isinstance(node, Distinct):
            rel = self.run(node.inputs[0])
            seen = set()
            rows = []
            for row in rel.rows:
                key = tuple(canonical_value(v) for v in row)
                if key not in seen:
                    seen.add(key)
                    rows.append(row)
            return Relation(list(rel.headers), rows)
        raise ExecError(MALFORMED_PLAN, f"unhandled node {node.op}", node.id)

    def _union(self, node: UnionCluster) -> Relation:
        tables = [self.corpus[tid] for tid in node.table_ids]
        base = tables[0]
        rows: list[tuple[Value, ...]] = []
        for member in tables:
            explicit = None
            if node.alignment and member.id in node.alignment:
                explicit = node.alignment[member.id]
            order = _union_alignment(base, member, explicit, node.id)
            for row in member.rows():
                rows.append(tuple(row[i] for i in order))
        return Relation(list(base.headers), rows)

    def _join(self, node: Join) -> Relation:
        left = self.run(node.inputs[0])
        right = self.run(node.inputs[1])
        if not node.keys:
            raise ExecError(EMPTY_JOIN_KEY, "join has no key pairs", node.id)
        left_idx = [left.column(l, node.id) for l, _ in node.keys]
        right_idx = [right.column(r, node.id) for _, r in node.keys]

        def compatible(lv: Value, rv: Value) -> bool:
            if lv is None or rv is None:
                return False
            if _is_number(lv) != _is_number(rv):
                raise ExecError(
                    TYPE_MISMATCH,
                    f"join keys mix numbers and text: {lv!r} vs {rv!r}",
                    node.id,
                )
            return True

        def key_match(lrow, rrow) -> bool:
            for li, ri in zip(left_idx, right_idx):
                lv, rv = lrow[li], rrow[ri]
                if not compatible(lv, rv):
                    return False
                if node.mode == "fuzzy" and isinstance(lv, str) and isinstance(rv, str):
                    if not fuzzy_match(lv, rv, node.delta):
                        return False
                else:
                    if canonical_value(lv) != canonical_value(rv):
                        return False
            return True

        if node.mode == "fuzzy":
            for rel_side, idxs in ((left, left_idx), (right, right_idx)):
                for ci in idxs:
                    first = next(
                        (r[ci] for r in rel_side.rows if r[ci] is not None),
                        None,
                    )
                    if first is not None and _is_number(first):
                        raise ExecError(
                            TYPE_MISMATCH,
                            "fuzzy join requires text keys",
                            node.id,
                        )

        headers = list(left.headers) + _suffix_duplicates(
            left.headers, right.headers
        )
        rows = []
        if node.mode == "exact":
            buckets: dict[tuple[str, ...], list[tuple[Value, ...]]] = {}
            for rrow in right.rows:
                if any(rrow[ri] is None for ri in right_idx):
                    continue
                key = tuple(canonical_value(rrow[ri]) for ri in right_idx)
                buckets.setdefault(key, []).append(rrow)
            for lrow in left.rows:
                if any(lrow[li] is None for li in left_idx):
                    continue
                key = tuple(canonical_value(lrow[li]) for li in left_idx)
                for rrow in buckets.get(key, []):
                    if key_match(lrow, rrow):
                        rows.append(lrow + rrow)
        else:
            for lrow in left.rows:
                for rrow in right.rows:
                    if key_match(lrow, rrow):
                        rows.append(lrow + rrow)
        return Relation(headers, rows)

    def _aggregate(self, node: Aggregate) -> Relation:
        rel = self.run(node.inputs[0])
        value_idx = (
            rel.column(node.column, node.id) if node.column is not None else None
        )
        group_idx = [rel.column(c, node.id) for c in node.group_by]
        out_header = (
            f"{node.function}({node.column})"
            if node.column
            else f"{node.function}(*)"
        )
        if not group_idx:
            values = (
                [row[value_idx] for row in rel.rows]
                if value_idx is not None
                else [1] * len(rel.rows)
            )
            result = _aggregate_values(node.function, values, node.id)
            return Relation([out_header], [(result,)])
        groups: dict[tuple, list[Value]] = {}
        order: list[tuple] = []
        originals: dict[tuple, tuple[Value, ...]] = {}
        for row in rel.rows:
            key = tuple(canonical_value(row[i]) for i in group_idx)
            if key not in groups:
                groups[key] = []
                order.append(key)
                originals[key] = tuple(row[i] for i in group_idx)
            groups[key].append(
                row[value_idx] if value_idx is not None else 1
            )
        headers = [rel.headers[i] for i in group_idx] + [out_header]
        rows = [
            originals[key] + (_aggregate_values(node.function, groups[key], node.id),)
            for key in order
        ]
        return Relation(headers, rows)


def execute_plan(plan: RelationalPlan, corpus: Corpus) -> ExecResult:
    """Validate and execute a plan over the retrieved corpus slice.

    Any defect surfaces as a typed ExecError inside the result; execution
    never raises for malformed input. Scalar results come from 1x1
    relations and carry canonical numeric form.
    """
    try:
        validate_plan(plan, {t.id for t in corpus})
        relation = _Executor(plan, corpus).run(plan.root)
    except ExecError as err:
        return ExecResult(error=err)
    except RecursionError:
        return ExecResult(
            error=ExecError(MALFORMED_PLAN, "plan nesting too deep")
        )

    if len(relation.headers) == 1 and len(relation.rows) == 1:
        value = relation.rows[0][0]
        if isinstance(value, float) and value == int(value) and abs(value) < 1e15:
            value = int(value)
        return ExecResult(scalar=value, row_count=1)
    return ExecResult(
        headers=relation.headers,
        rows=relation.rows,
        row_count=len(relation.rows),
    )
