"""Executable relational plan IR.

A plan is a DAG of operator nodes serialized as JSON. Every node carries a
string id and the ids of its inputs; the root must produce a scalar or a
single-column result for numerical questions. Validation turns structural
problems into typed execution errors instead of crashes, and those error
messages are the payload for refinement re-prompts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Union

from ..corpus import Value

PLAN_VERSION = 1

# ExecError taxonomy
UNKNOWN_TABLE = "unknown table"
UNKNOWN_COLUMN = "unknown column"
TYPE_MISMATCH = "type mismatch"
EMPTY_JOIN_KEY = "empty join key"
AGGREGATE_ON_TEXT = "aggregate on text"
MALFORMED_PLAN = "malformed plan"

AGGREGATE_FUNCTIONS = ("count", "sum", "avg", "min", "max")


@dataclass
class ExecError(Exception):
    kind: str
    message: str
    node_id: Optional[str] = None

    def __str__(self) -> str:
        where = f" at node {self.node_id}" if self.node_id else ""
        return f"{self.kind}{where}: {self.message}"

    def to_json(self) -> dict:
        return {"kind": self.kind, "message": self.message, "node": self.node_id}


class PlanValidationError(ExecError):
    pass


@dataclass
class PlanNode:
    id: str
    inputs: list[str] = field(default_factory=list)

    op = "base"

    def to_json(self) -> dict:
        return {"id": self.id, "op": self.op, "inputs": list(self.inputs)}


@dataclass
class Scan(PlanNode):
    table_id: str = ""
    op = "scan"

    def to_json(self) -> dict:
        out = super().to_json()
        out["table"] = self.table_id
        return out


@dataclass
class UnionCluster(PlanNode):
    table_ids: list[str] = field(default_factory=list)
    # per-member column order mapping onto the first member's headers;
    # None means align by header name (falling back to position)
    alignment: Optional[dict[str, list[int]]] = None
    op = "union_cluster"

    def to_json(self) -> dict:
        out = super().to_json()
        out["tables"] = list(self.table_ids)
        out["alignment"] = self.alignment
        return out


@dataclass
class Filter(PlanNode):
    predicate: dict = field(default_factory=dict)
    op = "filter"

    def to_json(self) -> dict:
        out = super().to_json()
        out["predicate"] = self.predicate
        return out


@dataclass
class Join(PlanNode):
    keys: list[tuple[str, str]] = field(default_factory=list)
    mode: str = "exact"  # "exact" | "fuzzy"
    delta: float = 0.2
    op = "join"

    def to_json(self) -> dict:
        out = super().to_json()
        out["keys"] = [list(pair) for pair in self.keys]
        out["mode"] = self.mode
        if self.mode == "fuzzy":
            out["delta"] = self.delta
        return out


@dataclass
class Project(PlanNode):
    columns: list[str] = field(default_factory=list)
    op = "project"

    def to_json(self) -> dict:
        out = super().to_json()
        out["columns"] = list(self.columns)
        return out


@dataclass
class Aggregate(PlanNode):
    function: str = "count"
    column: Optional[str] = None  # None only valid for count
    group_by: list[str] = field(default_factory=list)
    op = "aggregate"

    def to_json(self) -> dict:
        out = super().to_json()
        out["function"] = self.function
        out["column"] = self.column
        out["group_by"] = list(self.group_by)
        return out


@dataclass
class Sort(PlanNode):
    keys: list[tuple[str, bool]] = field(default_factory=list)  # (col, asc)
    op = "sort"

    def to_json(self) -> dict:
        out = super().to_json()
        out["keys"] = [[col, asc] for col, asc in self.keys]
        return out


@dataclass
class Limit(PlanNode):
    n: int = 1
    op = "limit"

    def to_json(self) -> dict:
        out = super().to_json()
        out["n"] = self.n
        return out


@dataclass
class Distinct(PlanNode):
    op = "distinct"


_ARITY = {
    "scan": 0,
    "union_cluster": 0,
    "filter": 1,
    "join": 2,
    "project": 1,
    "aggregate": 1,
    "sort": 1,
    "limit": 1,
    "distinct": 1,
}


@dataclass
class RelationalPlan:
    nodes: dict[str, PlanNode]
    root: str
    annotations: dict[str, int] = field(default_factory=dict)  # node -> sub-question

    def to_json(self) -> dict:
        out_nodes = []
        for node_id in sorted(self.nodes):
            entry = self.nodes[node_id].to_json()
            if node_id in self.annotations:
                entry["subquestion"] = self.annotations[node_id]
            out_nodes.append(entry)
        return {"version": PLAN_VERSION, "root": self.root, "nodes": out_nodes}

    @classmethod
    def from_json(cls, data: Any) -> "RelationalPlan":
        if not isinstance(data, dict):
            raise PlanValidationError(MALFORMED_PLAN, "plan must be an object")
        raw_nodes = data.get("nodes")
        root = data.get("root")
        if not isinstance(raw_nodes, list) or not isinstance(root, str):
            raise PlanValidationError(
                MALFORMED_PLAN, "plan needs a 'root' id and a 'nodes' list"
            )
        nodes: dict[str, PlanNode] = {}
        annotations: dict[str, int] = {}
        for raw in raw_nodes:
            node = _node_from_json(raw)
            if node.id in nodes:
                raise PlanValidationError(
                    MALFORMED_PLAN, f"duplicate node id {node.id!r}", node.id
                )
            nodes[node.id] = node
            if isinstance(raw.get("subquestion"), int):
                annotations[node.id] = raw["subquestion"]
        return cls(nodes=nodes, root=root, annotations=annotations)


def _node_from_json(raw: Any) -> PlanNode:
    if not isinstance(raw, dict):
        raise PlanValidationError(MALFORMED_PLAN, "node must be an object")
    node_id = raw.get("id")
    op = raw.get("op")
    inputs = raw.get("inputs", [])
    if not isinstance(node_id, str) or not isinstance(op, str):
        raise PlanValidationError(MALFORMED_PLAN, "node needs string 'id' and 'op'")
    if not isinstance(inputs, list) or not all(isinstance(i, str) for i in inputs):
        raise PlanValidationError(
            MALFORMED_PLAN, f"node {node_id!r}: inputs must be id strings", node_id
        )
    if op == "scan":
        table = raw.get("table")
        if not isinstance(table, str):
            raise PlanValidationError(
                MALFORMED_PLAN, f"scan {node_id!r} needs a 'table'", node_id
            )
        return Scan(node_id, inputs, table_id=table)
    if op == "union_cluster":
        tables = raw.get("tables")
        if not isinstance(tables, list) or not tables:
            raise PlanValidationError(
                MALFORMED_PLAN,
                f"union_cluster {node_id!r} needs a non-empty 'tables' list",
                node_id,
            )
        alignment = raw.get("alignment")
        return UnionCluster(node_id, inputs, table_ids=list(tables), alignment=alignment)
    if op == "filter":
        predicate = raw.get("predicate")
        if not isinstance(predicate, dict):
            raise PlanValidationError(
                MALFORMED_PLAN, f"filter {node_id!r} needs a 'predicate'", node_id
            )
        return Filter(node_id, inputs, predicate=predicate)
    if op == "join":
        keys = raw.get("keys")
        if not isinstance(keys, list):
            raise PlanValidationError(
                MALFORMED_PLAN, f"join {node_id!r} needs a 'keys' list", node_id
            )
        pairs = []
        for pair in keys:
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise PlanValidationError(
                    MALFORMED_PLAN, f"join {node_id!r}: bad key pair {pair!r}", node_id
                )
            pairs.append((str(pair[0]), str(pair[1])))
        mode = raw.get("mode", "exact")
        delta = float(raw.get("delta", 0.2))
        return Join(node_id, inputs, keys=pairs, mode=mode, delta=delta)
    if op == "project":
        columns = raw.get("columns")
        if not isinstance(columns, list) or not columns:
            raise PlanValidationError(
                MALFORMED_PLAN, f"project {node_id!r} needs 'columns'", node_id
            )
        return Project(node_id, inputs, columns=[str(c) for c in columns])
    if op == "aggregate":
        function = raw.get("function")
        if function not in AGGREGATE_FUNCTIONS:
            raise PlanValidationError(
                MALFORMED_PLAN,
                f"aggregate {node_id!r}: unknown function {function!r}",
                node_id,
            )
        column = raw.get("column")
        group_by = raw.get("group_by", [])
        return Aggregate(
            node_id,
            inputs,
            function=function,
            column=None if column is None else str(column),
            group_by=[str(c) for c in group_by],
        )
    if op == "sort":
        keys = raw.get("keys", [])
        pairs = []
        for pair in keys:
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise PlanValidationError(
                    MALFORMED_PLAN, f"sort {node_id!r}: bad key {pair!r}", node_id
                )
            pairs.append((str(pair[0]), bool(pair[1])))
        return Sort(node_id, inputs, keys=pairs)
    if op == "limit":
        n = raw.get("n")
        if not isinstance(n, int) or n < 0:
            raise PlanValidationError(
                MALFORMED_PLAN, f"limit {node_id!r} needs n >= 0", node_id
            )
        return Limit(node_id, inputs, n=n)
    if op == "distinct":
        return Distinct(node_id, inputs)
    raise PlanValidationError(MALFORMED_PLAN, f"unknown operator {op!r}", node_id)


def validate_plan(plan: RelationalPlan, available_tables: set[str]) -> None:
    """Structural validation; raises PlanValidationError on the first issue.

    Checks ids, input arity, acyclicity, reachability of the root, and
    that every referenced table exists in the retrieved set. Column-level
    checks happen during execution where schemas are known.
    """
    if plan.root not in plan.nodes:
        raise PlanValidationError(
            MALFORMED_PLAN, f"root {plan.root!r} is not a node id"
        )
    for node in plan.nodes.values():
        expected = _ARITY[node.op]
        if len(node.inputs) != expected:
            raise PlanValidationError(
                MALFORMED_PLAN,
                f"{node.op} expects {expected} inputs, got {len(node.inputs)}",
                node.id,
            )
        for ref in node.inputs:
            if ref not in plan.nodes:
                raise PlanValidationError(
                    MALFORMED_PLAN, f"input {ref!r} is not a node id", node.id
                )
        if isinstance(node, Scan) and node.table_id not in available_tables:
            raise PlanValidationError(
                UNKNOWN_TABLE, f"table {node.table_id!r} was not retrieved", node.id
            )
        if isinstance(node, UnionCluster):
            for tid in node.table_ids:
                if tid not in available_tables:
                    raise PlanValidationError(
                        UNKNOWN_TABLE, f"table {tid!r} was not retrieved", node.id
                    )
        if isinstance(node, Join):
            if not node.keys:
                raise PlanValidationError(
                    EMPTY_JOIN_KEY, "join has no key pairs", node.id
                )
            if node.mode not in ("exact", "fuzzy"):
                raise PlanValidationError(
                    MALFORMED_PLAN, f"unknown join mode {node.mode!r}", node.id
                )
            if node.mode == "fuzzy" and not 0.0 <= node.delta <= 1.0:
                raise PlanValidationError(
                    MALFORMED_PLAN, f"fuzzy delta {node.delta} outside [0, 1]", node.id
                )
        if isinstance(node, Aggregate):
            if node.function != "count" and node.column is None:
                raise PlanValidationError(
                    MALFORMED_PLAN,
                    f"aggregate {node.function} needs a column",
                    node.id,
                )

    # acyclicity + reachability via iterative DFS from the root
    state: dict[str, int] = {}
    stack: list[tuple[str, int]] = [(plan.root, 0)]
    while stack:
        node_id, phase = stack.pop()
        if phase == 0:
            if state.get(node_id) == 1:
                raise PlanValidationError(
                    MALFORMED_PLAN, "plan contains a cycle", node_id
                )
            if state.get(node_id) == 2:
                continue
            state[node_id] = 1
            stack.append((node_id, 1))
            for ref in plan.nodes[node_id].inputs:
                stack.append((ref, 0))
        else:
            state[node_id] = 2


ScalarValue = Union[int, float, str, None]


@dataclass
class ExecResult:
    scalar: ScalarValue = None
    headers: Optional[list[str]] = None
    rows: Optional[list[tuple[Value, ...]]] = None
    row_count: int = 0
    error: Optional[ExecError] = None

    @property
    def is_scalar(self) -> bool:
        return self.headers is None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_json(self) -> dict:
        if self.failed:
            return {"error": self.error.to_json(), "row_count": 0}
        if self.is_scalar:
            return {"scalar": self.scalar, "row_count": self.row_count}
        return {
            "headers": self.headers,
            "rows": [list(r) for r in (self.rows or [])],
            "row_count": self.row_count,
        }
