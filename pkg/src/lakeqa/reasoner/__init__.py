"""Relational program construction and execution over retrieved tables."""

from .ir import (
    Aggregate,
    Distinct,
    ExecError,
    ExecResult,
    Filter,
    Join,
    Limit,
    PlanNode,
    PlanValidationError,
    Project,
    RelationalPlan,
    Scan,
    Sort,
    UnionCluster,
)
from .executor import execute_plan, fuzzy_match, normalized_edit_distance
from .planning import (
    AnswerOutcome,
    RulePlanner,
    answer,
    generate_plan_cot,
    refine_plan,
)

__all__ = [
    "Aggregate",
    "AnswerOutcome",
    "Distinct",
    "ExecError",
    "ExecResult",
    "Filter",
    "Join",
    "Limit",
    "PlanNode",
    "PlanValidationError",
    "Project",
    "RelationalPlan",
    "RulePlanner",
    "Scan",
    "Sort",
    "UnionCluster",
    "answer",
    "execute_plan",
    "fuzzy_match",
    "generate_plan_cot",
    "normalized_edit_distance",
    "refine_plan",
]
