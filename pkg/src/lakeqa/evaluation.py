"""Retrieval, answer, and decomposition-quality metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .providers import Embedder
from .reasoner.executor import fuzzy_match
from .reasoner.ir import ExecResult


def prf_at_k(
    retrieved: Sequence[str], relevant: set[str], k: int
) -> tuple[float, float, float]:
    """Precision, recall, and F1 over the top-k cut of a ranking."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    top = set(retrieved[:k])
    hits = len(top & relevant)
    precision = hits / k
    recall = hits / len(relevant)
    if precision + recall == 0.0:
        return 0.0, 0.0, 0.0
    f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def em_match(
    answer: ExecResult | int | float | str | None,
    gold: int | float | str,
    rel_tol: float = 1e-6,
) -> bool:
    """Arithmetic exact match with relative tolerance for numbers.

    Error outcomes and non-scalar results never match; text compares after
    case-folding and trimming.
    """
    if gold is None:
        raise ValueError("gold answer must be present")
    if isinstance(answer, ExecResult):
        if answer.failed:
            return False
        if not answer.is_scalar:
            if answer.row_count == 1 and len(answer.headers or []) == 1:
                answer = answer.rows[0][0]
            else:
                return False
        else:
            answer = answer.scalar
    if answer is None:
        return False
    gold_num = isinstance(gold, (int, float)) and not isinstance(gold, bool)
    ans_num = isinstance(answer, (int, float)) and not isinstance(answer, bool)
    if gold_num and ans_num:
        return abs(float(answer) - float(gold)) <= rel_tol * max(
            1.0, abs(float(gold))
        )
    if gold_num != ans_num:
        return False
    return str(answer).strip().casefold() == str(gold).strip().casefold()


def fuzzy_contains(phrase: str, text: str, delta: float = 0.2) -> bool:
    """Fuzzy substring test: some window of `text` matches the phrase."""
    phrase_n = " ".join(phrase.casefold().split())
    text_n = " ".join(text.casefold().split())
    if not phrase_n:
        return True
    if phrase_n in text_n:
        return True
    length = len(phrase_n)
    slack = max(1, math.ceil(delta * length))
    for window in range(max(1, length - slack), length + slack + 1):
        for start in range(0, max(1, len(text_n) - window + 1)):
            if fuzzy_match(text_n[start : start + window], phrase_n, delta):
                return True
    return False


@dataclass
class DecompositionRecord:
    question: str
    need_phrases: list[str]
    subquestions: list[str]
    gold_cluster_count: Optional[int] = None
    gold_table_count: Optional[int] = None


def decomposition_quality(
    records: Sequence[DecompositionRecord],
    embedder: Embedder,
    delta: float = 0.2,
) -> dict:
    """Information retention, redundancy, and table alignment rates.

    IRR: share of questions whose every need phrase fuzzy-appears in some
    sub-question. SR: mean pairwise embedding similarity among each
    question's sub-questions (single-sub-question records are excluded).
    SAR: share of questions where the sub-question count matches the gold
    cluster count; the table-count variant is reported alongside.
    """
    if not records:
        raise ValueError("no decomposition records")
    irr_hits = 0
    sr_values = []
    sar_cluster_hits, sar_cluster_total = 0, 0
    sar_table_hits, sar_table_total = 0, 0
    for rec in records:
        retained = all(
            any(fuzzy_contains(phrase, sq, delta) for sq in rec.subquestions)
            for phrase in rec.need_phrases
        )
        irr_hits += int(retained)
        if len(rec.subquestions) > 1:
            emb = embedder.embed(rec.subquestions)
            sims = emb @ emb.T
            n = len(rec.subquestions)
            pairs = [
                float(sims[i, j]) for i in range(n) for j in range(i + 1, n)
            ]
            sr_values.append(float(np.mean(pairs)))
        if rec.gold_cluster_count is not None:
            sar_cluster_total += 1
            sar_cluster_hits += int(
                len(rec.subquestions) == rec.gold_cluster_count
            )
        if rec.gold_table_count is not None:
            sar_table_total += 1
            sar_table_hits += int(
                len(rec.subquestions) == rec.gold_table_count
            )
    return {
        "IRR": irr_hits / len(records),
        "SR": float(np.mean(sr_values)) if sr_values else 0.0,
        "SAR": (sar_cluster_hits / sar_cluster_total) if sar_cluster_total else 0.0,
        "SAR_tables": (sar_table_hits / sar_table_total) if sar_table_total else 0.0,
        "questions": len(records),
    }


@dataclass
class MetricReport:
    ks: list[int]
    per_question: list[dict] = field(default_factory=list)

    def add(
        self,
        question_id: str,
        retrieved: Sequence[str],
        relevant: set[str],
        answer,
        gold_answer,
        complexity: str = "moderate",
    ) -> None:
        record = {"id": question_id, "complexity": complexity}
        for k in self.ks:
            p, r, f1 = prf_at_k(retrieved, relevant, k)
            record[f"P@{k}"] = p
            record[f"R@{k}"] = r
            record[f"F1@{k}"] = f1
        record["EM"] = bool(em_match(answer, gold_answer)) if gold_answer is not None else False
        self.per_question.append(record)

    def aggregates(self) -> dict:
        if not self.per_question:
            return {}
        out: dict = {"questions": len(self.per_question)}
        metric_keys = [f"{m}@{k}" for k in self.ks for m in ("P", "R", "F1")]
        metric_keys.append("EM")
        for key in metric_keys:
            out[key] = float(
                np.mean([rec[key] for rec in self.per_question])
            )
        by_complexity: dict[str, list[dict]] = {}
        for rec in self.per_question:
            by_complexity.setdefault(rec["complexity"], []).append(rec)
        out["by_complexity"] = {
            tag: {
                key: float(np.mean([rec[key] for rec in recs]))
                for key in metric_keys
            }
            | {"questions": len(recs)}
            for tag, recs in sorted(by_complexity.items())
        }
        return out

    def to_json(self) -> dict:
        return {
            "ks": self.ks,
            "aggregates": self.aggregates(),
            "per_question": self.per_question,
        }

    def text_table(self) -> str:
        agg = self.aggregates()
        if not agg:
            return "no questions evaluated"
        lines = [f"questions: {agg['questions']}"]
        header = ["metric"] + [str(k) for k in self.ks]
        lines.append("  ".join(f"{h:>8}" for h in header))
        for metric in ("P", "R", "F1"):
            row = [metric] + [
                f"{agg[f'{metric}@{k}']:.3f}" for k in self.ks
            ]
            lines.append("  ".join(f"{v:>8}" for v in row))
        lines.append(f"{'EM':>8}  {agg['EM']:.3f}")
        for tag, stats in agg.get("by_complexity", {}).items():
            lines.append(
                f"  [{tag}] n={stats['questions']} "
                + " ".join(
                    f"{m}@{k}={stats[f'{m}@{k}']:.3f}"
                    for k in self.ks
                    for m in ("R",)
                )
                + f" EM={stats['EM']:.3f}"
            )
        return "\n".join(lines)
