"""Turn a question into table-aligned sub-questions.

Four stages: extract information needs from the question, match each need
against an index of column snippets, disambiguate the need-to-column
mapping using graph connectivity (greedy with seed backtracking), then
group needs by assigned table and phrase one sub-question per group.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import prompts
from .corpus import Corpus, build_column_snippet
from .graph import RelationshipGraph, connected
from .providers import ChatProvider, Chunker, Embedder, ProviderError, chunk_phrases

logger = logging.getLogger(__name__)

MATCH_DEPTH = 30
MAX_SEED_RETRIES = 30

# Bare interrogatives and aggregate words carry no retrievable content.
STOP_PHRASES = {
    "how", "how many", "how much", "what", "which", "who", "whom", "whose",
    "when", "where", "why", "count", "number", "total", "average", "sum",
    "many", "much", "mean", "maximum", "minimum",
}


class DecompositionError(Exception):
    pass


@dataclass
class InformationNeed:
    phrase: str
    kind: str
    start: int
    end: int
    rank_key: float = 0.0  # max candidate similarity, filled after matching

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass
class Candidate:
    table_id: str
    col: int
    similarity: float


@dataclass
class CandidateSet:
    need: InformationNeed
    candidates: list[Candidate]


@dataclass
class NeedMapping:
    assignments: dict[int, tuple[str, int]]  # need index -> (table, col)
    similarities: dict[int, float]
    score: float
    connected: bool

    def tables(self) -> list[str]:
        return sorted({t for t, _ in self.assignments.values()})


@dataclass
class SubQuestion:
    text: str
    need_indices: list[int]
    table_id: str
    cluster_id: int
    order_index: int


def extract_information_needs(
    question: str, chunker: Optional[Chunker] = None
) -> list[InformationNeed]:
    """All content phrases of the question, ordered by span start.

    Bare interrogatives and aggregate words are removed; duplicate phrase
    texts keep their first occurrence. Zero surviving needs means the
    question cannot be decomposed.
    """
    if not question:
        raise DecompositionError("question must be non-empty")
    phrases = chunker.chunk(question) if chunker else chunk_phrases(question)
    needs: list[InformationNeed] = []
    seen: set[str] = set()
    for p in sorted(phrases, key=lambda p: p.start):
        normalized = " ".join(p.text.casefold().split())
        if normalized in STOP_PHRASES:
            continue
        if normalized in seen:
            continue
        seen.add(normalized)
        needs.append(InformationNeed(p.text, p.kind, p.start, p.end))
    if not needs:
        raise DecompositionError(f"undecomposable question: {question!r}")
    return needs


class ColumnIndex:
    """Embedding index over every column snippet in a corpus."""

    def __init__(self, corpus: Corpus, embedder: Embedder, v_cap: int = 50):
        self.embedder = embedder
        self.entries: list[tuple[str, int]] = []
        texts: list[str] = []
        for table in corpus:
            for c in range(table.n_cols):
                self.entries.append((table.id, c))
                texts.append(build_column_snippet(table, c, v_cap=v_cap).text)
        if not texts:
            raise ValueError("corpus has no columns to index")
        self.matrix = embedder.embed(texts)

    def search(self, text: str, depth: int = MATCH_DEPTH) -> list[Candidate]:
        query = self.embedder.embed([text])[0]
        sims = self.matrix @ query
        order = sorted(
            range(len(self.entries)),
            key=lambda k: (-sims[k], self.entries[k][0], self.entries[k][1]),
        )
        return [
            Candidate(self.entries[k][0], self.entries[k][1], float(sims[k]))
            for k in order[:depth]
        ]


def match_columns(
    need: InformationNeed, index: ColumnIndex, depth: int = MATCH_DEPTH
) -> CandidateSet:
    """Exact top-`depth` column snippets by embedding similarity."""
    candidates = index.search(need.phrase, depth)
    need.rank_key = candidates[0].similarity if candidates else 0.0
    return CandidateSet(need, candidates)


def context_relevance(mapping: NeedMapping, graph: RelationshipGraph) -> float:
    """Sum of assignment similarities, zeroed when tables are not connected."""
    if not mapping.assignments:
        return 0.0
    clusters = {
        graph.cluster_id(tid) for tid, _ in mapping.assignments.values()
    }
    if not connected(graph, clusters):
        return 0.0
    return sum(mapping.similarities.values())


def _sorted_candidates(cands: list[Candidate]) -> list[Candidate]:
    return sorted(cands, key=lambda c: (-c.similarity, c.table_id, c.col))


def disambiguate(
    candidate_sets: list[CandidateSet],
    graph: RelationshipGraph,
    max_seed_retries: int = MAX_SEED_RETRIES,
) -> NeedMapping:
    """Greedy need-to-column assignment constrained by graph connectivity.

    Needs are ranked by best candidate similarity; the top need seeds the
    mapping and the rest greedily take their best candidate whose cluster
    stays connected (induced subgraph) with the clusters chosen so far.
    When some need has no connected candidate the seed advances to its
    next-best candidate. If every seed fails, the per-need best-similarity
    mapping is returned with its true (usually zero) relevance score and
    the connected flag cleared.
    """
    if not candidate_sets:
        raise DecompositionError("no candidate sets to disambiguate")
    for cs in candidate_sets:
        if not cs.candidates:
            raise DecompositionError(
                f"need {cs.need.phrase!r} has no candidates"
            )

    order = sorted(
        range(len(candidate_sets)),
        key=lambda i: (
            -max(c.similarity for c in candidate_sets[i].candidates),
            candidate_sets[i].need.start,
        ),
    )
    ranked = [
        (i, _sorted_candidates(candidate_sets[i].candidates)) for i in order
    ]

    seed_index, seed_candidates = ranked[0]
    for seed in seed_candidates[:max_seed_retries]:
        assignments = {seed_index: (seed.table_id, seed.col)}
        similarities = {seed_index: seed.similarity}
        clusters = {graph.cluster_id(seed.table_id)}
        feasible = True
        for need_idx, cands in ranked[1:]:
            chosen = None
            for cand in cands:
                cid = graph.cluster_id(cand.table_id)
                if connected(graph, clusters | {cid}):
                    chosen = cand
                    break
            if chosen is None:
                feasible = False
                break
            assignments[need_idx] = (chosen.table_id, chosen.col)
            similarities[need_idx] = chosen.similarity
            clusters.add(graph.cluster_id(chosen.table_id))
        if feasible:
            mapping = NeedMapping(assignments, similarities, 0.0, True)
            mapping.score = context_relevance(mapping, graph)
            return mapping

    # Seed exhausted: best-similarity-only fallback, flagged disconnected.
    assignments = {}
    similarities = {}
    for i, cs in enumerate(candidate_sets):
        best = _sorted_candidates(cs.candidates)[0]
        assignments[i] = (best.table_id, best.col)
        similarities[i] = best.similarity
    mapping = NeedMapping(assignments, similarities, 0.0, False)
    mapping.score = context_relevance(mapping, graph)
    return mapping


def _group_needs_by_table(
    candidate_sets: list[CandidateSet], mapping: NeedMapping
) -> list[tuple[str, list[int]]]:
    groups: dict[str, list[int]] = {}
    for need_idx, (table_id, _) in mapping.assignments.items():
        groups.setdefault(table_id, []).append(need_idx)
    scored = []
    for table_id, indices in groups.items():
        total = sum(mapping.similarities[i] for i in indices)
        scored.append((total, table_id, sorted(indices)))
    scored.sort(key=lambda item: (-item[0], item[1]))
    return [(table_id, indices) for _, table_id, indices in scored]


def build_decomposition_prompt(
    question: str, groups: list[list[str]]
) -> str:
    return prompts.QUESTION_DECOMPOSITION.format(
        question=question, groups=json.dumps(groups)
    )


def _template_subquestion(
    corpus: Corpus, table_id: str, cols: list[int], phrases: list[str]
) -> str:
    table = corpus[table_id]
    headers = []
    for c in cols:
        h = table.headers[c]
        if h not in headers:
            headers.append(h)
    return f"Which {', '.join(headers)} satisfy {', '.join(phrases)}?"


def generate_subquestions(
    question: str,
    candidate_sets: list[CandidateSet],
    mapping: NeedMapping,
    graph: RelationshipGraph,
    corpus: Corpus,
    chat: Optional[ChatProvider] = None,
) -> list[SubQuestion]:
    """One sub-question per distinct assigned table, highest-weight first.

    The chat provider sees the question plus the table-aligned phrase
    groups and must return {"Sub-questions": [...]} with one entry per
    group; a wrong count earns one re-prompt. Without a provider (or after
    two bad responses) a deterministic template phrases each group.
    """
    if not mapping.assignments:
        raise DecompositionError("mapping is empty")
    grouped = _group_needs_by_table(candidate_sets, mapping)
    phrase_groups = [
        [candidate_sets[i].need.phrase for i in indices]
        for _, indices in grouped
    ]

    texts: Optional[list[str]] = None
    if chat is not None:
        prompt = build_decomposition_prompt(question, phrase_groups)
        for attempt in range(2):
            try:
                raw = chat.complete(
                    prompt
                    if attempt == 0
                    else prompt
                    + f"\nYour previous answer did not contain exactly "
                    f"{len(phrase_groups)} sub-questions. Try again."
                )
                data = json.loads(re.search(r"\{.*\}", raw, re.DOTALL).group(0))
                subqs = data.get("Sub-questions")
                if isinstance(subqs, list) and len(subqs) == len(phrase_groups):
                    texts = [str(s) for s in subqs]
                    break
            except (ProviderError, AttributeError, ValueError, json.JSONDecodeError) as exc:
                logger.debug("decomposition prompt failed: %s", exc)
                break
    if texts is None:
        texts = []
        for (table_id, indices), phrases in zip(grouped, phrase_groups):
            cols = [mapping.assignments[i][1] for i in indices]
            texts.append(_template_subquestion(corpus, table_id, cols, phrases))

    out = []
    for order, ((table_id, indices), text) in enumerate(zip(grouped, texts)):
        out.append(
            SubQuestion(
                text=text,
                need_indices=indices,
                table_id=table_id,
                cluster_id=graph.cluster_id(table_id),
                order_index=order,
            )
        )
    return out


@dataclass
class Decomposition:
    """Full trace of one decomposition run."""

    question: str
    needs: list[InformationNeed]
    candidate_sets: list[CandidateSet]
    mapping: NeedMapping
    subquestions: list[SubQuestion]

    def to_json(self) -> dict:
        return {
            "question": self.question,
            "needs": [
                {
                    "phrase": n.phrase,
                    "kind": n.kind,
                    "span": [n.start, n.end],
                    "rank_key": n.rank_key,
                }
                for n in self.needs
            ],
            "mapping": {
                "assignments": {
                    self.needs[i].phrase: {"table": t, "column": c}
                    for i, (t, c) in sorted(self.mapping.assignments.items())
                },
                "score": self.mapping.score,
                "connected": self.mapping.connected,
            },
            "subquestions": [
                {
                    "text": sq.text,
                    "table": sq.table_id,
                    "cluster": sq.cluster_id,
                    "needs": [self.needs[i].phrase for i in sq.need_indices],
                }
                for sq in self.subquestions
            ],
        }


def decompose(
    question: str,
    index: ColumnIndex,
    graph: RelationshipGraph,
    corpus: Corpus,
    chat: Optional[ChatProvider] = None,
    chunker: Optional[Chunker] = None,
    depth: int = MATCH_DEPTH,
) -> Decomposition:
    """Run the full decomposition pipeline for one question."""
    needs = extract_information_needs(question, chunker)
    candidate_sets = [match_columns(n, index, depth) for n in needs]
    mapping = disambiguate(candidate_sets, graph)
    subquestions = generate_subquestions(
        question, candidate_sets, mapping, graph, corpus, chat
    )
    return Decomposition(question, needs, candidate_sets, mapping, subquestions)
