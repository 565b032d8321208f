"""Coverage-aware multi-table retrieval.

Pipeline per question: coarse cluster retrieval over metadata documents,
individual table scoring with a trainable linear coverage scorer,
connected-group construction over the relationship graph, gap detection
with one residual-sub-question refinement round, and top-k selection where
each table inherits the best score among groups containing it.
"""

from __future__ import annotations

import heapq
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import prompts
from .corpus import Corpus, Table, build_cluster_document, table_document
from .decomposer import NeedMapping, SubQuestion
from .graph import RelationshipGraph, connected
from .providers import ChatProvider, Embedder, ProviderError

logger = logging.getLogger(__name__)

COARSE_DEPTH = 20
CANDIDATES_PER_SUBQUESTION = 10  # C
COMBINATION_PROBES = 1000  # B
GROUPS_SCORED = 20  # G
GAP_THRESHOLD = 0.5

FEATURE_NAMES = [
    "token_interaction",     # mean over question content words of best cosine
    "question_coverage",     # fraction of question content words found in doc
    "metadata_coverage",     # fraction of distinct doc tokens found in question
    "whole_text_cosine",     # document-level embedding similarity
    "shared_numbers_log",    # log(1 + shared numeric literals)
]

_WORD_RE = re.compile(r"[A-Za-z][A-Za-z'-]*|\d+(?:\.\d+)?")
_NUM_RE = re.compile(r"\d+(?:\.\d+)?")

_STOPWORDS = {
    "a", "an", "the", "of", "in", "on", "at", "by", "for", "with", "from",
    "to", "into", "among", "between", "and", "or", "but", "is", "are",
    "was", "were", "be", "been", "do", "does", "did", "have", "has", "had",
    "how", "many", "much", "what", "which", "who", "whose", "when", "where",
    "why", "that", "this", "these", "those", "there", "their", "its", "it",
    "they", "them", "than", "not", "no", "all", "any", "each", "every",
}


def content_words(text: str) -> list[str]:
    words = [w.casefold() for w in _WORD_RE.findall(text)]
    return [w for w in words if w not in _STOPWORDS]


def coverage_features(
    question: str, document: str, embedder: Embedder
) -> np.ndarray:
    """Fixed 5-feature interaction vector between a question and a document."""
    q_words = content_words(question)
    doc_tokens = [w.casefold() for w in _WORD_RE.findall(document)]
    doc_set = set(doc_tokens)
    features = np.zeros(len(FEATURE_NAMES), dtype=np.float64)
    if q_words and doc_tokens:
        q_emb = embedder.embed(q_words)
        distinct_doc = sorted(doc_set)
        d_emb = embedder.embed(distinct_doc)
        sim = q_emb @ d_emb.T
        features[0] = float(np.clip(np.mean(np.max(sim, axis=1)), 0.0, 1.0))
        features[1] = sum(1 for w in q_words if w in doc_set) / len(q_words)
    if doc_set:
        q_all = {w.casefold() for w in _WORD_RE.findall(question)}
        features[2] = len(doc_set & q_all) / len(doc_set)
    if document.strip() and question.strip():
        qv = embedder.embed([question])[0]
        dv = embedder.embed([document])[0]
        features[3] = float(np.clip(np.dot(qv, dv), 0.0, 1.0))
    q_nums = set(_NUM_RE.findall(question))
    d_nums = set(_NUM_RE.findall(document))
    features[4] = float(np.log1p(len(q_nums & d_nums)))
    return features


@dataclass
class CoverageScorer:
    """Linear scorer over the fixed coverage feature set."""

    weights: np.ndarray = field(
        default_factory=lambda: np.full(
            len(FEATURE_NAMES), 1.0 / len(FEATURE_NAMES)
        )
    )
    feature_names: list[str] = field(default_factory=lambda: list(FEATURE_NAMES))
    training_log: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.weights) != len(self.feature_names):
            raise ValueError("weight/feature arity mismatch")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    def score_features(self, features: np.ndarray) -> float:
        return float(np.dot(self.weights, features))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "feature_names": self.feature_names,
                    "weights": [float(w) for w in self.weights],
                },
                fh,
                indent=2,
            )
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "CoverageScorer":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(
            weights=np.asarray(data["weights"], dtype=np.float64),
            feature_names=list(data["feature_names"]),
        )


def score_coverage(
    scorer: CoverageScorer, question: str, document: str, embedder: Embedder
) -> float:
    return scorer.score_features(coverage_features(question, document, embedder))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingTriple:
    question: str
    positive: str  # document of the answer-bearing table
    negative: str  # same document with the answer column removed


def make_training_triples(
    records: Sequence[tuple[str, Table, int]]
) -> list[TrainingTriple]:
    """Build (question, T+, T-) triples from single-table QA records.

    The hard negative is the gold table's document with the answer-bearing
    column's header deleted.
    """
    triples = []
    for idx, (question, table, answer_col) in enumerate(records):
        if not 0 <= answer_col < table.n_cols:
            raise ValueError(
                f"record {idx}: answer column {answer_col} out of range "
                f"for table {table.id}"
            )
        positive = table_document(table)
        reduced = Table(
            id=table.id,
            title=table.title,
            headers=[h for i, h in enumerate(table.headers) if i != answer_col],
            columns=[c for i, c in enumerate(table.columns) if i != answer_col],
        )
        triples.append(TrainingTriple(question, positive, table_document(reduced)))
    return triples


def hinge_loss(
    scorer: CoverageScorer, pos: np.ndarray, neg: np.ndarray
) -> float:
    margins = 1.0 - (pos - neg) @ scorer.weights
    return float(np.sum(np.maximum(margins, 0.0)))


def train_scorer(
    triples: Sequence[TrainingTriple],
    embedder: Embedder,
    epochs: int = 200,
    step: float = 0.05,
) -> CoverageScorer:
    """Full-batch subgradient descent on the pairwise hinge loss.

    Loss per triple is max(0, 1 - s(q, T+) + s(q, T-)). The step is halved
    within an epoch whenever the candidate update would increase the loss,
    so the logged per-epoch loss is non-increasing; with zero loss the
    weights are left untouched.
    """
    if not triples:
        raise ValueError("need at least one training triple")
    if step <= 0:
        raise ValueError("step size must be positive")
    pos = np.vstack(
        [coverage_features(t.question, t.positive, embedder) for t in triples]
    )
    neg = np.vstack(
        [coverage_features(t.question, t.negative, embedder) for t in triples]
    )
    diff = pos - neg

    scorer = CoverageScorer()
    weights = scorer.weights.copy()

    def loss_at(w: np.ndarray) -> float:
        margins = 1.0 - diff @ w
        return float(np.sum(np.maximum(margins, 0.0)))

    current = loss_at(weights)
    log = [current]
    for _ in range(epochs):
        margins = 1.0 - diff @ weights
        violating = margins > 0.0
        if not np.any(violating):
            log.append(current)
            continue
        grad = -np.sum(diff[violating], axis=0)
        if not np.all(np.isfinite(grad)):
            raise ValueError(
                f"non-finite subgradient during training: {grad}"
            )
        trial_step = step
        for _ in range(30):
            candidate = weights - trial_step * grad
            candidate_loss = loss_at(candidate)
            if candidate_loss <= current:
                weights = candidate
                current = candidate_loss
                break
            trial_step /= 2.0
        if not np.isfinite(current):
            raise ValueError(f"non-finite loss during training: {current}")
        log.append(current)

    trained = CoverageScorer(weights=weights)
    trained.training_log = log
    return trained


def pairwise_accuracy(
    scorer: CoverageScorer, triples: Sequence[TrainingTriple], embedder: Embedder
) -> float:
    hits = 0
    for t in triples:
        sp = score_coverage(scorer, t.question, t.positive, embedder)
        sn = score_coverage(scorer, t.question, t.negative, embedder)
        if sp > sn:
            hits += 1
    return hits / len(triples)


# ---------------------------------------------------------------------------
# Coarse retrieval
# ---------------------------------------------------------------------------


class ClusterIndex:
    """Embedding index over one metadata document per graph cluster."""

    def __init__(self, corpus: Corpus, graph: RelationshipGraph, embedder: Embedder):
        self.embedder = embedder
        self.documents: list[str] = []
        for members in graph.clusters:
            tables = [corpus[tid] for tid in members]
            self.documents.append(build_cluster_document(tables))
        if not self.documents:
            raise ValueError("graph has no clusters to index")
        self.matrix = embedder.embed(self.documents)

    def search(self, text: str, depth: int = COARSE_DEPTH) -> list[tuple[int, float]]:
        query = self.embedder.embed([text])[0]
        sims = self.matrix @ query
        order = sorted(range(len(self.documents)), key=lambda k: (-sims[k], k))
        return [(k, float(sims[k])) for k in order[:depth]]


def coarse_retrieve(
    subquestion: str, index: ClusterIndex, depth: int = COARSE_DEPTH
) -> list[tuple[int, float]]:
    """Top-`depth` clusters for a sub-question by document similarity."""
    if not subquestion:
        raise ValueError("subquestion must be non-empty")
    return index.search(subquestion, depth)


# ---------------------------------------------------------------------------
# Group construction
# ---------------------------------------------------------------------------


@dataclass
class TableGroup:
    members: dict[int, str]  # sub-question order index -> table id
    cluster_ids: frozenset[int]
    connected: bool
    score: float

    def table_ids(self) -> list[str]:
        return sorted(set(self.members.values()))


@dataclass
class RetrievalResult:
    ranked: list[tuple[str, float]]
    groups: list[TableGroup]
    residual: Optional[str] = None

    def table_ids(self) -> list[str]:
        return [tid for tid, _ in self.ranked]

    def to_json(self) -> dict:
        return {
            "ranked": [
                {"table": tid, "score": score} for tid, score in self.ranked
            ],
            "groups": [
                {
                    "members": {str(k): v for k, v in g.members.items()},
                    "clusters": sorted(g.cluster_ids),
                    "connected": g.connected,
                    "score": g.score,
                }
                for g in self.groups
            ],
            "residual_subquestion": self.residual,
        }


@dataclass
class GroupCaps:
    candidates: int = CANDIDATES_PER_SUBQUESTION
    probes: int = COMBINATION_PROBES
    scored: int = GROUPS_SCORED


def _group_document(corpus: Corpus, table_ids: Sequence[str]) -> str:
    unique = sorted(set(table_ids))
    return " ".join(table_document(corpus[tid]) for tid in unique)


def build_groups(
    subquestions: Sequence[SubQuestion],
    candidates: Sequence[Sequence[tuple[str, float]]],
    graph: RelationshipGraph,
    scorer: CoverageScorer,
    question: str,
    corpus: Corpus,
    embedder: Embedder,
    caps: Optional[GroupCaps] = None,
) -> list[TableGroup]:
    """Connected one-table-per-sub-question combinations, best first.

    Combinations are enumerated in descending order of summed individual
    scores (best-first over the candidate product) for at most `probes`
    draws; combinations whose cluster sets are connected are kept, and the
    first `scored` of them get a coverage score over their concatenated
    member documents.
    """
    caps = caps or GroupCaps()
    if not subquestions:
        raise ValueError("no sub-questions")
    if len(candidates) != len(subquestions):
        raise ValueError("candidate list arity mismatch")
    pools = []
    for cands in candidates:
        if not cands:
            raise ValueError("each sub-question needs at least one candidate")
        pool = sorted(cands, key=lambda tc: (-tc[1], tc[0]))[: caps.candidates]
        pools.append(pool)

    def total(idx: tuple[int, ...]) -> float:
        return sum(pools[s][i][1] for s, i in enumerate(idx))

    start = tuple(0 for _ in pools)
    heap = [(-total(start), start)]
    seen = {start}
    collected: list[tuple[tuple[int, ...], float]] = []
    probes = 0
    while heap and probes < caps.probes and len(collected) < caps.scored:
        neg_total, idx = heapq.heappop(heap)
        probes += 1
        table_ids = [pools[s][i][0] for s, i in enumerate(idx)]
        clusters = frozenset(graph.cluster_id(tid) for tid in table_ids)
        if connected(graph, clusters):
            collected.append((idx, -neg_total))
        for s in range(len(pools)):
            if idx[s] + 1 < len(pools[s]):
                child = idx[:s] + (idx[s] + 1,) + idx[s + 1 :]
                if child not in seen:
                    seen.add(child)
                    heapq.heappush(heap, (-total(child), child))

    groups = []
    for idx, _ in collected:
        members = {
            sq.order_index: pools[s][i][0]
            for s, (sq, i) in enumerate(zip(subquestions, idx))
        }
        table_ids = list(members.values())
        clusters = frozenset(graph.cluster_id(tid) for tid in table_ids)
        doc = _group_document(corpus, table_ids)
        score = score_coverage(scorer, question, doc, embedder)
        groups.append(TableGroup(members, clusters, True, score))
    groups.sort(key=lambda g: (-g.score, tuple(sorted(g.members.items()))))
    return groups


# ---------------------------------------------------------------------------
# Gap detection and refinement
# ---------------------------------------------------------------------------


def _provided_tables_text(corpus: Corpus, table_ids: Sequence[str]) -> str:
    lines = []
    for tid in sorted(set(table_ids)):
        t = corpus[tid]
        lines.append(f"{t.title} ({', '.join(t.headers)})")
    return "; ".join(lines)


def _fallback_residual(
    mapping: Optional[NeedMapping],
    needs_phrases: Optional[dict[int, str]],
    corpus: Corpus,
    group_tables: Sequence[str],
) -> Optional[str]:
    if mapping is None or needs_phrases is None:
        return None
    present = set(group_tables)
    missing = [
        needs_phrases[i]
        for i, (tid, _) in sorted(mapping.assignments.items())
        if tid not in present
    ]
    if not missing:
        return None
    return ", ".join(missing)


def detect_gap_and_refine(
    question: str,
    subquestions: Sequence[SubQuestion],
    groups: list[TableGroup],
    graph: RelationshipGraph,
    scorer: CoverageScorer,
    corpus: Corpus,
    cluster_index: ClusterIndex,
    embedder: Embedder,
    chat: Optional[ChatProvider] = None,
    gap_threshold: float = GAP_THRESHOLD,
    mapping: Optional[NeedMapping] = None,
    needs_phrases: Optional[dict[int, str]] = None,
    per_sq_candidates: Optional[Sequence[Sequence[tuple[str, float]]]] = None,
    depth: int = COARSE_DEPTH,
) -> tuple[list[TableGroup], Optional[str]]:
    """One refinement round when the best group leaves a coverage gap.

    A residual sub-question comes from the chat provider (answer "None"
    means no gap) or, on any provider failure, from the phrases of needs
    whose assigned tables are missing from the top group. Its candidate
    tables are coarse-retrieved and the one that keeps the group connected
    while maximizing the joint coverage score is added.
    """
    if groups and groups[0].score >= gap_threshold:
        return groups, None

    if groups:
        base_members = dict(groups[0].members)
    elif per_sq_candidates:
        base_members = {
            sq.order_index: sorted(cands, key=lambda tc: (-tc[1], tc[0]))[0][0]
            for sq, cands in zip(subquestions, per_sq_candidates)
        }
    else:
        return groups, None
    base_tables = sorted(set(base_members.values()))

    residual: Optional[str] = None
    if chat is not None:
        prompt = prompts.RESIDUAL_SUBQUESTION.format(
            question=question,
            tables=_provided_tables_text(corpus, base_tables),
        )
        try:
            raw = chat.complete(prompt)
            match = re.search(r"\{.*\}", raw, re.DOTALL)
            data = json.loads(match.group(0)) if match else {}
            value = data.get("Residual Sub-question")
            if value is None or (isinstance(value, str) and value.strip().casefold() == "none"):
                residual = None
            else:
                residual = str(value)
        except (ProviderError, ValueError, json.JSONDecodeError) as exc:
            logger.debug("residual prompt failed, using fallback: %s", exc)
            residual = _fallback_residual(mapping, needs_phrases, corpus, base_tables)
    else:
        residual = _fallback_residual(mapping, needs_phrases, corpus, base_tables)

    if residual is None:
        return groups, None

    base_clusters = frozenset(graph.cluster_id(t) for t in base_tables)
    best_add: Optional[tuple[float, str]] = None
    for cluster_id, _ in coarse_retrieve(residual, cluster_index, depth):
        for tid in graph.cluster_members(cluster_id):
            if tid in base_tables:
                continue
            new_clusters = base_clusters | {graph.cluster_id(tid)}
            if not connected(graph, new_clusters):
                continue
            doc = _group_document(corpus, base_tables + [tid])
            joint = score_coverage(scorer, question, doc, embedder)
            if (
                best_add is None
                or joint > best_add[0]
                or (joint == best_add[0] and tid < best_add[1])
            ):
                best_add = (joint, tid)

    if best_add is None:
        return groups, residual

    joint, tid = best_add
    members = dict(base_members)
    members[len(subquestions)] = tid  # residual slot follows the sub-questions
    clusters = frozenset(graph.cluster_id(t) for t in members.values())
    refined = TableGroup(members, clusters, connected(graph, clusters), joint)
    updated = [refined] + [g for g in groups if g.members != base_members]
    updated.sort(key=lambda g: (-g.score, tuple(sorted(g.members.items()))))
    return updated, residual


def select_topk(groups: Sequence[TableGroup], k: int) -> list[tuple[str, float]]:
    """Rank tables by the best-scoring group containing them."""
    if k < 1:
        raise ValueError("k must be >= 1")
    best: dict[str, float] = {}
    for g in groups:
        for tid in g.table_ids():
            if tid not in best or g.score > best[tid]:
                best[tid] = g.score
    ranked = sorted(best.items(), key=lambda item: (-item[1], item[0]))
    return ranked[:k]


def retrieve(
    question: str,
    subquestions: Sequence[SubQuestion],
    corpus: Corpus,
    graph: RelationshipGraph,
    scorer: CoverageScorer,
    embedder: Embedder,
    cluster_index: Optional[ClusterIndex] = None,
    chat: Optional[ChatProvider] = None,
    k: int = 5,
    depth: int = COARSE_DEPTH,
    caps: Optional[GroupCaps] = None,
    gap_threshold: float = GAP_THRESHOLD,
    mapping: Optional[NeedMapping] = None,
    needs_phrases: Optional[dict[int, str]] = None,
) -> RetrievalResult:
    """Full retrieval pass; pads the ranking with individually scored
    candidates when the groups cover fewer than k tables."""
    if not subquestions:
        raise ValueError("need at least one sub-question")
    cluster_index = cluster_index or ClusterIndex(corpus, graph, embedder)

    per_sq_candidates: list[list[tuple[str, float]]] = []
    caps = caps or GroupCaps()
    for sq in subquestions:
        cands: list[tuple[str, float]] = []
        for cluster_id, _ in coarse_retrieve(sq.text, cluster_index, depth):
            for tid in graph.cluster_members(cluster_id):
                doc = table_document(corpus[tid])
                cands.append(
                    (tid, score_coverage(scorer, question, doc, embedder))
                )
        cands.sort(key=lambda tc: (-tc[1], tc[0]))
        per_sq_candidates.append(cands[: caps.candidates])

    groups = build_groups(
        subquestions, per_sq_candidates, graph, scorer, question, corpus,
        embedder, caps,
    )
    groups, residual = detect_gap_and_refine(
        question, subquestions, groups, graph, scorer, corpus, cluster_index,
        embedder, chat, gap_threshold, mapping, needs_phrases,
        per_sq_candidates, depth,
    )

    ranked = select_topk(groups, k) if groups else []
    if len(ranked) < k:
        chosen = {tid for tid, _ in ranked}
        spare = {}
        for cands in per_sq_candidates:
            for tid, score in cands:
                if tid not in chosen and (tid not in spare or score > spare[tid]):
                    spare[tid] = score
        for tid, score in sorted(spare.items(), key=lambda it: (-it[1], it[0])):
            if len(ranked) >= k:
                break
            ranked.append((tid, score))
    return RetrievalResult(ranked=ranked, groups=groups, residual=residual)
