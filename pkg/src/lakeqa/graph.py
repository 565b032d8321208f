"""Table relationship graph: unionable clusters linked by joinability edges.

Nodes are clusters of unionable tables (single-linkage transitive closure
over pairwise unionability at threshold tau_u). An edge connects two
clusters when any cross-cluster table pair has a column pair whose
joinability reaches tau_j; every qualifying column pair is kept as
evidence.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .corpus import Corpus, Table, canonical_value, column_value_text
from .providers import Embedder

DISTINCT_CAP = 10_000  # containment sets are capped per column
VALUE_SNIPPET_CAP = 50


@dataclass(frozen=True)
class Thresholds:
    tau_u: float = 0.9
    tau_j: float = 0.5

    def __post_init__(self):
        for name, value in (("tau_u", self.tau_u), ("tau_j", self.tau_j)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass(frozen=True)
class EvidencePair:
    table_a: str
    col_a: int
    table_b: str
    col_b: int
    score: float

    def to_json(self) -> list:
        return [self.table_a, self.col_a, self.table_b, self.col_b, self.score]

    @classmethod
    def from_json(cls, data: list) -> "EvidencePair":
        return cls(data[0], data[1], data[2], data[3], data[4])


# ---------------------------------------------------------------------------
# Pairwise scores
# ---------------------------------------------------------------------------


def header_similarity_matrix(
    ti: Table, tj: Table, embedder: Embedder
) -> np.ndarray:
    ei = embedder.embed(ti.headers)
    ej = embedder.embed(tj.headers)
    return ei @ ej.T


def unionability(ti: Table, tj: Table, embedder: Embedder) -> float:
    """Header alignment score in [0, 1].

    Best one-to-one alignment of header embeddings (maximum total cosine),
    normalized by the larger header count. Identical header lists score
    1.0; the score is exactly symmetric.
    """
    if not ti.headers or not tj.headers:
        raise ValueError("unionability requires at least one header per table")
    sim = header_similarity_matrix(ti, tj, embedder)
    rows, cols = linear_sum_assignment(sim, maximize=True)
    # fsum keeps the total independent of summation order, so that
    # unionability(a, b) == unionability(b, a) bit-for-bit.
    total = math.fsum(float(sim[r, c]) for r, c in zip(rows, cols))
    score = total / max(len(ti.headers), len(tj.headers))
    return min(1.0, max(0.0, score))


def _column_kind(column: list) -> str:
    saw_value = False
    for v in column:
        if v is None:
            continue
        saw_value = True
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            return "text"
    return "numeric" if saw_value else "text"


@dataclass
class ColumnProfile:
    """Precomputed join evidence for one column."""

    table_id: str
    col: int
    kind: str
    distinct: frozenset[str]
    value_text: str
    embedding: Optional[np.ndarray] = None

    @classmethod
    def from_table(
        cls, table: Table, col: int, embedder: Optional[Embedder] = None
    ) -> "ColumnProfile":
        values = frozenset(
            canonical_value(v).strip().casefold()
            for v in table.columns[col][:]
            if v is not None
        )
        if len(values) > DISTINCT_CAP:
            values = frozenset(sorted(values)[:DISTINCT_CAP])
        kind = _column_kind(table.columns[col])
        value_text = column_value_text(table, col, v_cap=VALUE_SNIPPET_CAP)
        emb = None
        if embedder is not None and kind == "text":
            emb = embedder.embed([value_text])[0]
        return cls(table.id, col, kind, values, value_text, emb)


def containment(a: frozenset[str], b: frozenset[str]) -> float:
    if not a or not b:
        return 0.0
    return len(a & b) / min(len(a), len(b))


def joinability(
    pa: ColumnProfile, pb: ColumnProfile, embedder: Embedder
) -> float:
    """Join evidence for a column pair in [0, 1].

    Textual pairs score max(value containment, cosine of value snippets);
    numeric pairs join on exact canonical equality only (containment);
    cross-type pairs score 0. Symmetric by construction.
    """
    if pa.kind != pb.kind:
        return 0.0
    cont = containment(pa.distinct, pb.distinct)
    if pa.kind == "numeric":
        return min(1.0, max(0.0, cont))
    ea = pa.embedding
    eb = pb.embedding
    if ea is None:
        ea = embedder.embed([pa.value_text])[0]
    if eb is None:
        eb = embedder.embed([pb.value_text])[0]
    semantic = float(np.dot(ea, eb))
    return min(1.0, max(0.0, max(cont, semantic)))


def joinability_of_columns(
    ta: Table, ca: int, tb: Table, cb: int, embedder: Embedder
) -> float:
    """Convenience wrapper building profiles on the fly."""
    return joinability(
        ColumnProfile.from_table(ta, ca),
        ColumnProfile.from_table(tb, cb),
        embedder,
    )


# ---------------------------------------------------------------------------
# Graph construction
# ---------------------------------------------------------------------------


class _UnionFind:
    def __init__(self, items: Sequence[str]):
        self.parent = {item: item for item in items}

    def find(self, x: str) -> str:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # deterministic root choice keeps cluster layout reproducible
            lo, hi = sorted((ra, rb))
            self.parent[hi] = lo


@dataclass
class RelationshipGraph:
    clusters: list[list[str]]
    cluster_of: dict[str, int]
    edges: dict[tuple[int, int], list[EvidencePair]]
    thresholds: Thresholds = field(default_factory=Thresholds)
    corpus_hash: str = ""

    @property
    def adjacency(self) -> dict[int, set[int]]:
        adj: dict[int, set[int]] = {i: set() for i in range(len(self.clusters))}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj

    def cluster_id(self, table_id: str) -> int:
        if table_id not in self.cluster_of:
            raise KeyError(f"unknown table id {table_id!r}")
        return self.cluster_of[table_id]

    def cluster_members(self, cluster_id: int) -> list[str]:
        return list(self.clusters[cluster_id])

    def n_edges(self) -> int:
        return len(self.edges)

    def to_json(self) -> dict:
        return {
            "format_version": 1,
            "thresholds": {
                "tau_u": self.thresholds.tau_u,
                "tau_j": self.thresholds.tau_j,
            },
            "corpus_hash": self.corpus_hash,
            "clusters": [list(c) for c in self.clusters],
            "edges": [
                {
                    "a": a,
                    "b": b,
                    "evidence": [ev.to_json() for ev in evidence],
                }
                for (a, b), evidence in sorted(self.edges.items())
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "RelationshipGraph":
        clusters = [list(c) for c in data["clusters"]]
        cluster_of = {
            tid: idx for idx, members in enumerate(clusters) for tid in members
        }
        edges = {
            (e["a"], e["b"]): [EvidencePair.from_json(ev) for ev in e["evidence"]]
            for e in data["edges"]
        }
        th = data.get("thresholds", {})
        return cls(
            clusters=clusters,
            cluster_of=cluster_of,
            edges=edges,
            thresholds=Thresholds(
                th.get("tau_u", 0.9), th.get("tau_j", 0.5)
            ),
            corpus_hash=data.get("corpus_hash", ""),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "RelationshipGraph":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def build_graph(
    corpus: Corpus,
    thresholds: Optional[Thresholds] = None,
    embedder: Optional[Embedder] = None,
) -> RelationshipGraph:
    """Construct the relationship graph over an entire corpus.

    Equivalent to scoring every table pair (unionability) and every
    cross-cluster column pair (joinability) directly; a cosine prescreen
    with a 1e-6 safety margin skips column pairs that cannot reach tau_j,
    and containment is only computed for pairs sharing a value.
    """
    from .providers import make_embedder

    thresholds = thresholds or Thresholds()
    embedder = embedder or make_embedder()
    tables = list(corpus)
    if not tables:
        raise ValueError("corpus must be non-empty")
    ids = [t.id for t in tables]

    uf = _UnionFind(ids)
    for i in range(len(tables)):
        for j in range(i + 1, len(tables)):
            if unionability(tables[i], tables[j], embedder) >= thresholds.tau_u:
                uf.union(ids[i], ids[j])

    components: dict[str, list[str]] = {}
    for tid in ids:
        components.setdefault(uf.find(tid), []).append(tid)
    clusters = sorted(
        (sorted(members) for members in components.values()),
        key=lambda members: members[0],
    )
    cluster_of = {
        tid: idx for idx, members in enumerate(clusters) for tid in members
    }

    profiles: list[ColumnProfile] = []
    for t in tables:
        for c in range(t.n_cols):
            profiles.append(ColumnProfile.from_table(t, c, embedder))

    text_idx = [k for k, p in enumerate(profiles) if p.kind == "text"]
    if text_idx:
        emb_matrix = np.vstack([profiles[k].embedding for k in text_idx])
        cos_matrix = emb_matrix @ emb_matrix.T
        text_pos = {k: pos for pos, k in enumerate(text_idx)}
    else:
        cos_matrix = None
        text_pos = {}

    value_owners: dict[str, list[int]] = {}
    for k, p in enumerate(profiles):
        for v in p.distinct:
            value_owners.setdefault(v, []).append(k)
    shares_value: set[tuple[int, int]] = set()
    for owners in value_owners.values():
        if len(owners) < 2:
            continue
        for x in range(len(owners)):
            for y in range(x + 1, len(owners)):
                shares_value.add((owners[x], owners[y]))

    prescreen = thresholds.tau_j - 1e-6
    edges: dict[tuple[int, int], list[EvidencePair]] = {}
    table_of_profile = [cluster_of[p.table_id] for p in profiles]
    for a in range(len(profiles)):
        pa = profiles[a]
        for b in range(a + 1, len(profiles)):
            pb = profiles[b]
            if pa.table_id == pb.table_id:
                continue
            ca, cb = table_of_profile[a], table_of_profile[b]
            if ca == cb:
                continue
            if pa.kind != pb.kind:
                continue
            candidate = thresholds.tau_j <= 0.0 or (a, b) in shares_value
            if not candidate and pa.kind == "text" and cos_matrix is not None:
                if cos_matrix[text_pos[a], text_pos[b]] >= prescreen:
                    candidate = True
            if not candidate:
                continue
            score = joinability(pa, pb, embedder)
            if score >= thresholds.tau_j:
                key = (min(ca, cb), max(ca, cb))
                if pa.table_id <= pb.table_id:
                    ev = EvidencePair(pa.table_id, pa.col, pb.table_id, pb.col, score)
                else:
                    ev = EvidencePair(pb.table_id, pb.col, pa.table_id, pa.col, score)
                edges.setdefault(key, []).append(ev)

    for key in edges:
        edges[key].sort(
            key=lambda e: (e.table_a, e.col_a, e.table_b, e.col_b)
        )

    return RelationshipGraph(
        clusters=clusters,
        cluster_of=cluster_of,
        edges=edges,
        thresholds=thresholds,
        corpus_hash=corpus.digest(),
    )


def connected(graph: RelationshipGraph, cluster_ids: set[int]) -> bool:
    """True iff the induced subgraph on exactly these clusters is connected.

    A single cluster (or the empty set) counts as connected; clusters
    outside the set never act as bridges.
    """
    for cid in cluster_ids:
        if not 0 <= cid < len(graph.clusters):
            raise KeyError(f"unknown cluster id {cid}")
    if len(cluster_ids) <= 1:
        return True
    wanted = set(cluster_ids)
    adj = graph.adjacency
    start = next(iter(wanted))
    seen = {start}
    frontier = [start]
    while frontier:
        current = frontier.pop()
        for neighbor in adj[current]:
            if neighbor in wanted and neighbor not in seen:
                seen.add(neighbor)
                frontier.append(neighbor)
    return seen == wanted


def graph_stats(graph: RelationshipGraph) -> dict:
    evidence_count = sum(len(ev) for ev in graph.edges.values())
    sizes = sorted((len(c) for c in graph.clusters), reverse=True)
    return {
        "tables": sum(sizes),
        "clusters": len(graph.clusters),
        "edges": len(graph.edges),
        "evidence_pairs": evidence_count,
        "largest_cluster": sizes[0] if sizes else 0,
        "thresholds": {
            "tau_u": graph.thresholds.tau_u,
            "tau_j": graph.thresholds.tau_j,
        },
    }
