"""Recover masked titles and headers before graph construction.

Columns are first partitioned into semantically coherent groups so the
chat provider sees a focused sub-context (group headers plus sampled rows)
instead of the whole table. Inference never touches cell data or unmasked
metadata; when the provider keeps failing, masks are kept and a warning is
logged so the pipeline can proceed.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import prompts
from .corpus import MASK, Table, build_column_snippet, write_cell
from .providers import ChatProvider, Embedder, ProviderError, cosine

logger = logging.getLogger(__name__)

GROUP_MERGE_THRESHOLD = 0.6
SAMPLE_ROWS = 10


@dataclass
class ColumnGroupPartition:
    """Disjoint, exhaustive grouping of a table's column indices."""

    groups: list[list[int]]
    labels: Optional[list[str]] = None

    def __post_init__(self):
        flat = [c for group in self.groups for c in group]
        if len(flat) != len(set(flat)):
            raise ValueError("groups overlap")
        if any(not group for group in self.groups):
            raise ValueError("empty group")

    def group_of(self, col: int) -> int:
        for gi, group in enumerate(self.groups):
            if col in group:
                return gi
        raise KeyError(f"column {col} not in partition")


def discover_column_groups(table: Table, embedder: Embedder) -> ColumnGroupPartition:
    """Greedy agglomerative grouping over column-snippet embeddings.

    Starts with one group per column and merges the closest pair under
    average-linkage cosine while the linkage stays at or above 0.6. Ties
    break toward the lowest column index so runs are reproducible.
    """
    if table.n_cols < 1:
        raise ValueError("table has no columns")
    snippets = [
        build_column_snippet(table, c).text for c in range(table.n_cols)
    ]
    emb = embedder.embed(snippets)
    sim = emb @ emb.T
    groups: list[list[int]] = [[c] for c in range(table.n_cols)]

    def linkage(ga: list[int], gb: list[int]) -> float:
        return float(np.mean([sim[a, b] for a in ga for b in gb]))

    while len(groups) > 1:
        # groups stay sorted by lowest member, so scanning pairs in order
        # and keeping strict improvements breaks ties toward low indices
        best_score = -np.inf
        best_pair = None
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                score = linkage(groups[i], groups[j])
                if score > best_score + 1e-12:
                    best_score = score
                    best_pair = (i, j)
        if best_pair is None or best_score < GROUP_MERGE_THRESHOLD:
            break
        i, j = best_pair
        merged = sorted(groups[i] + groups[j])
        groups = [g for k, g in enumerate(groups) if k not in (i, j)]
        groups.append(merged)
        groups.sort(key=lambda g: g[0])

    groups.sort(key=lambda g: g[0])
    return ColumnGroupPartition(groups=groups)


def _sample_rows(table: Table, cols: list[int], seed: int) -> list[list[str]]:
    rng = random.Random(seed)
    n = table.n_rows
    count = min(SAMPLE_ROWS, n)
    indices = sorted(rng.sample(range(n), count)) if n else []
    return [
        [write_cell(table.columns[c][r]) for c in cols] for r in indices
    ]


def build_inference_prompt(table: Table, cols: list[int], seed: int = 0) -> str:
    headers = [table.headers[c] for c in cols]
    rows = _sample_rows(table, cols, seed)
    return prompts.METADATA_INFERENCE.format(
        title=table.title,
        headers=json.dumps(headers),
        rows=json.dumps(rows),
    )


def _parse_inference_response(text: str, expected_arity: int) -> tuple[str, list[str]]:
    match = re.search(r"\{.*\}", text, re.DOTALL)
    if not match:
        raise ValueError("response contains no JSON object")
    data = json.loads(match.group(0))
    title = data.get("updated_title")
    headers = data.get("updated_headers")
    if not isinstance(title, str) or not isinstance(headers, list):
        raise ValueError("response missing updated_title/updated_headers")
    if len(headers) != expected_arity:
        raise ValueError(
            f"expected {expected_arity} headers, got {len(headers)}"
        )
    return title, [str(h) for h in headers]


def infer_missing_metadata(
    table: Table,
    partition: ColumnGroupPartition,
    chat: ChatProvider,
    seed: int = 0,
) -> Table:
    """Fill masked title/headers from group-scoped provider calls.

    Each group containing a masked header is prompted once; a malformed or
    wrong-arity response earns a single re-prompt with the error appended.
    A second failure keeps the MASK and logs a warning. Cell data and
    unmasked metadata are never modified.
    """
    if not table.has_masks():
        raise ValueError(f"table {table.id} has no masked metadata")

    new_headers = list(table.headers)
    new_title = table.title
    masked = set(table.masked_header_indices())
    groups_to_ask = [g for g in partition.groups if any(c in masked for c in g)]
    if not groups_to_ask and table.title == MASK:
        groups_to_ask = [partition.groups[0]]

    for group in groups_to_ask:
        prompt = build_inference_prompt(table, group, seed=seed)
        result = None
        last_error = ""
        for attempt in range(2):
            try:
                text = chat.complete(
                    prompt
                    if attempt == 0
                    else prompt + f"\nPrevious response was invalid: {last_error}"
                )
                result = _parse_inference_response(text, len(group))
                break
            except (ProviderError, ValueError, json.JSONDecodeError) as exc:
                last_error = str(exc)
        if result is None:
            logger.warning(
                "metadata inference failed for table %s group %s: %s",
                table.id,
                group,
                last_error,
            )
            continue
        title, headers = result
        if new_title == MASK and title and title != MASK:
            new_title = title
        for local_idx, col in enumerate(group):
            if col in masked and headers[local_idx] and headers[local_idx] != MASK:
                new_headers[col] = headers[local_idx]

    return Table(
        id=table.id,
        title=new_title,
        headers=new_headers,
        columns=table.columns,
        provenance=table.provenance,
    )


_TOKEN_RE = re.compile(r"[A-Za-z0-9]+")


def header_f1(predicted: str, gold: str, embedder: Embedder) -> float:
    """Soft token-level F1 between a predicted and gold header.

    Greedy matching: each token is credited with its best cosine against
    the other side's tokens (negatives clamp to 0). Identical strings
    score exactly 1.0.
    """
    if not gold:
        raise ValueError("gold header must be non-empty")
    if predicted == gold:
        return 1.0
    pred_tokens = _TOKEN_RE.findall(predicted.casefold())
    gold_tokens = _TOKEN_RE.findall(gold.casefold())
    if not pred_tokens or not gold_tokens:
        return 0.0
    pe = embedder.embed(pred_tokens)
    ge = embedder.embed(gold_tokens)
    sim = np.clip(pe @ ge.T, 0.0, 1.0)
    precision = float(np.mean(np.max(sim, axis=1)))
    recall = float(np.mean(np.max(sim, axis=0)))
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)
