"""Lake synthesis pipeline: split, mask, perturb, augment.

Large seed tables (more than 5 columns and 50 rows) are decomposed
column-wise into key + column-group subtables and then row-wise into
value-range buckets or category groups. A fraction of the decomposed
tables lose their title and half their headers to the MASK placeholder,
textual key columns receive typo perturbations, and a BM25 pass pulls
distractor tables from an external pool. Gold metadata and the
perturbation log are kept in sidecars so reconstruction stays verifiable.
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .. import prompts
from ..corpus import (
    Corpus,
    Provenance,
    RowPredicate,
    Table,
    Value,
    canonical_value,
    load_corpus,
    parse_cell,
)
from ..metainfer import discover_column_groups
from ..providers import ChatProvider, Embedder, ProviderError
from .bm25 import BM25Index

logger = logging.getLogger(__name__)

SPLIT_MIN_COLUMNS = 5  # strictly more columns than this triggers splitting
SPLIT_MIN_ROWS = 50
ROW_BUCKETS_MIN, ROW_BUCKETS_MAX = 5, 20
CAT_GROUPS_MIN, CAT_GROUPS_MAX = 2, 20
MIN_PERTURB_LENGTH = 5  # one edit on shorter strings breaks the 0.2 bound


@dataclass(frozen=True)
class PerturbationConfig:
    mask_table_fraction: float = 0.20
    mask_header_fraction: float = 0.50
    perturb_cell_fraction: float = 0.20
    seed: int = 0

    def __post_init__(self):
        for name in (
            "mask_table_fraction",
            "mask_header_fraction",
            "perturb_cell_fraction",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")


def _is_number(v: Value) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _identity_provenance(table: Table) -> Provenance:
    keys = find_key_columns(table)
    return Provenance(
        source_id=table.id,
        column_indices=list(range(table.n_cols)),
        row_predicate=RowPredicate(kind="all"),
        key_columns=keys,
    )


def find_key_columns(table: Table) -> list[int]:
    """Columns whose values are all present and pairwise distinct."""
    keys = []
    for c, col in enumerate(table.columns):
        values = [canonical_value(v) for v in col if v is not None]
        if len(values) == table.n_rows and len(set(values)) == table.n_rows:
            keys.append(c)
    return keys


# ---------------------------------------------------------------------------
# Column-wise splitting
# ---------------------------------------------------------------------------


def _parse_grouping_response(
    raw: str, non_key_headers: list[str]
) -> list[list[int]]:
    match = re.search(r"\{.*\}", raw, re.DOTALL)
    if not match:
        raise ValueError("grouping response contains no JSON")
    data = json.loads(match.group(0))
    tables = data.get("Tables")
    if not isinstance(tables, list) or not tables:
        raise ValueError("grouping response missing 'Tables'")
    remaining = list(range(len(non_key_headers)))
    groups: list[list[int]] = []
    for entry in tables:
        headers = entry.get("Column Headers")
        if not isinstance(headers, list) or not headers:
            raise ValueError("group without 'Column Headers'")
        group = []
        for header in headers:
            hit = next(
                (i for i in remaining if non_key_headers[i] == header), None
            )
            if hit is None:
                raise ValueError(f"unknown or reused header {header!r}")
            remaining.remove(hit)
            group.append(hit)
        groups.append(sorted(group))
    if remaining:
        raise ValueError(
            f"headers not assigned to any group: "
            f"{[non_key_headers[i] for i in remaining]}"
        )
    return groups


def _group_non_key_columns(
    table: Table,
    non_key: list[int],
    chat: Optional[ChatProvider],
    embedder: Optional[Embedder],
) -> list[list[int]]:
    """Column groups as local indices into `non_key`."""
    if len(non_key) == 1:
        return [[0]]
    if chat is not None:
        headers = [table.headers[c] for c in non_key]
        prompt = prompts.SEMANTIC_COLUMN_GROUPING.format(
            title=table.title, headers=json.dumps(headers)
        )
        try:
            return _parse_grouping_response(chat.complete(prompt), headers)
        except (ProviderError, ValueError, json.JSONDecodeError) as exc:
            logger.debug("grouping prompt failed, using embeddings: %s", exc)
    if embedder is None:
        return [[i] for i in range(len(non_key))]
    sub = Table(
        id=table.id + "__nonkey",
        title=table.title,
        headers=[table.headers[c] for c in non_key],
        columns=[table.columns[c] for c in non_key],
    )
    partition = discover_column_groups(sub, embedder)
    return [sorted(g) for g in partition.groups]


def split_columns(
    table: Table,
    chat: Optional[ChatProvider] = None,
    embedder: Optional[Embedder] = None,
    rng: Optional[random.Random] = None,
) -> list[Table]:
    """Column-wise decomposition into key + semantic-group subtables.

    Tables at or below the size guard come back unchanged (with identity
    provenance). Every subtable receives one key column; when several key
    columns exist and no subtable holds them all, an extra keys-only
    subtable bridges them. A table with no key column gets a synthetic
    row-number key, recorded in provenance.
    """
    rng = rng or random.Random(0)
    if table.n_cols <= SPLIT_MIN_COLUMNS or table.n_rows <= SPLIT_MIN_ROWS:
        return [
            Table(
                id=table.id,
                title=table.title,
                headers=list(table.headers),
                columns=[list(c) for c in table.columns],
                provenance=table.provenance or _identity_provenance(table),
            )
        ]

    keys = find_key_columns(table)
    synthetic = False
    work = table
    if not keys:
        synthetic = True
        work = Table(
            id=table.id,
            title=table.title,
            headers=list(table.headers) + ["row id"],
            columns=[list(c) for c in table.columns]
            + [list(range(1, table.n_rows + 1))],
            provenance=table.provenance,
        )
        keys = [work.n_cols - 1]

    non_key = [c for c in range(work.n_cols) if c not in keys]
    groups_local = _group_non_key_columns(work, non_key, chat, embedder)

    subtables = []
    covered_keys: set[int] = set()
    for gi, group_local in enumerate(groups_local):
        group_cols = [non_key[i] for i in group_local]
        key_col = rng.choice(keys)
        covered_keys.add(key_col)
        cols = sorted([key_col] + group_cols)
        subtables.append(_column_subtable(work, table, cols, [key_col], f"c{gi}", synthetic))

    if len(keys) > 1 and not any(
        set(keys) <= set(st.provenance.column_indices) for st in subtables
    ):
        cols = sorted(keys)
        subtables.append(
            _column_subtable(work, table, cols, list(keys), "keys", synthetic)
        )
    return subtables


def _column_subtable(
    work: Table,
    source: Table,
    cols: list[int],
    key_cols: list[int],
    suffix: str,
    synthetic: bool,
) -> Table:
    # synthetic key columns live past the end of the real source schema;
    # they are recorded as index -1 in provenance
    source_indices = [c if c < source.n_cols else -1 for c in cols]
    prov = Provenance(
        source_id=source.id,
        column_indices=source_indices,
        row_predicate=RowPredicate(kind="all"),
        key_columns=[cols.index(k) for k in key_cols],
        synthetic_key=synthetic,
    )
    return Table(
        id=f"{source.id}__{suffix}",
        title=source.title,
        headers=[work.headers[c] for c in cols],
        columns=[list(work.columns[c]) for c in cols],
        provenance=prov,
    )


# ---------------------------------------------------------------------------
# Row-wise splitting
# ---------------------------------------------------------------------------


def _numeric_buckets(
    values: list[Value], b: int
) -> list[tuple[float, float]]:
    """Contiguous value ranges cutting the sorted values into ~b chunks."""
    present = sorted(float(v) for v in values if v is not None)
    if not present:
        return []
    n = len(present)
    boundaries: list[tuple[float, float]] = []
    start = 0
    for chunk in range(b):
        if start >= n:
            break
        end = min(n, math.ceil((chunk + 1) * n / b))
        # never let one value straddle two buckets
        while end < n and present[end] == present[end - 1]:
            end += 1
        boundaries.append((present[start], present[end - 1]))
        start = end
    return boundaries


def split_rows(table: Table, rng: random.Random) -> list[Table]:
    """Partition rows by one non-key column into unionable subtables.

    Numeric columns cut into 5..20 contiguous value-range buckets,
    categorical columns into 2..20 category groups; null cells fall into
    the first bucket. Subtables share the source headers.
    """
    if table.n_rows <= SPLIT_MIN_ROWS:
        return [table]
    prov = table.provenance or _identity_provenance(table)
    non_key = [c for c in range(table.n_cols) if c not in prov.key_columns]
    if not non_key:
        return [table]

    candidates = list(non_key)
    rng.shuffle(candidates)
    chosen = None
    for col in candidates:
        if any(v is not None for v in table.columns[col]):
            chosen = col
            break
    if chosen is None:
        return [table]

    column = table.columns[chosen]
    numeric = all(v is None or _is_number(v) for v in column)
    buckets: list[RowPredicate] = []
    if numeric:
        b = rng.randint(ROW_BUCKETS_MIN, ROW_BUCKETS_MAX)
        ranges = _numeric_buckets(column, b)
        for i, (low, high) in enumerate(ranges):
            buckets.append(
                RowPredicate(
                    kind="range",
                    column=prov.column_indices[chosen],
                    low=low,
                    high=high,
                    include_nulls=(i == 0),
                )
            )
    else:
        distinct: list[str] = []
        for v in column:
            if v is None:
                continue
            cv = canonical_value(v)
            if cv not in distinct:
                distinct.append(cv)
        if len(distinct) < 2:
            return [table]
        g = min(rng.randint(CAT_GROUPS_MIN, CAT_GROUPS_MAX), len(distinct))
        shuffled = list(distinct)
        rng.shuffle(shuffled)
        groups: list[list[str]] = [[] for _ in range(g)]
        for i, cat in enumerate(shuffled):
            groups[i % g].append(cat)
        for i, cats in enumerate(groups):
            buckets.append(
                RowPredicate(
                    kind="categories",
                    column=prov.column_indices[chosen],
                    categories=sorted(cats),
                    include_nulls=(i == 0),
                )
            )

    header = table.headers[chosen]
    out = []
    for bi, pred in enumerate(buckets):
        row_ids = [
            r for r in range(table.n_rows) if pred.matches(column[r])
        ]
        if not row_ids:
            continue
        if pred.kind == "range":
            label = (
                f"{header} {canonical_value(pred.low)} to "
                f"{canonical_value(pred.high)}"
            )
        else:
            label = f"{header} {' '.join(pred.categories[:3])}"
        out.append(
            Table(
                id=f"{table.id}_r{bi}",
                title=f"{table.title} {label}",
                headers=list(table.headers),
                columns=[
                    [col[r] for r in row_ids] for col in table.columns
                ],
                provenance=Provenance(
                    source_id=prov.source_id,
                    column_indices=list(prov.column_indices),
                    row_predicate=pred,
                    key_columns=list(prov.key_columns),
                    synthetic_key=prov.synthetic_key,
                ),
            )
        )
    return out if out else [table]


# ---------------------------------------------------------------------------
# Masking and perturbation
# ---------------------------------------------------------------------------


def mask_metadata(
    corpus: Corpus, cfg: PerturbationConfig, rng: random.Random
) -> tuple[Corpus, dict[str, dict]]:
    """Mask title plus half the headers of a 20% table sample.

    Returns the masked corpus and a gold sidecar {table id: {title,
    headers}} for later inference evaluation.
    """
    from ..corpus import MASK

    ids = sorted(t.id for t in corpus)
    count = int(cfg.mask_table_fraction * len(ids))
    selected = set(rng.sample(ids, count)) if count else set()
    sidecar: dict[str, dict] = {}
    out = Corpus()
    for table in corpus:
        if table.id not in selected:
            out.add(table)
            continue
        sidecar[table.id] = {
            "title": table.title,
            "headers": list(table.headers),
        }
        n_masked = math.ceil(cfg.mask_header_fraction * table.n_cols)
        masked = set(rng.sample(range(table.n_cols), n_masked))
        headers = [
            MASK if c in masked else h for c, h in enumerate(table.headers)
        ]
        out.add(
            Table(
                id=table.id,
                title=MASK,
                headers=headers,
                columns=table.columns,
                provenance=table.provenance,
            )
        )
    return out, sidecar


_EDIT_KINDS = ("swap", "delete", "substitute")
_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _apply_edit(value: str, kind: str, rng: random.Random) -> str:
    if kind == "swap":
        positions = [
            p for p in range(len(value) - 1) if value[p] != value[p + 1]
        ]
        if not positions:
            return _apply_edit(value, "delete", rng)
        p = rng.choice(positions)
        return value[:p] + value[p + 1] + value[p] + value[p + 2 :]
    if kind == "delete":
        p = rng.randrange(len(value))
        return value[:p] + value[p + 1 :]
    p = rng.randrange(len(value))
    replacement = rng.choice([c for c in _LETTERS if c != value[p]])
    return value[:p] + replacement + value[p + 1 :]


def perturb_join_values(
    corpus: Corpus, cfg: PerturbationConfig, rng: random.Random
) -> tuple[Corpus, list[dict]]:
    """Inject single-character typos into textual key columns.

    Exactly floor(fraction * rows) cells per eligible column are edited
    (swap, delete, or substitute one character). Strings shorter than 5
    characters are skipped and logged; the full edit log is returned so
    gold joins and reconstruction stay computable.
    """
    log: list[dict] = []
    out = Corpus()
    for table in corpus:
        prov = table.provenance
        if prov is None or not prov.key_columns:
            out.add(table)
            continue
        columns = [list(c) for c in table.columns]
        for key_col in prov.key_columns:
            col = columns[key_col]
            if not all(isinstance(v, str) for v in col if v is not None):
                continue
            eligible = [
                r
                for r, v in enumerate(col)
                if isinstance(v, str) and len(v) >= MIN_PERTURB_LENGTH
            ]
            short = table.n_rows - len(eligible)
            if short:
                logger.debug(
                    "table %s col %d: %d values below length %d skipped",
                    table.id, key_col, short, MIN_PERTURB_LENGTH,
                )
            target = int(cfg.perturb_cell_fraction * table.n_rows)
            chosen = rng.sample(eligible, min(target, len(eligible)))
            for r in sorted(chosen):
                original = col[r]
                perturbed = original
                for _ in range(8):
                    kind = rng.choice(_EDIT_KINDS)
                    candidate = _apply_edit(original, kind, rng)
                    # the edit must keep the cell textual and distinct
                    if candidate != original and isinstance(
                        parse_cell(candidate), str
                    ):
                        perturbed = candidate
                        break
                if perturbed == original:
                    logger.debug(
                        "table %s col %d row %d: no usable edit found",
                        table.id, key_col, r,
                    )
                    continue
                col[r] = perturbed
                log.append(
                    {
                        "table": table.id,
                        "column": key_col,
                        "row": r,
                        "original": original,
                        "perturbed": perturbed,
                    }
                )
        out.add(
            Table(
                id=table.id,
                title=table.title,
                headers=table.headers,
                columns=columns,
                provenance=prov,
            )
        )
    return out, log


# ---------------------------------------------------------------------------
# External augmentation
# ---------------------------------------------------------------------------


def augment_external(
    corpus: Corpus,
    external_dir,
    questions: Sequence[str],
    n: int,
) -> tuple[Corpus, list[str]]:
    """Add BM25 distractors from an external pool.

    Queries are every question plus every current table title; the top-n
    externals per query join the corpus once. n = 0 leaves the corpus
    unchanged.
    """
    if n <= 0:
        return corpus, []
    pool = load_corpus(external_dir)
    if len(pool) == 0:
        logger.warning("external pool %s is empty; skipping", external_dir)
        return corpus, []
    index = BM25Index(k1=1.2, b=0.75)
    for table in pool:
        index.add(table.id, f"{table.id} {table.title}")

    queries = list(questions) + [t.title for t in corpus]
    selected: list[str] = []
    seen: set[str] = set()
    for query in queries:
        for doc_id, _ in index.search(query, n):
            if doc_id not in seen:
                seen.add(doc_id)
                selected.append(doc_id)

    out = Corpus(list(corpus))
    added = []
    for doc_id in selected:
        if doc_id in out:
            continue
        out.add(pool[doc_id])
        added.append(doc_id)
    return out, added


# ---------------------------------------------------------------------------
# Reconstruction check
# ---------------------------------------------------------------------------


def _invert_log(tables: list[Table], log: Sequence[dict]) -> list[Table]:
    by_table: dict[str, list[dict]] = {}
    for entry in log:
        by_table.setdefault(entry["table"], []).append(entry)
    out = []
    for table in tables:
        edits = by_table.get(table.id)
        if not edits:
            out.append(table)
            continue
        columns = [list(c) for c in table.columns]
        for entry in edits:
            columns[entry["column"]][entry["row"]] = entry["original"]
        out.append(
            Table(
                id=table.id,
                title=table.title,
                headers=table.headers,
                columns=columns,
                provenance=table.provenance,
            )
        )
    return out


def verify_reconstruction(
    source: Table,
    subtables: Sequence[Table],
    perturbation_log: Sequence[dict] = (),
) -> bool:
    """True iff unioning row-splits and joining column-splits on their keys
    reproduces the source cell multiset (after inverting logged edits)."""
    if not subtables:
        return False
    restored = _invert_log(list(subtables), perturbation_log)

    families: dict[tuple[int, ...], list[Table]] = {}
    for st in restored:
        if st.provenance is None or st.provenance.source_id != source.id:
            return False
        families.setdefault(tuple(st.provenance.column_indices), []).append(st)

    covered = set()
    for cols in families:
        covered.update(c for c in cols if c >= 0)
    if covered != set(range(source.n_cols)):
        return False

    # union row-splits within each column family
    family_rows: dict[tuple[int, ...], list[tuple[Value, ...]]] = {}
    family_keys: dict[tuple[int, ...], list[int]] = {}
    for cols, members in families.items():
        rows: list[tuple[Value, ...]] = []
        for st in members:
            rows.extend(st.rows())
        family_rows[cols] = rows
        family_keys[cols] = list(members[0].provenance.key_columns)

    # join all families through a spine that carries a shared key column
    order = sorted(family_rows, key=lambda cols: (-len(cols), cols))
    spine_cols = list(order[0])
    spine_rows = [list(r) for r in family_rows[order[0]]]
    for cols in order[1:]:
        shared = [
            (spine_cols.index(cols[k]), k)
            for k in family_keys[cols]
            if cols[k] in spine_cols
        ]
        if not shared:
            return False
        spine_idx, local_idx = shared[0]
        lookup: dict[str, tuple[Value, ...]] = {}
        for row in family_rows[cols]:
            lookup[canonical_value(row[local_idx])] = row
        new_cols = [c for c in cols if c not in spine_cols]
        positions = [list(cols).index(c) for c in new_cols]
        merged = []
        for row in spine_rows:
            key = canonical_value(row[spine_idx])
            other = lookup.get(key)
            if other is None:
                return False
            merged.append(row + [other[p] for p in positions])
        spine_cols = spine_cols + new_cols
        spine_rows = merged

    real = [c for c in spine_cols if c >= 0]
    if set(real) != set(range(source.n_cols)):
        return False
    ordering = [spine_cols.index(c) for c in range(source.n_cols)]
    rebuilt = Counter(
        tuple(canonical_value(row[i]) for i in ordering) for row in spine_rows
    )
    original = Counter(
        tuple(canonical_value(v) for v in row) for row in source.rows()
    )
    return rebuilt == original


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass
class LakeArtifacts:
    corpus: Corpus
    questions: list[dict]
    gold_metadata: dict[str, dict]
    perturbation_log: list[dict]
    sources: dict[str, Table]
    decomposed_ids: list[str]
    external_ids: list[str] = field(default_factory=list)


def decompose_table(
    table: Table,
    chat: Optional[ChatProvider],
    embedder: Optional[Embedder],
    rng: random.Random,
) -> list[Table]:
    """Column-wise then row-wise splitting for one source table."""
    column_subtables = split_columns(table, chat, embedder, rng)
    if len(column_subtables) == 1 and column_subtables[0].id == table.id:
        return column_subtables
    out = []
    for st in column_subtables:
        out.extend(split_rows(st, rng))
    return out


def generate_lake(
    seed_corpus: Corpus,
    cfg: PerturbationConfig,
    embedder: Optional[Embedder] = None,
    chat: Optional[ChatProvider] = None,
    external_dir=None,
    n_external: int = 0,
    n_questions: int = 0,
) -> LakeArtifacts:
    """Run the full synthesis pipeline over a seed database."""
    from .synth import generate_questions

    rng = random.Random(cfg.seed)
    sources = {t.id: t for t in seed_corpus}
    decomposed = Corpus()
    for table in seed_corpus:
        for st in decompose_table(table, chat, embedder, rng):
            decomposed.add(st)
    decomposed_ids = decomposed.ids()

    questions: list[dict] = []
    if n_questions > 0:
        questions = generate_questions(
            decomposed, sources, rng, n_questions
        )

    masked, gold_metadata = mask_metadata(decomposed, cfg, rng)
    perturbed, log = perturb_join_values(masked, cfg, rng)

    corpus = perturbed
    external_ids: list[str] = []
    if external_dir is not None and n_external > 0:
        corpus, external_ids = augment_external(
            corpus,
            external_dir,
            [q["question"] for q in questions],
            n_external,
        )

    for q in questions:
        q["complexity"] = _complexity(q, gold_metadata)

    return LakeArtifacts(
        corpus=corpus,
        questions=questions,
        gold_metadata=gold_metadata,
        perturbation_log=log,
        sources=sources,
        decomposed_ids=decomposed_ids,
        external_ids=external_ids,
    )


def _complexity(question: dict, gold_metadata: dict[str, dict]) -> str:
    plan = question.get("gold_plan") or {}
    nodes = plan.get("nodes", [])
    joins = sum(1 for n in nodes if n.get("op") == "join")
    unions = sum(1 for n in nodes if n.get("op") == "union_cluster")
    base_inputs = sum(
        1 for n in nodes if n.get("op") in ("scan", "union_cluster")
    )
    joined_tables = base_inputs if joins > 0 else 0
    masked = any(t in gold_metadata for t in question.get("relevant_tables", []))
    if joined_tables == 2 and unions == 0 and not masked:
        return "easy"
    if joined_tables > 2 and unions >= 1 and masked:
        return "hard"
    return "moderate"


def save_lake(artifacts: LakeArtifacts, out_dir) -> None:
    from pathlib import Path

    from ..corpus import save_corpus

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    save_corpus(artifacts.corpus, root)
    with open(root / "questions.json", "w", encoding="utf-8") as fh:
        json.dump(artifacts.questions, fh, indent=2, sort_keys=True)
        fh.write("\n")
    gold = root / "_gold"
    gold.mkdir(exist_ok=True)
    with open(gold / "metadata.json", "w", encoding="utf-8") as fh:
        json.dump(artifacts.gold_metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(gold / "perturbations.json", "w", encoding="utf-8") as fh:
        json.dump(artifacts.perturbation_log, fh, indent=2, sort_keys=True)
        fh.write("\n")
