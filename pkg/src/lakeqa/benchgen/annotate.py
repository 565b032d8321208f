"""Relevant-table annotation from gold footprints.

A footprint names, per source table, the column indices and row ids the
gold query touches. A decomposed table is a candidate when its provenance
region (columns x rows of its source) intersects the footprint; the
annotation is the smallest candidate subset that jointly covers every
footprint cell, ties broken toward lexicographically lower id sets.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from ..corpus import Corpus, Provenance, Table

EXACT_COVER_LIMIT = 16  # beyond this many candidates, fall back to greedy


@dataclass
class GoldFootprint:
    """Per source table: referenced column indices and row ids."""

    regions: dict[str, tuple[set[int], set[int]]] = field(default_factory=dict)

    def add(self, source_id: str, columns: set[int], rows: set[int]) -> None:
        if not columns or not rows:
            raise ValueError("footprint regions must be non-empty")
        self.regions[source_id] = (set(columns), set(rows))

    def cells(self) -> set[tuple[str, int, int]]:
        out = set()
        for source_id, (cols, rows) in self.regions.items():
            for c in cols:
                for r in rows:
                    out.add((source_id, c, r))
        return out

    def to_json(self) -> dict:
        return {
            sid: {"columns": sorted(cols), "rows": sorted(rows)}
            for sid, (cols, rows) in self.regions.items()
        }

    @classmethod
    def from_json(cls, data: dict) -> "GoldFootprint":
        fp = cls()
        for sid, region in data.items():
            fp.add(sid, set(region["columns"]), set(region["rows"]))
        return fp


def provenance_row_ids(source: Table, prov: Provenance) -> set[int]:
    """Source row indices a subtable holds, recomputed from its predicate."""
    pred = prov.row_predicate
    if pred.kind == "all":
        return set(range(source.n_rows))
    column = source.columns[pred.column]
    return {i for i, v in enumerate(column) if pred.matches(v)}


def _table_region(
    table: Table, sources: dict[str, Table]
) -> tuple[str, set[int], set[int]]:
    prov = table.provenance
    if prov is None:
        raise ValueError(f"table {table.id} has no provenance")
    source = sources[prov.source_id]
    rows = provenance_row_ids(source, prov)
    # synthetic keys have no source column, drop the placeholder index
    cols = {c for c in prov.column_indices if 0 <= c < source.n_cols}
    return prov.source_id, cols, rows


def annotate_relevant_tables(
    footprint: GoldFootprint,
    decomposed: Corpus,
    sources: dict[str, Table],
) -> set[str]:
    """Minimum set of decomposed tables covering the whole footprint.

    Raises when some footprint cell is not covered by any decomposed
    table, which means provenance was lost and the dataset is invalid.
    """
    wanted = footprint.cells()
    coverage: dict[str, set[tuple[str, int, int]]] = {}
    for table in decomposed:
        if table.provenance is None:
            continue
        if table.provenance.source_id not in footprint.regions:
            continue
        sid, cols, rows = _table_region(table, sources)
        fcols, frows = footprint.regions[sid]
        covered = {
            (sid, c, r)
            for c in (cols & fcols)
            for r in (rows & frows)
        }
        if covered:
            coverage[table.id] = covered

    union_covered = set().union(*coverage.values()) if coverage else set()
    missing = wanted - union_covered
    if missing:
        raise ValueError(
            f"footprint cells not covered by any decomposed table: "
            f"{sorted(missing)[:5]} (and {max(0, len(missing) - 5)} more)"
        )

    candidates = sorted(coverage)
    if len(candidates) > EXACT_COVER_LIMIT:
        return _greedy_cover(wanted, coverage)
    for size in range(1, len(candidates) + 1):
        for combo in itertools.combinations(candidates, size):
            covered = set()
            for tid in combo:
                covered |= coverage[tid]
            if covered >= wanted:
                return set(combo)
    raise AssertionError("unreachable: union covers but no subset found")


def _greedy_cover(
    wanted: set[tuple[str, int, int]],
    coverage: dict[str, set[tuple[str, int, int]]],
) -> set[str]:
    remaining = set(wanted)
    chosen: set[str] = set()
    while remaining:
        best = min(
            coverage,
            key=lambda tid: (-len(coverage[tid] & remaining), tid),
        )
        if not coverage[best] & remaining:
            break
        chosen.add(best)
        remaining -= coverage[best]
    return chosen
