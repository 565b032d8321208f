"""Table model, CSV ingestion, snippet construction, and persistence.

A corpus is a directory of CSV files plus a manifest:

    <corpus>/tables/*.csv
    <corpus>/manifest.json

Cells are typed at ingestion: numeric-looking values (locale-free, "."
decimal) become numbers, empty cells become null, everything else stays
text. The literal header/title value "MASK" marks missing metadata.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

MASK = "MASK"

Value = Union[str, int, float, None]

_NUMBER_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")

MANIFEST_VERSION = 1


class IngestError(Exception):
    """Raised when a CSV file cannot be turned into a table."""


def parse_cell(raw: str) -> Value:
    """Type a raw CSV cell: number, text, or null for the empty string."""
    if raw == "":
        return None
    if _NUMBER_RE.match(raw.strip()):
        text = raw.strip()
        try:
            if re.match(r"^[+-]?\d+$", text):
                return int(text)
            return float(text)
        except (ValueError, OverflowError):
            return raw
    return raw


def canonical_value(v: Value) -> str:
    """Stable text form of a cell, used in snippets and join keys.

    Integral numbers render without a decimal point, other numbers in
    shortest 6-significant-digit form, so equal values always produce
    equal strings across platforms.
    """
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if v == int(v) and abs(v) < 1e15:
            return str(int(v))
        return f"{v:.6g}"
    return v


def write_cell(v: Value) -> str:
    """Lossless text form for CSV persistence (round-trips floats)."""
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RowPredicate:
    """Structured description of which source rows a subtable holds."""

    kind: str = "all"  # "all" | "range" | "categories"
    column: Optional[int] = None  # source column index the split used
    low: Optional[float] = None
    high: Optional[float] = None
    categories: Optional[list[str]] = None
    include_nulls: bool = False

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.kind != "all":
            out["column"] = self.column
            out["include_nulls"] = self.include_nulls
        if self.kind == "range":
            out["low"] = self.low
            out["high"] = self.high
        if self.kind == "categories":
            out["categories"] = list(self.categories or [])
        return out

    @classmethod
    def from_json(cls, data: dict) -> "RowPredicate":
        return cls(
            kind=data.get("kind", "all"),
            column=data.get("column"),
            low=data.get("low"),
            high=data.get("high"),
            categories=data.get("categories"),
            include_nulls=data.get("include_nulls", False),
        )

    def matches(self, value: Value) -> bool:
        if self.kind == "all":
            return True
        if value is None:
            return self.include_nulls
        if self.kind == "range":
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                return False
            return self.low <= float(value) <= self.high
        if self.kind == "categories":
            return canonical_value(value) in (self.categories or [])
        raise ValueError(f"unknown predicate kind {self.kind!r}")


@dataclass
class Provenance:
    """Where a derived table came from; enough to recompute membership."""

    source_id: str
    column_indices: list[int]
    row_predicate: RowPredicate = field(default_factory=RowPredicate)
    key_columns: list[int] = field(default_factory=list)  # local indices
    synthetic_key: bool = False

    def to_json(self) -> dict:
        return {
            "source_id": self.source_id,
            "column_indices": list(self.column_indices),
            "row_predicate": self.row_predicate.to_json(),
            "key_columns": list(self.key_columns),
            "synthetic_key": self.synthetic_key,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Provenance":
        return cls(
            source_id=data["source_id"],
            column_indices=list(data["column_indices"]),
            row_predicate=RowPredicate.from_json(data.get("row_predicate", {})),
            key_columns=list(data.get("key_columns", [])),
            synthetic_key=data.get("synthetic_key", False),
        )


@dataclass
class Table:
    """One ingested table: metadata plus typed columns."""

    id: str
    title: str
    headers: list[str]
    columns: list[list[Value]]
    provenance: Optional[Provenance] = None

    def __post_init__(self):
        if len(self.headers) != len(self.columns):
            raise ValueError(
                f"table {self.id}: {len(self.headers)} headers vs "
                f"{len(self.columns)} columns"
            )
        lengths = {len(col) for col in self.columns}
        if len(lengths) > 1:
            raise ValueError(f"table {self.id}: columns have unequal lengths")

    @property
    def n_cols(self) -> int:
        return len(self.headers)

    @property
    def n_rows(self) -> int:
        return len(self.columns[0]) if self.columns else 0

    def row(self, i: int) -> tuple[Value, ...]:
        return tuple(col[i] for col in self.columns)

    def rows(self) -> Iterator[tuple[Value, ...]]:
        for i in range(self.n_rows):
            yield self.row(i)

    def column_index(self, header: str) -> int:
        matches = [i for i, h in enumerate(self.headers) if h == header]
        if not matches:
            raise KeyError(f"table {self.id} has no column {header!r}")
        return matches[0]

    def masked_header_indices(self) -> list[int]:
        return [i for i, h in enumerate(self.headers) if h == MASK]

    def has_masks(self) -> bool:
        return self.title == MASK or bool(self.masked_header_indices())


class Corpus:
    """Insertion-ordered collection of tables with unique ids."""

    def __init__(self, tables: Optional[Iterable[Table]] = None):
        self._tables: dict[str, Table] = {}
        for t in tables or []:
            self.add(t)

    def add(self, table: Table) -> None:
        if table.id in self._tables:
            raise ValueError(f"duplicate table id {table.id!r}")
        self._tables[table.id] = table

    def __contains__(self, table_id: str) -> bool:
        return table_id in self._tables

    def __getitem__(self, table_id: str) -> Table:
        return self._tables[table_id]

    def get(self, table_id: str) -> Optional[Table]:
        return self._tables.get(table_id)

    def __iter__(self) -> Iterator[Table]:
        return iter(self._tables.values())

    def __len__(self) -> int:
        return len(self._tables)

    def ids(self) -> list[str]:
        return list(self._tables.keys())

    def digest(self) -> str:
        """Content hash, stable across processes."""
        h = hashlib.sha256()
        for tid in sorted(self._tables):
            t = self._tables[tid]
            h.update(tid.encode("utf-8"))
            h.update(t.title.encode("utf-8"))
            for header, col in zip(t.headers, t.columns):
                h.update(header.encode("utf-8"))
                for v in col:
                    h.update(write_cell(v).encode("utf-8"))
                    h.update(b"\x1f")
                h.update(b"\x1e")
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Ingestion and persistence
# ---------------------------------------------------------------------------


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise IngestError(f"{path}: empty file")
    header, data = rows[0], rows[1:]
    ragged = [
        idx + 2 for idx, row in enumerate(data) if len(row) != len(header)
    ]
    if ragged:
        raise IngestError(f"{path}: ragged rows at lines {ragged}")
    return header, data


def _table_from_rows(
    table_id: str,
    title: str,
    header: list[str],
    data: list[list[str]],
    masked_headers: Optional[list[int]] = None,
    masked_title: bool = False,
    provenance: Optional[Provenance] = None,
) -> Table:
    headers = list(header)
    for idx in masked_headers or []:
        if idx >= len(headers):
            raise IngestError(
                f"{table_id}: masked header index {idx} out of range"
            )
        headers[idx] = MASK
    columns: list[list[Value]] = [[] for _ in headers]
    for row in data:
        for j, raw in enumerate(row):
            columns[j].append(parse_cell(raw))
    return Table(
        id=table_id,
        title=MASK if masked_title else title,
        headers=headers,
        columns=columns,
        provenance=provenance,
    )


def ingest_csv_dir(path: str | Path, manifest: Optional[dict] = None) -> Corpus:
    """Ingest every CSV under a directory into a corpus.

    Without a manifest each file becomes a table whose id and title are the
    file stem. A manifest (the parsed manifest.json dict) pins ids, titles,
    masked-metadata flags, and provenance.
    """
    root = Path(path)
    if not root.is_dir():
        raise IngestError(f"{root} is not a directory")
    corpus = Corpus()
    if manifest is None:
        for csv_path in sorted(root.rglob("*.csv")):
            header, data = _read_csv(csv_path)
            corpus.add(
                _table_from_rows(csv_path.stem, csv_path.stem, header, data)
            )
        return corpus

    if manifest.get("format_version") != MANIFEST_VERSION:
        raise IngestError(
            f"unsupported manifest version {manifest.get('format_version')!r}"
        )
    for entry in manifest["entries"]:
        csv_path = root / entry["path"]
        header, data = _read_csv(csv_path)
        prov = (
            Provenance.from_json(entry["provenance"])
            if entry.get("provenance")
            else None
        )
        corpus.add(
            _table_from_rows(
                entry["id"],
                entry.get("title", csv_path.stem),
                header,
                data,
                masked_headers=entry.get("masked_headers"),
                masked_title=entry.get("masked_title", False),
                provenance=prov,
            )
        )
    return corpus


def load_corpus(corpus_dir: str | Path) -> Corpus:
    """Load a persisted corpus (tables/ + manifest.json)."""
    root = Path(corpus_dir)
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        return ingest_csv_dir(root, manifest)
    return ingest_csv_dir(root)


def save_corpus(corpus: Corpus, corpus_dir: str | Path) -> Path:
    """Persist tables as CSV plus a manifest; returns the manifest path."""
    root = Path(corpus_dir)
    tables_dir = root / "tables"
    tables_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for table in corpus:
        safe_name = re.sub(r"[^A-Za-z0-9_.-]", "_", table.id)
        rel_path = f"tables/{safe_name}.csv"
        with open(root / rel_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(table.headers)
            for row in table.rows():
                writer.writerow([write_cell(v) for v in row])
        entries.append(
            {
                "id": table.id,
                "path": rel_path,
                "title": table.title,
                "masked_headers": table.masked_header_indices(),
                "masked_title": table.title == MASK,
                "provenance": table.provenance.to_json()
                if table.provenance
                else None,
            }
        )
    manifest = {"format_version": MANIFEST_VERSION, "entries": entries}
    manifest_path = root / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


# ---------------------------------------------------------------------------
# Snippets and documents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnSnippet:
    table_id: str
    column_index: int
    text: str


def distinct_values(
    column: list[Value], cap: Optional[int] = None
) -> list[str]:
    """Distinct non-null canonical values in first-occurrence order."""
    seen: dict[str, None] = {}
    for v in column:
        if v is None:
            continue
        key = canonical_value(v)
        if key not in seen:
            seen[key] = None
            if cap is not None and len(seen) >= cap:
                break
    return list(seen)


def build_column_snippet(table: Table, col: int, v_cap: int = 50) -> ColumnSnippet:
    """Text proxy for one column: title, header, up to v_cap distinct values."""
    if col >= table.n_cols:
        raise IndexError(f"column {col} out of range for table {table.id}")
    parts = [table.title, table.headers[col]]
    parts.extend(distinct_values(table.columns[col], cap=v_cap))
    return ColumnSnippet(table.id, col, " ".join(p for p in parts if p))


def column_value_text(table: Table, col: int, v_cap: int = 50) -> str:
    """Value-only snippet used for semantic join evidence."""
    return " ".join(distinct_values(table.columns[col], cap=v_cap))


def table_document(table: Table) -> str:
    """Metadata-only document for one table: title plus headers."""
    return " ".join([table.title] + list(table.headers))


def build_cluster_document(cluster_tables: list[Table]) -> str:
    """Metadata document for a cluster: member documents in id order.

    Cell values are deliberately excluded so documents stay small and do
    not pick up spurious matches from frequent values.
    """
    if not cluster_tables:
        raise ValueError("cluster must be non-empty")
    ordered = sorted(cluster_tables, key=lambda t: t.id)
    return " ".join(table_document(t) for t in ordered)
