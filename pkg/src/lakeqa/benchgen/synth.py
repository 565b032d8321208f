"""Synthetic seed databases, external distractor pools, and question
generation grounded in the decomposed lake.

Seed tables are wide (7 columns, 60-90 rows) so the splitting pipeline
kicks in; each carries a textual code key plus a numeric serial key, which
guarantees a clean keys-only bridge table after decomposition. Questions
are generated against the actual decomposition: filter values align with
row-split buckets so every question has a small relevant set, a reference
plan over decomposed tables, and a gold answer computed directly from the
seed rows.
"""

from __future__ import annotations

import random
from pathlib import Path
from typing import Optional, Sequence

from ..corpus import Corpus, Table, canonical_value, save_corpus
from .annotate import GoldFootprint, annotate_relevant_tables

_THEMES = [
    {
        "id": "schools",
        "title": "school directory",
        "entity": "schools",
        "key": "school code",
        "serial": "school serial",
        "cats": [
            ("district", ["north ridge", "south bay", "east hollow", "west glen"]),
            ("funding", ["charter", "municipal", "private"]),
        ],
        "nums": [("math score", 300, 800), ("reading score", 300, 800)],
        "free": ("motto", ["bright futures", "learn and grow", "ad astra", "strive daily", "open minds"]),
    },
    {
        "id": "clinics",
        "title": "clinic registry",
        "entity": "clinics",
        "key": "clinic code",
        "serial": "clinic serial",
        "cats": [
            ("region", ["harbor point", "cedar flats", "mill valley"]),
            ("ownership", ["public", "nonprofit", "corporate"]),
        ],
        "nums": [("patient count", 100, 900), ("staff count", 10, 90)],
        "free": ("remark", ["walk ins welcome", "appointment only", "open weekends", "new wing", "renovated"]),
    },
    {
        "id": "stores",
        "title": "store ledger",
        "entity": "stores",
        "key": "store code",
        "serial": "store serial",
        "cats": [
            ("zone", ["old town", "river side", "lake shore"]),
            ("category", ["grocery", "hardware", "apparel"]),
        ],
        "nums": [("sales amount", 1000, 9000), ("employee count", 5, 50)],
        "free": ("note", ["flagship", "seasonal", "franchise", "clearance hub", "outlet"]),
    },
    {
        "id": "parks",
        "title": "park inventory",
        "entity": "parks",
        "key": "park code",
        "serial": "park serial",
        "cats": [
            ("borough", ["green hollow", "stone gate", "ash meadow"]),
            ("kind", ["urban", "forest", "wetland"]),
        ],
        "nums": [("area acres", 10, 500), ("visitor count", 100, 5000)],
        "free": ("detail", ["dog friendly", "no fires", "trail access", "boat launch", "picnic sites"]),
    },
    {
        "id": "vessels",
        "title": "vessel manifest",
        "entity": "vessels",
        "key": "vessel code",
        "serial": "vessel serial",
        "cats": [
            ("port", ["gray harbor", "salt cove", "pine landing"]),
            ("class", ["trawler", "ferry", "tug"]),
        ],
        "nums": [("tonnage", 50, 900), ("crew count", 4, 40)],
        "free": ("status", ["in service", "dry dock", "charter", "survey due", "laid up"]),
    },
    {
        "id": "orchards",
        "title": "orchard register",
        "entity": "orchards",
        "key": "orchard code",
        "serial": "orchard serial",
        "cats": [
            ("valley", ["amber vale", "birch run", "clay ridge"]),
            ("crop", ["apple", "pear", "cherry"]),
        ],
        "nums": [("tree count", 200, 2000), ("yield tons", 5, 95)],
        "free": ("label", ["organic", "heritage", "export grade", "cider stock", "family run"]),
    },
]

_KEY_ALPHABET = "abcdefghijklmnopqrstuvwxyz"
KEY_LENGTH = 12


def _random_key(rng: random.Random) -> str:
    return "".join(rng.choice(_KEY_ALPHABET) for _ in range(KEY_LENGTH))


def make_seed_database(
    seed: int, n_sources: int = 4, rows_range: tuple[int, int] = (64, 90)
) -> Corpus:
    """Seed tables wide and tall enough to trigger decomposition."""
    if not 1 <= n_sources <= len(_THEMES):
        raise ValueError(f"n_sources must be in [1, {len(_THEMES)}]")
    rng = random.Random(seed)
    corpus = Corpus()
    for theme in _THEMES[:n_sources]:
        n = rng.randint(*rows_range)
        keys = set()
        while len(keys) < n:
            keys.add(_random_key(rng))
        key_col = sorted(keys)
        rng.shuffle(key_col)
        serial_col = list(range(1000, 1000 + n))
        rng.shuffle(serial_col)
        headers = [theme["key"], theme["serial"]]
        columns: list[list] = [key_col, serial_col]
        for cat_header, values in theme["cats"]:
            headers.append(cat_header)
            columns.append([rng.choice(values) for _ in range(n)])
        for num_header, low, high in theme["nums"]:
            headers.append(num_header)
            columns.append([rng.randint(low, high) for _ in range(n)])
        free_header, phrases = theme["free"]
        headers.append(free_header)
        columns.append(
            [rng.choice(phrases) if rng.random() > 0.1 else None for _ in range(n)]
        )
        corpus.add(
            Table(
                id=theme["id"],
                title=theme["title"],
                headers=headers,
                columns=columns,
            )
        )
    return corpus


_GENERIC_TITLE_WORDS = [
    "directory", "registry", "ledger", "inventory", "records", "report",
    "listing", "summary", "index", "catalog", "archive", "survey",
]
_TOPIC_TITLE_WORDS = [
    "weather", "stations", "bridges", "tunnels", "routes", "tickets",
    "members", "matches", "species", "comets", "reservoirs", "mines",
    "quarries", "festivals", "markets", "harvests", "shipments", "permits",
    "north", "south", "east", "west", "harbor", "cedar", "mill", "lake",
    "river", "stone", "ridge", "valley", "meadow", "grove",
]
_HEADER_WORDS = [
    "batch", "grade", "volume", "label", "status", "phase", "sector",
    "period", "quota", "rating", "margin", "depth", "width", "span",
    "cycle", "stage", "tier", "rank", "mass", "load",
]
_VALUE_WORDS = [
    "alpha", "beta", "gamma", "delta", "sigma", "omega", "zeta", "theta",
    "iota", "kappa",
]


def make_external_pool(out_dir, seed: int, count: int = 500) -> Path:
    """Write a pool of small distractor tables as a corpus directory."""
    rng = random.Random(seed)
    corpus = Corpus()
    for i in range(count):
        title_words = rng.sample(_TOPIC_TITLE_WORDS, rng.randint(1, 2))
        title_words.append(rng.choice(_GENERIC_TITLE_WORDS))
        title = " ".join(title_words)
        n_cols = rng.randint(3, 5)
        headers = rng.sample(_HEADER_WORDS, n_cols)
        n_rows = rng.randint(5, 15)
        columns = []
        for _ in range(n_cols):
            if rng.random() < 0.5:
                columns.append([rng.randint(0, 99999) for _ in range(n_rows)])
            else:
                columns.append(
                    [
                        f"{rng.choice(_VALUE_WORDS)}{rng.randint(0, 9999)}"
                        for _ in range(n_rows)
                    ]
                )
        corpus.add(
            Table(
                id=f"pool{i:04d}",
                title=title,
                headers=headers,
                columns=columns,
            )
        )
    out = Path(out_dir)
    save_corpus(corpus, out)
    return out


# ---------------------------------------------------------------------------
# Question generation over the decomposed lake
# ---------------------------------------------------------------------------


class _Family:
    """All row-split siblings of one column-group subtable."""

    def __init__(self, members: list[Table]):
        self.members = members
        prov = members[0].provenance
        self.source_id = prov.source_id
        self.column_indices = list(prov.column_indices)
        self.key_columns = list(prov.key_columns)
        preds = [m.provenance.row_predicate for m in members]
        kinds = {p.kind for p in preds}
        self.bucket_kind = kinds.pop() if len(kinds) == 1 else "mixed"
        self.bucket_column = preds[0].column if self.bucket_kind != "all" else None

    def content_columns(self) -> list[int]:
        return [
            c
            for i, c in enumerate(self.column_indices)
            if i not in self.key_columns and c >= 0
        ]

    def range_members(self) -> list[Table]:
        return sorted(
            self.members, key=lambda m: m.provenance.row_predicate.low
        )

    def member_for_category(self, value: str) -> Optional[Table]:
        for m in self.members:
            cats = m.provenance.row_predicate.categories or []
            if value in cats:
                return m
        return None

    def members_for_rows(self, source: Table, rows: set[int]) -> list[Table]:
        out = []
        for m in self.members:
            pred = m.provenance.row_predicate
            col = source.columns[pred.column] if pred.column is not None else None
            for r in rows:
                if pred.kind == "all" or pred.matches(col[r]):
                    out.append(m)
                    break
        return sorted(out, key=lambda m: m.id)


def _collect_families(
    decomposed: Corpus, source_id: str
) -> dict[tuple[int, ...], _Family]:
    grouped: dict[tuple[int, ...], list[Table]] = {}
    for table in decomposed:
        prov = table.provenance
        if prov is None or prov.source_id != source_id:
            continue
        grouped.setdefault(tuple(prov.column_indices), []).append(table)
    return {cols: _Family(members) for cols, members in grouped.items()}


def _range_threshold(family: _Family, suffix_len: int) -> tuple[float, list[Table]]:
    members = family.range_members()
    suffix_len = min(suffix_len, len(members))
    suffix = members[-suffix_len:]
    if suffix_len == len(members):
        t = min(m.provenance.row_predicate.low for m in members) - 1.0
    else:
        t = members[-suffix_len - 1].provenance.row_predicate.high
    return float(t), suffix


def _scan_or_union(
    prefix: str, tables: Sequence[Table]
) -> tuple[list[dict], str]:
    ids = sorted(t.id for t in tables)
    if len(ids) == 1:
        return [{"id": f"{prefix}_scan", "op": "scan", "table": ids[0]}], f"{prefix}_scan"
    node = {"id": f"{prefix}_union", "op": "union_cluster", "tables": ids}
    return [node], f"{prefix}_union"


def _plan(nodes: list[dict], root: str) -> dict:
    return {"version": 1, "root": root, "nodes": nodes}


def _source_rows_matching(source: Table, conditions: list[tuple[int, str, object]]) -> set[int]:
    rows = set()
    for r in range(source.n_rows):
        ok = True
        for col, op, value in conditions:
            cell = source.columns[col][r]
            if cell is None:
                ok = False
            elif op == "=":
                ok = canonical_value(cell) == canonical_value(value)
            elif op == ">":
                ok = isinstance(cell, (int, float)) and float(cell) > float(value)
            else:
                raise ValueError(f"unknown op {op}")
            if not ok:
                break
        if ok:
            rows.add(r)
    return rows


def generate_questions(
    decomposed: Corpus,
    sources: dict[str, Table],
    rng: random.Random,
    count: int,
) -> list[dict]:
    """Numerical questions with reference plans over the decomposed lake.

    Filter columns always coincide with the row-split column of their
    family, so the matching rows land in a handful of subtables; templates
    join families through the shared numeric serial key, which survives
    perturbation untouched. Roughly one question in five is phrased with
    off-vocabulary words and flagged as not lexically recoverable.
    """
    builders = []
    for source_id in sorted(sources):
        source = sources[source_id]
        families = _collect_families(decomposed, source_id)
        serial_idx = next(
            (
                i
                for i, h in enumerate(source.headers)
                if isinstance(source.columns[i][0], int)
                and h.endswith("serial")
            ),
            None,
        )
        num_families = []
        cat_families = []
        for fam in families.values():
            content = fam.content_columns()
            if len(content) != 1 or fam.bucket_column != content[0]:
                continue
            if serial_idx is not None and serial_idx not in fam.column_indices:
                continue  # keep to families joined by the clean serial key
            if fam.bucket_kind == "range":
                num_families.append(fam)
            elif fam.bucket_kind == "categories":
                header = source.headers[content[0]]
                values = sorted(
                    {
                        canonical_value(v)
                        for v in source.columns[content[0]]
                        if v is not None
                    }
                )
                if not header.endswith(("motto", "remark", "note", "detail", "status", "label")):
                    cat_families.append((fam, header, values))
        if not num_families:
            continue
        builders.append(
            {
                "source": source,
                "serial_idx": serial_idx,
                "serial_header": source.headers[serial_idx]
                if serial_idx is not None
                else None,
                "num_families": sorted(num_families, key=lambda f: f.column_indices),
                "cat_families": cat_families,
            }
        )

    if not builders:
        raise ValueError("no decomposed source supports question templates")

    theme_by_source = {t["id"]: t for t in _THEMES}
    questions: list[dict] = []
    seen_texts: set[str] = set()
    template_cycle = ["union_count", "join_count", "join_sum", "join_count",
                      "join_avg", "union_count", "join_count", "three_table"]
    attempt = 0
    while len(questions) < count and attempt < count * 20:
        attempt += 1
        template = template_cycle[len(questions) % len(template_cycle)]
        builder = builders[rng.randrange(len(builders))]
        lexical = (len(questions) % 5) != 4  # every fifth question goes hard
        record = _build_question(
            builder, template, theme_by_source, decomposed, sources, rng,
            lexical, f"q{len(questions):03d}",
        )
        if record is not None and record["question"] not in seen_texts:
            seen_texts.add(record["question"])
            questions.append(record)
    if len(questions) < count:
        raise ValueError(
            f"could only generate {len(questions)} of {count} questions"
        )
    return questions


_HARD_ENTITY = {"schools": "establishments", "clinics": "facilities",
                "stores": "outfits", "parks": "grounds",
                "vessels": "hulls", "orchards": "plots"}


def _build_question(
    builder: dict,
    template: str,
    themes: dict,
    decomposed: Corpus,
    sources: dict[str, Table],
    rng: random.Random,
    lexical: bool,
    qid: str,
) -> Optional[dict]:
    source: Table = builder["source"]
    theme = themes.get(source.id)
    entity = theme["entity"] if theme else source.id
    if not lexical:
        entity = _HARD_ENTITY.get(source.id, "items")
    serial_header = builder["serial_header"]
    num_families = builder["num_families"]
    cat_families = builder["cat_families"]

    fam_x = num_families[rng.randrange(len(num_families))]
    x_idx = fam_x.content_columns()[0]
    x_header = source.headers[x_idx]

    if template == "union_count":
        if len(fam_x.members) < 2:
            return None
        t, suffix = _range_threshold(fam_x, rng.randint(2, min(3, len(fam_x.members))))
        conditions = [(x_idx, ">", t)]
        rows = _source_rows_matching(source, conditions)
        if not rows:
            return None
        relevant_members = fam_x.members_for_rows(source, rows)
        nodes, top = _scan_or_union("x", relevant_members)
        nodes.append(
            {
                "id": "x_filter",
                "op": "filter",
                "inputs": [top],
                "predicate": {"op": ">", "col": x_header, "value": t},
            }
        )
        nodes.append(
            {"id": "agg", "op": "aggregate", "inputs": ["x_filter"], "function": "count"}
        )
        question = (
            f"How many {entity} have a {x_header} over {canonical_value(t)}?"
            if lexical
            else f"How many {entity} show a tally beyond {canonical_value(t)}?"
        )
        gold = len(rows)
        footprint_cols = {builder["serial_idx"], x_idx}
        plan = _plan(nodes, "agg")
        return _finish(
            qid, question, gold, plan, footprint_cols, rows, source,
            decomposed, sources, lexical, "union_count",
        )

    if not cat_families:
        return None
    fam_f, f_header, f_values = cat_families[rng.randrange(len(cat_families))]
    f_idx = fam_f.content_columns()[0]

    suffix_len = 2 if template == "three_table" and len(fam_x.members) > 2 else 1
    for _ in range(6):
        v = f_values[rng.randrange(len(f_values))]
        t, _suffix = _range_threshold(fam_x, suffix_len)
        conditions = [(f_idx, "=", v), (x_idx, ">", t)]
        extra_family = None
        if template == "three_table":
            others = [f for f in num_families if f is not fam_x]
            if not others:
                return None
            extra_family = others[rng.randrange(len(others))]
            y_idx = extra_family.content_columns()[0]
            t2, _ = _range_threshold(extra_family, 1)
            conditions.append((y_idx, ">", t2))
        rows = _source_rows_matching(source, conditions)
        if rows:
            break
    else:
        return None

    f_member = fam_f.members_for_rows(source, rows)
    if len(f_member) != 1:
        return None  # one category value always lives in one group table
    x_members = fam_x.members_for_rows(source, rows)

    nodes = [
        {"id": "f_scan", "op": "scan", "table": f_member[0].id},
        {
            "id": "f_filter",
            "op": "filter",
            "inputs": ["f_scan"],
            "predicate": {"op": "=", "col": f_header, "value": v},
        },
    ]
    x_nodes, x_top = _scan_or_union("x", x_members)
    nodes.extend(x_nodes)
    nodes.append(
        {
            "id": "x_filter",
            "op": "filter",
            "inputs": [x_top],
            "predicate": {"op": ">", "col": x_header, "value": t},
        }
    )
    nodes.append(
        {
            "id": "join1",
            "op": "join",
            "inputs": ["f_filter", "x_filter"],
            "keys": [[serial_header, serial_header]],
            "mode": "exact",
        }
    )
    top = "join1"
    footprint_cols = {builder["serial_idx"], f_idx, x_idx}

    if template == "three_table":
        y_idx = extra_family.content_columns()[0]
        y_header = source.headers[y_idx]
        t2 = conditions[2][2]
        y_members = extra_family.members_for_rows(source, rows)
        y_nodes, y_top = _scan_or_union("y", y_members)
        nodes.extend(y_nodes)
        nodes.append(
            {
                "id": "y_filter",
                "op": "filter",
                "inputs": [y_top],
                "predicate": {"op": ">", "col": y_header, "value": t2},
            }
        )
        nodes.append(
            {
                "id": "join2",
                "op": "join",
                "inputs": ["join1", "y_filter"],
                "keys": [[serial_header, serial_header]],
                "mode": "exact",
            }
        )
        top = "join2"
        footprint_cols.add(y_idx)

    if template in ("union_count", "join_count", "three_table"):
        nodes.append(
            {"id": "agg", "op": "aggregate", "inputs": [top], "function": "count"}
        )
        gold = len(rows)
    elif template == "join_sum":
        nodes.append(
            {
                "id": "agg",
                "op": "aggregate",
                "inputs": [top],
                "function": "sum",
                "column": x_header,
            }
        )
        gold = sum(float(source.columns[x_idx][r]) for r in rows)
    else:  # join_avg
        nodes.append(
            {
                "id": "agg",
                "op": "aggregate",
                "inputs": [top],
                "function": "avg",
                "column": x_header,
            }
        )
        gold = sum(float(source.columns[x_idx][r]) for r in rows) / len(rows)

    t_text = canonical_value(t)
    if template == "three_table":
        y_header = source.headers[conditions[2][0]]
        t2_text = canonical_value(conditions[2][2])
        question = (
            f"How many {entity} in the {v} {f_header} have a {x_header} over "
            f"{t_text} and a {y_header} over {t2_text}?"
        )
    elif template == "join_sum":
        question = (
            f"What is the total {x_header} of {entity} in the {v} {f_header} "
            f"with a {x_header} over {t_text}?"
            if lexical
            else f"What is the combined tally of {entity} around {v} past {t_text}?"
        )
    elif template == "join_avg":
        question = (
            f"What is the average {x_header} of {entity} in the {v} {f_header} "
            f"with a {x_header} over {t_text}?"
        )
    else:
        question = (
            f"How many {entity} in the {v} {f_header} have a {x_header} over {t_text}?"
            if lexical
            else f"How many {entity} around {v} clear a tally of {t_text}?"
        )

    plan = _plan(nodes, "agg")
    return _finish(
        qid, question, gold, plan, footprint_cols, rows, source, decomposed,
        sources, lexical, template,
    )


def _finish(
    qid: str,
    question: str,
    gold,
    plan: dict,
    footprint_cols: set[int],
    rows: set[int],
    source: Table,
    decomposed: Corpus,
    sources: dict[str, Table],
    lexical: bool,
    template: str,
) -> Optional[dict]:
    footprint = GoldFootprint()
    footprint.add(source.id, {c for c in footprint_cols if c is not None}, rows)
    try:
        relevant = annotate_relevant_tables(footprint, decomposed, sources)
    except ValueError:
        return None
    plan_tables = set()
    for node in plan["nodes"]:
        if node["op"] == "scan":
            plan_tables.add(node["table"])
        elif node["op"] == "union_cluster":
            plan_tables.update(node["tables"])
    if not plan_tables <= set(decomposed.ids()):
        return None
    return {
        "id": qid,
        "question": question,
        "gold_answer": gold,
        "relevant_tables": sorted(relevant),
        "gold_plan": plan,
        "footprint": footprint.to_json(),
        "lexically_recoverable": lexical,
        "template": template,
        "source": source.id,
    }
