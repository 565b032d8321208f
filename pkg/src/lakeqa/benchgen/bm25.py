"""Okapi BM25 over short documents (table names and titles)."""

from __future__ import annotations

import math
import re
from collections import Counter

_TOKEN_RE = re.compile(r"[A-Za-z0-9]+")


def tokenize(text: str) -> list[str]:
    return [t.casefold() for t in _TOKEN_RE.findall(text)]


class BM25Index:
    def __init__(self, k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self.doc_ids: list[str] = []
        self.doc_tokens: list[Counter] = []
        self.doc_lengths: list[int] = []
        self.df: Counter = Counter()
        self.avg_len = 0.0

    def add(self, doc_id: str, text: str) -> None:
        tokens = tokenize(text)
        counts = Counter(tokens)
        self.doc_ids.append(doc_id)
        self.doc_tokens.append(counts)
        self.doc_lengths.append(len(tokens))
        for term in counts:
            self.df[term] += 1
        self.avg_len = sum(self.doc_lengths) / len(self.doc_lengths)

    def __len__(self) -> int:
        return len(self.doc_ids)

    def _idf(self, term: str) -> float:
        n = len(self.doc_ids)
        df = self.df.get(term, 0)
        return math.log((n - df + 0.5) / (df + 0.5) + 1.0)

    def search(self, query: str, top_n: int) -> list[tuple[str, float]]:
        if not self.doc_ids or top_n <= 0:
            return []
        terms = tokenize(query)
        scores = [0.0] * len(self.doc_ids)
        for term in set(terms):
            idf = self._idf(term)
            for i, counts in enumerate(self.doc_tokens):
                tf = counts.get(term, 0)
                if tf == 0:
                    continue
                denom = tf + self.k1 * (
                    1 - self.b + self.b * self.doc_lengths[i] / self.avg_len
                )
                scores[i] += idf * tf * (self.k1 + 1) / denom
        order = sorted(
            range(len(self.doc_ids)),
            key=lambda i: (-scores[i], self.doc_ids[i]),
        )
        return [
            (self.doc_ids[i], scores[i]) for i in order[:top_n] if scores[i] > 0
        ]
