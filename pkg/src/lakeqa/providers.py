"""Embedding, chat-completion, and phrase-chunking backends.

Each capability ships a deterministic offline implementation and an HTTP
client behind the same contract. Deterministic backends are pure functions
of their input so pipeline runs replay byte-identically; HTTP backends
speak small JSON protocols compatible with common gateways:

    embeddings:  POST {"texts": [...]}                  -> {"vectors": [[...]]}
    chat:        POST {"model": ..., "messages": [...]} -> {"content": ...}

All providers are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import requests

MAX_TEXT_CHARS = 8192  # longer inputs are truncated before embedding


class ProviderError(Exception):
    """Base class for provider failures."""


class RetryableProviderError(ProviderError):
    """Transport-level failure; the call may be retried."""


class FatalProviderError(ProviderError):
    """Contract violation (e.g. dimension mismatch); retrying cannot help."""


class UnscriptedPromptError(ProviderError):
    """Deterministic chat received a prompt with no fixture or responder."""

    def __init__(self, prompt_hash: str, prompt_head: str):
        self.prompt_hash = prompt_hash
        super().__init__(
            f"unscripted prompt (hash {prompt_hash}): {prompt_head!r}"
        )


@dataclass(frozen=True)
class ProviderConfig:
    """Connection and behaviour settings shared by all provider kinds."""

    mode: str = "deterministic"  # "deterministic" | "http"
    endpoint: str = ""
    model: str = "offline"
    timeout: float = 30.0
    max_retries: int = 2
    dim: int = 256
    fixtures_path: Optional[str] = None

    def __post_init__(self):
        if self.mode not in ("deterministic", "http"):
            raise ValueError(f"unknown provider mode {self.mode!r}")
        if self.mode == "http" and not self.endpoint:
            raise ValueError("http mode requires a non-empty endpoint")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.dim < 64:
            raise ValueError("embedding dimension must be >= 64")

    @classmethod
    def from_env(cls, prefix: str = "LAKEQA") -> "ProviderConfig":
        """Build an http config from environment variables, if set."""
        endpoint = os.environ.get(f"{prefix}_ENDPOINT", "")
        if not endpoint:
            return cls()
        return cls(
            mode="http",
            endpoint=endpoint,
            model=os.environ.get(f"{prefix}_MODEL", "default"),
            timeout=float(os.environ.get(f"{prefix}_TIMEOUT", "30")),
            max_retries=int(os.environ.get(f"{prefix}_MAX_RETRIES", "2")),
        )


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


class Embedder(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


def _stable_hash(data: str) -> int:
    digest = hashlib.blake2b(data.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


class DeterministicEmbedder:
    """Lexical + subword embedding with no model dependency.

    Feature-hashes word term frequencies and per-word character 3-grams
    into a fixed number of signed buckets, then L2-normalizes. Equal texts
    always produce byte-identical vectors; the empty text maps to the zero
    vector.
    """

    _WORD_WEIGHT = 2.0
    _GRAM_WEIGHT = 1.0

    def __init__(self, dim: int = 256):
        if dim < 64:
            raise ValueError("embedding dimension must be >= 64")
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def _bucket(self, feature: str) -> tuple[int, float]:
        h = _stable_hash(feature)
        sign = 1.0 if (h >> 60) & 1 else -1.0
        return h % self.dim, sign

    def _vector(self, text: str) -> np.ndarray:
        words = text[:MAX_TEXT_CHARS].casefold().split()
        vec = np.zeros(self.dim, dtype=np.float64)
        if not words:
            return vec
        for word in words:
            idx, sign = self._bucket("w\x1f" + word)
            vec[idx] += sign * self._WORD_WEIGHT
            padded = "#" + word + "#"
            for i in range(len(padded) - 2):
                idx, sign = self._bucket("g\x1f" + padded[i : i + 3])
                vec[idx] += sign * self._GRAM_WEIGHT
        norm = float(np.linalg.norm(vec))
        if norm > 0:
            vec /= norm
        return vec

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            raise ValueError("embed requires at least one text")
        out = np.empty((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            cached = self._cache.get(text)
            if cached is None:
                cached = self._vector(text)
                if len(self._cache) < 500_000:
                    self._cache[text] = cached
            out[i] = cached
        return out


class HttpEmbedder:
    """Embedding client for the JSON-over-HTTP protocol above."""

    def __init__(self, cfg: ProviderConfig):
        if cfg.mode != "http":
            raise ValueError("HttpEmbedder requires an http-mode config")
        self.cfg = cfg
        self.dim = cfg.dim
        self._session = requests.Session()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            raise ValueError("embed requires at least one text")
        payload = {"texts": [t[:MAX_TEXT_CHARS] for t in texts]}
        body = _post_with_retries(
            self._session, self.cfg, self.cfg.endpoint, payload
        )
        vectors = body.get("vectors")
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise FatalProviderError("embedding response arity mismatch")
        arr = np.asarray(vectors, dtype=np.float64)
        if arr.ndim != 2 or len({len(v) for v in vectors}) != 1:
            raise FatalProviderError("embedding dimension mismatch in batch")
        return arr


def make_embedder(cfg: Optional[ProviderConfig] = None) -> Embedder:
    cfg = cfg or ProviderConfig()
    if cfg.mode == "http":
        return HttpEmbedder(cfg)
    return DeterministicEmbedder(dim=cfg.dim)


def embed_texts(texts: Sequence[str], cfg: Optional[ProviderConfig] = None) -> list[np.ndarray]:
    """One vector per input text, same order."""
    mat = make_embedder(cfg).embed(texts)
    return [mat[i] for i in range(mat.shape[0])]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; zero vectors yield 0."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# ---------------------------------------------------------------------------
# Chat completion
# ---------------------------------------------------------------------------


def normalize_prompt(prompt: str) -> str:
    return " ".join(prompt.split())


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(normalize_prompt(prompt).encode("utf-8")).hexdigest()


class ChatProvider(Protocol):
    def complete(self, prompt: str) -> str: ...


Responder = Callable[[str], Optional[str]]


class ScriptedChatProvider:
    """Replays fixture responses keyed by a normalized prompt hash.

    Fixtures are a JSON array of {"prompt_hash", "response"} records.
    Rule-based responders can be registered as fallbacks; a prompt with no
    fixture and no responder answer raises UnscriptedPromptError rather
    than fabricating output.
    """

    def __init__(
        self,
        fixtures: Optional[dict[str, str]] = None,
        responders: Optional[list[Responder]] = None,
    ):
        self._fixtures = dict(fixtures or {})
        self._responders = list(responders or [])

    @classmethod
    def from_file(cls, path: str) -> "ScriptedChatProvider":
        with open(path, "r", encoding="utf-8") as fh:
            records = json.load(fh)
        fixtures = {rec["prompt_hash"]: rec["response"] for rec in records}
        return cls(fixtures)

    def add_fixture(self, prompt: str, response: str) -> None:
        self._fixtures[prompt_hash(prompt)] = response

    def add_responder(self, responder: Responder) -> None:
        self._responders.append(responder)

    def complete(self, prompt: str) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        key = prompt_hash(prompt)
        if key in self._fixtures:
            return self._fixtures[key]
        for responder in self._responders:
            answer = responder(prompt)
            if answer is not None:
                return answer
        raise UnscriptedPromptError(key, normalize_prompt(prompt)[:120])


class HttpChatProvider:
    """Chat client; retries non-2xx and transport failures up to max_retries."""

    def __init__(self, cfg: ProviderConfig):
        if cfg.mode != "http":
            raise ValueError("HttpChatProvider requires an http-mode config")
        self.cfg = cfg
        self._session = requests.Session()

    def complete(self, prompt: str) -> str:
        if not prompt:
            raise ValueError("prompt must be non-empty")
        payload = {
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
        }
        body = _post_with_retries(
            self._session, self.cfg, self.cfg.endpoint, payload
        )
        content = body.get("content")
        if not isinstance(content, str):
            raise FatalProviderError("chat response missing 'content'")
        return content


def make_chat_provider(cfg: Optional[ProviderConfig] = None) -> ChatProvider:
    cfg = cfg or ProviderConfig()
    if cfg.mode == "http":
        return HttpChatProvider(cfg)
    if cfg.fixtures_path:
        return ScriptedChatProvider.from_file(cfg.fixtures_path)
    return ScriptedChatProvider()


def chat_complete(exchange_prompt: str, cfg: Optional[ProviderConfig] = None) -> str:
    return make_chat_provider(cfg).complete(exchange_prompt)


def _post_with_retries(session, cfg: ProviderConfig, url: str, payload: dict) -> dict:
    last_error: Optional[Exception] = None
    for _ in range(cfg.max_retries + 1):
        try:
            resp = session.post(url, json=payload, timeout=cfg.timeout)
        except requests.RequestException as exc:
            last_error = exc
            continue
        if 200 <= resp.status_code < 300:
            try:
                return resp.json()
            except ValueError as exc:
                raise FatalProviderError(f"non-JSON response from {url}") from exc
        last_error = RetryableProviderError(
            f"HTTP {resp.status_code} from {url}"
        )
    raise RetryableProviderError(
        f"request to {url} failed after {cfg.max_retries + 1} attempts"
    ) from last_error


# ---------------------------------------------------------------------------
# Phrase chunking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Phrase:
    text: str
    kind: str  # "noun" | "adjective" | "verb"
    start: int
    end: int

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


class Chunker(Protocol):
    def chunk(self, sentence: str) -> list[Phrase]: ...


_TOKEN_RE = re.compile(r"[A-Za-z0-9]+(?:[-'][A-Za-z0-9]+)*")
_NUMBER_RE = re.compile(r"^\d+(\.\d+)?$")

_DETERMINERS = {
    "a", "an", "the", "this", "that", "these", "those", "its", "their",
    "his", "her", "our", "your", "my", "each", "every", "all", "any",
    "some", "no", "both", "either", "neither", "such",
}
_WH_AUX = {
    "how", "many", "much", "what", "which", "who", "whom", "whose", "when",
    "where", "why", "is", "are", "was", "were", "am", "be", "been", "being",
    "do", "does", "did", "done", "have", "has", "had", "having", "can",
    "could", "will", "would", "shall", "should", "may", "might", "must",
    "there", "not", "it", "they", "them",
}
_PREPOSITIONS = {
    "of", "in", "on", "at", "by", "for", "with", "from", "to", "into",
    "onto", "among", "amongst", "between", "during", "within", "without",
    "about", "as", "via", "through",
}
_COMPARATIVE_PREPS = {
    "over", "under", "above", "below", "after", "before", "since", "until",
    "beyond", "exceeding", "per",
}
_CONJUNCTIONS = {"and", "or", "but", "nor", "so", "yet"}
_AGGREGATES = {
    "average", "mean", "total", "sum", "count", "number", "maximum",
    "minimum", "median", "highest", "lowest", "most", "least", "top",
    "overall", "fewest",
}
_COMPARATIVE_HEADS = {
    "more", "less", "greater", "fewer", "higher", "lower", "older",
    "younger", "larger", "smaller",
}
_NOT_PARTICIPLES = {
    "need", "seed", "speed", "breed", "feed", "deed", "bed", "red", "wed",
    "hundred", "united",
}


def _tag(token: str) -> str:
    low = token.casefold()
    if _NUMBER_RE.match(token):
        return "number"
    if low in _DETERMINERS:
        return "det"
    if low in _WH_AUX:
        return "stop"
    if low in _COMPARATIVE_PREPS:
        return "compprep"
    if low in _PREPOSITIONS:
        return "prep"
    if low in _CONJUNCTIONS:
        return "conj"
    if low in _AGGREGATES:
        return "agg"
    if low in _COMPARATIVE_HEADS:
        return "comphead"
    last = low.rsplit("-", 1)[-1]
    if last.endswith("ly") and len(last) > 3:
        return "adverb"
    if last.endswith("ed") and len(last) > 3 and last not in _NOT_PARTICIPLES:
        return "participle"
    return "noun"


class RulePhraseChunker:
    """Rule-based phrase chunker for interrogative English.

    A small lexicon tags determiners, interrogatives, prepositions, and
    comparatives; maximal runs of content tokens become noun phrases,
    comparative tails ("over 560", "more than 3") extend the preceding run
    into a condition phrase, and adverb + participle runs become verb
    phrases. Worst case the whole sentence is returned as one noun phrase.
    """

    def chunk(self, sentence: str) -> list[Phrase]:
        if not sentence:
            raise ValueError("sentence must be non-empty")
        tokens = [
            (m.group(0), m.start(), m.end())
            for m in _TOKEN_RE.finditer(sentence)
        ]
        tags = [_tag(text) for text, _, _ in tokens]
        phrases: list[Phrase] = []
        i = 0
        n = len(tokens)

        def emit(first: int, last: int, kind: str) -> None:
            start = tokens[first][1]
            end = tokens[last][2]
            phrases.append(Phrase(sentence[start:end], kind, start, end))

        def comparative_tail(pos: int) -> int:
            """Index one past a comparative tail starting at pos, or pos."""
            if pos < n and tags[pos] == "compprep" and pos + 1 < n and tags[pos + 1] == "number":
                return pos + 2
            if (
                pos + 2 < n
                and tags[pos] == "comphead"
                and tokens[pos + 1][0].casefold() == "than"
                and tags[pos + 2] == "number"
            ):
                return pos + 3
            if (
                pos + 2 < n
                and tokens[pos][0].casefold() == "at"
                and tokens[pos + 1][0].casefold() in ("least", "most")
                and tags[pos + 2] == "number"
            ):
                return pos + 3
            return pos

        while i < n:
            tag = tags[i]
            if tag == "adverb":
                if i + 1 < n and tags[i + 1] == "participle":
                    j = i + 1
                    while j + 1 < n and tags[j + 1] == "participle":
                        j += 1
                    emit(i, j, "verb")
                    i = j + 1
                else:
                    i += 1
                continue
            if tag == "participle" and not (
                i + 1 < n and tags[i + 1] in ("noun", "number")
            ):
                j = i
                while j + 1 < n and tags[j + 1] == "participle":
                    j += 1
                tail = comparative_tail(j + 1)
                emit(i, tail - 1 if tail > j + 1 else j, "verb")
                i = max(tail, j + 1)
                continue
            if tag in ("noun", "number") or (
                tag == "participle" and i + 1 < n and tags[i + 1] in ("noun", "number")
            ):
                j = i
                while j + 1 < n and (
                    tags[j + 1] in ("noun", "number")
                    or (
                        tags[j + 1] == "participle"
                        and j + 2 < n
                        and tags[j + 2] in ("noun", "number")
                    )
                ):
                    j += 1
                tail = comparative_tail(j + 1)
                if tail > j + 1:
                    emit(i, tail - 1, "adjective")
                    i = tail
                else:
                    emit(i, j, "noun")
                    i = j + 1
                continue
            i += 1

        if not phrases:
            stripped = sentence.strip()
            start = sentence.index(stripped) if stripped else 0
            end = start + len(stripped) if stripped else len(sentence)
            phrases = [Phrase(sentence[start:end], "noun", start, end)]
        return phrases


def chunk_phrases(sentence: str) -> list[Phrase]:
    """Split a sentence into non-overlapping content phrases."""
    return RulePhraseChunker().chunk(sentence)


@dataclass
class ChatExchange:
    """One prompt/response round; exactly one of response/error is set."""

    prompt: str
    response: Optional[str] = None
    error: Optional[str] = None

    def complete_with(self, provider: ChatProvider) -> "ChatExchange":
        try:
            self.response = provider.complete(self.prompt)
            self.error = None
        except ProviderError as exc:
            self.response = None
            self.error = str(exc)
        return self
