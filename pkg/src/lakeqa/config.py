"""Application configuration: one JSON file, flags override fields.

Unknown keys are rejected so typos fail loudly instead of silently using
defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional


@dataclass
class ThresholdSettings:
    tau_u: float = 0.9
    tau_j: float = 0.5


@dataclass
class RetrievalSettings:
    k: int = 5
    coarse_depth: int = 20
    match_depth: int = 30
    candidates: int = 10
    probes: int = 1000
    scored_groups: int = 20
    gap_threshold: float = 0.5


@dataclass
class ReasonerSettings:
    fuzzy_delta: float = 0.2
    max_retries: int = 3


@dataclass
class ProviderSettings:
    mode: str = "deterministic"
    endpoint: str = ""
    model: str = "offline"
    timeout: float = 30.0
    max_retries: int = 2
    dim: int = 256
    fixtures_path: Optional[str] = None


@dataclass
class AppConfig:
    corpus_dir: str = "corpus"
    graph_file: str = "graph.json"
    scorer_file: Optional[str] = None
    thresholds: ThresholdSettings = field(default_factory=ThresholdSettings)
    retrieval: RetrievalSettings = field(default_factory=RetrievalSettings)
    reasoner: ReasonerSettings = field(default_factory=ReasonerSettings)
    embedding: ProviderSettings = field(default_factory=ProviderSettings)
    chat: ProviderSettings = field(default_factory=ProviderSettings)
    seed: int = 0
    workers: int = 1

    def to_json(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "thresholds": ThresholdSettings,
    "retrieval": RetrievalSettings,
    "reasoner": ReasonerSettings,
    "embedding": ProviderSettings,
    "chat": ProviderSettings,
}


def _apply(target, data: dict, path: str) -> None:
    known = {f.name for f in fields(target)}
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown config key {path}{key!r}")
        if key in _SECTIONS and isinstance(value, dict):
            _apply(getattr(target, key), value, f"{path}{key}.")
        else:
            setattr(target, key, value)


def load_config(path: Optional[str | Path] = None) -> AppConfig:
    cfg = AppConfig()
    if path is None:
        return cfg
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    _apply(cfg, data, "")
    return cfg
