"""Benchmark lake synthesis: decomposition, masking, perturbation,
external augmentation, and relevant-table annotation."""

from .annotate import GoldFootprint, annotate_relevant_tables
from .bm25 import BM25Index
from .pipeline import (
    PerturbationConfig,
    augment_external,
    generate_lake,
    mask_metadata,
    perturb_join_values,
    split_columns,
    split_rows,
    verify_reconstruction,
)
from .synth import make_external_pool, make_seed_database

__all__ = [
    "BM25Index",
    "GoldFootprint",
    "PerturbationConfig",
    "annotate_relevant_tables",
    "augment_external",
    "generate_lake",
    "make_external_pool",
    "make_seed_database",
    "mask_metadata",
    "perturb_join_values",
    "split_columns",
    "split_rows",
    "verify_reconstruction",
]
