"""Multi-table numerical question answering over CSV table lakes."""

__version__ = "0.1.0"
