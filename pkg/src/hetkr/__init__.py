"""Instruction-aware dense retrieval over heterogeneous (text, KG, table, infobox) evidence."""

__version__ = "0.1.0"
