"""Vocabulary-expandable masked language modeling for knowledge base construction."""

__version__ = "0.1.0"
