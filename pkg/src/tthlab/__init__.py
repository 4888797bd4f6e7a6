"""Desk-scale lab for keyword-targeted Trojan-horse patches on text-to-image retrieval."""

__version__ = "0.1.0"
