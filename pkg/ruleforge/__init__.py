"""Offline-first malicious package rule generation."""

__version__ = "0.3.0"
