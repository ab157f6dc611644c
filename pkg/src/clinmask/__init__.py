"""Toolkit for building masked-value multiple-choice questions from tabular
clinical data, training a small policy on them with group-relative updates,
and scoring external language models on them by forced choice."""

__version__ = "0.1.0"
