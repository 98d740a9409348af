"""Dialectic retrieval-augmented generation toolkit.

Multilingual dense retrieval over an exact dot-score index, four-stage
dialectic prompting with structured output parsing, teacher/judge annotation
of training demonstrations, and a deterministic evaluation and robustness
harness with a report path that emits tables and figures.
"""

__version__ = "0.1.0"
