"""Auditable search engine for time-series model selection and refinement.

The engine runs a two-stage search: case-based model pre-selection, then a
two-phase round-robin refinement loop with accept/reject incumbents.  Every
decision, rationale, and result is appended to a hash-chained audit log.
"""

__version__ = "0.1.0"
