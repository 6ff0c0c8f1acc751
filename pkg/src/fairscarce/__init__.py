"""Fair classification under partially observed sensitive attributes.

Phase 1 trains an uncertainty-aware attribute classifier (student-teacher
self-ensembling with MC-dropout entropy); phase 2 trains the label classifier
with exponentiated-gradient fairness constraints applied only to rows whose
proxy attribute is reliable.
"""

__version__ = "0.1.0"

from .errors import FairscarceError  # noqa: F401
