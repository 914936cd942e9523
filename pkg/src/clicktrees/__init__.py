"""Click-stream sessionization with referrer trees, traffic statistics and heavy-tail fitting."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ArgumentError,
    ClickTreesError,
    DegenerateSampleError,
    InsufficientDataError,
    InvalidUrlError,
    OrderError,
    ParseError,
)
from .ingest import ClickRecord, Url, UserStream, normalize_url, parse_line  # noqa: E402
from .session import SessionMetrics, SessionTree, logical_sessions, tree_metrics  # noqa: E402

__all__ = [
    "ArgumentError", "ClickTreesError", "DegenerateSampleError", "InsufficientDataError",
    "InvalidUrlError", "OrderError", "ParseError", "ClickRecord", "Url", "UserStream",
    "normalize_url", "parse_line", "SessionMetrics", "SessionTree", "logical_sessions",
    "tree_metrics",
]
