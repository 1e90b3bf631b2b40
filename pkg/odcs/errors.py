"""Exception types raised by odcs.

Every error carries a short ``code`` used by the CLI for its single-line
``error: <code>: <message>`` report.
"""

from typing import Optional


class OdcsError(Exception):
    """Base class for all odcs errors"""

    code = "odcs"


class DimensionError(OdcsError, ValueError):
    """Tensor shapes do not conform"""

    code = "dimension"


class DegenerateStatisticsError(DimensionError):
    """Train-mode batch norm asked to normalize fewer than two values per channel"""

    code = "degenerate-statistics"


class ContractError(OdcsError, ValueError):
    """A caller broke an operation's pre-condition"""

    code = "contract"


class NonFiniteError(OdcsError, FloatingPointError):
    """NaN or Inf produced by an operation or a training loss"""

    code = "non-finite"

    def __init__(self, op: str, message: Optional[str] = None):
        self.op = op
        super().__init__(message or f"non-finite values produced by {op}")


class RasterParseError(OdcsError, ValueError):
    """Malformed PPM/PGM file"""

    code = "raster-parse"

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class ManifestError(OdcsError, ValueError):
    code = "manifest"


class RoiError(OdcsError, ValueError):
    code = "roi"


class UndefinedCDRError(OdcsError, ValueError):
    """Cup-to-disc ratio requested for a mask without a disc region"""

    code = "undefined-cdr"


class ConfigError(OdcsError, ValueError):
    code = "config"


class CheckpointError(OdcsError, ValueError):
    code = "checkpoint"
