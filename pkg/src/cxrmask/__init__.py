"""Unpaired image translation with adaptive activation masks.

Generators emit a synthesized image plus an activation mask that decides,
per pixel, whether to keep the source or use the synthesized content.  The
mask is shaped by coverage/repulsion penalties and a bidirectional
minimisation loss, and translations are aligned against a frozen classifier
prior at feature and label level.
"""

from cxrmask.errors import (
    ConfigError,
    CxrMaskError,
    DataIOError,
    InvalidArgumentError,
    NumericError,
    ShapeError,
    UndefinedMetricError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CxrMaskError",
    "DataIOError",
    "InvalidArgumentError",
    "NumericError",
    "ShapeError",
    "UndefinedMetricError",
]
