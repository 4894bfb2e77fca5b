"""Bridge between PyTorch checkpoints and the ACET v1 tensor container."""

from .acet import AcetError, read_acet, write_acet
from .convert import (
    ConversionSummary,
    MapError,
    NameMap,
    export_to_acet,
    import_from_acet,
)

__version__ = "0.1.0"
