"""Attack and defense simulation for time-modulated-array OFDM scrambling."""

from .constellation import BPSK, QPSK, Constellation
from .errors import (
    CollapsedUnmixingError,
    DefyError,
    DegenerateCovarianceError,
    InvalidParamsError,
    IrreducibleAmbiguityError,
    NewtonDenominatorError,
    NullDiagonalError,
    PhaseAmbiguityError,
    TmaSecError,
)
from .ica import IcaOptions, IcaResult, cmica
from .preprocess import center_and_whiten
from .resolver import ResolvedAttack, ResolverOptions, defy
from .tma import Geometry, MixingMatrix, NoiseModel, TmaParams, mixing_matrix, transmit_frames

__version__ = "0.1.0"

__all__ = [
    "BPSK", "QPSK", "Constellation", "Geometry", "MixingMatrix", "NoiseModel", "TmaParams",
    "mixing_matrix", "transmit_frames", "center_and_whiten", "cmica", "IcaOptions", "IcaResult",
    "defy", "ResolverOptions", "ResolvedAttack", "TmaSecError", "InvalidParamsError",
    "DegenerateCovarianceError", "NewtonDenominatorError", "CollapsedUnmixingError",
    "NullDiagonalError", "PhaseAmbiguityError", "IrreducibleAmbiguityError", "DefyError",
]
