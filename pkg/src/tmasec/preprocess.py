"""Centering and PCA whitening of received OFDM frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCovarianceError

#: smallest/largest covariance eigenvalue ratio accepted before whitening
DEGENERACY_RATIO = 1e-12


@dataclass
class WhiteningResult:
    A: np.ndarray  # K x K whitening matrix
    mean: np.ndarray  # length-K centering vector
    whitened: np.ndarray  # H x K
    eigenvalues: np.ndarray


def center_and_whiten(x) -> WhiteningResult:
    """Subtract the sample mean and whiten with ``A = D^(-1/2) E^H``.

    ``x`` holds one frame per row (H x K). The sample covariance
    ``E D E^H`` is eigendecomposed; the whitened frames ``(x - mean) A^T``
    have identity sample covariance. Works for real input as well.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError("expected an H x K array of frames")
    H, K = x.shape
    if H < K:
        raise ValueError(f"need at least K={K} frames to whiten, got {H}")
    mean = x.mean(axis=0)
    xc = x - mean
    C = xc.T @ xc.conj() / H  # E{y y^H}
    C = (C + C.conj().T) / 2
    d, E = np.linalg.eigh(C)
    if d[-1] <= 0 or d[0] < DEGENERACY_RATIO * d[-1]:
        raise DegenerateCovarianceError(
            f"degenerate sample covariance (eigenvalue ratio {d[0] / d[-1] if d[-1] > 0 else 0:.3e})"
        )
    A = (E / np.sqrt(d)).conj().T
    return WhiteningResult(A=A, mean=mean, whitened=xc @ A.T, eigenvalues=d)
