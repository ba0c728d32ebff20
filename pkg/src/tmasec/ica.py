"""Two-stage constant-modulus ICA.

Stage 1 runs approximate-Newton updates on every unmixing column followed by
symmetric decorrelation. Stage 2 drops the decorrelation and refines each
column on its own with a backtracking gradient step. Columns are stored in
``W`` and the separated outputs are ``W^H y_white``.

For real-valued constellations (BPSK) any contrast of ``|w^H y|^2`` is flat
along quadrature pairs ``a s1 + j b s2`` (they are constant-modulus too), so
an extra refinement projects the outputs onto the real line through the
pseudo-covariance and reruns both stages on the real data.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import sqrtm

from .constellation import Constellation
from .errors import CollapsedUnmixingError, NewtonDenominatorError
from .preprocess import WhiteningResult, center_and_whiten

log = logging.getLogger(__name__)

DENOMINATOR_EPS = 1e-12


@dataclass(frozen=True)
class Contrast:
    """Smooth contrast ``G(v)`` of ``v = |w^H y|^2`` with its derivatives."""

    name: str

    def G(self, v):
        if self.name == "kurtosis":
            return 0.5 * v * v
        return -np.exp(-v / 2)

    def g(self, v):
        if self.name == "kurtosis":
            return v
        return 0.5 * np.exp(-v / 2)

    def gp(self, v):
        if self.name == "kurtosis":
            return np.ones_like(v)
        return -0.25 * np.exp(-v / 2)

    def gaussian_value(self, real: bool = False) -> float:
        """``E{G(|x|^2)}`` for a unit-variance Gaussian (circular complex or real)."""
        if self.name == "kurtosis":
            return 1.5 if real else 1.0
        return -1 / np.sqrt(2) if real else -2 / 3

    def convergence_condition(self, moduli) -> float:
        """``E{g(|s|^2) + |s|^2 g'(|s|^2) - |s|^2 g(|s|^2)}`` over source moduli."""
        v = np.asarray(moduli, dtype=float) ** 2
        return float(np.mean(self.g(v) + v * self.gp(v) - v * self.g(v)))


KURTOSIS = Contrast("kurtosis")
NEGENTROPY = Contrast("negentropy")
CONTRASTS = {"kurtosis": KURTOSIS, "negentropy": NEGENTROPY}


def get_contrast(c) -> Contrast:
    if isinstance(c, Contrast):
        return c
    try:
        return CONTRASTS[str(c).lower()]
    except KeyError:
        raise ValueError(f"unknown contrast {c!r}") from None


def orientation_for(contrast: Contrast, constellation: Constellation | None = None) -> int:
    """+1 when sources maximize ``E{G}``, -1 when they minimize it.

    Sources are local maxima when the convergence condition is negative.
    """
    moduli = np.abs(constellation.points) if constellation is not None else [1.0]
    kappa = contrast.convergence_condition(moduli)
    if kappa >= 0:
        log.info("convergence condition %.4g >= 0 for %s: descending the contrast", kappa, contrast.name)
    return 1 if kappa < 0 else -1


@dataclass
class IcaOptions:
    contrast: Contrast | str = "kurtosis"
    max_iter_stage1: int = 200
    max_iter_stage2: int = 500
    tol: float = 1e-6
    mu: float = 0.1
    mu_min: float = 1e-7
    seed: int | None = None
    stage2: bool = True
    real_sources: bool = False
    orientation: int | None = None
    collapse_threshold: float = 0.5

    def __post_init__(self):
        self.contrast = get_contrast(self.contrast)
        if self.tol <= 0 or self.mu <= 0:
            raise ValueError("tol and mu must be positive")
        if self.max_iter_stage1 < 1 or self.max_iter_stage2 < 0:
            raise ValueError("iteration caps must be positive")


@dataclass
class TraceEntry:
    stage: str
    iteration: int
    total: float


@dataclass
class IcaResult:
    whitening: WhiteningResult
    W: np.ndarray  # outputs are W^H y_white
    trace: list[TraceEntry] = field(default_factory=list)
    converged: dict = field(default_factory=dict)
    iterations: dict = field(default_factory=dict)
    reverted: list = field(default_factory=list)

    @property
    def unmixing(self) -> np.ndarray:
        """K x K map from centered received frames to source estimates."""
        return self.W.conj().T @ self.whitening.A

    @property
    def mixing_estimate(self) -> np.ndarray:
        """Candidate mixing matrix ``F = (W^H A)^-1``."""
        return np.linalg.inv(self.unmixing)

    def sources(self, y) -> np.ndarray:
        """Separated outputs for frames ``y`` (H x K)."""
        return (np.asarray(y) - self.whitening.mean) @ self.unmixing.T

    def stage_totals(self, stage: str) -> list[float]:
        return [t.total for t in self.trace if t.stage == stage]


# -- single-column operations, frames laid out H x K ------------------------


def _proj(w, Y):
    return Y @ np.conj(w)  # w^H y per frame


def nongaussianity(w, y_white, c=KURTOSIS) -> float:
    """Sample mean of ``G(|w^H y|^2)`` over the frames."""
    c = get_contrast(c)
    w = np.asarray(w)
    nrm = np.linalg.norm(w)
    if nrm > 0 and abs(nrm - 1) > 1e-6:
        warnings.warn(f"unmixing vector has norm {nrm:.6g}, expected 1", RuntimeWarning, stacklevel=2)
    v = np.abs(_proj(w, np.asarray(y_white))) ** 2
    return float(np.mean(c.G(v)))


def lambda_estimate(w, y_white, c=KURTOSIS) -> float:
    """Lagrange multiplier estimate ``E{|w^H y|^2 g(|w^H y|^2)}``."""
    c = get_contrast(c)
    v = np.abs(_proj(np.asarray(w), np.asarray(y_white))) ** 2
    return float(np.mean(v * c.g(v)))


def lagrangian_gradient(w, y_white, c=KURTOSIS) -> np.ndarray:
    """``E{y (w^H y)^* g(|w^H y|^2)} - lambda w`` (half the real-coordinate gradient)."""
    c = get_contrast(c)
    Y = np.asarray(y_white)
    w = np.asarray(w)
    u = _proj(w, Y)
    v = np.abs(u) ** 2
    lam = np.mean(v * c.g(v))
    return (Y.T @ (np.conj(u) * c.g(v))) / Y.shape[0] - lam * w


def newton_update(w, y_white, c=KURTOSIS) -> np.ndarray:
    """One approximate-Newton step for a single column (not normalized)."""
    c = get_contrast(c)
    Y = np.asarray(y_white)
    w = np.asarray(w)
    u = _proj(w, Y)
    v = np.abs(u) ** 2
    gv = c.g(v)
    lam = np.mean(v * gv)
    num = (Y.T @ (np.conj(u) * gv)) / Y.shape[0] - lam * w
    den = np.mean(gv + 2 * v * c.gp(v)) - lam
    if abs(den) < DENOMINATOR_EPS:
        raise NewtonDenominatorError("Newton denominator vanishes")
    return w - num / den


def symmetric_decorrelate(W) -> np.ndarray:
    """``W (W^H W)^(-1/2)`` through the eigendecomposition of ``W^H W``."""
    W = np.asarray(W)
    C = W.conj().T @ W
    C = (C + C.conj().T) / 2
    d, E = np.linalg.eigh(C)
    if d[0] <= 1e-12 * max(d[-1], 1e-300):
        raise CollapsedUnmixingError("collapsed unmixing columns")
    return W @ ((E / np.sqrt(d)) @ E.conj().T)


def gradient_update(w, y_white, c=KURTOSIS, mu=0.1, orientation=1) -> np.ndarray:
    """Normalized gradient step ``w + orientation * mu * grad``."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    w2 = np.asarray(w) + orientation * mu * lagrangian_gradient(w, y_white, c)
    nrm = np.linalg.norm(w2)
    if nrm == 0:
        raise ArithmeticError("zero vector after gradient update")
    return w2 / nrm


# -- whole-matrix kernels, data laid out K x H ------------------------------


def _stats(W, Z, c):
    U = W.conj().T @ Z  # outputs, one row per column of W
    v = np.abs(U) ** 2
    return U, v


def _column_contrast(W, Z, c):
    _, v = _stats(W, Z, c)
    return c.G(v).mean(axis=1)


def _newton_all(W, Z, c):
    U, v = _stats(W, Z, c)
    gv = c.g(v)
    H = Z.shape[1]
    lam = np.mean(v * gv, axis=1)
    num = (Z @ (np.conj(U) * gv).T) / H - lam * W
    den = np.mean(gv + 2 * v * c.gp(v), axis=1) - lam
    bad = np.abs(den) < DENOMINATOR_EPS
    den = np.where(bad, 1.0, den)
    return W - num / den, bad


def _grad_all(W, Z, c):
    U, v = _stats(W, Z, c)
    gv = c.g(v)
    lam = np.mean(v * gv, axis=1)
    return (Z @ (np.conj(U) * gv).T) / Z.shape[1] - lam * W


def _random_unmixing(rng, K, real):
    W = rng.standard_normal((K, K))
    if not real:
        W = W + 1j * rng.standard_normal((K, K))
    return symmetric_decorrelate(W)


def _stage1(W, Z, c, opts, orient, ref, rng, trace, name):
    K = W.shape[1]
    real = not np.iscomplexobj(Z)
    converged = False
    it = 0
    for it in range(1, opts.max_iter_stage1 + 1):
        Wn, bad = _newton_all(W, Z, c)
        if bad.any():
            log.debug("restarting %d columns after a vanishing Newton denominator", bad.sum())
            Wn[:, bad] = _random_unmixing(rng, K, real)[:, bad]
        Wn = symmetric_decorrelate(Wn)
        delta = np.max(np.abs(np.abs(Wn.conj().T @ W) - np.eye(K)))
        W = Wn
        trace.append(TraceEntry(name, it, float(np.sum(orient * (_column_contrast(W, Z, c) - ref)))))
        if delta < opts.tol:
            converged = True
            break
    return W, converged, it


def _stage2(W, Z, c, opts, orient, ref, trace, name):
    W = W.copy()
    K = W.shape[1]
    mu = np.full(K, opts.mu)
    J = orient * _column_contrast(W, Z, c)
    active = np.ones(K, dtype=bool)
    it = 0
    for it in range(1, opts.max_iter_stage2 + 1):
        idx = np.flatnonzero(active)
        D = _grad_all(W[:, idx], Z, c)
        Wc = W[:, idx] + orient * mu[idx] * D
        Wc = Wc / np.linalg.norm(Wc, axis=0)
        Jc = orient * _column_contrast(Wc, Z, c)
        ok = Jc >= J[idx]
        change = np.linalg.norm(Wc - W[:, idx], axis=0)
        acc = idx[ok]
        W[:, acc] = Wc[:, ok]
        J[acc] = Jc[ok]
        mu[idx[~ok]] /= 2
        done = np.zeros(K, dtype=bool)
        done[acc[change[ok] < opts.tol]] = True
        done[mu < opts.mu_min] = True
        active &= ~done
        trace.append(TraceEntry(name, it, float(np.sum(J - orient * ref))))
        if not active.any():
            break
    return W, not active.any(), it


def _revert_collapsed(W2, W1, threshold):
    G = np.abs(W2.conj().T @ W2)
    np.fill_diagonal(G, 0)
    cols = sorted({int(i) for pair in np.argwhere(G > threshold) for i in pair})
    if cols:
        W2 = W2.copy()
        W2[:, cols] = W1[:, cols]
    return W2, cols


def _two_stage(Z, W0, c, opts, orient, rng, trace, prefix):
    real = not np.iscomplexobj(Z)
    ref = c.gaussian_value(real=real)
    n1, n2 = (f"{prefix}newton", f"{prefix}gradient")
    W1, conv1, it1 = _stage1(W0, Z, c, opts, orient, ref, rng, trace, n1)
    out = {"conv": {n1: conv1}, "it": {n1: it1}, "reverted": []}
    W = W1
    if opts.stage2 and opts.max_iter_stage2 > 0:
        W2, conv2, it2 = _stage2(W1, Z, c, opts, orient, ref, trace, n2)
        W, cols = _revert_collapsed(W2, W1, opts.collapse_threshold)
        out["conv"][n2] = conv2
        out["it"][n2] = it2
        out["reverted"] = cols
    return W, out


def real_projection(W, Z):
    """Map outputs ``W^H Z`` onto the real line through their pseudo-covariance.

    Returns ``T`` with ``T P T^T = I`` for the (unitary-projected) pseudo
    covariance ``P = E{u u^T}``; for real sources ``T W^H Z`` is real up to
    noise and a residual real rotation.
    """
    U = W.conj().T @ Z
    P = U @ U.T / Z.shape[1]
    P = (P + P.T) / 2
    a, _, bh = np.linalg.svd(P)
    R = sqrtm(a @ bh)
    return np.linalg.inv(R)


def cmica(y, opts: IcaOptions | None = None, rng: np.random.Generator | None = None) -> IcaResult:
    """Whiten ``y`` (H x K) and run the two-stage ICA.

    Non-convergence is not an error: the last iterate is returned and
    ``result.converged`` records which stages met the tolerance.
    """
    opts = opts or IcaOptions()
    c = opts.contrast
    if rng is None:
        rng = np.random.default_rng(opts.seed)
    wr = center_and_whiten(y)
    Z = wr.whitened.T.copy()
    K = Z.shape[0]
    orient = opts.orientation if opts.orientation is not None else orientation_for(c)
    trace: list[TraceEntry] = []
    W0 = _random_unmixing(rng, K, real=False)
    W, info = _two_stage(Z, W0, c, opts, orient, rng, trace, "")
    converged, iterations, reverted = info["conv"], info["it"], info["reverted"]
    if opts.real_sources:
        T = real_projection(W, Z)
        X = (T @ W.conj().T @ Z).real
        wr_real = center_and_whiten(X.T)
        B = wr_real.A
        Xw = wr_real.whitened.T.copy()
        O, info_r = _two_stage(Xw, np.eye(K), c, opts, orient, rng, trace, "real-")
        converged.update(info_r["conv"])
        iterations.update(info_r["it"])
        reverted = reverted + [("real", i) for i in info_r["reverted"]]
        W = (O.T @ B @ T @ W.conj().T).conj().T
    return IcaResult(wr, W, trace, converged, iterations, reverted)
