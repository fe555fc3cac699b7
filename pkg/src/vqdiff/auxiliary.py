"""Contrastive training objectives and diagnostics over externally
supplied embeddings: InfoNCE, margin ranking, retrieval recall, and the
CLUB mutual-information upper-bound estimator.

Similarity matrices are N x N with row i scoring query i against every
candidate; the diagonal holds matched pairs.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.special import logsumexp

CLUB_VARIANCE_FLOOR = 1e-8


def _as_similarity(sim) -> np.ndarray:
    s = np.asarray(sim, dtype=float)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 1:
        raise ValueError(f"similarity matrix must be square, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("similarity matrix must be finite")
    return s


def info_nce(sim, temperature: float = 1.0) -> float:
    """Symmetric cross-entropy against the diagonal: the row-wise
    (query -> candidates) and column-wise directions averaged."""
    s = _as_similarity(sim)
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = s / temperature
    diag = np.diag(z)
    row_loss = (logsumexp(z, axis=1) - diag).mean()
    col_loss = (logsumexp(z, axis=0) - diag).mean()
    return float(0.5 * (row_loss + col_loss))


def contrastive_ranking_loss(sim, margin: float) -> float:
    """Bidirectional hinge averaged over ordered off-diagonal pairs:
    each negative must sit at least ``margin`` below both matched
    diagonals."""
    s = _as_similarity(sim)
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    n = s.shape[0]
    if n == 1:
        return 0.0
    diag = np.diag(s)
    h_query = np.maximum(0.0, margin - diag[:, None] + s)
    h_candidate = np.maximum(0.0, margin - diag[None, :] + s)
    off = ~np.eye(n, dtype=bool)
    return float((h_query[off] + h_candidate[off]).mean())


def recall_at_k(sim, k: int) -> float:
    """Percentage of rows whose diagonal ranks in the row's top k.

    Ties are broken by candidate index, so a tied lower-index candidate
    outranks the diagonal.
    """
    s = _as_similarity(sim)
    n = s.shape[0]
    k = int(k)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in 1..{n}, got {k}")
    diag = np.diag(s)
    better = (s > diag[:, None]).sum(axis=1)
    tied_earlier = ((s == diag[:, None]) & (np.arange(n)[None, :] < np.arange(n)[:, None])).sum(axis=1)
    position = better + tied_earlier  # 0-based rank of the diagonal
    return float((position < k).mean() * 100.0)


def club_mi(x, y) -> float:
    """Contrastive log-ratio upper bound on I(x; y) in nats.

    Fits a linear-Gaussian variational conditional q(y|x) (least-squares
    mean, diagonal residual covariance) and returns
    E[log q(y_i|x_i)] - (1/n^2) sum_ij log q(y_j|x_i).  Exact for
    jointly Gaussian data; an approximation otherwise.  Zero residual
    variances are floored at 1e-8 with a warning, so perfectly dependent
    inputs give a large finite value.
    """
    xm = np.asarray(x, dtype=float)
    ym = np.asarray(y, dtype=float)
    if xm.ndim == 1:
        xm = xm[:, None]
    if ym.ndim == 1:
        ym = ym[:, None]
    if xm.ndim != 2 or ym.ndim != 2 or xm.shape[0] != ym.shape[0]:
        raise ValueError(
            f"x and y must be aligned sample matrices, got {xm.shape} and {ym.shape}"
        )
    if not (np.all(np.isfinite(xm)) and np.all(np.isfinite(ym))):
        raise ValueError("samples must be finite")
    n, dim_x = xm.shape
    if n < 10 * (dim_x + 1):
        raise ValueError(
            f"need at least {10 * (dim_x + 1)} samples to fit q(y|x) with "
            f"dim_x={dim_x}, got {n}"
        )

    design = np.hstack([xm, np.ones((n, 1))])
    coef, *_ = np.linalg.lstsq(design, ym, rcond=None)
    mu = design @ coef
    resid = ym - mu
    var = (resid**2).mean(axis=0)
    if np.any(var < CLUB_VARIANCE_FLOOR):
        warnings.warn(
            "zero (or near-zero) residual variance in q(y|x); flooring at "
            f"{CLUB_VARIANCE_FLOOR} — the estimate is a large finite "
            "stand-in for a divergent bound",
            RuntimeWarning,
            stacklevel=2,
        )
        var = np.maximum(var, CLUB_VARIANCE_FLOOR)

    # log-variance terms are shared by both expectations and cancel
    positive = -0.5 * (resid**2 / var).sum(axis=1).mean()
    # sum_ij (y_jd - mu_id)^2 = n*sum_j y^2 - 2*(sum_i mu)(sum_j y) + n*sum_i mu^2
    cross_sq = (
        n * (ym**2).sum(axis=0)
        - 2.0 * mu.sum(axis=0) * ym.sum(axis=0)
        + n * (mu**2).sum(axis=0)
    )
    negative = -0.5 * (cross_sq / var).sum() / (n * n)
    return float(positive - negative)
