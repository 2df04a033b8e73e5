"""Per-item logistic response models.

Each item's response indicator is fit by an unweighted maximum-likelihood
logistic regression on an intercept plus the covariates: the response
mechanism conditions on X alone, so design weights do not enter the score.
Fitting is Newton/IRLS with step halving, which keeps the log-likelihood
non-decreasing; convergence is declared when the score is essentially zero.

Degenerate items (all observed, all missing, or a diverging fit, which is
what quasi-separation looks like here) fall back to an intercept-only model
at the item's raw response rate. Fitted probabilities are clipped away from
0 and 1 before anything downstream inverts them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .data_model import SampleData

DEFAULT_P_CLIP = 0.01
DEFAULT_MAX_ITER = 100
DEFAULT_SCORE_TOL = 1e-8

# Fits whose coefficients wander past this are treated as separated.
DIVERGENCE_BOUND = 30.0


@dataclass(frozen=True)
class ResponseModelFit:
    """Fitted response model for every item.

    ``p_hat`` is already clipped to [p_clip, 1 - p_clip/2]; ``clip_count``
    says how many cells the clipping actually changed. ``converged`` is False
    for items that hit the fallback or ran out of iterations.
    """

    gamma: np.ndarray       # (d+1) x n_items, intercept first
    p_hat: np.ndarray       # n x n_items, clipped probabilities
    clip_count: int
    converged: np.ndarray   # bool per item


def _loglik(z: np.ndarray, r: np.ndarray) -> float:
    # sum_i r_i z_i - log(1 + exp(z_i)), stable for large |z|
    return float(np.sum(r * z - np.logaddexp(0.0, z)))


def _fallback(r: np.ndarray, p_clip: float, d: int) -> np.ndarray:
    rate = float(np.clip(r.mean(), p_clip, 1.0 - p_clip / 2))
    gamma = np.zeros(d + 1)
    gamma[0] = logit(rate)
    return gamma


def _irls(x1, r, max_iter, tol):
    """Newton iterations with step halving; returns (gamma, converged, ll trace)."""
    gamma = np.zeros(x1.shape[1])
    z = x1 @ gamma
    ll = _loglik(z, r)
    trace = [ll]
    converged = False
    for _ in range(max_iter):
        p = expit(z)
        score = x1.T @ (r - p)
        if np.abs(score).max() <= tol:
            converged = True
            break
        w = p * (1.0 - p)
        hess = x1.T @ (x1 * w[:, None])
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, score, rcond=None)[0]
        lam = 1.0
        improved = False
        for _ in range(50):
            cand = gamma + lam * step
            z_cand = x1 @ cand
            ll_cand = _loglik(z_cand, r)
            # accept any step that does not lose more than the slack
            if np.isfinite(ll_cand) and ll_cand >= ll - 1e-12:
                improved = True
                break
            lam *= 0.5
        if not improved:
            break
        gamma, z, ll = cand, z_cand, ll_cand
        trace.append(ll)
        if np.abs(gamma).max() > DIVERGENCE_BOUND:
            return gamma, False, trace
    return gamma, converged, trace


def fit_logistic_column(
    x_rows: np.ndarray,
    r_col: np.ndarray,
    *,
    p_clip: float = DEFAULT_P_CLIP,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_SCORE_TOL,
) -> tuple[np.ndarray, bool]:
    """Fit one item's logistic response model.

    Returns the coefficient vector (intercept first) and a convergence flag.
    Items observed everywhere or nowhere, and fits that diverge, return the
    intercept-only fallback with the flag set to False.
    """
    x_rows = np.asarray(x_rows, dtype=float)
    r = np.asarray(r_col, dtype=float)
    d = x_rows.shape[1]
    if r.min() == r.max():
        return _fallback(r, p_clip, d), False
    x1 = np.column_stack([np.ones(x_rows.shape[0]), x_rows])
    gamma, converged, _ = _irls(x1, r, max_iter, tol)
    if not np.isfinite(gamma).all() or np.abs(gamma).max() > DIVERGENCE_BOUND:
        return _fallback(r, p_clip, d), False
    return gamma, converged


def fit_response_matrix(
    sample: SampleData,
    *,
    p_clip: float = DEFAULT_P_CLIP,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_SCORE_TOL,
) -> ResponseModelFit:
    """Fit every item's response model and assemble the clipped probability matrix."""
    if not 0 < p_clip < 0.5:
        raise ValueError("p_clip must lie strictly between 0 and 0.5")
    n, d = sample.X.shape
    L = sample.n_items
    gamma = np.empty((d + 1, L))
    converged = np.zeros(L, dtype=bool)
    for j in range(L):
        gamma[:, j], converged[j] = fit_logistic_column(
            sample.X, sample.resp[:, j], p_clip=p_clip, max_iter=max_iter, tol=tol
        )
    raw = expit(gamma[0] + sample.X @ gamma[1:])
    lo, hi = p_clip, 1.0 - p_clip / 2
    p_hat = np.clip(raw, lo, hi)
    clip_count = int(np.count_nonzero((raw < lo) | (raw > hi)))
    return ResponseModelFit(gamma=gamma, p_hat=p_hat, clip_count=clip_count, converged=converged)
