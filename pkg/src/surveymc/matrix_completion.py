"""Design-weighted low-rank completion of a partially observed outcome matrix.

The fitted matrix splits into a covariate regression part plus a low-rank
remainder constrained to the orthogonal complement of the weighted covariate
column space. Both parts have closed forms given the tuning triple
(tau1, tau2, alpha):

  - the coefficient block solves a ridge problem against the weighted,
    inverse-probability-scaled target;
  - the low-rank block is a singular-value soft threshold of the projected
    target, shrunk once more by the Frobenius share of the penalty.

Working in the complement of the weighted covariate span is what makes the
two blocks identifiable separately; the observable consequence, checked by
the tests, is that X' D^{-1/2} B is zero at the fit.

Tuning is chosen by K-fold cross-validation over observed cells. Within a
fold the projected target and its SVD do not depend on the tuning point, so
one SVD per fold serves the whole grid and held-out cells are scored
pointwise; this is what keeps the grid search affordable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data_model import SampleData, TuningTriple

DEFAULT_FOLDS = 5
DEFAULT_ALPHAS = (0.5, 0.9, 0.99, 1.0)
DEFAULT_N_TAU1 = 6
DEFAULT_N_FRAC = 6

# Soft-threshold levels in the default grid, as fractions of the projected
# target's top singular value.
FRAC_RANGE = (0.05, 0.8)
TAU1_RANGE = (1e-6, 1e-1)


@dataclass(frozen=True)
class ProjectionContext:
    """Cached pieces of the weighted covariate projection for one sample."""

    X: np.ndarray           # n x d raw covariates
    xw: np.ndarray          # D^{-1/2} X
    gram: np.ndarray        # X' D^{-1} X
    gram_cho: tuple         # Cholesky factor of gram
    d_half: np.ndarray      # sqrt(pi)
    d_inv_half: np.ndarray  # 1/sqrt(pi)


@dataclass(frozen=True)
class CompletionFit:
    """Result of one completion fit.

    ``fitted`` is the model matrix for every cell; ``imputed`` equals the
    observed outcome where available and ``fitted`` elsewhere. ``cv_trace``
    lists (triple, per-fold losses, mean loss) for each grid point evaluated,
    empty when the tuning was supplied directly.
    """

    coef: np.ndarray       # d x L
    low_rank: np.ndarray   # n x L, in the complement of the weighted X span
    fitted: np.ndarray     # n x L
    imputed: np.ndarray    # n x L
    tuning: TuningTriple
    cv_trace: list


def make_projection_context(X: np.ndarray, pi: np.ndarray) -> ProjectionContext:
    """Precompute the weighted design pieces shared by every fit on a sample."""
    X = np.asarray(X, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if X.ndim != 2 or pi.ndim != 1 or pi.shape[0] != X.shape[0]:
        raise ValueError("X must be n x d and pi length n")
    if not np.isfinite(X).all():
        raise ValueError("covariates must be finite")
    if not np.isfinite(pi).all() or (pi <= 0).any():
        raise ValueError("inclusion probabilities must be positive and finite")
    d_half = np.sqrt(pi)
    d_inv_half = 1.0 / d_half
    xw = X * d_inv_half[:, None]
    gram = xw.T @ xw
    eigs = np.linalg.eigvalsh(gram)
    if eigs[0] <= 1e-12 * max(eigs[-1], 1e-300):
        raise ValueError("covariates collinear: weighted Gram matrix is numerically singular")
    return ProjectionContext(
        X=X, xw=xw, gram=gram, gram_cho=cho_factor(gram), d_half=d_half, d_inv_half=d_inv_half
    )


def project(ctx: ProjectionContext, m: np.ndarray, complement: bool = False) -> np.ndarray:
    """Orthogonal projection onto the weighted covariate span (or its complement)."""
    pm = ctx.xw @ cho_solve(ctx.gram_cho, ctx.xw.T @ m)
    return m - pm if complement else pm


def build_weighted_target(
    sample: SampleData, p_hat: np.ndarray, resp: np.ndarray | None = None
) -> np.ndarray:
    """Observed outcomes divided by response probabilities, zero elsewhere.

    ``resp`` overrides the sample's mask (cross-validation holds cells out by
    passing a thinned mask). Raises if an observed cell is non-finite or a
    response probability is not strictly positive.
    """
    r = sample.resp if resp is None else resp
    p_hat = np.asarray(p_hat, dtype=float)
    if p_hat.shape != sample.y.shape:
        raise ValueError("p_hat shape differs from the outcome matrix")
    if (p_hat <= 0).any():
        raise ValueError("response probabilities must be strictly positive")
    obs = r == 1
    bad = obs & ~np.isfinite(sample.y)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(f"observed cell ({i},{j}) is not finite")
    out = np.zeros_like(sample.y)
    np.divide(sample.y, p_hat, out=out, where=obs)
    return out


def soft_threshold_svd(m: np.ndarray, threshold: float) -> np.ndarray:
    """Shrink the singular values of m toward zero by ``threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    s = np.maximum(s - threshold, 0.0)
    keep = s > 0
    if not keep.any():
        return np.zeros_like(m)
    return (u[:, keep] * s[keep]) @ vt[keep]


def fit_coefficients(
    ctx: ProjectionContext, z: np.ndarray, tau1: float, pop_size: float, n_items: int
) -> np.ndarray:
    """Ridge coefficients of the weighted target on the covariates."""
    g = ctx.xw.T @ (z * ctx.d_inv_half[:, None])
    d = ctx.gram.shape[0]
    a = ctx.gram + pop_size * n_items * tau1 * np.eye(d)
    return np.linalg.solve(a, g)


def _low_rank_scaling(tau2: float, alpha: float, pop_size: float, n_items: int) -> tuple[float, float]:
    lam = pop_size * n_items * tau2
    return alpha * lam / 2.0, 1.0 / (1.0 + (1.0 - alpha) * lam)


def fit_low_rank(
    ctx: ProjectionContext, z: np.ndarray, tau2: float, alpha: float, pop_size: float, n_items: int
) -> np.ndarray:
    """Low-rank block: soft-thresholded SVD of the projected weighted target."""
    zw = z * ctx.d_inv_half[:, None]
    m = zw - ctx.xw @ cho_solve(ctx.gram_cho, ctx.xw.T @ zw)
    threshold, scale = _low_rank_scaling(tau2, alpha, pop_size, n_items)
    return scale * soft_threshold_svd(m, threshold)


def assemble_fitted(
    sample: SampleData, coef: np.ndarray, low_rank: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Combine the two blocks into the fitted matrix and the imputed matrix."""
    fitted = sample.X @ coef + np.sqrt(sample.pi)[:, None] * low_rank
    imputed = np.where(sample.resp == 1, sample.y, fitted)
    return fitted, imputed


def default_tuning_grid(
    ctx: ProjectionContext,
    z: np.ndarray,
    pop_size: float,
    n_items: int,
    *,
    n_tau1: int = DEFAULT_N_TAU1,
    n_frac: int = DEFAULT_N_FRAC,
    alphas: tuple = DEFAULT_ALPHAS,
) -> list[TuningTriple]:
    """Log-spaced grid, with tau2 scaled so the soft threshold spans a fixed
    fraction range of the projected target's top singular value."""
    zw = z * ctx.d_inv_half[:, None]
    m = zw - ctx.xw @ cho_solve(ctx.gram_cho, ctx.xw.T @ zw)
    smax = float(np.linalg.svd(m, compute_uv=False)[0]) if m.size else 0.0
    if smax <= 0:
        smax = 1.0
    tau1s = np.logspace(np.log10(TAU1_RANGE[0]), np.log10(TAU1_RANGE[1]), n_tau1)
    fracs = np.logspace(np.log10(FRAC_RANGE[0]), np.log10(FRAC_RANGE[1]), n_frac)
    grid = []
    for alpha in alphas:
        if alpha <= 0:
            raise ValueError("grid alphas must be positive")
        for frac in fracs:
            tau2 = 2.0 * frac * smax / (alpha * pop_size * n_items)
            for tau1 in tau1s:
                grid.append(TuningTriple(tau1, tau2, alpha))
    return grid


def _partition_cells(resp, folds, rng):
    """Split observed cells into folds, never leaving a column with an empty
    training set; re-randomizes a few times before giving up."""
    obs = np.argwhere(resp == 1)
    if obs.shape[0] == 0:
        raise ValueError("no observed cells to cross-validate on")
    col_tot = np.bincount(obs[:, 1], minlength=resp.shape[1])
    for _ in range(10):
        perm = rng.permutation(obs.shape[0])
        parts = np.array_split(perm, folds)
        ok = True
        for part in parts:
            held = np.bincount(obs[part, 1], minlength=resp.shape[1])
            if ((held == col_tot) & (col_tot > 0)).any():
                ok = False
                break
        if ok:
            return obs, parts
    raise ValueError("cross-validation partition empties a column; too few observed cells")


def cross_validate(
    sample: SampleData,
    p_hat: np.ndarray,
    grid: list[TuningTriple],
    folds: int = DEFAULT_FOLDS,
    rng: np.random.Generator | None = None,
    ctx: ProjectionContext | None = None,
) -> tuple[TuningTriple, list]:
    """Pick the tuning triple minimizing held-out weighted squared error.

    Observed cells are partitioned into ``folds`` groups; each group in turn
    is masked out, the model is refit on the rest, and the held-out cells are
    scored with weights 1/(pi_i * p_hat_ij). Ties in mean loss go to the more
    regularized triple (larger tau2, then tau1, then alpha).
    """
    if not grid:
        raise ValueError("tuning grid is empty")
    if folds < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    if rng is None:
        rng = np.random.default_rng(0)
    if ctx is None:
        ctx = make_projection_context(sample.X, sample.pi)
    L = sample.n_items
    pop_size = sample.pop_size
    obs, parts = _partition_cells(sample.resp, folds, rng)
    tau1_vals = sorted({t.tau1 for t in grid})
    pair_vals = sorted({(t.tau2, t.alpha) for t in grid})
    fold_losses = np.zeros((len(grid), folds))
    eye = np.eye(ctx.gram.shape[0])
    for f, part in enumerate(parts):
        if part.size == 0:
            continue
        ii, jj = obs[part, 0], obs[part, 1]
        r_train = np.array(sample.resp, copy=True)
        r_train[ii, jj] = 0
        z = build_weighted_target(sample, p_hat, resp=r_train)
        zw = z * ctx.d_inv_half[:, None]
        g = ctx.xw.T @ zw
        m = zw - ctx.xw @ cho_solve(ctx.gram_cho, g)
        u, s, vt = np.linalg.svd(m, full_matrices=False)
        u_held = u[ii, :]
        vt_held = vt[:, jj]
        x_held = sample.X[ii, :]
        w_held = 1.0 / (sample.pi[ii] * p_hat[ii, jj])
        y_held = sample.y[ii, jj]
        root_pi = np.sqrt(sample.pi[ii])
        coef_cells = {}
        for tau1 in tau1_vals:
            coef = np.linalg.solve(ctx.gram + pop_size * L * tau1 * eye, g)
            coef_cells[tau1] = np.einsum("md,dm->m", x_held, coef[:, jj])
        lr_cells = {}
        for tau2, alpha in pair_vals:
            threshold, scale = _low_rank_scaling(tau2, alpha, pop_size, L)
            s_shrunk = np.maximum(s - threshold, 0.0)
            keep = s_shrunk > 0
            if keep.any():
                cells = scale * np.einsum(
                    "mr,rm->m", u_held[:, keep] * s_shrunk[keep], vt_held[keep]
                )
            else:
                cells = np.zeros(ii.size)
            lr_cells[(tau2, alpha)] = cells
        for t_idx, trip in enumerate(grid):
            pred = coef_cells[trip.tau1] + root_pi * lr_cells[(trip.tau2, trip.alpha)]
            resid = y_held - pred
            fold_losses[t_idx, f] = float(np.sum(w_held * resid * resid))
    mean_loss = fold_losses.mean(axis=1)
    order = min(
        range(len(grid)),
        key=lambda i: (mean_loss[i], -grid[i].tau2, -grid[i].tau1, -grid[i].alpha),
    )
    trace = [
        (grid[i], tuple(fold_losses[i]), float(mean_loss[i]))
        for i in range(len(grid))
    ]
    return grid[order], trace


def fit_completion(
    sample: SampleData,
    p_hat: np.ndarray,
    *,
    tuning: TuningTriple | None = None,
    grid: list[TuningTriple] | None = None,
    folds: int = DEFAULT_FOLDS,
    rng: np.random.Generator | None = None,
    n_tau1: int = DEFAULT_N_TAU1,
    n_frac: int = DEFAULT_N_FRAC,
    alphas: tuple = DEFAULT_ALPHAS,
) -> CompletionFit:
    """Cross-validate (unless a triple is supplied) and fit the completion."""
    ctx = make_projection_context(sample.X, sample.pi)
    z = build_weighted_target(sample, p_hat)
    trace: list = []
    if tuning is None:
        if grid is None:
            grid = default_tuning_grid(
                ctx, z, sample.pop_size, sample.n_items,
                n_tau1=n_tau1, n_frac=n_frac, alphas=alphas,
            )
        tuning, trace = cross_validate(sample, p_hat, grid, folds=folds, rng=rng, ctx=ctx)
    coef = fit_coefficients(ctx, z, tuning.tau1, sample.pop_size, sample.n_items)
    low_rank = fit_low_rank(ctx, z, tuning.tau2, tuning.alpha, sample.pop_size, sample.n_items)
    fitted, imputed = assemble_fitted(sample, coef, low_rank)
    return CompletionFit(
        coef=coef, low_rank=low_rank, fitted=fitted, imputed=imputed,
        tuning=tuning, cv_trace=trace,
    )
