"""Finite-population mean estimators for partially observed samples.

Every method produces one estimate per item through a uniform interface, so
the simulation harness and the CLI can iterate a method list without special
cases. ``compute_estimates`` owns the shared work: the response model is fit
once, and each completion-based method fits its own completion.

Methods:
  full        design-weighted mean of the fully observed outcomes (oracle)
  hot_deck    nearest-neighbor donor imputation on standardized covariates
  mi          chained-equations multiple imputation over the leading items
  ipw         inverse-probability weighting by fitted response probabilities
  dr_linear   doubly robust with a per-item weighted linear outcome model
  dr_naive    doubly robust with an unweighted completion (flat rates, flat pi)
  dr_mc       doubly robust with the design-weighted low-rank completion
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_model import SampleData
from .matrix_completion import CompletionFit, fit_completion
from .response_model import (
    DEFAULT_MAX_ITER,
    DEFAULT_P_CLIP,
    ResponseModelFit,
    fit_response_matrix,
)

METHODS = ("full", "hot_deck", "mi", "ipw", "dr_linear", "dr_naive", "dr_mc")

# Methods that need fitted response probabilities.
_NEEDS_RESPONSE = frozenset({"ipw", "dr_linear", "dr_naive", "dr_mc"})

RIDGE_JITTER = 1e-8


@dataclass(frozen=True)
class EstimateVector:
    """Per-item estimates for one method, with per-item reliability flags.

    ``theta`` is finite wherever ``unreliable`` is False; flagged items carry
    whatever degenerate value the method produced (possibly NaN).
    """

    theta: np.ndarray
    method: str
    unreliable: np.ndarray

    def __post_init__(self):
        theta = np.ascontiguousarray(self.theta, dtype=float)
        flags = np.ascontiguousarray(self.unreliable, dtype=bool)
        if theta.shape != flags.shape:
            raise ValueError("theta and unreliable must have the same length")
        if not np.isfinite(theta[~flags]).all():
            raise ValueError("non-finite estimate on an item not flagged unreliable")
        theta.setflags(write=False)
        flags.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "unreliable", flags)


@dataclass(frozen=True)
class EstimatorOptions:
    """Shared knobs for the response model, the completions, and the imputers."""

    p_clip: float = DEFAULT_P_CLIP
    max_iter: int = DEFAULT_MAX_ITER
    folds: int = 5
    n_tau1: int = 6
    n_frac: int = 6
    alphas: tuple = (0.5, 0.9, 0.99, 1.0)
    mi_imputations: int = 5
    mi_items: int = 20
    mi_sweeps: int = 10
    ipw_design_weighted: bool = True


@dataclass
class EstimationBundle:
    """Estimates for the requested methods plus the fits they shared."""

    estimates: dict[str, EstimateVector] = field(default_factory=dict)
    response_fit: ResponseModelFit | None = None
    completion_fit: CompletionFit | None = None
    naive_fit: CompletionFit | None = None


def _ht_mean(values: np.ndarray, pi: np.ndarray, pop_size: float) -> np.ndarray:
    return (values / pi[:, None]).sum(axis=0) / pop_size


def ht_estimator(sample: SampleData, y_full: np.ndarray | None = None) -> EstimateVector:
    """Design-weighted mean of fully observed outcomes.

    ``y_full`` overrides the sample's outcome matrix; either way the matrix
    must have no missing cells.
    """
    values = sample.y if y_full is None else np.asarray(y_full, dtype=float)
    if not np.isfinite(values).all():
        raise ValueError("design-weighted mean needs a fully observed outcome matrix")
    theta = _ht_mean(values, sample.pi, sample.pop_size)
    return EstimateVector(theta, "full", np.zeros(values.shape[1], dtype=bool))


def dr_estimator(
    sample: SampleData,
    p_hat: np.ndarray,
    fitted: np.ndarray,
    *,
    method: str = "dr_mc",
    unreliable: np.ndarray | None = None,
) -> EstimateVector:
    """Doubly robust mean: reweighted residuals on observed cells plus the
    fitted value everywhere."""
    y0 = np.where(sample.resp == 1, sample.y, 0.0)
    term = sample.resp * (y0 - fitted) / p_hat + fitted
    theta = _ht_mean(term, sample.pi, sample.pop_size)
    if unreliable is None:
        unreliable = np.zeros(sample.n_items, dtype=bool)
    return EstimateVector(theta, method, unreliable)


def ipw_estimator(
    sample: SampleData, p_hat: np.ndarray, *, design_weighted: bool = True
) -> EstimateVector:
    """Observed outcomes reweighted by fitted response probabilities.

    The default also divides by the inclusion probabilities; with
    ``design_weighted=False`` only the response weights are applied. Items
    with no observed cells estimate 0 and are flagged.
    """
    y0 = np.where(sample.resp == 1, sample.y, 0.0)
    term = sample.resp * y0 / p_hat
    if design_weighted:
        theta = _ht_mean(term, sample.pi, sample.pop_size)
    else:
        theta = term.sum(axis=0) / sample.pop_size
    empty = sample.resp.sum(axis=0) == 0
    return EstimateVector(theta, "ipw", empty)


def hot_deck_impute(sample: SampleData) -> tuple[np.ndarray, EstimateVector]:
    """Impute each missing cell from the nearest observed donor row.

    Distance is Euclidean on covariates standardized within the sample;
    distance ties resolve to the smallest donor index. Items without a single
    donor stay NaN and are flagged.
    """
    mu = sample.X.mean(axis=0)
    sd = sample.X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    xs = (sample.X - mu) / sd
    sq = np.sum(xs * xs, axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * (xs @ xs.T)
    imputed = np.array(sample.y, copy=True)
    L = sample.n_items
    flags = np.zeros(L, dtype=bool)
    for j in range(L):
        donors = np.flatnonzero(sample.resp[:, j] == 1)
        missing = np.flatnonzero(sample.resp[:, j] == 0)
        if missing.size == 0:
            continue
        if donors.size == 0:
            flags[j] = True
            continue
        pick = donors[np.argmin(dist[np.ix_(missing, donors)], axis=1)]
        imputed[missing, j] = sample.y[pick, j]
    theta = np.full(L, np.nan)
    ok = ~flags
    theta[ok] = _ht_mean(imputed[:, ok], sample.pi, sample.pop_size)
    return imputed, EstimateVector(theta, "hot_deck", flags)


def _solve_wls(design: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, bool]:
    """Weighted least squares via normal equations; jitters on rank deficiency."""
    a = design.T @ (design * w[:, None])
    b = design.T @ (w * y)
    eigs = np.linalg.eigvalsh(a)
    jittered = eigs[0] <= 1e-10 * max(eigs[-1], 1e-300)
    if jittered:
        a = a + RIDGE_JITTER * np.eye(a.shape[0])
    return np.linalg.solve(a, b), jittered


def dr_linear(sample: SampleData, p_hat: np.ndarray) -> EstimateVector:
    """Doubly robust estimator with a per-item weighted linear outcome model.

    Each item's outcome is regressed on an intercept plus the covariates with
    weights resp / (pi * p_hat); the fitted line imputes every row. Items
    whose normal equations needed a ridge jitter are flagged.
    """
    n, L = sample.y.shape
    design = np.column_stack([np.ones(n), sample.X])
    fitted = np.empty((n, L))
    flags = np.zeros(L, dtype=bool)
    y0 = np.where(sample.resp == 1, sample.y, 0.0)
    w_all = sample.resp / (sample.pi[:, None] * p_hat)
    for j in range(L):
        phi, jittered = _solve_wls(design, y0[:, j], w_all[:, j])
        fitted[:, j] = design @ phi
        flags[j] = jittered
    return dr_estimator(sample, p_hat, fitted, method="dr_linear", unreliable=flags)


def dr_naive_completion(
    sample: SampleData,
    p_hat: np.ndarray,
    *,
    options: EstimatorOptions = EstimatorOptions(),
    rng: np.random.Generator | None = None,
) -> tuple[EstimateVector, CompletionFit]:
    """Doubly robust estimator whose completion ignores the design and the
    covariate-driven response model.

    The completion runs with flat inclusion probabilities and each item's raw
    response rate in place of the fitted probabilities; the final estimator
    still uses the true pi and the supplied p_hat, so only the imputation is
    naive.
    """
    n = sample.n
    rate = sample.resp.mean(axis=0)
    lo, hi = options.p_clip, 1.0 - options.p_clip / 2
    p_flat = np.broadcast_to(np.clip(rate, lo, hi), sample.y.shape).copy()
    flat = SampleData(
        X=sample.X,
        y=sample.y,
        resp=sample.resp,
        pi=np.full(n, n / sample.pop_size),
        pop_size=sample.pop_size,
    )
    fit = fit_completion(
        flat, p_flat, folds=options.folds, rng=rng,
        n_tau1=options.n_tau1, n_frac=options.n_frac, alphas=options.alphas,
    )
    est = dr_estimator(sample, p_hat, fit.fitted, method="dr_naive")
    return est, fit


def mi_chained(
    sample: SampleData,
    *,
    n_imputations: int = 5,
    max_items: int = 20,
    sweeps: int = 10,
    rng: np.random.Generator | None = None,
    proper: bool = True,
) -> EstimateVector:
    """Chained-equations multiple imputation over the leading items.

    Each chain cycles linear imputations of every leading item on the
    covariates and the other leading items. With ``proper`` set, each fit is
    perturbed by Bayesian-bootstrap row weights and imputations get a draw of
    residual noise; without it the chain is the deterministic least-squares
    fixed-point iteration. Estimates average the design-weighted means over
    chains. Items beyond ``max_items`` are flagged and left NaN.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    n, L = sample.y.shape
    k = min(max_items, L)
    flags = np.ones(L, dtype=bool)
    flags[:k] = False
    resp = sample.resp[:, :k]
    col_mean = np.zeros(k)
    for j in range(k):
        obs = resp[:, j] == 1
        if not obs.any():
            flags[j] = True
            continue
        col_mean[j] = sample.y[obs, j].mean()
    active = [j for j in range(k) if not flags[j]]
    design_base = np.column_stack([np.ones(n), sample.X])
    theta_chains = np.zeros((n_imputations, k))
    for c in range(n_imputations):
        yw = np.where(resp == 1, sample.y[:, :k], col_mean)
        for _ in range(sweeps):
            for j in active:
                miss = resp[:, j] == 0
                if not miss.any():
                    continue
                obs = ~miss
                others = [t for t in active if t != j]
                design = np.column_stack([design_base, yw[:, others]])
                w = rng.standard_exponential(int(obs.sum())) if proper else np.ones(int(obs.sum()))
                phi, _ = _solve_wls(design[obs], yw[obs, j], w)
                pred = design[miss] @ phi
                if proper:
                    resid = yw[obs, j] - design[obs] @ phi
                    sigma = np.sqrt(np.sum(w * resid * resid) / np.sum(w))
                    pred = pred + rng.normal(0.0, sigma, size=int(miss.sum()))
                yw[miss, j] = pred
        theta_chains[c] = _ht_mean(yw, sample.pi, sample.pop_size)
    theta = np.full(L, np.nan)
    est_ok = [j for j in range(k) if not flags[j]]
    theta[est_ok] = theta_chains.mean(axis=0)[est_ok]
    return EstimateVector(theta, "mi", flags)


def compute_estimates(
    sample: SampleData,
    methods: tuple[str, ...],
    *,
    y_full: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    options: EstimatorOptions = EstimatorOptions(),
) -> EstimationBundle:
    """Run the requested methods on one sample, sharing fits where possible.

    ``y_full`` supplies the fully observed outcome matrix required by the
    ``full`` method. The three stochastic stages (multiple imputation and the
    two cross-validated completions) get independent child streams drawn up
    front, so the results for a given method list and seed are reproducible.
    """
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}, expected one of {METHODS}")
    if rng is None:
        rng = np.random.default_rng(0)
    seeds = rng.integers(np.iinfo(np.int64).max, size=3)
    rng_mi, rng_naive, rng_mc = (np.random.default_rng(int(s)) for s in seeds)
    bundle = EstimationBundle()
    if any(m in _NEEDS_RESPONSE for m in methods):
        bundle.response_fit = fit_response_matrix(
            sample, p_clip=options.p_clip, max_iter=options.max_iter
        )
    for m in methods:
        if m == "full":
            if y_full is None:
                raise ValueError("method 'full' needs the fully observed outcomes")
            bundle.estimates[m] = ht_estimator(sample, y_full)
        elif m == "hot_deck":
            _, bundle.estimates[m] = hot_deck_impute(sample)
        elif m == "mi":
            bundle.estimates[m] = mi_chained(
                sample,
                n_imputations=options.mi_imputations,
                max_items=options.mi_items,
                sweeps=options.mi_sweeps,
                rng=rng_mi,
            )
        elif m == "ipw":
            bundle.estimates[m] = ipw_estimator(
                sample, bundle.response_fit.p_hat,
                design_weighted=options.ipw_design_weighted,
            )
        elif m == "dr_linear":
            bundle.estimates[m] = dr_linear(sample, bundle.response_fit.p_hat)
        elif m == "dr_naive":
            est, fit = dr_naive_completion(
                sample, bundle.response_fit.p_hat, options=options, rng=rng_naive
            )
            bundle.estimates[m] = est
            bundle.naive_fit = fit
        elif m == "dr_mc":
            fit = fit_completion(
                sample, bundle.response_fit.p_hat,
                folds=options.folds, rng=rng_mc,
                n_tau1=options.n_tau1, n_frac=options.n_frac, alphas=options.alphas,
            )
            bundle.completion_fit = fit
            bundle.estimates[m] = dr_estimator(
                sample, bundle.response_fit.p_hat, fit.fitted, method="dr_mc"
            )
    return bundle
