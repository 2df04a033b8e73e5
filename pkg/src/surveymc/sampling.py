"""Sampling designs and response-mask generation.

Three single-stage designs are supported. Poisson sampling includes each unit
independently with probability proportional to its size measure; simple random
sampling draws a fixed-size subset without replacement; the with-replacement
PPS design draws n times proportional to size and keeps duplicates as separate
rows, with pi holding the expected-draw weight n * p_i so the usual sum of
y / pi over the sample stays design-unbiased for the population total.

Missingness is generated per item from a logistic model on the covariates,
which keeps the mask ignorable given X. Calibration picks each item's
intercept so the population mean response rate hits a target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .data_model import PopulationData, SampleData

DESIGN_KINDS = ("poisson", "srs", "ppswr")
SIZE_MODES = ("informative", "noninformative")

# Items averaged into the informative size measure; ties the inclusion
# probabilities to the outcomes themselves.
INFORMATIVE_ITEMS = 7


@dataclass(frozen=True)
class DesignSpec:
    """A sampling design: kind, target sample size, and per-unit size measure.

    ``size`` is required for poisson and ppswr and ignored for srs.
    """

    kind: str
    n_target: int
    size: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in DESIGN_KINDS:
            raise ValueError(f"unknown design kind {self.kind!r}, expected one of {DESIGN_KINDS}")
        if self.n_target < 1:
            raise ValueError("n_target must be at least 1")
        if self.size is not None:
            size = np.ascontiguousarray(self.size, dtype=float)
            if size.ndim != 1:
                raise ValueError("size measure must be a vector")
            if not np.isfinite(size).all() or (size <= 0).any():
                raise ValueError("size measure entries must be positive and finite")
            size.setflags(write=False)
            object.__setattr__(self, "size", size)
        elif self.kind in ("poisson", "ppswr"):
            raise ValueError(f"design {self.kind!r} requires a size measure")


@dataclass(frozen=True)
class SampleDraw:
    """Row indices into the population and their aligned inclusion weights."""

    indices: np.ndarray
    pi: np.ndarray


def compute_size_measure(pop: PopulationData, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Per-unit size measure, shifted to be strictly positive.

    informative:    mean of each unit's first few outcome items, min-shifted to 1.
    noninformative: mean covariate value plus unit-mean exponential noise plus 1.
    """
    if mode not in SIZE_MODES:
        raise ValueError(f"unknown size mode {mode!r}, expected one of {SIZE_MODES}")
    if mode == "informative":
        if pop.n_items < INFORMATIVE_ITEMS:
            raise ValueError(
                f"informative size measure needs at least {INFORMATIVE_ITEMS} items, "
                f"population has {pop.n_items}"
            )
        row_mean = pop.y[:, :INFORMATIVE_ITEMS].mean(axis=1)
        s = row_mean - row_mean.min() + 1.0
    else:
        s = pop.X.mean(axis=1) + rng.exponential(1.0, size=pop.n_units) + 1.0
        if (s <= 0).any():
            raise ValueError("noninformative size measure produced a nonpositive entry")
    return s


def draw_indices(spec: DesignSpec, n_units: int, rng: np.random.Generator) -> SampleDraw:
    """Draw one sample from the design, returning sorted indices and weights."""
    n = spec.n_target
    if spec.kind == "srs":
        if n > n_units:
            raise ValueError(f"srs cannot draw {n} from {n_units} units")
        idx = np.sort(rng.choice(n_units, size=n, replace=False))
        pi = np.full(n, n / n_units)
        return SampleDraw(indices=idx, pi=pi)

    size = spec.size
    if size is None or size.shape[0] != n_units:
        raise ValueError("size measure length must equal the population size")
    p = size / size.sum()
    if spec.kind == "poisson":
        pi_full = np.minimum(n * p, 1.0)
        if (pi_full <= 0).any():
            raise ValueError("poisson design produced a zero inclusion probability")
        idx = np.flatnonzero(rng.random(n_units) < pi_full)
        if idx.size == 0:
            raise ValueError("poisson draw selected no units")
        return SampleDraw(indices=idx, pi=pi_full[idx])

    # ppswr: duplicates are retained as separate rows.
    idx = np.sort(rng.choice(n_units, size=n, replace=True, p=p))
    return SampleDraw(indices=idx, pi=n * p[idx])


def draw_sample(pop: PopulationData, spec: DesignSpec, rng: np.random.Generator) -> SampleData:
    """Draw a fully observed sample from the population under the design."""
    draw = draw_indices(spec, pop.n_units, rng)
    return SampleData(
        X=pop.X[draw.indices],
        y=pop.y[draw.indices],
        resp=np.ones((draw.indices.size, pop.n_items), dtype=np.int8),
        pi=draw.pi,
        pop_size=float(pop.n_units),
    )


def calibrate_missingness(
    X: np.ndarray,
    n_items: int,
    target_rate: float,
    rng: np.random.Generator,
    slope_sd: float = 0.3,
) -> np.ndarray:
    """Draw logistic response-model parameters hitting a mean response rate.

    ``slope_sd`` sets the standard deviation of the total covariate
    contribution to the logit: slopes are drawn N(0, slope_sd^2 / d) per
    covariate on the standardized scale, so the response probabilities keep a
    comparable spread regardless of how many covariates there are. Each item's
    intercept is then solved so the mean response probability over the given
    rows equals ``target_rate``. The returned (d+1) x n_items matrix is
    expressed in raw covariate coordinates: row 0 is the intercept.
    """
    if not 0 < target_rate < 1:
        raise ValueError("target_rate must lie strictly between 0 and 1")
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    slopes = rng.normal(0.0, slope_sd / np.sqrt(d), size=(d, n_items))
    gamma = np.empty((d + 1, n_items))
    z = ((X - mu) / sd) @ slopes
    for j in range(n_items):
        zj = z[:, j]
        c = brentq(lambda c: expit(c + zj).mean() - target_rate, -40.0, 40.0, xtol=1e-12)
        raw_slope = slopes[:, j] / sd
        gamma[0, j] = c - mu @ raw_slope
        gamma[1:, j] = raw_slope
    return gamma


def response_probabilities(X: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Logistic response probabilities for each (row, item) pair."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape[0] != X.shape[1] + 1:
        raise ValueError("gamma must have one intercept row plus one row per covariate")
    return expit(gamma[0] + X @ gamma[1:])


def apply_missingness(sample: SampleData, gamma: np.ndarray, rng: np.random.Generator) -> SampleData:
    """Mask outcomes with independent Bernoulli draws from the logistic model.

    Returns a new sample sharing X, pi, and pop_size, with y set to NaN where
    the drawn response indicator is 0 and the true probabilities kept in
    ``p_true`` for diagnostics.
    """
    p = response_probabilities(sample.X, gamma)
    resp = (rng.random(p.shape) < p).astype(np.int8)
    y = np.where(resp == 1, sample.y, np.nan)
    return SampleData(
        X=sample.X,
        y=y,
        resp=resp,
        pi=sample.pi,
        pop_size=sample.pop_size,
        p_true=p,
    )
