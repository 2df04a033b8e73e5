"""Core containers and CSV conventions.

Arrays are coerced to C-contiguous float64 (indicator matrices to int8) and
frozen at construction, so instances can be shared across worker processes
without defensive copies. Unobserved cells in a sample's outcome matrix are
stored as NaN; validation is a separate step that reports violations as
strings instead of raising, so callers can decide how strict to be.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

MISSING_TOKENS = ("", "NA")


def _frozen(a, dtype=np.float64, ndim=None):
    out = np.ascontiguousarray(a, dtype=dtype)
    if ndim is not None and out.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PopulationData:
    """A finite population: covariates, outcomes, and the pieces they came from.

    The outcome matrix decomposes as y = signal + noise with
    signal = X @ coef + low_rank, where the low-rank part is orthogonal to the
    covariate columns. ``means`` holds the per-item finite-population means,
    the targets every estimator is judged against.
    """

    X: np.ndarray          # n_units x n_covariates
    y: np.ndarray          # n_units x n_items
    signal: np.ndarray     # n_units x n_items, noiseless outcome matrix
    low_rank: np.ndarray   # n_units x n_items, orthogonal to span(X)
    coef: np.ndarray       # n_covariates x n_items
    means: np.ndarray      # n_items
    rank: int

    def __post_init__(self):
        object.__setattr__(self, "X", _frozen(self.X, ndim=2))
        object.__setattr__(self, "y", _frozen(self.y, ndim=2))
        object.__setattr__(self, "signal", _frozen(self.signal, ndim=2))
        object.__setattr__(self, "low_rank", _frozen(self.low_rank, ndim=2))
        object.__setattr__(self, "coef", _frozen(self.coef, ndim=2))
        object.__setattr__(self, "means", _frozen(self.means, ndim=1))
        n, d = self.X.shape
        if self.y.shape[0] != n:
            raise ValueError("X and y row counts differ")
        for name in ("signal", "low_rank"):
            if getattr(self, name).shape != self.y.shape:
                raise ValueError(f"{name} shape differs from y")
        if self.coef.shape != (d, self.y.shape[1]):
            raise ValueError("coef shape inconsistent with X and y")
        if self.means.shape[0] != self.y.shape[1]:
            raise ValueError("means length differs from item count")

    @property
    def n_units(self) -> int:
        return self.X.shape[0]

    @property
    def n_items(self) -> int:
        return self.y.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class SampleData:
    """One drawn sample with inclusion probabilities and a response mask.

    ``y`` is NaN wherever ``resp`` is 0. ``pi`` holds first-order inclusion
    probabilities (for with-replacement designs, the expected-draw weights
    n * p_i, one row per draw with duplicates retained). ``pop_size`` is the
    known population size or the weight total used in its place.
    ``p_true`` optionally carries the response probabilities that generated
    the mask, for simulation diagnostics only; estimators never read it.
    """

    X: np.ndarray       # n x d covariates, fully observed
    y: np.ndarray       # n x L outcomes, NaN where resp == 0
    resp: np.ndarray    # n x L response indicators in {0, 1}
    pi: np.ndarray      # n inclusion probabilities
    pop_size: float
    p_true: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "X", _frozen(self.X, ndim=2))
        object.__setattr__(self, "y", _frozen(self.y, ndim=2))
        object.__setattr__(self, "resp", _frozen(self.resp, dtype=np.int8, ndim=2))
        object.__setattr__(self, "pi", _frozen(self.pi, ndim=1))
        object.__setattr__(self, "pop_size", float(self.pop_size))
        if self.p_true is not None:
            object.__setattr__(self, "p_true", _frozen(self.p_true, ndim=2))
        n = self.X.shape[0]
        if self.y.shape[0] != n or self.resp.shape != self.y.shape or self.pi.shape[0] != n:
            raise ValueError("sample arrays have inconsistent shapes")
        if self.p_true is not None and self.p_true.shape != self.y.shape:
            raise ValueError("p_true shape differs from y")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_items(self) -> int:
        return self.y.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]


def validate_sample(sample: SampleData) -> list[str]:
    """Check value-level invariants, returning one message per violation.

    An empty list means the sample is internally consistent: binary response
    indicators, finite outcomes wherever observed, strictly positive finite
    inclusion probabilities, and a positive population size.
    """
    bad = []
    r = np.asarray(sample.resp)
    wrong = np.argwhere((r != 0) & (r != 1))
    for i, j in wrong:
        bad.append(f"R[{i},{j}] not in {{0,1}}")
    conflict = np.argwhere((r == 1) & ~np.isfinite(sample.y))
    for i, j in conflict:
        bad.append(f"Y_obs[{i},{j}] not finite but R[{i},{j}] = 1")
    for i in np.flatnonzero(~(sample.pi > 0)):
        bad.append(f"pi[{i}] not > 0")
    for i in np.flatnonzero(~np.isfinite(sample.pi)):
        bad.append(f"pi[{i}] not finite")
    if not np.isfinite(sample.X).all():
        i, k = np.argwhere(~np.isfinite(sample.X))[0]
        bad.append(f"X[{i},{k}] not finite")
    if not (np.isfinite(sample.pop_size) and sample.pop_size > 0):
        bad.append("pop_size not a positive finite number")
    return bad


@dataclass(frozen=True)
class TuningTriple:
    """One point of the regularization grid: ridge weight, low-rank weight, mix."""

    tau1: float
    tau2: float
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "tau1", float(self.tau1))
        object.__setattr__(self, "tau2", float(self.tau2))
        object.__setattr__(self, "alpha", float(self.alpha))
        if not (np.isfinite(self.tau1) and self.tau1 >= 0):
            raise ValueError(f"tau1 must be a finite nonnegative number, got {self.tau1}")
        if not (np.isfinite(self.tau2) and self.tau2 >= 0):
            raise ValueError(f"tau2 must be a finite nonnegative number, got {self.tau2}")
        if not (np.isfinite(self.alpha) and 0 <= self.alpha <= 1):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def format_value(v: float) -> str:
    """Shortest decimal string that round-trips to the same double."""
    return repr(float(v))


@dataclass
class CsvMatrix:
    """A parsed matrix CSV: numeric values, observation mask, header, raw cells."""

    values: np.ndarray   # float, NaN at missing cells
    mask: np.ndarray     # int8, 1 = present
    header: list[str]
    cells: list[list[str]] = field(repr=False, default_factory=list)


def write_matrix_csv(path, values, mask=None, header=None) -> None:
    """Write a matrix with an optional observation mask.

    Masked-out cells become empty fields. Finite values are formatted so that
    reading the file back reproduces them bit for bit.
    """
    values = np.asarray(values, dtype=float)
    n, L = values.shape
    if header is None:
        header = [f"c{j + 1}" for j in range(L)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(n):
            row = []
            for j in range(L):
                if mask is not None and not mask[i, j]:
                    row.append("")
                else:
                    row.append(format_value(values[i, j]))
            w.writerow(row)


def read_matrix_csv(path) -> CsvMatrix:
    """Read a matrix CSV with a header row; empty fields and NA mean missing."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file, expected a header row")
    header = rows[0]
    cells = rows[1:]
    L = len(header)
    values = np.full((len(cells), L), np.nan)
    mask = np.zeros((len(cells), L), dtype=np.int8)
    for i, row in enumerate(cells):
        if len(row) != L:
            raise ValueError(f"{path}: row {i + 2} has {len(row)} fields, header has {L}")
        for j, tok in enumerate(row):
            t = tok.strip()
            if t in MISSING_TOKENS:
                continue
            try:
                values[i, j] = float(t)
            except ValueError:
                raise ValueError(f"{path}: cell ({i + 1},{j + 1}) is not a number: {tok!r}") from None
            mask[i, j] = 1
    return CsvMatrix(values=values, mask=mask, header=header, cells=cells)


def read_weights_csv(path) -> np.ndarray:
    """Read a one-column CSV (header row required) of positive row weights."""
    parsed = read_matrix_csv(path)
    if parsed.values.shape[1] != 1:
        raise ValueError(f"{path}: expected a single column, got {parsed.values.shape[1]}")
    if not parsed.mask.all():
        i = int(np.argwhere(parsed.mask[:, 0] == 0)[0][0])
        raise ValueError(f"{path}: weight row {i + 1} is missing")
    return parsed.values[:, 0].copy()
