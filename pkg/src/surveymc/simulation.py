"""Monte Carlo harness for comparing the estimators across designs.

One population is generated per (design, sample size) study and held fixed
while replicates redraw the sample and the response mask, so the recorded
bias and spread are purely design- and response-driven. Every random stream
derives from the config seed through named SeedSequence spawns; replicate
results are reduced in replicate order, which makes the output bit-identical
for any worker count.
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass, field, replace

import numpy as np

from .data_model import PopulationData, format_value
from .estimators import METHODS, EstimatorOptions, compute_estimates
from .sampling import (
    DESIGN_KINDS,
    DesignSpec,
    apply_missingness,
    calibrate_missingness,
    compute_size_measure,
    draw_sample,
)

# Fraction of replicate failures tolerated before a study aborts.
MAX_FAILURE_RATE = 0.01


class SimulationError(RuntimeError):
    """Raised when too many replicates fail inside one study."""


@dataclass(frozen=True)
class SimConfig:
    """Full description of one simulation run."""

    n_units: int = 2000
    n_items: int = 100
    n_covariates: int = 10
    rank: int = 5
    snr: float = 2.0
    designs: tuple[str, ...] = ("poisson", "srs", "ppswr")
    informative: bool = True
    n_list: tuple[int, ...] = (200,)
    replicates: int = 200
    methods: tuple[str, ...] = ("full", "hot_deck", "ipw", "dr_linear", "dr_naive", "dr_mc")
    seed: int = 0
    response_rate: float = 0.6
    slope_sd: float = 0.3
    options: EstimatorOptions = field(default_factory=EstimatorOptions)


def validate_config(cfg: SimConfig) -> None:
    """Raise ValueError naming the offending field on any bad setting."""
    if cfg.n_units < 2:
        raise ValueError("n_units must be at least 2")
    if cfg.n_items < 1:
        raise ValueError("n_items must be at least 1")
    if not 1 <= cfg.n_covariates < cfg.n_units:
        raise ValueError("n_covariates must be in [1, n_units)")
    if not 0 <= cfg.rank <= min(cfg.n_units, cfg.n_items):
        raise ValueError("rank must be between 0 and min(n_units, n_items)")
    if cfg.snr <= 0:
        raise ValueError("snr must be positive")
    for d in cfg.designs:
        if d not in DESIGN_KINDS:
            raise ValueError(f"designs: unknown design {d!r}, expected one of {DESIGN_KINDS}")
    if not cfg.designs:
        raise ValueError("designs must not be empty")
    for n in cfg.n_list:
        if not 1 <= n <= cfg.n_units:
            raise ValueError(f"n: sample size {n} outside [1, n_units]")
    if not cfg.n_list:
        raise ValueError("n must list at least one sample size")
    if cfg.replicates < 1:
        raise ValueError("replicates must be at least 1")
    for m in cfg.methods:
        if m not in METHODS:
            raise ValueError(f"methods: unknown method {m!r}, expected one of {METHODS}")
    if not cfg.methods:
        raise ValueError("methods must not be empty")
    if not 0 < cfg.response_rate < 1:
        raise ValueError("response_rate must lie strictly between 0 and 1")
    if cfg.slope_sd < 0:
        raise ValueError("slope_sd must be nonnegative")


def generate_population(cfg: SimConfig, rng: np.random.Generator) -> PopulationData:
    """Draw one synthetic population.

    The signal is a covariate regression plus a rank-``cfg.rank`` matrix
    forced into the orthogonal complement of the covariate span; noise is
    scaled so the signal-to-noise ratio (sd of signal entries over noise sd)
    equals ``cfg.snr``.
    """
    N, L, d, k = cfg.n_units, cfg.n_items, cfg.n_covariates, cfg.rank
    X = rng.normal(0.5, 1.0, size=(N, d))
    coef = rng.normal(0.5, 1.0, size=(d, L))
    if k > 0:
        left = rng.normal(1.0, 3.0, size=(N, k))
        right = rng.normal(1.0, 3.0, size=(k, L))
        raw = left @ right
        low_rank = raw - X @ np.linalg.solve(X.T @ X, X.T @ raw)
    else:
        low_rank = np.zeros((N, L))
    signal = X @ coef + low_rank
    sigma = signal.std() / cfg.snr
    y = signal + rng.normal(0.0, sigma, size=(N, L))
    return PopulationData(
        X=X, y=y, signal=signal, low_rank=low_rank, coef=coef,
        means=y.mean(axis=0), rank=k,
    )


@dataclass(frozen=True)
class McCell:
    """Per-item accuracy of one method in one study."""

    design: str
    informative: bool
    n: int
    method: str
    bias: np.ndarray
    se: np.ndarray
    mse: np.ndarray
    n_replicates: int
    n_failed: int


@dataclass
class McSummary:
    """All study cells of one simulation run, in config order."""

    cells: list[McCell]
    config: SimConfig

    def cell(self, design: str, n: int, method: str) -> McCell:
        for c in self.cells:
            if c.design == design and c.n == n and c.method == method:
                return c
        raise KeyError(f"no cell for ({design}, {n}, {method})")


# Study context shared with worker processes via the pool initializer; set
# once per study, read-only afterwards.
_WORKER_CTX = None


def _init_worker(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _run_replicate(task):
    index, seed_seq = task
    pop, spec, gamma, methods, options = _WORKER_CTX
    rng = np.random.default_rng(seed_seq)
    try:
        full = draw_sample(pop, spec, rng)
        masked = apply_missingness(full, gamma, rng)
        bundle = compute_estimates(
            masked, methods, y_full=full.y, rng=rng, options=options
        )
        return index, {m: est.theta for m, est in bundle.estimates.items()}, None
    except Exception as exc:  # noqa: BLE001 - replicate failures are data
        return index, None, f"{type(exc).__name__}: {exc}"


def _run_study(cfg, design, n, study_seq, workers):
    children = study_seq.spawn(cfg.replicates + 1)
    setup_rng = np.random.default_rng(children[0])
    pop = generate_population(cfg, setup_rng)
    size = None
    if design in ("poisson", "ppswr"):
        mode = "informative" if cfg.informative else "noninformative"
        size = compute_size_measure(pop, mode, setup_rng)
    gamma = calibrate_missingness(
        pop.X, cfg.n_items, cfg.response_rate, setup_rng, cfg.slope_sd
    )
    spec = DesignSpec(kind=design, n_target=n, size=size)
    ctx = (pop, spec, gamma, cfg.methods, cfg.options)
    tasks = [(m, children[1 + m]) for m in range(cfg.replicates)]
    results: list = [None] * cfg.replicates
    if workers <= 1:
        _init_worker(ctx)
        for task in tasks:
            idx, thetas, err = _run_replicate(task)
            results[idx] = (thetas, err)
    else:
        mp = multiprocessing.get_context("fork")
        with mp.Pool(workers, initializer=_init_worker, initargs=(ctx,)) as pool:
            for idx, thetas, err in pool.imap_unordered(_run_replicate, tasks):
                results[idx] = (thetas, err)
    failures = [err for _, err in results if err is not None]
    if len(failures) > MAX_FAILURE_RATE * cfg.replicates:
        raise SimulationError(
            f"study ({design}, n={n}): {len(failures)}/{cfg.replicates} replicates "
            f"failed; first failure: {failures[0]}"
        )
    est = {
        m: np.array([thetas[m] for thetas, err in results if err is None])
        for m in cfg.methods
    }
    cells = []
    for m in cfg.methods:
        draws = est[m]
        mean = draws.mean(axis=0)
        cells.append(
            McCell(
                design=design,
                informative=cfg.informative,
                n=n,
                method=m,
                bias=mean - pop.means,
                se=draws.std(axis=0, ddof=0),
                mse=((draws - pop.means) ** 2).mean(axis=0),
                n_replicates=cfg.replicates,
                n_failed=len(failures),
            )
        )
    return cells


def run_monte_carlo(cfg: SimConfig, *, workers: int = 1) -> McSummary:
    """Run every (design, sample size) study in the config.

    All randomness derives from ``cfg.seed``; the output is identical for any
    ``workers`` value.
    """
    validate_config(cfg)
    studies = [(d, n) for d in cfg.designs for n in cfg.n_list]
    root = np.random.SeedSequence(cfg.seed)
    study_seqs = root.spawn(len(studies))
    cells = []
    for (design, n), seq in zip(studies, study_seqs):
        cells.extend(_run_study(cfg, design, n, seq, workers))
    return McSummary(cells=cells, config=cfg)


def mc_se_of_bias(cell: McCell) -> np.ndarray:
    """Monte Carlo standard error of each item's bias estimate."""
    n_ok = cell.n_replicates - cell.n_failed
    return cell.se / np.sqrt(max(n_ok, 1))


def write_results_csv(summary: McSummary, path) -> None:
    """Tidy per-item results: one row per (study, method, item)."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["design", "informative", "n", "method", "item", "bias", "se", "mse"])
        for c in summary.cells:
            informative = "true" if c.informative else "false"
            for j in range(c.bias.shape[0]):
                w.writerow(
                    [
                        c.design,
                        informative,
                        c.n,
                        c.method,
                        j + 1,
                        format_value(c.bias[j]),
                        format_value(c.se[j]),
                        format_value(c.mse[j]),
                    ]
                )


def summarize_tables(summary: McSummary, n_items: int = 5) -> tuple[str, str]:
    """Render the two standard report tables as aligned text.

    The first table lists per-item bias and spread for the leading items,
    one block per study; the second reduces each (study, method) to the mean
    and spread of the per-item MSEs.
    """
    cfg = summary.config
    methods = list(cfg.methods)
    studies: list[tuple[str, int]] = []
    for c in summary.cells:
        key = (c.design, c.n)
        if key not in studies:
            studies.append(key)

    lines1 = []
    for design, n in studies:
        block_cells = [c for c in summary.cells if c.design == design and c.n == n]
        if not block_cells:
            continue
        k = min(n_items, block_cells[0].bias.shape[0])
        informative = "informative" if cfg.informative else "noninformative"
        lines1.append(f"design={design} ({informative}), n={n}")
        header = f"  {'method':<10}{'stat':<6}" + "".join(
            f"{'item ' + str(j + 1):>12}" for j in range(k)
        )
        lines1.append(header)
        for c in block_cells:
            row_b = f"  {c.method:<10}{'bias':<6}" + "".join(f"{c.bias[j]:>12.3f}" for j in range(k))
            row_s = f"  {'':<10}{'se':<6}" + "".join(f"{c.se[j]:>12.3f}" for j in range(k))
            lines1.append(row_b)
            lines1.append(row_s)
        lines1.append("")
    table1 = "\n".join(lines1).rstrip() + "\n"

    lines2 = []
    informative = "informative" if cfg.informative else "noninformative"
    lines2.append(f"mean and spread of per-item MSE ({informative} sizes)")
    header = f"  {'design':<8}{'n':>6}  {'stat':<6}" + "".join(f"{m:>11}" for m in methods)
    lines2.append(header)
    for design, n in studies:
        mean_row = f"  {design:<8}{n:>6}  {'mean':<6}"
        sd_row = f"  {'':<8}{'':>6}  {'sd':<6}"
        for m in methods:
            cell = summary.cell(design, n, m)
            mean_row += f"{cell.mse.mean():>11.2f}"
            sd_row += f"{cell.mse.std(ddof=0):>11.2f}"
        lines2.append(mean_row)
        lines2.append(sd_row)
    table2 = "\n".join(lines2) + "\n"
    return table1, table2


def scaled_config(cfg: SimConfig, **overrides) -> SimConfig:
    """Convenience for tests: copy a config with field overrides."""
    return replace(cfg, **overrides)
