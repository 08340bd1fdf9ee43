"""Differential-expression evidence pipeline.

Adjacent-period two-sample t statistics are mapped through the t CDF and
the normal quantile to z-scores; transitions touching an unexpressed
period are excluded. The pooled z-scores get an empirical-null mixture
fit (fixed standard-normal null, spline-smoothed marginal via Poisson
regression on histogram counts), which supplies both the no-coupling
local-fdr baseline and the emission densities of the DE lattice model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import statsmodels.api as sm
from scipy import stats

from .errors import DataError, NumericalError
from .gibbs import DeModel
from .lattice import DeMrfParams, LatentGrid, LatticeShape

log = logging.getLogger(__name__)

Z_CLAMP = 8.0
TAIL_EPS = 1e-15
DENSITY_FLOOR = 1e-300


@dataclass
class ZScoreGrid:
    """z-scores per (region, gene, transition) with an exclusion mask.

    A transition is masked unless the gene is expressed in both adjacent
    periods (or when the statistic is degenerate). ``df`` holds the
    t-test degrees of freedom per (region, transition); None for z-scores
    that were not produced by t-tests.
    """

    z: np.ndarray
    mask: np.ndarray
    df: np.ndarray | None = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.z.shape:
            raise ValueError("mask shape must match z shape")

    @property
    def shape(self) -> LatticeShape:
        B, G, S = self.z.shape
        return LatticeShape(B, G, S)

    def pooled(self) -> np.ndarray:
        """Unmasked z values, flattened (the input to the density fit)."""
        return self.z[~self.mask]


def t_statistic(y_prev, y_curr) -> tuple[float, int]:
    """Pooled-variance two-sample t statistic for one transition.

    Returns (t, degrees of freedom). The pooled form is forced by the
    n1 + n2 - 2 degrees of freedom used downstream.
    """
    a = np.asarray(y_prev, dtype=np.float64)
    b = np.asarray(y_curr, dtype=np.float64)
    n1, n2 = a.size, b.size
    if n1 < 1 or n2 < 1:
        raise ValueError("both replicate vectors must be nonempty")
    df = n1 + n2 - 2
    if df < 1:
        raise ValueError("need at least three replicates combined")
    ss = float(((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum())
    pooled = ss / df
    if pooled <= 0.0:
        raise NumericalError("zero pooled variance; statistic undefined")
    se = math.sqrt(pooled * (1.0 / n1 + 1.0 / n2))
    return float((b.mean() - a.mean()) / se), df


def t_to_z(t, df):
    """Map t values through the t CDF and the standard-normal quantile.

    Strictly increasing and odd in t; clamped to +-8 where the t CDF is
    within 1e-15 of 0 or 1. Accepts scalars or arrays.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    scalar = t_arr.ndim == 0
    t_arr = np.atleast_1d(t_arr)
    df_arr = np.broadcast_to(np.asarray(df, dtype=np.float64), t_arr.shape)
    lower = stats.t.cdf(t_arr, df_arr)
    upper = stats.t.sf(t_arr, df_arr)
    # evaluate in the accurate tail on each side
    z = np.where(t_arr <= 0, stats.norm.ppf(lower), -stats.norm.ppf(upper))
    z = np.where(lower < TAIL_EPS, -Z_CLAMP, z)
    z = np.where(upper < TAIL_EPS, Z_CLAMP, z)
    z = np.clip(z, -Z_CLAMP, Z_CLAMP)
    return float(z[0]) if scalar else z


def build_zscore_grid(data, expressed: LatentGrid) -> ZScoreGrid:
    """z-scores for every transition where the gene is expressed on both sides.

    Degenerate statistics (zero pooled variance, fewer than three combined
    replicates) are masked with a logged reason.
    """
    B, G, T = data.shape.dims
    if expressed.shape != data.shape:
        raise ValueError("expressed grid must cover the full data lattice")
    counts, mean, ss = data.cell_stats()
    n1 = counts[:, :, :-1]
    n2 = counts[:, :, 1:]
    df = n1 + n2 - 2.0
    diff = mean[:, :, 1:] - mean[:, :, :-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        pooled = (ss[:, :, :-1] + ss[:, :, 1:]) / df
        se = np.sqrt(pooled * (1.0 / n1 + 1.0 / n2))
        t = diff / se

    x = expressed.states.astype(bool)
    tested = x[:, :, :-1] & x[:, :, 1:]
    degenerate = tested & ((df < 1) | ~np.isfinite(t))
    n_deg = int(degenerate.sum())
    if n_deg:
        log.warning(
            "masking %d transitions with degenerate statistics "
            "(zero pooled variance or too few replicates)", n_deg,
        )
    keep = tested & ~degenerate
    z = np.zeros_like(t)
    if keep.any():
        z[keep] = t_to_z(t[keep], df[keep])
    df_bt = (data.n[:, :-1] + data.n[:, 1:] - 2).astype(np.int64)
    return ZScoreGrid(z, ~keep, df_bt)


def natural_spline_basis(x, knots) -> np.ndarray:
    """Natural cubic spline basis (linear beyond the boundary knots).

    Returns len(knots) - 1 columns: x itself plus the standard truncated
    cubic differences, so fitting with an intercept gives len(knots)
    degrees of freedom in total.
    """
    x = np.asarray(x, dtype=np.float64)
    knots = np.asarray(knots, dtype=np.float64)
    K = len(knots)

    def d(k):
        num = np.maximum(x - knots[k], 0.0) ** 3 - np.maximum(x - knots[-1], 0.0) ** 3
        return num / (knots[-1] - knots[k])

    cols = [x]
    d_last = d(K - 2)
    for k in range(K - 2):
        cols.append(d(k) - d_last)
    return np.column_stack(cols)


@dataclass
class LocalFdrModel:
    """Empirical-null mixture: fixed N(0,1) null, tabulated nonnull density.

    ``grid`` carries the evaluation grid with the smoothed marginal ``f``
    and the nonnull component ``f1``; queries interpolate linearly and
    clamp to the grid edges. ``null_only`` flags a fit whose null
    proportion reached one, where the local fdr is identically 1.
    """

    grid: np.ndarray
    f: np.ndarray
    f1: np.ndarray
    p0: float
    null_only: bool = False

    @staticmethod
    def f0(z):
        return stats.norm.pdf(z)

    def marginal(self, z):
        return np.interp(z, self.grid, self.f)

    def nonnull(self, z):
        return np.interp(z, self.grid, self.f1)

    def local_fdr(self, z):
        """Posterior null probability p0 f0(z) / f(z), capped at 1."""
        z = np.asarray(z, dtype=np.float64)
        if self.null_only:
            return np.ones_like(z)
        return np.minimum(1.0, self.p0 * self.f0(z) / self.marginal(z))

    def log_f0(self, z):
        return stats.norm.logpdf(z)

    def log_f1(self, z):
        return np.log(np.maximum(self.nonnull(z), DENSITY_FLOOR))

    def to_dict(self) -> dict:
        return {
            "p0": self.p0,
            "null_only": self.null_only,
            "grid": self.grid.tolist(),
            "f": self.f.tolist(),
            "f1": self.f1.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LocalFdrModel":
        return cls(
            np.asarray(d["grid"], dtype=np.float64),
            np.asarray(d["f"], dtype=np.float64),
            np.asarray(d["f1"], dtype=np.float64),
            float(d["p0"]),
            bool(d["null_only"]),
        )


def fit_local_fdr(z_values, bins: int = 120, spline_df: int = 7) -> LocalFdrModel:
    """Empirical-null mixture fit of pooled z-scores.

    Poisson regression of histogram counts with the standard-normal null
    as offset, on a natural-spline basis with knots evenly spaced between
    the 5th and 95th percentiles: the spline models the log-ratio of the
    marginal to the null, which is flat wherever only null mass lives and
    asymptotically linear under mean-shifted alternatives, so the natural
    linear tails extrapolate correctly. The null proportion comes from
    matching the smoothed marginal to the null density at z = 0; the
    nonnull density is the renormalized positive part of the difference.
    """
    z = np.asarray(z_values, dtype=np.float64).ravel()
    z = z[np.isfinite(z)]
    if z.size < 100:
        raise DataError(f"need at least 100 z-scores to fit densities, got {z.size}")
    lo, hi = z.min() - 0.1, z.max() + 0.1
    edges = np.linspace(lo, hi, bins + 1)
    width = edges[1] - edges[0]
    counts, _ = np.histogram(z, edges)
    mids = 0.5 * (edges[:-1] + edges[1:])

    b_lo, b_hi = np.quantile(z, [0.05, 0.95])
    knots = np.linspace(b_lo, b_hi, spline_df + 1)
    design = sm.add_constant(natural_spline_basis(mids, knots))
    offset = np.log(z.size * width * stats.norm.pdf(mids))
    glm = sm.GLM(counts, design, family=sm.families.Poisson(), offset=offset).fit()

    def density_at(x):
        xb = sm.add_constant(natural_spline_basis(x, knots), has_constant="add")
        return stats.norm.pdf(x) * np.exp(xb @ glm.params)

    grid = np.linspace(lo - 1.0, hi + 1.0, 601)
    f_grid = density_at(grid)
    p0 = min(1.0, float(density_at(np.array([0.0]))[0]) / float(stats.norm.pdf(0.0)))

    if p0 >= 1.0 - 1e-6:
        log.warning("null proportion reached 1; nonnull density undefined")
        return LocalFdrModel(grid, f_grid, np.zeros_like(f_grid), 1.0, null_only=True)

    f1 = np.maximum(0.0, f_grid - p0 * stats.norm.pdf(grid)) / (1.0 - p0)
    total = np.trapezoid(f1, grid)
    if total <= 0.0:
        log.warning("nonnull density vanished after subtraction; null-only model")
        return LocalFdrModel(grid, f_grid, np.zeros_like(f_grid), 1.0, null_only=True)
    f1 = f1 / total
    return LocalFdrModel(grid, f_grid, f1, p0)


def eb_posterior(z, model: LocalFdrModel):
    """No-coupling baseline: local fdr of each z under the fitted mixture."""
    return model.local_fdr(z)


def de_gibbs_model(zgrid: ZScoreGrid, phi: DeMrfParams, fdr: LocalFdrModel) -> DeModel:
    """Sampling target for the DE lattice at fixed emission densities."""
    safe_z = np.where(zgrid.mask, 0.0, zgrid.z)
    l0 = np.where(zgrid.mask, 0.0, fdr.log_f0(safe_z))
    l1 = np.where(zgrid.mask, 0.0, fdr.log_f1(safe_z))
    return DeModel(phi, l0, l1, zgrid.mask)


@dataclass
class FdrResult:
    """Rejection set of the posterior-FDR rule at one level."""

    k: int
    cutoff: float
    reject: np.ndarray  # indices into the input, the k smallest q values


def fdr_threshold(q_values, alpha: float) -> FdrResult:
    """Largest rejection set whose running mean posterior-null stays <= alpha.

    Sorts q ascending and rejects the k smallest where k is the largest
    index at which the cumulative mean is still below the level; k = 0
    (empty set, cutoff -inf) when even the smallest q exceeds it.
    """
    q = np.asarray(q_values, dtype=np.float64).ravel()
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if q.size == 0 or (q < 0).any() or (q > 1).any():
        raise ValueError("q values must be a nonempty collection in [0, 1]")
    order = np.argsort(q, kind="stable")
    cmean = np.cumsum(q[order]) / np.arange(1, q.size + 1)
    ok = np.nonzero(cmean <= alpha)[0]
    k = int(ok[-1]) + 1 if ok.size else 0
    cutoff = float(q[order[k - 1]]) if k else -math.inf
    return FdrResult(k, cutoff, order[:k])


@dataclass
class EnrichmentResult:
    observed: int
    expected: float
    fold_change: float
    p_value: float


def gene_set_enrichment(calls, gene_set, background_rate: float) -> EnrichmentResult:
    """Binomial upper-tail enrichment of DE calls inside a gene set.

    ``calls`` maps gene identifier to a DE indicator; the observed count
    is tested against Binomial(set size, background rate).
    """
    genes = list(gene_set)
    if not genes:
        raise ValueError("gene set is empty")
    if not 0.0 <= background_rate <= 1.0:
        raise ValueError("background rate must be in [0, 1]")
    observed = int(sum(bool(calls[g]) for g in genes))
    n = len(genes)
    expected = n * background_rate
    if background_rate == 0.0:
        if observed > 0:
            log.warning("observed %d hits at zero background rate", observed)
            return EnrichmentResult(observed, 0.0, math.inf, 0.0)
        return EnrichmentResult(0, 0.0, 0.0, 1.0)
    fold = observed / expected
    p = float(stats.binom.sf(observed - 1, n, background_rate))
    return EnrichmentResult(observed, expected, fold, p)
