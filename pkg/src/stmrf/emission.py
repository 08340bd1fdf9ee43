"""Gaussian mixture emission model for replicated expression values.

Observed log2 expression values in a cell (region, gene, period) share a
latent cell mean drawn from a per-region two-component mixture;
replicates add a global noise variance around that mean. Under this
hierarchy the state-dependent part of the cell's likelihood is carried
entirely by the cell mean,

    ybar_bgt | x ~ N(mu_xb, sigma_xb^2 + sigma0^2 / n_bt),

which is what the classification pipeline uses (``cell_loglik``). The
replicate-level product density with variance sigma_xb^2 + sigma0^2
(``log_emission``) treats the replicates as independent draws; it is kept
as the per-cell density primitive but overstates the evidence of
replicated cells, which measurably degrades lattice classification.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalError
from .lattice import LatentGrid, LatticeShape, _sigmoid

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6


@dataclass
class ExpressionTensor:
    """Ragged replicate observations on a region x gene x period grid.

    ``values`` is padded with NaN beyond ``n[b, t]`` replicates; the
    replicate count depends on (region, period) only, never on the gene.
    """

    values: np.ndarray  # (B, G, T, Kmax), NaN-padded
    n: np.ndarray  # (B, T) replicate counts
    regions: list[str]
    periods: list[str]
    genes: list[str]
    neocortex: np.ndarray | None = None  # (B,) group labels, when declared

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.n = np.asarray(self.n, dtype=np.int64)
        B, G, T, K = self.values.shape
        if self.n.shape != (B, T):
            raise ValueError(f"replicate counts shape {self.n.shape} != {(B, T)}")
        if (self.n < 1).any():
            raise ValueError("every (region, period) needs at least one replicate")
        if int(self.n.max()) > K:
            raise ValueError("replicate count exceeds padded depth")

    @property
    def shape(self) -> LatticeShape:
        B, G, T, _ = self.values.shape
        return LatticeShape(B, G, T)

    def replicates(self, b: int, g: int, t: int) -> np.ndarray:
        return self.values[b, g, t, : self.n[b, t]]

    def cell_stats(self):
        """Per-cell replicate count, mean and within-cell sum of squares."""
        cached = getattr(self, "_stats", None)
        if cached is None:
            B, G, T, K = self.values.shape
            counts = np.broadcast_to(self.n[:, None, :], (B, G, T)).astype(np.float64)
            total = np.nansum(self.values, axis=3)
            mean = total / counts
            ss = np.nansum((self.values - mean[..., None]) ** 2, axis=3)
            cached = (counts, mean, ss)
            self._stats = cached
        return cached


@dataclass(frozen=True)
class GmmEmissionParams:
    """Per-region two-component mixture plus the global replicate SD.

    Component 1 is the low-mean (unexpressed) component; ``mu1 < mu2``
    holds per region. ``weight`` is the P(state = 1) mixing proportion the
    plain mixture fit estimated, kept for the no-coupling baseline.
    """

    mu1: np.ndarray
    sigma1: np.ndarray
    mu2: np.ndarray
    sigma2: np.ndarray
    sigma0: float
    weight: np.ndarray | None = None

    def __post_init__(self):
        for name in ("mu1", "sigma1", "mu2", "sigma2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.weight is not None:
            object.__setattr__(self, "weight", np.asarray(self.weight, dtype=np.float64))
        if (self.sigma1 <= 0).any() or (self.sigma2 <= 0).any() or self.sigma0 <= 0:
            raise ValueError("all standard deviations must be positive")
        if (self.mu1 >= self.mu2).any():
            raise ValueError("component order violated: need mu1 < mu2 per region")


def estimate_sigma0(data: ExpressionTensor) -> float:
    """Unbiased pooled within-cell variance of the replicates.

    Cells with a single replicate contribute nothing to numerator or
    denominator; if no cell has two replicates the estimator is undefined.
    """
    df = int((data.n - 1).sum())
    if df == 0:
        raise NumericalError("sigma0 undefined: every (region, period) has one replicate")
    _, mean, ss = data.cell_stats()
    G = data.values.shape[1]
    return float(ss.sum() / (G * df))


def log_normal_pdf(y, mu, var):
    return -0.5 * (np.log(2.0 * math.pi * var) + (y - mu) ** 2 / var)


def log_emission(y_bgt: np.ndarray, x: int, mu, sigma, sigma0: float) -> float:
    """Log-density of one cell's replicate vector given its latent state.

    ``mu``/``sigma`` are the region's component parameters as pairs
    (component 1, component 2); ``x`` selects the component.
    """
    y = np.asarray(y_bgt, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty replicate vector")
    var = sigma[x] ** 2 + sigma0**2
    return float(log_normal_pdf(y, mu[x], var).sum())


def cell_loglik(data: ExpressionTensor, theta: GmmEmissionParams):
    """Per-cell log-likelihood arrays of the cell mean for states 0 and 1.

    The state-dependent evidence of a cell under the hierarchical noise
    model: ybar ~ N(mu_x, sigma_x^2 + sigma0^2 / n). Replicate residuals
    around the cell mean carry no state information and are omitted.
    """
    counts, mean, _ = data.cell_stats()
    noise = theta.sigma0**2 / counts
    out = []
    for mu, sigma in ((theta.mu1, theta.sigma1), (theta.mu2, theta.sigma2)):
        var = (sigma**2)[:, None, None] + noise
        ll = log_normal_pdf(mean, mu[:, None, None], var)
        out.append(ll)
    return out[0], out[1]


def _region_mixture_em(n, ybar, sigma0, init, max_iter=500, tol=1e-9):
    """Two-component EM on one region's cell means.

    Component variances are recovered from the fitted marginal variance of
    the cell means by subtracting the replicate-noise share sigma0^2 / n
    (moment matching), with a floor. ``init`` is (mu1, sigma1, mu2,
    sigma2, weight). Returns the fitted tuple plus the responsibilities;
    raises NumericalError on collapse.
    """
    mu1, s1, mu2, s2, w = init
    prev = -np.inf
    noise = sigma0**2 / n
    r = np.full(ybar.shape, 0.5)
    for _ in range(max_iter):
        l1 = log_normal_pdf(ybar, mu1, s1**2 + noise) + np.log1p(-w)
        l2 = log_normal_pdf(ybar, mu2, s2**2 + noise) + np.log(w)
        m = np.maximum(l1, l2)
        denom = m + np.log(np.exp(l1 - m) + np.exp(l2 - m))
        r = np.exp(l2 - denom)
        total = float(denom.sum())

        w = float(r.mean())
        if w < 1e-12 or w > 1 - 1e-12:
            raise NumericalError("mixture component collapsed to zero weight")
        w1 = 1.0 - r
        mu1 = float((w1 * ybar).sum() / w1.sum())
        mu2 = float((r * ybar).sum() / r.sum())
        v1 = float((w1 * ((ybar - mu1) ** 2 - noise)).sum() / w1.sum())
        v2 = float((r * ((ybar - mu2) ** 2 - noise)).sum() / r.sum())
        if max(v1, v2) < VARIANCE_FLOOR:
            raise NumericalError("mixture component variance collapsed")
        s1 = math.sqrt(max(v1, VARIANCE_FLOOR))
        s2 = math.sqrt(max(v2, VARIANCE_FLOOR))
        if abs(total - prev) < tol * (1.0 + abs(total)):
            break
        prev = total
    if mu1 > mu2:
        mu1, s1, mu2, s2, w, r = mu2, s2, mu1, s1, 1.0 - w, 1.0 - r
    return (mu1, s1, mu2, s2, w), r


def _median_split_init(ybar):
    med = np.median(ybar)
    lo, hi = ybar[ybar <= med], ybar[ybar > med]
    if hi.size == 0:  # constant data; let EM sort it out from a nudge
        lo, hi = ybar, ybar + 1.0
    spread = max(float(ybar.std()), 0.1)
    return (float(lo.mean()), spread, float(hi.mean()), spread, 0.5)


def fit_plain_gmm(
    data: ExpressionTensor, sigma0: float, seed: int = 0, max_restarts: int = 5
):
    """Independent per-region mixture fit, ignoring all lattice coupling.

    Returns the fitted emission parameters and the initial latent grid
    (state 1 where the expressed component's posterior is >= 0.5).
    """
    B, G, T, _ = data.values.shape
    counts, mean, ss = data.cell_stats()
    mu1 = np.empty(B)
    s1 = np.empty(B)
    mu2 = np.empty(B)
    s2 = np.empty(B)
    wgt = np.empty(B)
    post = np.empty((B, G, T))
    rng = np.random.default_rng(seed)
    for b in range(B):
        n_b = counts[b].ravel()
        ybar_b = mean[b].ravel()
        init = _median_split_init(ybar_b)
        for attempt in range(max_restarts + 1):
            try:
                (m1, sd1, m2, sd2, w), r = _region_mixture_em(
                    n_b, ybar_b, sigma0, init
                )
                break
            except NumericalError:
                if attempt == max_restarts:
                    raise NumericalError(
                        f"mixture fit failed in region {data.regions[b]!r} "
                        f"after {max_restarts} restarts"
                    )
                lo, hi = np.quantile(ybar_b, rng.uniform(0.05, 0.45)), np.quantile(
                    ybar_b, rng.uniform(0.55, 0.95)
                )
                init = (float(lo), init[1] * 2, float(hi), init[3] * 2, rng.uniform(0.2, 0.8))
        mu1[b], s1[b], mu2[b], s2[b], wgt[b] = m1, sd1, m2, sd2, w
        post[b] = r.reshape(G, T)
    theta = GmmEmissionParams(mu1, s1, mu2, s2, float(sigma0), wgt)
    grid = LatentGrid(data.shape, (post >= 0.5).astype(np.int8))
    return theta, grid


def plain_posterior(data: ExpressionTensor, theta: GmmEmissionParams) -> np.ndarray:
    """Closed-form P(state=1 | cell) under the no-coupling mixture.

    This is what the lattice posterior reduces to when every coupling is
    zero and the node contrast equals logit of the mixing weight.
    """
    if theta.weight is None:
        raise ValueError("mixture weights are required for the plain posterior")
    l0, l1 = cell_loglik(data, theta)
    w = theta.weight[:, None, None]
    logit = np.log(w) - np.log1p(-w) + l1 - l0
    return _sigmoid(logit)


def update_theta_mle(
    data: ExpressionTensor,
    samples: list[LatentGrid],
    prev: GmmEmissionParams,
) -> GmmEmissionParams:
    """Weighted per-region mixture update given sampled latent grids.

    Each cell's weight for the expressed component is its frequency of
    state 1 across the samples. Component variances are recovered from the
    weighted variance of the cell means by subtracting the replicate-noise
    share sigma0^2 / n (moment matching), with a floor. A region whose
    weights are all 0 or all 1 keeps the previous value for the starved
    component.
    """
    if not samples:
        raise ValueError("need at least one latent sample")
    counts, mean, _ = data.cell_stats()
    w = np.zeros(mean.shape)
    for s in samples:
        w += s.states
    w /= len(samples)

    B = mean.shape[0]
    mu1 = prev.mu1.copy()
    s1 = prev.sigma1.copy()
    mu2 = prev.mu2.copy()
    s2 = prev.sigma2.copy()
    wgt = w.reshape(B, -1).mean(axis=1)
    sigma0 = prev.sigma0
    noise = sigma0**2 / counts
    for b in range(B):
        for comp, (mu_arr, sd_arr) in enumerate(((mu1, s1), (mu2, s2))):
            r = w[b] if comp == 1 else 1.0 - w[b]
            tot = float(r.sum())
            if tot <= 0.0:
                log.warning(
                    "region %s: component %d has no weight; keeping previous value",
                    data.regions[b], comp + 1,
                )
                continue
            mu_hat = float((r * mean[b]).sum() / tot)
            v_hat = float((r * ((mean[b] - mu_hat) ** 2 - noise[b])).sum() / tot)
            mu_arr[b] = mu_hat
            sd_arr[b] = math.sqrt(max(v_hat, VARIANCE_FLOOR))
        if mu1[b] > mu2[b]:  # keep the label contract: component 1 is the low mean
            mu1[b], mu2[b] = mu2[b], mu1[b]
            s1[b], s2[b] = s2[b], s1[b]
            wgt[b] = 1.0 - wgt[b]
    return GmmEmissionParams(mu1, s1, mu2, s2, sigma0, wgt)
