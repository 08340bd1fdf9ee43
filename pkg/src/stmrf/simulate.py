"""Simulation protocols, estimator comparisons and evaluation metrics.

Five generating protocols are supported: two for the expression question
(lattice-sampled states and a hidden-Markov variant with region flips)
and three for the DE question (lattice-sampled DE states with direct
z-scores, a cumulative-mean expression variant that exercises the full
t-to-z pipeline, and a churn process with distinct region groups).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import defdr, emission as em, gibbs, mcem
from .errors import DataError, NumericalError
from .lattice import DeMrfParams, LatentGrid, LatticeShape, MrfParams, default_groups

log = logging.getLogger(__name__)

SETTINGS = ("expr-1", "expr-2", "de-1", "de-2", "de-3")

# generating constants shared by the protocols
EXPR_PHI = MrfParams(0.08, 0.20, 1.5)
DE_PHI_VALUES = (-0.10, 0.31, 0.52, 0.06, 0.14)
MU1, SIGMA1, SIGMA2 = 4.5, 0.75, 1.5
SIGMA0_SQ = 0.25
HMM_FLIP = 0.1
DE_START = 0.4
DE3_START = 0.15
DE3_CHURN = 0.70
DE3_GROUP_SWITCH = 0.40
DE_MEAN_SHIFT = 2.0
GIBBS_ROUNDS = 3


@dataclass(frozen=True)
class SimSpec:
    """One simulation protocol with its shape and knobs.

    ``periods`` counts expression periods for the expr settings and DE
    time slots for the de settings; it defaults to 13 and 12 respectively
    (the de-2 expression tensor spans periods + 1 columns so its
    transitions line up with the slots).
    """

    setting: str
    genes: int = 100
    regions: int = 16
    periods: int | None = None
    replicates: int = 3
    mu2: float = 8.0
    flip: float = 0.1
    mask_fraction: float = 0.1
    runs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise DataError(f"unknown setting {self.setting!r}; expected one of {SETTINGS}")
        if self.periods is None:
            object.__setattr__(self, "periods", 12 if self.is_de else 13)
        if self.periods < 2:
            raise DataError("need at least two time slots")
        if not (0.0 <= self.flip <= 1.0 and 0.0 <= self.mask_fraction <= 1.0):
            raise DataError("proportions must lie in [0, 1]")
        if self.replicates < 1 or self.genes < 1 or self.regions < 2:
            raise DataError("invalid lattice dimensions")

    @property
    def is_de(self) -> bool:
        return self.setting.startswith("de")

    @property
    def shape(self) -> LatticeShape:
        return LatticeShape(self.regions, self.genes, self.periods)


@dataclass
class SimData:
    """Output of one simulated run: the truth plus the observations."""

    truth: LatentGrid
    tensor: em.ExpressionTensor | None = None
    zgrid: defdr.ZScoreGrid | None = None
    expressed: LatentGrid | None = None
    neocortex: np.ndarray | None = None


def _labels(spec: SimSpec, periods: int):
    return (
        [f"R{i + 1}" for i in range(spec.regions)],
        [f"P{i + 1}" for i in range(periods)],
        [f"G{i + 1}" for i in range(spec.genes)],
    )


def _prior_sweeps(grid: LatentGrid, params, rng, rounds: int = GIBBS_ROUNDS):
    """Rounds of Gibbs sampling from the lattice prior alone."""
    zeros = np.zeros(grid.shape.dims)
    if isinstance(params, MrfParams):
        model = gibbs.ExpressionModel(params, zeros, zeros)
    else:
        model = gibbs.DeModel(params, zeros, zeros, grid.mask)
    rngs = rng.spawn(grid.shape.genes)
    for _ in range(rounds):
        gibbs.gibbs_sweep(grid, model, rngs)
    return grid


def _emit_expression(spec: SimSpec, states: np.ndarray, rng,
                     periods: int | None = None) -> em.ExpressionTensor:
    """Mixture means from the states, then replicates around each mean."""
    B, G = spec.regions, spec.genes
    T = periods if periods is not None else states.shape[2]
    mu = np.where(
        states.astype(bool),
        rng.normal(spec.mu2, SIGMA2, size=(B, G, T)),
        rng.normal(MU1, SIGMA1, size=(B, G, T)),
    )
    return _replicates_around(spec, mu, rng, T)


def _replicates_around(spec: SimSpec, mu: np.ndarray, rng, T: int) -> em.ExpressionTensor:
    B, G = spec.regions, spec.genes
    K = spec.replicates
    values = mu[..., None] + rng.normal(0.0, math.sqrt(SIGMA0_SQ), size=(B, G, T, K))
    n = np.full((B, T), K, dtype=np.int64)
    regions, periods, genes = _labels(spec, T)
    return em.ExpressionTensor(values, n, regions, periods, genes,
                               neocortex=default_groups(B))


def _mask_gene_ranges(spec: SimSpec, rng) -> np.ndarray:
    """Unexpressed-gene mask: random prefix or suffix of slots, all regions."""
    B, G, T = spec.shape.dims
    mask = np.zeros((B, G, T), dtype=bool)
    n_masked = int(round(spec.mask_fraction * G))
    genes = rng.choice(G, size=n_masked, replace=False)
    for g in genes:
        t = int(rng.integers(1, T + 1))
        if rng.random() < 0.5:
            mask[:, g, :t] = True
        else:
            mask[:, g, t - 1:] = True
    return mask


def _simulate_expr1(spec: SimSpec, rng) -> SimData:
    grid = LatentGrid.random(spec.shape, rng)
    _prior_sweeps(grid, EXPR_PHI, rng)
    tensor = _emit_expression(spec, grid.states, rng)
    return SimData(truth=grid, tensor=tensor)


def _simulate_expr2(spec: SimSpec, rng) -> SimData:
    B, G, T = spec.shape.dims
    series = np.zeros((G, T), dtype=np.int8)
    series[:, 0] = rng.random(G) < 0.5
    flips = rng.random((G, T - 1)) < HMM_FLIP
    for t in range(1, T):
        series[:, t] = series[:, t - 1] ^ flips[:, t - 1]
    states = np.broadcast_to(series[None, :, :], (B, G, T)).copy()
    n_flip = int(round(spec.flip * states.size))
    idx = rng.choice(states.size, size=n_flip, replace=False)
    flat = states.reshape(-1)
    flat[idx] ^= 1
    grid = LatentGrid(spec.shape, states)
    tensor = _emit_expression(spec, grid.states, rng)
    return SimData(truth=grid, tensor=tensor)


def _de_phi(spec: SimSpec) -> DeMrfParams:
    return DeMrfParams(*DE_PHI_VALUES, neocortex=default_groups(spec.regions))


def _emit_zscores(states: np.ndarray, mask: np.ndarray, rng) -> np.ndarray:
    """Mixture z draws: N(0,1) under EE, N(+-2, 1) with equal odds under DE."""
    z = rng.normal(size=states.shape)
    signs = np.where(rng.random(states.shape) < 0.5, -1.0, 1.0)
    z = z + np.where(states.astype(bool), signs * DE_MEAN_SHIFT, 0.0)
    z[mask] = np.nan
    return z


def _de_lattice_states(spec: SimSpec, rng, start: float) -> LatentGrid:
    mask = _mask_gene_ranges(spec, rng)
    states = (rng.random(spec.shape.dims) < start).astype(np.int8)
    states[mask] = 0
    grid = LatentGrid(spec.shape, states, mask)
    _prior_sweeps(grid, _de_phi(spec), rng)
    return grid


def _simulate_de1(spec: SimSpec, rng) -> SimData:
    grid = _de_lattice_states(spec, rng, DE_START)
    z = _emit_zscores(grid.states, grid.mask, rng)
    zgrid = defdr.ZScoreGrid(np.where(grid.mask, 0.0, z), grid.mask.copy())
    return SimData(truth=grid, zgrid=zgrid, neocortex=default_groups(spec.regions))


def _simulate_de2(spec: SimSpec, rng) -> SimData:
    grid = _de_lattice_states(spec, rng, DE_START)
    B, G, T = spec.shape.dims
    mu = np.zeros((B, G, T + 1))
    deltas = rng.normal(size=(B, G, T))
    for t in range(T):
        mu[:, :, t + 1] = mu[:, :, t] + grid.states[:, :, t] * deltas[:, :, t]
    tensor = _replicates_around(spec, mu, rng, T + 1)
    # slot mask -> expressed periods: a slot is masked iff one adjacent
    # period is unexpressed, so prefixes/suffixes translate directly
    expressed = np.ones((B, G, T + 1), dtype=bool)
    slot_mask = grid.mask
    expressed[:, :, :-1] &= ~slot_mask
    expressed[:, :, 1:] &= ~slot_mask
    expr_grid = LatentGrid(LatticeShape(B, G, T + 1), expressed.astype(np.int8))
    return SimData(
        truth=grid,
        tensor=tensor,
        expressed=expr_grid,
        neocortex=default_groups(spec.regions),
    )


def _churn_series(spec: SimSpec, rng) -> np.ndarray:
    """Per-gene DE series with constant per-slot count: the DE genes that
    switch off each slot are replaced by an equal number switching on."""
    G, T = spec.genes, spec.periods
    series = np.zeros((G, T), dtype=np.int8)
    series[:, 0] = rng.random(G) < DE3_START
    for t in range(1, T):
        cur = series[:, t - 1].copy()
        de_idx = np.flatnonzero(cur == 1)
        ee_idx = np.flatnonzero(cur == 0)
        k = int(round(DE3_CHURN * de_idx.size))
        k = min(k, ee_idx.size)
        if k:
            cur[rng.choice(de_idx, size=k, replace=False)] = 0
            cur[rng.choice(ee_idx, size=k, replace=False)] = 1
        series[:, t] = cur
    return series


def _simulate_de3(spec: SimSpec, rng) -> SimData:
    B, G, T = spec.shape.dims
    neo = default_groups(B)
    neo_series = _churn_series(spec, rng)
    non_series = neo_series.copy()
    for t in range(T):
        de_idx = np.flatnonzero(neo_series[:, t] == 1)
        k = int(round(DE3_GROUP_SWITCH * de_idx.size))
        if k:
            non_series[rng.choice(de_idx, size=k, replace=False), t] = 0
    states = np.where(neo[:, None, None], neo_series[None], non_series[None]).astype(np.int8)

    # per-slot perturbation: equal numbers switch out and in, so each
    # slot's DE count is preserved exactly
    for t in range(T):
        sl = states[:, :, t]
        de_cells = np.argwhere(sl == 1)
        ee_cells = np.argwhere(sl == 0)
        k = int(round(spec.flip * len(de_cells)))
        k = min(k, len(ee_cells))
        if k:
            out_sel = de_cells[rng.choice(len(de_cells), size=k, replace=False)]
            in_sel = ee_cells[rng.choice(len(ee_cells), size=k, replace=False)]
            sl[out_sel[:, 0], out_sel[:, 1]] = 0
            sl[in_sel[:, 0], in_sel[:, 1]] = 1
    mask = _mask_gene_ranges(spec, rng)
    states[mask] = 0
    grid = LatentGrid(spec.shape, states, mask)
    z = _emit_zscores(grid.states, mask, rng)
    zgrid = defdr.ZScoreGrid(np.where(mask, 0.0, z), mask.copy())
    return SimData(truth=grid, zgrid=zgrid, neocortex=neo)


def simulate(spec: SimSpec, rng) -> SimData:
    """Draw one data set under the protocol; deterministic in (spec, rng)."""
    return {
        "expr-1": _simulate_expr1,
        "expr-2": _simulate_expr2,
        "de-1": _simulate_de1,
        "de-2": _simulate_de2,
        "de-3": _simulate_de3,
    }[spec.setting](spec, rng)


def misclassification_rate(estimate: LatentGrid, truth: LatentGrid) -> float:
    """Fraction of unmasked cells whose states differ."""
    if estimate.shape != truth.shape:
        raise ValueError("grids have different shapes")
    keep_e, keep_t = estimate.unmasked(), truth.unmasked()
    if not np.array_equal(keep_e, keep_t):
        raise ValueError("grids have different masks")
    return float(
        (estimate.states[keep_t] != truth.states[keep_t]).mean()
    )


@dataclass
class RocCurve:
    """Threshold sweep points (threshold, sensitivity, specificity) and AUC."""

    points: np.ndarray
    auc: float

    def sensitivity_at(self, specificity_grid: np.ndarray) -> np.ndarray:
        spec = self.points[:, 2]
        sens = self.points[:, 1]
        order = np.argsort(spec)
        return np.interp(specificity_grid, spec[order], sens[order])


def roc_curve(posterior, truth: LatentGrid, region_filter=None) -> RocCurve:
    """ROC of the posterior null probabilities against the true states.

    Smaller null probability ranks as stronger evidence; thresholds sweep
    the observed values. ``region_filter`` restricts the evaluation to a
    boolean subset of regions (the two region groups, typically).
    """
    q = posterior.null_prob if isinstance(posterior, gibbs.PosteriorGrid) else np.asarray(posterior)
    keep = truth.unmasked()
    if region_filter is not None:
        keep = keep & np.asarray(region_filter, dtype=bool)[:, None, None]
    qv = q[keep]
    labels = truth.states[keep].astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise NumericalError(
            f"ROC undefined: {n_pos} positives, {n_neg} negatives"
        )
    order = np.argsort(qv, kind="stable")
    sorted_labels = labels[order]
    sorted_q = qv[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(~sorted_labels)
    last = np.nonzero(np.diff(np.append(sorted_q, np.inf)))[0]  # last index per tie group
    sens = tp[last] / n_pos
    spec = 1.0 - fp[last] / n_neg
    points = np.column_stack([sorted_q[last], sens, spec])
    fpr = np.concatenate([[0.0], fp[last] / n_neg, [1.0]])
    tpr = np.concatenate([[0.0], sens, [1.0]])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(points, auc)


def average_roc(curves: list[RocCurve], grid_points: int = 101):
    """Mean sensitivity at a fixed specificity grid across runs."""
    grid = np.linspace(0.0, 1.0, grid_points)
    sens = np.mean([c.sensitivity_at(grid) for c in curves], axis=0)
    return grid, sens


@dataclass
class SummaryRow:
    method: str
    metric: str
    mean: float
    sd: float
    runs: int


DEFAULT_POSTERIOR = gibbs.ChainSchedule(200, 1000)


def _fit_expression_run(sim: SimData, seed: int, config, post_sched):
    """Plain-mixture and lattice-model calls for one simulated data set."""
    sigma0 = math.sqrt(em.estimate_sigma0(sim.tensor))
    theta_p, grid_p = em.fit_plain_gmm(sim.tensor, sigma0, seed=seed)
    out = {"plain": grid_p}

    cfg = replace(config, seed=mcem.derive_seed(seed, 2, 0))
    phi, theta, state = mcem.mcem_fit_expression(sim.tensor, cfg)
    model = gibbs.ExpressionModel.build(sim.tensor, phi, theta)
    sched = replace(post_sched, seed=mcem.derive_seed(seed, 3, 0))
    post = gibbs.posterior_marginals(state.grid, model, sched)
    out["mrf"] = LatentGrid(sim.truth.shape, post.calls())
    return out


def _fit_de_run(sim: SimData, seed: int, config, post_sched):
    """EB and lattice-model posterior null probabilities for one data set."""
    zgrid = sim.zgrid
    if zgrid is None:
        zgrid = defdr.build_zscore_grid(sim.tensor, sim.expressed)
    fdr = defdr.fit_local_fdr(zgrid.pooled())
    q_eb = np.where(zgrid.mask, np.nan, fdr.local_fdr(np.where(zgrid.mask, 0.0, zgrid.z)))
    out = {"eb": q_eb}

    cfg = replace(config, seed=mcem.derive_seed(seed, 2, 0))
    phi, state = mcem.mcem_fit_de(zgrid, fdr, cfg, sim.neocortex)
    model = defdr.de_gibbs_model(zgrid, phi, fdr)
    sched = replace(post_sched, seed=mcem.derive_seed(seed, 3, 0))
    post = gibbs.posterior_marginals(state.grid, model, sched)
    out["mrf"] = post.null_prob
    return out, zgrid


def compare_models(
    spec: SimSpec,
    methods=("mrf", "plain"),
    runs: int | None = None,
    config: mcem.McemConfig | None = None,
    posterior_schedule: gibbs.ChainSchedule = DEFAULT_POSTERIOR,
    collect_roc: bool = False,
):
    """Seeded independent runs; per-method mean and sd of the chosen metric.

    Expression settings score misclassification at the 0.5 posterior
    cutoff; DE settings score the area under the ROC separately for the
    two region groups. Returns summary rows, plus the per-method ROC
    curve lists when ``collect_roc`` is set.
    """
    n_runs = spec.runs if runs is None else runs
    if n_runs < 2:
        raise DataError("need at least two runs for a mean/sd summary")
    allowed = {"mrf", "eb"} if spec.is_de else {"mrf", "plain"}
    unknown = set(methods) - allowed
    if unknown:
        raise DataError(f"methods {sorted(unknown)} unavailable for {spec.setting}")
    cfg = config if config is not None else mcem.reduced_config()
    run_seeds = [
        mcem.derive_seed(spec.seed, 1, i) for i in range(n_runs)
    ]
    metrics: dict[tuple[str, str], list[float]] = {}
    roc_store: dict[tuple[str, str], list[RocCurve]] = {}
    for i, seed in enumerate(run_seeds):
        rng = np.random.default_rng(seed)
        sim = simulate(spec, rng)
        if not spec.is_de:
            fits = _fit_expression_run(sim, seed, cfg, posterior_schedule)
            for method in methods:
                mis = misclassification_rate(fits[method], sim.truth)
                metrics.setdefault((method, "misclassification"), []).append(mis)
        else:
            fits, zgrid = _fit_de_run(sim, seed, cfg, posterior_schedule)
            truth = LatentGrid(zgrid.shape, sim.truth.states, zgrid.mask.copy())
            neo = sim.neocortex
            for method in methods:
                for name, sel in (("auc_neocortex", neo), ("auc_nonneocortex", ~neo)):
                    curve = roc_curve(fits[method], truth, region_filter=sel)
                    metrics.setdefault((method, name), []).append(curve.auc)
                    roc_store.setdefault((method, name), []).append(curve)
        log.info("run %d/%d done", i + 1, n_runs)
    rows = [
        SummaryRow(method, metric, float(np.mean(v)), float(np.std(v, ddof=1)), len(v))
        for (method, metric), v in metrics.items()
    ]
    if collect_roc:
        return rows, roc_store
    return rows
