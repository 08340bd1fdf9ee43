"""Gibbs sampling over latent grids and posterior marginal estimation.

A sweep resamples every unmasked cell once, in a fixed raster order
(gene-major, then region, then time), from the product of the lattice
conditional and the cell's emission likelihood ratio. Each gene owns an
independent RNG substream spawned from the chain seed, so the per-gene
sample path does not depend on whether genes are processed serially or
in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from . import emission
from .lattice import DeMrfParams, LatentGrid, LatticeShape, MrfParams

_threads = 1


def configure_threads(n: int) -> None:
    """Set the number of worker threads used for gene-parallel sweeps."""
    global _threads
    n = max(1, int(n))
    if n > 1:
        numba.config.THREADING_LAYER = "workqueue"  # fork-safe, no TBB dependency
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    _threads = n


@dataclass(frozen=True)
class ChainSchedule:
    """Sweep counts for one chain: total = burn_in + kept, no thinning."""

    burn_in: int
    kept: int
    seed: int = 0

    def __post_init__(self):
        if self.kept < 1:
            raise ValueError("a chain must keep at least one sample")
        if self.burn_in < 0:
            raise ValueError("burn-in cannot be negative")

    @property
    def total(self) -> int:
        return self.burn_in + self.kept


@dataclass
class PosteriorGrid:
    """Per-cell posterior probability of state 1; NaN where masked."""

    shape: LatticeShape
    prob: np.ndarray
    mask: np.ndarray | None
    samples: int

    @property
    def null_prob(self) -> np.ndarray:
        """Posterior probability of state 0 (the DE local-fdr quantity)."""
        return 1.0 - self.prob

    def calls(self, cutoff: float = 0.5) -> np.ndarray:
        """Hard state calls at a posterior cutoff (masked cells stay 0)."""
        out = np.zeros(self.shape.dims, dtype=np.int8)
        keep = np.ones(self.shape.dims, dtype=bool) if self.mask is None else ~self.mask
        out[keep] = (self.prob[keep] >= cutoff).astype(np.int8)
        return out


@dataclass
class ExpressionModel:
    """Sampling target for the expression question: MRF prior x replicate GMM."""

    phi: MrfParams
    loglik0: np.ndarray
    loglik1: np.ndarray

    mask = None
    kind = "expression"

    @classmethod
    def build(cls, data, phi: MrfParams, theta) -> "ExpressionModel":
        l0, l1 = emission.cell_loglik(data, theta)
        return cls(phi, l0, l1)

    @property
    def logodds(self) -> np.ndarray:
        return self.loglik1 - self.loglik0


@dataclass
class DeModel:
    """Sampling target for the DE question: grouped MRF prior x fixed densities."""

    phi: DeMrfParams
    loglik0: np.ndarray
    loglik1: np.ndarray
    mask: np.ndarray

    kind = "de"

    @property
    def logodds(self) -> np.ndarray:
        return self.loglik1 - self.loglik0


def gene_streams(seed: int, genes: int) -> list[np.random.Generator]:
    """Independent per-gene generators derived from one master seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(genes)]


def _uniform_block(rngs, cells_per_gene: int) -> np.ndarray:
    u = np.empty((len(rngs), cells_per_gene))
    for g, rng in enumerate(rngs):
        u[g] = rng.random(cells_per_gene)
    return u


def _sweep_expr_impl(states, col, elo, u, gamma, b1, b2, reverse):
    B, G, T = states.shape
    for g in prange(G):
        k = 0
        for bi in range(B):
            b = B - 1 - bi if reverse else bi
            for ti in range(T):
                t = T - 1 - ti if reverse else ti
                s_self = 2.0 * states[b, g, t] - 1.0
                nb = col[g, t] - s_self
                tsum = 0.0
                if t > 0:
                    tsum += 2.0 * states[b, g, t - 1] - 1.0
                if t < T - 1:
                    tsum += 2.0 * states[b, g, t + 1] - 1.0
                f = gamma + b1 * nb + b2 * tsum + elo[b, g, t]
                if f >= 0.0:
                    p1 = 1.0 / (1.0 + math.exp(-f))
                else:
                    ef = math.exp(f)
                    p1 = ef / (1.0 + ef)
                x_new = 1 if u[g, k] < p1 else 0
                if x_new != states[b, g, t]:
                    col[g, t] += 2.0 * x_new - 2.0 * states[b, g, t]
                    states[b, g, t] = x_new
                k += 1


def _sweep_de_impl(states, mask, col_c, col_n, neo, elo, u,
                   gamma, bcc, bnn, bcn, bt, reverse):
    B, G, T = states.shape
    for g in prange(G):
        k = 0
        for bi in range(B):
            b = B - 1 - bi if reverse else bi
            for ti in range(T):
                t = T - 1 - ti if reverse else ti
                k_cell = k
                k += 1
                if mask[b, g, t]:
                    continue
                s_self = 2.0 * states[b, g, t] - 1.0
                if neo[b]:
                    same = col_c[g, t] - s_self
                    cross = col_n[g, t]
                    b_same = bcc
                else:
                    same = col_n[g, t] - s_self
                    cross = col_c[g, t]
                    b_same = bnn
                tsum = 0.0
                if t > 0 and not mask[b, g, t - 1]:
                    tsum += 2.0 * states[b, g, t - 1] - 1.0
                if t < T - 1 and not mask[b, g, t + 1]:
                    tsum += 2.0 * states[b, g, t + 1] - 1.0
                f = gamma + b_same * same + bcn * cross + bt * tsum + elo[b, g, t]
                if f >= 0.0:
                    p1 = 1.0 / (1.0 + math.exp(-f))
                else:
                    ef = math.exp(f)
                    p1 = ef / (1.0 + ef)
                s_new = 1 if u[g, k_cell] < p1 else 0
                if s_new != states[b, g, t]:
                    delta = 2.0 * s_new - 2.0 * states[b, g, t]
                    if neo[b]:
                        col_c[g, t] += delta
                    else:
                        col_n[g, t] += delta
                    states[b, g, t] = s_new


_sweep_expr = njit(cache=True)(_sweep_expr_impl)
_sweep_expr_par = njit(parallel=True, cache=True)(_sweep_expr_impl)
_sweep_de = njit(cache=True)(_sweep_de_impl)
_sweep_de_par = njit(parallel=True, cache=True)(_sweep_de_impl)


class _SweepState:
    """Mutable per-chain scratch: the grid plus incremental spin column sums."""

    def __init__(self, grid: LatentGrid, model):
        self.grid = grid
        self.model = model
        spins = grid.spins()
        if model.kind == "expression":
            if grid.mask is not None:
                raise ValueError("expression grids do not support masks")
            self.col = np.ascontiguousarray(spins.sum(axis=0))
            self.elo = np.ascontiguousarray(model.logodds)
        else:
            mask = model.mask
            if grid.mask is None or not np.array_equal(grid.mask, mask):
                raise ValueError("grid mask must match the DE model mask")
            neo = model.phi.neocortex
            self.col_c = np.ascontiguousarray(spins[neo].sum(axis=0))
            self.col_n = np.ascontiguousarray(spins[~neo].sum(axis=0))
            self.elo = np.ascontiguousarray(np.where(mask, 0.0, model.logodds))

    def sweep(self, u: np.ndarray, reverse: bool = False):
        m = self.model
        if m.kind == "expression":
            kern = _sweep_expr_par if _threads > 1 else _sweep_expr
            kern(self.grid.states, self.col, self.elo, u,
                 m.phi.gamma, m.phi.beta_spatial, m.phi.beta_temporal, reverse)
        else:
            kern = _sweep_de_par if _threads > 1 else _sweep_de
            kern(self.grid.states, m.mask, self.col_c, self.col_n,
                 m.phi.neocortex, self.elo, u,
                 m.phi.gamma, m.phi.beta_cc, m.phi.beta_nn, m.phi.beta_cn,
                 m.phi.beta_t, reverse)


def gibbs_sweep(grid: LatentGrid, model, rngs, reverse: bool = False) -> LatentGrid:
    """One full sweep, in place. ``rngs`` is the per-gene generator list."""
    B, G, T = grid.shape.dims
    state = _SweepState(grid, model)
    state.sweep(_uniform_block(rngs, B * T), reverse)
    return grid


def run_chain(init: LatentGrid, model, schedule: ChainSchedule,
              reverse: bool = False) -> list[LatentGrid]:
    """Run a chain from ``init`` and return the kept post-burn-in grids."""
    grid = init.copy()
    B, G, T = grid.shape.dims
    rngs = gene_streams(schedule.seed, G)
    state = _SweepState(grid, model)
    samples = []
    for i in range(schedule.total):
        state.sweep(_uniform_block(rngs, B * T), reverse)
        if i >= schedule.burn_in:
            samples.append(grid.copy())
    return samples


def posterior_marginals(init: LatentGrid, model, schedule: ChainSchedule,
                        reverse: bool = False) -> PosteriorGrid:
    """Per-cell mean of sampled states across the kept sweeps.

    Parameters stay fixed; this is the separate posterior pass run after
    fitting. Masked cells carry NaN.
    """
    grid = init.copy()
    B, G, T = grid.shape.dims
    rngs = gene_streams(schedule.seed, G)
    state = _SweepState(grid, model)
    acc = np.zeros(grid.shape.dims)
    for i in range(schedule.total):
        state.sweep(_uniform_block(rngs, B * T), reverse)
        if i >= schedule.burn_in:
            acc += grid.states
    prob = acc / schedule.kept
    if model.mask is not None:
        prob[model.mask] = np.nan
    return PosteriorGrid(grid.shape, prob, model.mask, schedule.kept)
