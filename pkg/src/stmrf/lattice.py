"""Lattice graphs, conditional logits, joint potentials and pseudolikelihood.

Two binary-state models share the same region x gene x time lattice:

* the expression model couples all region pairs within a time slot
  (one spatial coefficient) and same-region adjacent slots (one temporal
  coefficient);
* the differential-expression model splits regions into two groups with
  within- and cross-group spatial coefficients and may exclude cells via
  a mask.

Genes are independent blocks: no edge connects cells of different genes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Box constraint applied to all coupling parameters during optimization.
# sigma(+-10) is within 5e-5 of {0, 1}, so wider boxes only invite
# divergence toward degenerate all-agree configurations.
PARAM_BOUND = 10.0


@dataclass(frozen=True)
class LatticeShape:
    """Dimensions of the lattice: regions x genes x time slots."""

    regions: int
    genes: int
    periods: int

    def __post_init__(self):
        if self.regions < 1:
            raise ValueError(f"need at least one region, got {self.regions}")
        if self.genes < 1:
            raise ValueError(f"need at least one gene, got {self.genes}")
        if self.periods < 2:
            raise ValueError(f"need at least two time slots, got {self.periods}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.regions, self.genes, self.periods)

    @property
    def cells(self) -> int:
        return self.regions * self.genes * self.periods


@dataclass
class LatentGrid:
    """Binary latent states over a lattice, with an optional exclusion mask.

    ``mask[b, g, t] == True`` removes the cell from the node set; all its
    incident edges are dropped, so it contributes to no potential term and
    is never resampled.
    """

    shape: LatticeShape
    states: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.ascontiguousarray(self.states, dtype=np.int8)
        if self.states.shape != self.shape.dims:
            raise ValueError(
                f"states shape {self.states.shape} != lattice {self.shape.dims}"
            )
        if self.mask is not None:
            self.mask = np.ascontiguousarray(self.mask, dtype=bool)
            if self.mask.shape != self.shape.dims:
                raise ValueError(
                    f"mask shape {self.mask.shape} != lattice {self.shape.dims}"
                )
        active = self.states if self.mask is None else self.states[~self.mask]
        if active.size and not np.isin(active, (0, 1)).all():
            raise ValueError("unmasked states must be 0 or 1")

    @classmethod
    def zeros(cls, shape: LatticeShape, mask=None) -> "LatentGrid":
        return cls(shape, np.zeros(shape.dims, dtype=np.int8), mask)

    @classmethod
    def random(cls, shape: LatticeShape, rng, p: float = 0.5, mask=None) -> "LatentGrid":
        states = (rng.random(shape.dims) < p).astype(np.int8)
        return cls(shape, states, mask)

    def copy(self) -> "LatentGrid":
        mask = None if self.mask is None else self.mask.copy()
        return LatentGrid(self.shape, self.states.copy(), mask)

    def unmasked(self) -> np.ndarray:
        """Boolean array of cells that belong to the model."""
        if self.mask is None:
            return np.ones(self.shape.dims, dtype=bool)
        return ~self.mask

    def spins(self) -> np.ndarray:
        """States as +-1 floats; masked cells are 0 so they drop out of sums."""
        s = 2.0 * self.states - 1.0
        if self.mask is not None:
            s[self.mask] = 0.0
        return s


@dataclass(frozen=True)
class MrfParams:
    """Couplings of the expression-model prior.

    ``gamma`` is the identifiable node-level contrast (state-1 minus state-0
    potential), ``beta_spatial`` weighs agreement of region pairs within a
    time slot, ``beta_temporal`` weighs agreement of adjacent slots within
    a region.
    """

    gamma: float
    beta_spatial: float
    beta_temporal: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.gamma, self.beta_spatial, self.beta_temporal])

    @classmethod
    def from_vector(cls, vec) -> "MrfParams":
        g, b1, b2 = (float(v) for v in vec)
        return cls(g, b1, b2)

    n_params = 3
    names = ("gamma", "beta_spatial", "beta_temporal")


@dataclass(frozen=True, eq=False)
class DeMrfParams:
    """Couplings of the DE-model prior with two region groups.

    ``neocortex`` flags the regions in the first group. The cross-group
    coupling is a single field, which enforces the symmetry of the two
    cross directions structurally.
    """

    gamma: float
    beta_cc: float
    beta_nn: float
    beta_cn: float
    beta_t: float
    neocortex: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "neocortex", np.asarray(self.neocortex, dtype=bool))

    def as_vector(self) -> np.ndarray:
        return np.array([self.gamma, self.beta_cc, self.beta_nn, self.beta_cn, self.beta_t])

    @classmethod
    def from_vector(cls, vec, neocortex) -> "DeMrfParams":
        g, cc, nn, cn, bt = (float(v) for v in vec)
        return cls(g, cc, nn, cn, bt, neocortex)

    def with_vector(self, vec) -> "DeMrfParams":
        return DeMrfParams.from_vector(vec, self.neocortex)

    n_params = 5
    names = ("gamma", "beta_cc", "beta_nn", "beta_cn", "beta_t")


def split_groups(regions: int, n_first: int) -> np.ndarray:
    """Group labels with the first ``n_first`` regions in the first group."""
    if not 1 <= n_first < regions:
        raise ValueError("each group needs at least one region")
    labels = np.zeros(regions, dtype=bool)
    labels[:n_first] = True
    return labels


def default_groups(regions: int) -> np.ndarray:
    """11-of-16 split used throughout; scaled proportionally otherwise."""
    if regions == 16:
        return split_groups(16, 11)
    n_first = min(max(int(round(regions * 11 / 16)), 1), regions - 1)
    return split_groups(regions, n_first)


def build_edges(shape: LatticeShape) -> tuple[np.ndarray, np.ndarray]:
    """Edge lists of one gene's lattice as (b1, t1, b2, t2) rows.

    Returns the spatial set (all unordered region pairs within each slot)
    and the temporal set (same region, adjacent slots).
    """
    B, _, T = shape.dims
    b1, b2 = np.triu_indices(B, k=1)
    ts = np.repeat(np.arange(T), b1.size)
    spatial = np.column_stack(
        [np.tile(b1, T), ts, np.tile(b2, T), ts]
    ).astype(np.int64)
    bs = np.repeat(np.arange(B), T - 1)
    t1 = np.tile(np.arange(T - 1), B)
    temporal = np.column_stack([bs, t1, bs, t1 + 1]).astype(np.int64)
    return spatial, temporal


def conditional_prob(logit: float) -> float:
    """P(state = 1 | neighbours) from its logit, overflow-safe.

    The two orientations are exact complements: conditional_prob(f) +
    conditional_prob(-f) == 1.0 in floating point.
    """
    if logit >= 0.0:
        return 1.0 / (1.0 + math.exp(-logit))
    return 1.0 - conditional_prob(-logit)


def _check_cell(grid: LatentGrid, cell) -> tuple[int, int, int]:
    b, g, t = cell
    B, G, T = grid.shape.dims
    if not (0 <= b < B and 0 <= g < G and 0 <= t < T):
        raise IndexError(f"cell {cell} outside lattice {grid.shape.dims}")
    return b, g, t


def conditional_logit_expr(grid: LatentGrid, cell, phi: MrfParams) -> float:
    """Logit of P(x=1 | rest) for one cell of the expression model."""
    b, g, t = _check_cell(grid, cell)
    x = grid.states
    T = grid.shape.periods
    spatial = float(2 * x[:, g, t].sum() - x.shape[0] - (2 * x[b, g, t] - 1))
    temporal = 0.0
    if t != 0:
        temporal += 2.0 * x[b, g, t - 1] - 1.0
    if t != T - 1:
        temporal += 2.0 * x[b, g, t + 1] - 1.0
    return phi.gamma + phi.beta_spatial * spatial + phi.beta_temporal * temporal


def conditional_logit_de(grid: LatentGrid, cell, phi: DeMrfParams) -> float:
    """Logit of P(s=1 | rest) for one unmasked cell of the DE model.

    Masked neighbours contribute nothing; a masked target cell has no
    conditional distribution and raises.
    """
    b, g, t = _check_cell(grid, cell)
    if grid.mask is not None and grid.mask[b, g, t]:
        raise ValueError(f"cell {cell} is masked out of the model")
    T = grid.shape.periods
    spins = grid.spins()
    neo = phi.neocortex
    same_sum = spins[neo, g, t].sum() if neo[b] else spins[~neo, g, t].sum()
    same = same_sum - spins[b, g, t]
    cross = spins[~neo, g, t].sum() if neo[b] else spins[neo, g, t].sum()
    beta_same = phi.beta_cc if neo[b] else phi.beta_nn
    temporal = 0.0
    if t != 0:
        temporal += spins[b, g, t - 1]
    if t != T - 1:
        temporal += spins[b, g, t + 1]
    return (
        phi.gamma + beta_same * same + phi.beta_cn * cross + phi.beta_t * temporal
    )


def joint_log_potential(grid: LatentGrid, params) -> float:
    """Unnormalized log-probability of a single-gene grid.

    Node term: gamma per state-1 cell. Edge terms: the edge-class coupling
    per agreeing pair. Masked cells and their incident edges are excluded.
    """
    if grid.shape.genes != 1:
        raise ValueError("joint potential is defined per gene; pass a single-gene grid")
    x = grid.states[:, 0, :]
    keep = grid.unmasked()[:, 0, :]
    spatial, temporal = build_edges(grid.shape)
    total = params.gamma * float(x[keep].sum())

    def edge_sum(edges, weight_fn):
        s = 0.0
        for b1, t1, b2, t2 in edges:
            if keep[b1, t1] and keep[b2, t2] and x[b1, t1] == x[b2, t2]:
                s += weight_fn(b1, b2)
        return s

    if isinstance(params, MrfParams):
        total += edge_sum(spatial, lambda b1, b2: params.beta_spatial)
        total += edge_sum(temporal, lambda b1, b2: params.beta_temporal)
    elif isinstance(params, DeMrfParams):
        neo = params.neocortex

        def spatial_weight(b1, b2):
            if neo[b1] and neo[b2]:
                return params.beta_cc
            if not neo[b1] and not neo[b2]:
                return params.beta_nn
            return params.beta_cn

        total += edge_sum(spatial, spatial_weight)
        total += edge_sum(temporal, lambda b1, b2: params.beta_t)
    else:
        raise TypeError(f"unsupported parameter type {type(params)!r}")
    return total


def temporal_sums(spins: np.ndarray) -> np.ndarray:
    """Sum of the (up to two) temporal-neighbour spins for every cell."""
    out = np.zeros_like(spins)
    out[:, :, 1:] += spins[:, :, :-1]
    out[:, :, :-1] += spins[:, :, 1:]
    return out


def expr_covariates(grid: LatentGrid):
    """Per-cell logit covariates of the expression model.

    Returns (spatial, temporal) neighbour-spin sums, each (B, G, T); the
    logit is gamma + beta_spatial * spatial + beta_temporal * temporal.
    """
    spins = grid.spins()
    spatial = spins.sum(axis=0, keepdims=True) - spins
    return spatial, temporal_sums(spins)


def de_covariates(grid: LatentGrid, neocortex: np.ndarray):
    """Per-cell logit covariates of the DE model.

    Returns (same, cross, temporal) neighbour-spin sums; ``same`` pairs
    with the cell's own-group coupling, ``cross`` with the cross-group one.
    """
    spins = grid.spins()
    neo = np.asarray(neocortex, dtype=bool)
    neo_sum = spins[neo].sum(axis=0, keepdims=True)
    non_sum = spins[~neo].sum(axis=0, keepdims=True)
    col = neo[:, None, None]
    same = np.where(col, neo_sum, non_sum) - spins
    cross = np.where(col, non_sum, neo_sum)
    return same, cross, temporal_sums(spins)


def conditional_logits(grid: LatentGrid, params) -> np.ndarray:
    """Array of conditional logits for every cell (masked cells: 0)."""
    if isinstance(params, MrfParams):
        spatial, temporal = expr_covariates(grid)
        return (
            params.gamma
            + params.beta_spatial * spatial
            + params.beta_temporal * temporal
        )
    if isinstance(params, DeMrfParams):
        same, cross, temporal = de_covariates(grid, params.neocortex)
        beta_same = np.where(
            params.neocortex[:, None, None], params.beta_cc, params.beta_nn
        )
        return (
            params.gamma
            + beta_same * same
            + params.beta_cn * cross
            + params.beta_t * temporal
        )
    raise TypeError(f"unsupported parameter type {type(params)!r}")


def log_pseudolikelihood(grid: LatentGrid, params) -> tuple[float, np.ndarray]:
    """Sum of per-cell conditional log-probabilities and its gradient.

    The value is sum over unmasked cells of log P(cell | rest); the
    gradient (in the order of ``params.as_vector``) follows from the
    logistic form: each cell contributes (x - sigma(F)) times dF/dtheta.
    """
    keep = grid.unmasked()
    x = grid.states.astype(np.float64)
    logits = conditional_logits(grid, params)
    value = float((x * logits - np.logaddexp(0.0, logits))[keep].sum())
    resid = np.where(keep, x - _sigmoid(logits), 0.0)
    if isinstance(params, MrfParams):
        spatial, temporal = expr_covariates(grid)
        grad = np.array(
            [resid.sum(), (resid * spatial).sum(), (resid * temporal).sum()]
        )
    else:
        same, cross, temporal = de_covariates(grid, params.neocortex)
        neo_col = params.neocortex[:, None, None]
        grad = np.array(
            [
                resid.sum(),
                (resid * same * neo_col).sum(),
                (resid * same * ~neo_col).sum(),
                (resid * cross).sum(),
                (resid * temporal).sum(),
            ]
        )
    return value, grad


def _sigmoid(f: np.ndarray) -> np.ndarray:
    out = np.empty_like(f, dtype=np.float64)
    pos = f >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-f[pos]))
    ef = np.exp(f[~pos])
    out[~pos] = ef / (1.0 + ef)
    return out


def enumerate_joint(grid: LatentGrid, params):
    """All state assignments of the unmasked cells with joint log-potentials.

    Brute-force oracle for small lattices (<= ~16 unmasked cells). Yields
    (grid_copy, log_potential) for each of the 2^n assignments.
    """
    if grid.shape.genes != 1:
        raise ValueError("enumeration is defined per gene")
    keep = grid.unmasked()
    cells = np.argwhere(keep)
    n = len(cells)
    if n > 20:
        raise ValueError(f"{n} unmasked cells is too many to enumerate")
    for bits in range(1 << n):
        g = grid.copy()
        for i, (b, gg, t) in enumerate(cells):
            g.states[b, gg, t] = (bits >> i) & 1
        yield g, joint_log_potential(g, params)
