"""Monte Carlo EM drivers for both lattice models.

The E-step draws latent grids by Gibbs sampling; the M-step maximizes the
Monte Carlo average of the complete-data objective, with the intractable
prior likelihood replaced by the pseudolikelihood. The coupling part is
concave in the parameters (each cell is a logistic regression on integer
neighbour-spin sums), so the samples collapse into a small contingency
table over those sums and the maximization runs on the table.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import emission as em
from .errors import NumericalError
from .gibbs import ChainSchedule, DeModel, ExpressionModel, run_chain
from .lattice import PARAM_BOUND, DeMrfParams, LatentGrid, MrfParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class McemStage:
    """A block of MCEM iterations sharing one chain schedule."""

    iterations: int
    schedule: ChainSchedule

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("a stage needs at least one iteration")


@dataclass(frozen=True)
class McemConfig:
    """Stage schedule and tolerances for an MCEM run.

    ``seed`` masters all chain randomness: iteration i samples with a seed
    derived from (seed, i), which makes checkpoint resume exact. The seed
    field of the stage schedules is ignored.
    """

    stages: tuple[McemStage, ...]
    seed: int = 0
    optimizer_tol: float = 1e-5
    param_bound: float = PARAM_BOUND
    convergence_tol: float = 1e-3
    convergence_runs: int = 3

    def __post_init__(self):
        if not self.stages:
            raise ValueError("need at least one stage")
        if self.optimizer_tol <= 0 or self.convergence_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.stages)

    def iteration_schedules(self):
        """Flat (stage_index, ChainSchedule) list with derived seeds."""
        out = []
        i = 0
        for si, stage in enumerate(self.stages):
            for _ in range(stage.iterations):
                sched = replace(stage.schedule, seed=derive_seed(self.seed, 1, i))
                out.append((si, sched))
                i += 1
        return out


def derive_seed(base: int, salt: int, index: int) -> int:
    """Deterministic child seed for iteration-level randomness."""
    ss = np.random.SeedSequence([int(base), int(salt), int(index)])
    return int(ss.generate_state(1, np.uint32)[0])


def default_expression_config(seed: int = 0) -> McemConfig:
    """Full-scale staged schedule: 20 iterations each at 500/1500,
    1000/6000 and 1000/10000 (burn-in / total sweeps)."""
    return McemConfig(
        stages=(
            McemStage(20, ChainSchedule(500, 1000)),
            McemStage(20, ChainSchedule(1000, 5000)),
            McemStage(20, ChainSchedule(1000, 9000)),
        ),
        seed=seed,
    )


DEFAULT_POSTERIOR_SCHEDULE = ChainSchedule(1000, 9000)


def reduced_config(iterations: int = 5, burn_in: int = 200, total: int = 600,
                   seed: int = 0) -> McemConfig:
    """Desk-scale schedule for simulations and tests."""
    return McemConfig(
        stages=(McemStage(iterations, ChainSchedule(burn_in, total - burn_in)),),
        seed=seed,
    )


@dataclass
class TraceEntry:
    iteration: int
    stage: int
    params: np.ndarray
    q_before: float
    q_after: float


@dataclass
class McemState:
    """Snapshot of an MCEM run after a completed iteration."""

    kind: str
    params: MrfParams | DeMrfParams
    theta: em.GmmEmissionParams | None
    grid: LatentGrid
    iteration: int
    trace: list[TraceEntry]
    seed: int
    converged: bool = False
    conv_streak: int = 0


# -- compressed pseudolikelihood statistics ---------------------------------


@dataclass
class PlStats:
    """Cell counts grouped by (state, neighbour-sum) combination.

    ``cov`` holds the gradient covariates matching the parameter vector
    after its leading node term; the logit of a row is
    vec[0] + cov @ vec[1:].
    """

    counts: np.ndarray
    x: np.ndarray
    cov: np.ndarray
    m: int

    def value_grad(self, vec: np.ndarray):
        f = vec[0] + self.cov @ vec[1:]
        val = float((self.counts * (self.x * f - np.logaddexp(0.0, f))).sum() / self.m)
        sig = _sigmoid_arr(f)
        r = self.counts * (self.x - sig) / self.m
        grad = np.empty(len(vec))
        grad[0] = r.sum()
        grad[1:] = self.cov.T @ r
        return val, grad

    def hessian(self, vec: np.ndarray) -> np.ndarray:
        f = vec[0] + self.cov @ vec[1:]
        sig = _sigmoid_arr(f)
        w = self.counts * sig * (1.0 - sig) / self.m
        c1 = np.column_stack([np.ones(len(f)), self.cov])
        return -(c1 * w[:, None]).T @ c1


def _sigmoid_arr(f):
    out = np.empty_like(f)
    pos = f >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-f[pos]))
    e = np.exp(f[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _expr_stats(samples: list[LatentGrid]) -> PlStats:
    B, G, T = samples[0].shape.dims
    arr = np.stack([s.states for s in samples]).astype(np.int16)
    sp = 2 * arr - 1
    col = sp.sum(axis=1, dtype=np.int16)
    nb = col[:, None, :, :] - sp
    ts = np.zeros_like(sp)
    ts[..., 1:] += sp[..., :-1]
    ts[..., :-1] += sp[..., 1:]
    nspat = 2 * B - 1
    key = (arr.astype(np.int64) * nspat + (nb + B - 1)) * 5 + (ts + 2)
    counts = np.bincount(key.ravel(), minlength=2 * nspat * 5).astype(np.float64)
    keep = counts > 0
    k = np.arange(2 * nspat * 5)[keep]
    x = (k // (nspat * 5)).astype(np.float64)
    rem = k % (nspat * 5)
    cov = np.column_stack([(rem // 5) - (B - 1), (rem % 5) - 2]).astype(np.float64)
    return PlStats(counts[keep], x, cov, len(samples))


def _de_stats(samples: list[LatentGrid], neocortex: np.ndarray) -> PlStats:
    B, G, T = samples[0].shape.dims
    mask = samples[0].mask
    keep = np.ones((B, G, T), bool) if mask is None else ~mask
    neo = np.asarray(neocortex, bool)
    arr = np.stack([s.states for s in samples]).astype(np.int16)
    sp = 2 * arr - 1
    if mask is not None:
        sp[:, mask] = 0
    cs = sp[:, neo].sum(axis=1, dtype=np.int16)
    ns = sp[:, ~neo].sum(axis=1, dtype=np.int16)
    col = neo[None, :, None, None]
    same = np.where(col, cs[:, None], ns[:, None]) - sp
    cross = np.where(col, ns[:, None], cs[:, None])
    ts = np.zeros_like(sp)
    ts[..., 1:] += sp[..., :-1]
    ts[..., :-1] += sp[..., 1:]
    width = 2 * B + 1
    grp = np.broadcast_to(col, arr.shape)
    key = arr.astype(np.int64) * 2 + grp
    key = (key * width + (same + B)) * width + (cross + B)
    key = key * 5 + (ts + 2)
    flat = key[:, keep].ravel()
    kmax = 2 * 2 * width * width * 5
    counts = np.bincount(flat, minlength=kmax).astype(np.float64)
    nz = counts > 0
    k = np.arange(kmax)[nz]
    ts_v = (k % 5) - 2
    k //= 5
    cross_v = (k % width) - B
    k //= width
    same_v = (k % width) - B
    k //= width
    grp_v = k % 2
    x_v = k // 2
    cov = np.column_stack(
        [same_v * grp_v, same_v * (1 - grp_v), cross_v, ts_v]
    ).astype(np.float64)
    return PlStats(counts[nz], x_v.astype(np.float64), cov, len(samples))


def pl_stats(samples: list[LatentGrid], params) -> PlStats:
    if isinstance(params, MrfParams):
        return _expr_stats(samples)
    return _de_stats(samples, params.neocortex)


def _mean_states(samples: list[LatentGrid]) -> np.ndarray:
    acc = np.zeros(samples[0].shape.dims)
    for s in samples:
        acc += s.states
    return acc / len(samples)


def monte_carlo_q(samples: list[LatentGrid], params, model) -> float:
    """Monte Carlo complete-data objective at the given couplings.

    Averages, over the sampled grids, the pseudolikelihood of the grid at
    ``params`` plus the emission log-likelihood under the parameters baked
    into ``model``. Masked cells contribute to neither part.
    """
    if not samples:
        raise ValueError("need at least one sample")
    stats = pl_stats(samples, params)
    pl, _ = stats.value_grad(params.as_vector())
    keep = (
        np.ones(samples[0].shape.dims, bool) if model.mask is None else ~model.mask
    )
    w = _mean_states(samples)
    diff = model.loglik1 - model.loglik0
    emission_part = float(model.loglik0[keep].sum() + (diff[keep] * w[keep]).sum())
    return pl + emission_part


@dataclass
class MaximizeResult:
    params: MrfParams | DeMrfParams
    value: float
    grad_norm: float
    at_bound: bool
    n_iter: int


def _projected_grad_norm(vec, grad, bound):
    g = grad.copy()
    g[(vec >= bound - 1e-12) & (g > 0)] = 0.0
    g[(vec <= -bound + 1e-12) & (g < 0)] = 0.0
    return float(np.abs(g).max()), g


def maximize_couplings(
    samples: list[LatentGrid],
    init,
    bounds: float = PARAM_BOUND,
    tol: float = 1e-5,
) -> MaximizeResult:
    """Maximize the coupling part of the Monte Carlo objective.

    Quasi-Newton ascent (box-constrained L-BFGS on the analytic gradient)
    over the compressed statistics, followed by Newton polishing so the
    projected gradient norm meets ``tol`` unless a box bound is active.
    """
    if not samples:
        raise ValueError("need at least one sample")
    stats = pl_stats(samples, init)
    x0 = np.clip(init.as_vector(), -bounds, bounds)

    def neg(vec):
        v, g = stats.value_grad(vec)
        if not np.isfinite(v):
            raise NumericalError(f"non-finite objective at parameters {vec}")
        return -v, -g

    res = minimize(
        neg,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(-bounds, bounds)] * len(x0),
        options={"maxiter": 500, "ftol": 1e-14, "gtol": tol * 1e-2},
    )
    vec = res.x
    # Newton polish from the quasi-Newton solution: the Hessian is exact
    # and tiny, and near the optimum the objective cannot resolve further
    # improvement in float64, so backtrack on the gradient norm instead.
    for _ in range(50):
        _, grad = stats.value_grad(vec)
        gnorm, gproj = _projected_grad_norm(vec, grad, bounds)
        if gnorm < tol:
            break
        h = stats.hessian(vec)
        try:
            step = np.linalg.solve(h, -gproj)
        except np.linalg.LinAlgError:
            step = gproj
        accepted = False
        for _ in range(30):
            new = np.clip(vec + step, -bounds, bounds)
            _, g_new = stats.value_grad(new)
            new_norm, _ = _projected_grad_norm(new, g_new, bounds)
            if new_norm < gnorm:
                vec = new
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
    val, grad = stats.value_grad(vec)
    gnorm, _ = _projected_grad_norm(vec, grad, bounds)
    at_bound = bool((np.abs(vec) >= bounds - 1e-9).any())
    if gnorm >= tol and not at_bound:
        log.warning("coupling maximizer stalled: projected gradient %.3g", gnorm)
    if isinstance(init, MrfParams):
        params = MrfParams.from_vector(vec)
    else:
        params = init.with_vector(vec)
    return MaximizeResult(params, val, gnorm, at_bound, int(res.nit))


# -- drivers -----------------------------------------------------------------


def _rel_change(new: np.ndarray, old: np.ndarray) -> float:
    # scale floor keeps near-zero couplings from blocking convergence
    return float((np.abs(new - old) / np.maximum(np.abs(old), 0.1)).max())


def _theta_vector(theta: em.GmmEmissionParams) -> np.ndarray:
    return np.concatenate([theta.mu1, theta.sigma1, theta.mu2, theta.sigma2])


def mcem_fit_expression(
    data: em.ExpressionTensor,
    config: McemConfig,
    checkpoint=None,
    resume: McemState | None = None,
):
    """Fit the expression model: couplings, emission mixture and state.

    Runs: replicate-variance estimate, plain mixture initialization,
    pseudolikelihood fit of the couplings on the initial grid, then the
    staged E/M iterations. Stops early once the largest relative parameter
    change stays below the convergence tolerance for the configured number
    of consecutive iterations; otherwise returns the last state flagged
    as unconverged.
    """
    if resume is None:
        sigma0 = math.sqrt(em.estimate_sigma0(data))
        theta, grid = em.fit_plain_gmm(
            data, sigma0, seed=derive_seed(config.seed, 0, 0)
        )
        phi = maximize_couplings(
            [grid], MrfParams(0.0, 0.0, 0.0), config.param_bound, config.optimizer_tol
        ).params
        state = McemState("expression", phi, theta, grid, 0, [], config.seed)
    else:
        if resume.kind != "expression":
            raise ValueError(f"cannot resume a {resume.kind!r} state here")
        if resume.grid.shape != data.shape:
            raise ValueError("resume state lattice does not match the data")
        state = resume
    return _mcem_loop(
        state,
        config,
        checkpoint,
        build_model=lambda st: ExpressionModel.build(data, st.params, st.theta),
        m_step=lambda st, samples: _expression_m_step(data, st, samples, config),
    )


def _expression_m_step(data, state, samples, config):
    res = maximize_couplings(
        samples, state.params, config.param_bound, config.optimizer_tol
    )
    theta = em.update_theta_mle(data, samples, state.theta)
    rel = max(
        _rel_change(res.params.as_vector(), state.params.as_vector()),
        _rel_change(_theta_vector(theta), _theta_vector(state.theta)),
    )
    return res.params, theta, rel


def mcem_fit_de(
    zgrid,
    fdr_model,
    config: McemConfig,
    neocortex: np.ndarray,
    checkpoint=None,
    resume: McemState | None = None,
):
    """Fit the DE-model couplings with the emission densities held fixed.

    ``zgrid`` is a ZScoreGrid; ``fdr_model`` supplies the null/nonnull
    densities. Initial states call a cell DE when its no-coupling local
    fdr is below one half.
    """
    from .defdr import de_gibbs_model

    neo = np.asarray(neocortex, dtype=bool)
    if resume is None:
        q0 = fdr_model.local_fdr(np.where(zgrid.mask, 0.0, zgrid.z))
        states = ((q0 < 0.5) & ~zgrid.mask).astype(np.int8)
        grid = LatentGrid(zgrid.shape, states, zgrid.mask.copy())
        init = DeMrfParams(0.0, 0.0, 0.0, 0.0, 0.0, neo)
        phi = maximize_couplings(
            [grid], init, config.param_bound, config.optimizer_tol
        ).params
        state = McemState("de", phi, None, grid, 0, [], config.seed)
    else:
        if resume.kind != "de":
            raise ValueError(f"cannot resume a {resume.kind!r} state here")
        if resume.grid.shape != zgrid.shape:
            raise ValueError("resume state lattice does not match the z grid")
        state = resume
    return _mcem_loop(
        state,
        config,
        checkpoint,
        build_model=lambda st: de_gibbs_model(zgrid, st.params, fdr_model),
        m_step=lambda st, samples: _de_m_step(st, samples, config),
    )


def _de_m_step(state, samples, config):
    res = maximize_couplings(
        samples, state.params, config.param_bound, config.optimizer_tol
    )
    rel = _rel_change(res.params.as_vector(), state.params.as_vector())
    return res.params, None, rel


def _mcem_loop(state: McemState, config: McemConfig, checkpoint, build_model, m_step):
    schedules = config.iteration_schedules()
    for it in range(state.iteration, len(schedules)):
        stage_idx, sched = schedules[it]
        model = build_model(state)
        samples = run_chain(state.grid, model, sched)
        q_before = monte_carlo_q(samples, state.params, model)
        params, theta, rel = m_step(state, samples)
        state.params = params
        if theta is not None:
            state.theta = theta
        state.grid = samples[-1].copy()
        q_after = monte_carlo_q(samples, state.params, build_model(state))
        state.trace.append(
            TraceEntry(it, stage_idx, state.params.as_vector(), q_before, q_after)
        )
        state.iteration = it + 1
        state.conv_streak = state.conv_streak + 1 if rel < config.convergence_tol else 0
        if checkpoint is not None:
            checkpoint(state)
        if state.conv_streak >= config.convergence_runs:
            state.converged = True
            break
    if not state.converged:
        log.warning(
            "MCEM did not converge within %d iterations (last streak %d)",
            state.iteration, state.conv_streak,
        )
    if state.kind == "expression":
        return state.params, state.theta, state
    return state.params, state
