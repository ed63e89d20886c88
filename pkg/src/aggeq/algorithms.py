"""Decentralized equilibrium-seeking schemes.

Three solvers share the interface game -> EquilibriumResult:

* ``two_level_wardrop``: inner averaged optimal-response loop driving the
  aggregate to a fixed point at frozen prices, outer projected dual ascent.
* ``asymmetric_projection``: single-timescale primal-dual projections with a
  lagged dual residual; works for both flavors.
* ``extragradient``: two-evaluation scheme on the primal-dual mapping,
  needing only plain monotonicity.

All iterates stay individually feasible (projections enforce it) and the
multipliers stay nonnegative.  Stopping is on the inf-norm of successive
(x, lambda) iterates.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConvergenceError, DimensionError
from .game import (AggregativeGame, BoxBudget, PriceTimesUsage, QuadraticCost,
                   QuadraticTracking, StrategyProfile, ZeroUtility,
                   aggregate_matrix)
from .operators import (NASH, WARDROP, GameOperator, MonotonicityReport,
                        build_operator, monotonicity_analysis)
from .projection import ProfileProjector, project_individual

DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class SolverConfig:
    tau: Optional[float] = None  # None = automatic from the step-size rule
    tol: float = 1e-4
    max_iter: int = 100_000
    inner_tol: float = 1e-6
    inner_max_iter: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.tau is not None and self.tau <= 0:
            raise DimensionError("tau must be positive when given")
        if self.tol <= 0:
            raise DimensionError("tol must be positive")


@dataclass
class EquilibriumResult:
    x: StrategyProfile
    lam: np.ndarray
    flavor: str
    primal_updates: int
    dual_updates: int
    trace: list = field(default_factory=list)
    converged: bool = False

    def aggregate(self) -> np.ndarray:
        return self.x.aggregate()


def auto_step_size(alpha: float, l_f: float, a_norm: float,
                   scheme: str) -> float:
    """0.9 times the largest step size with a convergence guarantee.

    ``scheme``: "two-level" (dual ascent, needs alpha and the coupling
    norm), "apa" (primal-dual, needs all three constants; the vanishing
    coupling limit alpha / l_f**2 is used when a_norm is negligible) or
    "extragradient" (needs the Lipschitz constant of the extended mapping,
    bounded by l_f + a_norm).
    """
    if scheme == "two-level":
        if alpha <= 0 or a_norm <= 0:
            raise DimensionError("two-level step needs alpha > 0, |A| > 0")
        return 0.9 * 2.0 * alpha / a_norm**2
    if scheme == "apa":
        if alpha <= 0 or l_f <= 0:
            raise DimensionError("apa step needs alpha > 0 and l_f > 0")
        if a_norm < 1e-12:
            return 0.9 * alpha / l_f**2
        thr = (-l_f**2 + np.sqrt(l_f**4 + 4.0 * alpha**2 * a_norm**2)) \
            / (2.0 * alpha * a_norm**2)
        return 0.9 * thr
    if scheme == "extragradient":
        l_t = l_f + a_norm
        if l_t <= 0:
            raise DimensionError("extragradient needs a positive Lipschitz"
                                 " constant")
        return 0.9 / l_t
    raise DimensionError(f"unknown step-size scheme {scheme!r}")


# ---------------------------------------------------------------------------
# Optimal response of a single agent
# ---------------------------------------------------------------------------


def _own_gradient_lipschitz(game: AggregativeGame, i: int) -> float:
    cost = game.cost
    if isinstance(cost, QuadraticCost):
        return float(np.linalg.norm(cost.Q, 2))
    if isinstance(cost, PriceTimesUsage):
        if isinstance(cost.utility, QuadraticTracking):
            return float(cost.utility.gamma[i])
        if isinstance(cost.utility, ZeroUtility):
            return 0.0
        return float(cost.utility.curvature()[1])
    raise DimensionError("cost model lacks a curvature bound")


def _greedy_linear_box_budget(q: np.ndarray, cs: BoxBudget) -> np.ndarray:
    """Exact minimizer of q^T x over {lo <= x <= hi, sum(x) >= theta}.

    Negative-cost components fill to their caps; remaining budget is met by
    the cheapest components in ascending cost order.
    """
    lo, hi = cs.lo, cs.hi
    x = np.where(q < 0.0, hi, lo)
    need = cs.theta - float(np.sum(x))
    if need <= 1e-15:
        return x
    order = np.argsort(q, kind="stable")
    for t in order:
        if q[t] < 0.0:
            continue
        room = hi[t] - x[t]
        add = min(room, need)
        x[t] += add
        need -= add
        if need <= 1e-15:
            break
    return x


def best_response(game: AggregativeGame, i: int, z, lam,
                  inner_tol: float = 1e-6,
                  inner_max_iter: int = 100_000) -> np.ndarray:
    """Minimizer over the agent's set of its cost at frozen average z plus
    the dual charge lam^T A_(:,i) x."""
    z = np.asarray(z, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise DimensionError("multipliers must be nonnegative")
    cs = game.individual[i]
    charge = game.coupling.agent_block(i).T @ lam
    cost = game.cost
    if (isinstance(cost, PriceTimesUsage)
            and isinstance(cost.utility, ZeroUtility)
            and isinstance(cs, BoxBudget)):
        return _greedy_linear_box_budget(cost.price.value(z) + charge, cs)
    if (isinstance(cost, PriceTimesUsage)
            and isinstance(cost.utility, QuadraticTracking)
            and cost.utility.gamma[i] > 0):
        # Linear-plus-tracking objective: the argmin is a single projection
        # of the preferred point shifted by the frozen per-unit charge.
        util = cost.utility
        target = util.ref[i] - (cost.price.value(z) + charge) / util.gamma[i]
        return project_individual(cs, target)
    L = _own_gradient_lipschitz(game, i)
    if L <= 0:
        raise ConvergenceError(
            "projected gradient needs positive own-cost curvature")
    step = 1.0 / L
    x = project_individual(cs, np.zeros(game.n))
    for _ in range(inner_max_iter):
        g = cost.grad_own(i, x, z) + charge
        x_new = project_individual(cs, x - step * g)
        if float(np.max(np.abs(x_new - x), initial=0.0)) <= inner_tol:
            return x_new
        x = x_new
    raise ConvergenceError("optimal response did not converge", last=x)


def _batch_best_response(game: AggregativeGame, proj: ProfileProjector,
                         X0: np.ndarray, z: np.ndarray, lam: np.ndarray,
                         inner_tol: float, inner_max_iter: int) -> np.ndarray:
    """All agents' optimal responses to (z, lam) at once."""
    cost = game.cost
    charge = game.coupling.adjoint_blocks(lam)
    if (isinstance(cost, PriceTimesUsage)
            and isinstance(cost.utility, ZeroUtility)
            and proj._mode == "box_budget"):
        q = cost.price.value(z)[None, :] + charge
        return _greedy_linear_box_budget_batch(q, proj)
    if (isinstance(cost, PriceTimesUsage)
            and isinstance(cost.utility, QuadraticTracking)
            and np.all(cost.utility.gamma > 0)):
        util = cost.utility
        targets = util.ref - ((cost.price.value(z)[None, :] + charge)
                              / util.gamma[:, None])
        return proj(targets)
    L = max(_own_gradient_lipschitz(game, i) for i in range(game.M))
    if L <= 0:
        raise ConvergenceError(
            "projected gradient needs positive own-cost curvature")
    step = 1.0 / L
    X = X0.copy()
    for _ in range(inner_max_iter):
        G = cost.grad_own_all(X, z) + charge
        X_new = proj(X - step * G)
        if float(np.max(np.abs(X_new - X), initial=0.0)) <= inner_tol:
            return X_new
        X = X_new
    raise ConvergenceError("optimal responses did not converge", last=X)


def _greedy_linear_box_budget_batch(Q_costs: np.ndarray,
                                    proj: ProfileProjector) -> np.ndarray:
    lo, hi, theta = proj._lo, proj._hi, proj._theta
    X = np.where(Q_costs < 0.0, hi, lo)
    need = theta - X.sum(axis=1)
    todo = np.nonzero(need > 1e-15)[0]
    order = np.argsort(Q_costs[todo], axis=1, kind="stable")
    for i, row in zip(todo, order):
        rem = need[i]
        for t in row:
            if Q_costs[i, t] < 0.0:
                continue
            add = min(hi[i, t] - X[i, t], rem)
            X[i, t] += add
            rem -= add
            if rem <= 1e-15:
                break
    return X


# ---------------------------------------------------------------------------
# Shared solver plumbing
# ---------------------------------------------------------------------------


def _domain_radius(game: AggregativeGame) -> float:
    lo, hi = game.bounding_box()
    return float(max(np.max(np.abs(lo)), np.max(np.abs(hi)), 1.0))


def _initial_profile(game: AggregativeGame,
                     proj: ProfileProjector) -> np.ndarray:
    return proj(np.zeros((game.M, game.n)))


def _constants(game: AggregativeGame, flavor: str,
               constants: Optional[MonotonicityReport], seed: int
               ) -> MonotonicityReport:
    if constants is not None:
        return constants
    return monotonicity_analysis(build_operator(game, flavor), seed=seed)


def _trace_row(k, residual, violation, primal, dual):
    return {"k": k, "residual": residual, "max_violation": violation,
            "primal_updates": primal, "dual_updates": dual}


def _check_divergence(X, radius, lam=None):
    worst = float(np.max(np.abs(X), initial=0.0))
    if lam is not None:
        worst = max(worst, float(np.max(lam, initial=0.0)))
    if worst > DIVERGENCE_FACTOR * radius:
        raise ConvergenceError(
            "iterates diverged; the step size is likely too large for the"
            " problem's constants", last=X)


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------


def two_level_wardrop(game: AggregativeGame, config: SolverConfig,
                      constants: Optional[MonotonicityReport] = None
                      ) -> EquilibriumResult:
    """Two-level scheme for a variational Wardrop equilibrium.

    Inner level: agents repeatedly best-respond to a frozen average signal
    which is updated by running averaging until it reaches a fixed point.
    Outer level: projected ascent on the coupling multipliers.
    """
    rep = _constants(game, WARDROP, constants, config.seed)
    alpha = rep.safe_alpha()
    if alpha <= 0:
        raise ConvergenceError(
            "two-level scheme needs a strongly monotone mapping,"
            f" estimated constant {rep.alpha:.3e}")
    a_norm = game.coupling.norm()
    tau = config.tau
    if tau is None:
        tau = auto_step_size(alpha, rep.safe_lipschitz(), a_norm, "two-level")
    # The outer residual cannot drop below the inner solve's noise floor, so
    # the inner loops must run tighter than the outer tolerance.
    config = replace(config,
                     inner_tol=min(config.inner_tol, 0.01 * config.tol))
    proj = ProfileProjector(game.individual)
    radius = _domain_radius(game)
    X = _initial_profile(game, proj)
    lam = np.zeros(game.coupling.m)
    primal = dual = 0
    trace = []
    converged = False
    for k in range(1, config.max_iter + 1):
        X_prev, lam_prev = X, lam
        X, inner_steps = _inner_wardrop(game, proj, X, lam, config)
        primal += inner_steps
        lam = np.maximum(0.0, lam - tau * game.coupling.residual(X))
        dual += 1
        _check_divergence(X, radius, lam)
        residual = max(
            float(np.max(np.abs(X - X_prev), initial=0.0)),
            float(np.max(np.abs(lam - lam_prev), initial=0.0)))
        violation = float(np.max(-game.coupling.residual(X), initial=0.0))
        trace.append(_trace_row(k, residual, violation, primal, dual))
        if residual <= config.tol:
            converged = True
            break
    return EquilibriumResult(StrategyProfile.from_matrix(X), lam, WARDROP,
                             primal, dual, trace, converged)


def _inner_wardrop(game, proj, X, lam, config):
    """Averaged optimal-response loop at frozen multipliers.

    The averaging weight at pass h is 1/h, so the first pass simply adopts
    the responded aggregate as the signal.
    """
    z = aggregate_matrix(X)
    steps = 0
    for h in range(1, config.inner_max_iter + 1):
        X = _batch_best_response(game, proj, X, z, lam,
                                 config.inner_tol, config.inner_max_iter)
        steps += 1
        sigma = aggregate_matrix(X)
        z_new = sigma if h == 1 else (1.0 - 1.0 / h) * z + sigma / h
        if h > 1 and float(np.max(np.abs(z_new - z), initial=0.0)
                           ) <= config.inner_tol:
            return X, steps
        z = z_new
    raise ConvergenceError(
        "inner averaging loop did not converge; the frozen-average mapping"
        " may not admit a fixed point for this game", last=X)


def asymmetric_projection(game: AggregativeGame, flavor: str,
                          config: SolverConfig,
                          constants: Optional[MonotonicityReport] = None
                          ) -> EquilibriumResult:
    """Primal-dual projection scheme with a lagged dual residual.

    One projected primal step and one projected dual step per iteration;
    the dual step sees 2*A x_new - A x_old, which is what makes the single
    timescale convergent.
    """
    op = build_operator(game, flavor)
    rep = _constants(game, flavor, constants, config.seed)
    alpha, l_f = rep.safe_alpha(), rep.safe_lipschitz()
    if alpha <= 0:
        raise ConvergenceError(
            "this scheme needs a strongly monotone mapping, estimated"
            f" constant {rep.alpha:.3e}")
    a_norm = game.coupling.norm()
    tau = config.tau
    if tau is None:
        tau = auto_step_size(alpha, l_f, a_norm, "apa")
    elif tau > auto_step_size(alpha, l_f, a_norm, "apa") / 0.9 + 1e-12:
        import warnings
        warnings.warn("supplied tau exceeds the convergence threshold",
                      RuntimeWarning, stacklevel=2)
    proj = ProfileProjector(game.individual)
    radius = _domain_radius(game)
    X = _initial_profile(game, proj)
    lam = np.zeros(game.coupling.m)
    ax = game.coupling.apply(X)
    primal = dual = 0
    trace = []
    converged = False
    for k in range(1, config.max_iter + 1):
        F = op.evaluate_blocks(X) + game.coupling.adjoint_blocks(lam)
        X_new = proj(X - tau * F)
        ax_new = game.coupling.apply(X_new)
        lam_new = np.maximum(
            0.0, lam - tau * (game.coupling.b - 2.0 * ax_new + ax))
        primal += 1
        dual += 1
        _check_divergence(X_new, radius, lam_new)
        residual = max(
            float(np.max(np.abs(X_new - X), initial=0.0)),
            float(np.max(np.abs(lam_new - lam), initial=0.0)))
        X, lam, ax = X_new, lam_new, ax_new
        if k % 25 == 0 or residual <= config.tol:
            violation = float(np.max(ax - game.coupling.b, initial=0.0))
            trace.append(_trace_row(k, residual, violation, primal, dual))
        if residual <= config.tol:
            converged = True
            break
    return EquilibriumResult(StrategyProfile.from_matrix(X), lam, flavor,
                             primal, dual, trace, converged)


def extragradient(game: AggregativeGame, flavor: str, config: SolverConfig,
                  constants: Optional[MonotonicityReport] = None
                  ) -> EquilibriumResult:
    """Extragradient on the primal-dual mapping; monotonicity suffices."""
    op = build_operator(game, flavor)
    rep = _constants(game, flavor, constants, config.seed)
    a_norm = game.coupling.norm()
    tau = config.tau
    if tau is None:
        tau = auto_step_size(rep.alpha, rep.safe_lipschitz(), a_norm,
                             "extragradient")
    proj = ProfileProjector(game.individual)
    radius = _domain_radius(game)
    X = _initial_profile(game, proj)
    lam = np.zeros(game.coupling.m)
    primal = dual = 0
    trace = []
    converged = False
    for k in range(1, config.max_iter + 1):
        Fx = op.evaluate_blocks(X) + game.coupling.adjoint_blocks(lam)
        Fl = game.coupling.residual(X)
        X_half = proj(X - tau * Fx)
        lam_half = np.maximum(0.0, lam - tau * Fl)
        Fx_h = (op.evaluate_blocks(X_half)
                + game.coupling.adjoint_blocks(lam_half))
        Fl_h = game.coupling.residual(X_half)
        X_new = proj(X - tau * Fx_h)
        lam_new = np.maximum(0.0, lam - tau * Fl_h)
        primal += 1
        dual += 1
        _check_divergence(X_new, radius, lam_new)
        residual = max(
            float(np.max(np.abs(X_new - X), initial=0.0)),
            float(np.max(np.abs(lam_new - lam), initial=0.0)))
        X, lam = X_new, lam_new
        if k % 25 == 0 or residual <= config.tol:
            violation = float(np.max(-game.coupling.residual(X), initial=0.0))
            trace.append(_trace_row(k, residual, violation, primal, dual))
        if residual <= config.tol:
            converged = True
            break
    return EquilibriumResult(StrategyProfile.from_matrix(X), lam, flavor,
                             primal, dual, trace, converged)


SOLVERS = {
    "two-level": lambda game, config, **kw: two_level_wardrop(
        game, config, **kw),
    "apa-nash": lambda game, config, **kw: asymmetric_projection(
        game, NASH, config, **kw),
    "apa-wardrop": lambda game, config, **kw: asymmetric_projection(
        game, WARDROP, config, **kw),
    "extragradient": lambda game, config, **kw: extragradient(
        game, WARDROP, config, **kw),
}
