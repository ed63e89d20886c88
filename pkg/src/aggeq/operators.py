"""Game mappings for equilibrium computation.

The Nash mapping stacks the full cost gradients, including the chain-rule
term through the population average; the Wardrop mapping freezes the average.
Also provides the primal-dual extension of a mapping, constants estimation
(strong monotonicity, Lipschitz), and closed forms for quadratic costs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DimensionError
from .game import (AggregativeGame, Box, BoxBudget, DiagonalPrice,
                   PriceTimesUsage, QuadraticCost, QuadraticTracking,
                   StrategyProfile, ZeroUtility, aggregate_matrix)
from .projection import ProfileProjector

NASH = "nash"
WARDROP = "wardrop"

FD_STEP_SCALE = 1e-6


class GameOperator:
    """Stacked gradient mapping of a game, Nash or Wardrop flavored.

    ``evaluate`` takes and returns stacked (M*n,) vectors; ``evaluate_blocks``
    works on (M, n) matrices and is the hot path for the solvers.
    """

    def __init__(self, game: AggregativeGame, flavor: str):
        if flavor not in (NASH, WARDROP):
            raise DimensionError(f"unknown flavor {flavor!r}")
        self.game = game
        self.flavor = flavor

    def evaluate_blocks(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        z = aggregate_matrix(X)
        out = self.game.cost.grad_own_all(X, z)
        if self.flavor == NASH:
            out = out + self.game.cost.grad_agg_all(X, z) / self.game.M
        return out

    def evaluate(self, x) -> np.ndarray:
        X = self.game.profile(x).as_matrix()
        return self.evaluate_blocks(X).reshape(-1)

    def jacobian(self, x) -> np.ndarray:
        """(M*n) x (M*n) Jacobian, analytic when the cost supports it."""
        X = self.game.profile(x).as_matrix()
        cost = self.game.cost
        if isinstance(cost, QuadraticCost):
            return _quadratic_jacobian(cost, self.game.M, self.flavor)
        blocks = self.slot_blocks(X)
        if blocks is not None:
            return _assemble_from_slot_blocks(blocks)
        return self._fd_jacobian(X)

    def slot_blocks(self, X: np.ndarray) -> Optional[np.ndarray]:
        """(n, M, M) per-component Jacobian blocks when the price acts
        componentwise and the utility is separable per component.

        The full Jacobian is block-diagonal under the agent/component
        reordering, so eigen and singular values are unions over these
        blocks.  Returns None when the structure does not apply.
        """
        cost = self.game.cost
        if not (isinstance(cost, PriceTimesUsage)
                and isinstance(cost.price, DiagonalPrice)
                and isinstance(cost.utility, (ZeroUtility, QuadraticTracking))):
            return None
        M, n = self.game.M, self.game.n
        z = aggregate_matrix(X)
        dp = cost.price.diag(z)
        if isinstance(cost.utility, QuadraticTracking):
            gamma = cost.utility.gamma
        else:
            gamma = np.zeros(M)
        blocks = np.empty((n, M, M))
        ones = np.ones((M, M))
        eye = np.eye(M)
        for t in range(n):
            H = (dp[t] / M) * ones + np.diag(gamma)
            if self.flavor == NASH:
                ddp_t = cost.price.diag2(z)[t]
                H = H + (dp[t] / M) * eye + (ddp_t / M**2) * np.outer(
                    X[:, t], np.ones(M))
            blocks[t] = H
        return blocks

    def _fd_jacobian(self, X: np.ndarray) -> np.ndarray:
        x = X.reshape(-1)
        d = x.size
        h = FD_STEP_SCALE * (1.0 + float(np.max(np.abs(x), initial=0.0)))
        J = np.empty((d, d))
        for j in range(d):
            xp = x.copy()
            xm = x.copy()
            xp[j] += h
            xm[j] -= h
            J[:, j] = (self.evaluate(xp) - self.evaluate(xm)) / (2.0 * h)
        return J

    def is_affine(self) -> bool:
        return isinstance(self.game.cost, QuadraticCost)


def _quadratic_jacobian(cost: QuadraticCost, M: int, flavor: str) -> np.ndarray:
    n = cost.n
    P = np.full((M, M), 1.0 / M)
    J = np.kron(np.eye(M), cost.Q) + np.kron(P, cost.C)
    if flavor == NASH:
        J = J + np.kron(np.eye(M), cost.C.T) / M
    return J


def _assemble_from_slot_blocks(blocks: np.ndarray) -> np.ndarray:
    """Dense Jacobian in agent-major ordering from (n, M, M) slot blocks."""
    n, M, _ = blocks.shape
    J = np.zeros((M * n, M * n))
    for t in range(n):
        J[t::n, t::n] = blocks[t]
    return J


class ExtendedOperator:
    """Primal-dual mapping y = (x, lam) -> [F(x) + A^T lam; -(A x - b)].

    Its domain is the product of the individual sets with the nonnegative
    orthant for the multipliers.
    """

    def __init__(self, base: GameOperator):
        self.base = base
        self.coupling = base.game.coupling

    def evaluate(self, x, lam) -> tuple:
        game = self.base.game
        X = game.profile(x).as_matrix()
        lam = np.asarray(lam, dtype=float)
        primal = (self.base.evaluate_blocks(X)
                  + self.coupling.adjoint_blocks(lam))
        dual = self.coupling.residual(X)
        return primal.reshape(-1), dual

    def evaluate_blocks(self, X, lam) -> tuple:
        primal = (self.base.evaluate_blocks(X)
                  + self.coupling.adjoint_blocks(lam))
        return primal, self.coupling.residual(X)


@dataclass(frozen=True)
class MonotonicityReport:
    alpha: float
    lipschitz: float
    exact: bool
    samples: int

    def safe_alpha(self) -> float:
        """Monotonicity constant with a safety factor on sampled estimates."""
        return self.alpha if self.exact else 0.9 * self.alpha

    def safe_lipschitz(self) -> float:
        return self.lipschitz if self.exact else 1.1 * self.lipschitz


def build_operator(game: AggregativeGame, flavor: str) -> GameOperator:
    return GameOperator(game, flavor)


def operator_gap(game: AggregativeGame, x, L2: Optional[float] = None
                 ) -> tuple:
    """Norm of the Nash/Wardrop mapping difference and its 1/sqrt(M) bound.

    Returns (gap, bound).  When an exact aggregate-Lipschitz constant L2 is
    supplied the gap is asserted to respect the bound.
    """
    X = game.profile(x).as_matrix()
    f_n = build_operator(game, NASH).evaluate_blocks(X)
    f_w = build_operator(game, WARDROP).evaluate_blocks(X)
    gap = float(np.linalg.norm((f_n - f_w).reshape(-1)))
    exact = L2 is not None
    if L2 is None:
        from .analysis import estimate_constants
        est = estimate_constants(game)
        L2, exact = est.L2, est.source in ("exact", "formula")
    bound = L2 / np.sqrt(game.M)
    if exact and gap > bound + 1e-9:
        raise AssertionError(
            f"mapping gap {gap:.3e} exceeds bound {bound:.3e}")
    return gap, bound


def default_sampler(game: AggregativeGame) -> Callable:
    """Feasible-point sampler over the product of individual sets.

    Draws a uniform point in each agent's bounding box and projects it onto
    the agent's set.  Given the same Generator state the draw is
    deterministic.
    """
    proj = ProfileProjector(game.individual)
    los, his = [], []
    for cs in game.individual:
        lo, hi = cs.bounds()
        los.append(lo)
        his.append(hi)
    lo = np.stack(los)
    hi = np.stack(his)

    def sample(rng: np.random.Generator) -> np.ndarray:
        Y = rng.uniform(lo, hi)
        return proj(Y)

    return sample


def _exact_quadratic_constants(cost: QuadraticCost, M: int, flavor: str
                               ) -> tuple:
    """Exact (alpha, L_F) for the affine mapping of a quadratic game.

    The Jacobian decomposes over the averaging projection into two blocks,
    Q (+C^T/M) on the deviation subspace and Q + C (+C^T/M) on the
    consensus subspace, so constants follow from two n x n problems.
    """
    Q, C = cost.Q, cost.C
    extra = C.T / M if flavor == NASH else 0.0
    dev = Q + extra
    con = Q + C + extra
    blocks = [con] if M == 1 else [dev, con]
    alpha = min(float(np.min(np.linalg.eigvalsh(0.5 * (B + B.T))))
                for B in blocks)
    lip = max(float(np.linalg.norm(B, 2)) for B in blocks)
    return alpha, lip


def _slot_block_constants(blocks: np.ndarray) -> tuple:
    """(alpha, L_F) of a Jacobian given its per-component blocks."""
    alpha = np.inf
    lip = 0.0
    for H in blocks:
        S = 0.5 * (H + H.T)
        alpha = min(alpha, float(np.min(np.linalg.eigvalsh(S))))
        lip = max(lip, float(np.linalg.norm(H, 2)))
    return float(alpha), float(lip)


def monotonicity_analysis(op: GameOperator,
                          sampler: Optional[Callable] = None,
                          n_samples: int = 50,
                          seed: int = 0) -> MonotonicityReport:
    """Strong-monotonicity and Lipschitz constants of the mapping.

    Affine (quadratic-cost) mappings get exact constants from the constant
    Jacobian.  Otherwise the constants are the worst case over sampled
    Jacobians: the minimum symmetrized eigenvalue and the maximum spectral
    norm, flagged as estimates.
    """
    game = op.game
    if isinstance(game.cost, QuadraticCost):
        alpha, lip = _exact_quadratic_constants(game.cost, game.M, op.flavor)
        return MonotonicityReport(alpha, lip, exact=True, samples=0)
    if sampler is None:
        sampler = default_sampler(game)
    rng = np.random.default_rng(seed)
    alpha = np.inf
    lip = 0.0
    for _ in range(n_samples):
        X = sampler(rng)
        blocks = op.slot_blocks(X)
        if blocks is not None:
            a, l = _slot_block_constants(blocks)
        else:
            J = op._fd_jacobian(np.asarray(X, dtype=float))
            a = float(np.min(np.linalg.eigvalsh(0.5 * (J + J.T))))
            l = float(np.linalg.norm(J, 2))
        alpha = min(alpha, a)
        lip = max(lip, l)
    return MonotonicityReport(float(alpha), float(lip), exact=False,
                              samples=n_samples)


def quadratic_monotonicity_conditions(Q, C, tol: float = 1e-10) -> dict:
    """Sufficient conditions for joint Nash/Wardrop strong monotonicity of
    a quadratic game at every population size.

    Condition 1: Q positive definite and C symmetric positive definite.
    Condition 2: Q positive definite and Q - C^T Q^{-1} C positive definite.
    """
    Q = np.asarray(Q, dtype=float)
    C = np.asarray(C, dtype=float)
    if not np.allclose(Q, Q.T, atol=1e-12):
        raise DimensionError("Q must be symmetric")
    q_pd = float(np.min(np.linalg.eigvalsh(Q))) > tol
    which = None
    if q_pd and np.allclose(C, C.T, atol=tol):
        if float(np.min(np.linalg.eigvalsh(0.5 * (C + C.T)))) > tol:
            which = "symmetric_positive_definite_price"
    if which is None and q_pd:
        schur = Q - C.T @ np.linalg.solve(Q, C)
        if float(np.min(np.linalg.eigvalsh(0.5 * (schur + schur.T)))) > tol:
            which = "schur_complement"
    return {"holds": which is not None, "which_condition": which}
