"""Exact Euclidean projections onto the constraint geometries used by the
solvers: boxes, the nonnegative orthant, affine subspaces, box-plus-budget
sets, and intersections handled by Dykstra's alternating scheme.

All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConvergenceError, DimensionError, InfeasibleSetError
from .game import (Box, BoxBudget, FlowPolytope, HalfspaceIntersection,
                   IndividualConstraintSet)

DYKSTRA_TOL = 1e-10
DYKSTRA_MAX_ITER = 10_000


@dataclass(frozen=True)
class NonnegativeOrthant:
    dim: Optional[int] = None


@dataclass(frozen=True)
class AffineSubspace:
    B: np.ndarray
    b_od: np.ndarray


def project_box(y, lo, hi) -> np.ndarray:
    """Componentwise clamp of y to [lo, hi]."""
    y = np.asarray(y, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise InfeasibleSetError("box requires lo <= hi componentwise")
    return np.clip(y, lo, hi)


def project_nonneg(y) -> np.ndarray:
    return np.maximum(np.asarray(y, dtype=float), 0.0)


def _affine_solver(B):
    """Least-squares action u -> B^+ u via a rank-revealing solve."""
    B = np.asarray(B, dtype=float)

    def solve(u):
        sol, *_ = np.linalg.lstsq(B, u, rcond=None)
        return sol

    return solve


def project_affine(y, B, b_od) -> np.ndarray:
    """Projection of y onto {x : B x = b_od}.

    Raises when the system is inconsistent (residual above 1e-8 at the
    least-squares solution).
    """
    y = np.asarray(y, dtype=float)
    B = np.asarray(B, dtype=float)
    b_od = np.asarray(b_od, dtype=float)
    solve = _affine_solver(B)
    # Consistency: the min-norm solution must satisfy the system.
    x0 = solve(b_od)
    if np.max(np.abs(B @ x0 - b_od), initial=0.0) > 1e-8:
        raise InfeasibleSetError("system B x = b_od is inconsistent")
    out = y - B.T @ np.linalg.lstsq(B @ B.T, B @ y - b_od, rcond=None)[0]
    if np.max(np.abs(B @ out - b_od), initial=0.0) > 1e-9:
        # Fall back to the pseudoinverse route for ill-conditioned B.
        out = y - np.linalg.pinv(B) @ (B @ y - b_od)
        if np.max(np.abs(B @ out - b_od), initial=0.0) > 1e-9:
            raise ConvergenceError("affine projection residual above 1e-9",
                                   last=out)
    return out


def project_box_budget(y, lo, hi, theta) -> np.ndarray:
    """Projection onto {x in [lo, hi] : sum(x) >= theta}.

    Dual bisection on the single budget multiplier mu >= 0:
    x(mu) = clamp(y + mu, lo, hi) with sum(x(mu)) monotone increasing in mu.
    """
    y = np.asarray(y, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise InfeasibleSetError("box requires lo <= hi componentwise")
    if theta > float(np.sum(hi)) + 1e-12:
        raise InfeasibleSetError("budget exceeds the box: theta > sum(hi)")
    x = np.clip(y, lo, hi)
    if float(np.sum(x)) >= theta - 1e-12:
        return x
    mu_lo = 0.0
    mu_hi = float(theta + np.max(np.abs(y), initial=0.0) * y.size
                  + np.max(np.abs(lo)) + np.max(np.abs(hi)) + 1.0)
    for _ in range(200):
        mu = 0.5 * (mu_lo + mu_hi)
        s = float(np.sum(np.clip(y + mu, lo, hi)))
        if s < theta:
            mu_lo = mu
        else:
            mu_hi = mu
        if mu_hi - mu_lo < 1e-14:
            break
    return np.clip(y + mu_hi, lo, hi)


def project_box_budget_batch(Y, lo, hi, theta) -> np.ndarray:
    """Vectorized project_box_budget over the rows of Y.

    lo, hi are (M, n); theta is (M,).  Used by the solvers' hot loops.
    """
    Y = np.asarray(Y, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), Y.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), Y.shape)
    theta = np.asarray(theta, dtype=float)
    X = np.clip(Y, lo, hi)
    need = X.sum(axis=1) < theta - 1e-12
    if not np.any(need):
        return X
    Yn, lon, hin, tn = Y[need], lo[need], hi[need], theta[need]
    mu_lo = np.zeros(len(tn))
    mu_hi = (tn + np.abs(Yn).max(axis=1) * Y.shape[1]
             + np.abs(lon).max(axis=1) + np.abs(hin).max(axis=1) + 1.0)
    for _ in range(200):
        mu = 0.5 * (mu_lo + mu_hi)
        s = np.clip(Yn + mu[:, None], lon, hin).sum(axis=1)
        low = s < tn
        mu_lo = np.where(low, mu, mu_lo)
        mu_hi = np.where(low, mu_hi, mu)
        if np.max(mu_hi - mu_lo) < 1e-14:
            break
    X[need] = np.clip(Yn + mu_hi[:, None], lon, hin)
    return X


def project_flow_polytope(y, B, b_od) -> np.ndarray:
    """Projection onto {x in [0, 1]^E : B x = b_od}.

    Works on the concave dual over the node multipliers mu:
    x(mu) = clip(y - B^T mu, 0, 1) and d(mu) = 0.5 |x(mu) - y|^2
    + mu^T (B x(mu) - b_od).  The dual is maximized with L-BFGS-B and an
    active-set polish then restores the conservation equations to machine
    precision.  This is orders of magnitude faster than alternating
    projections when y is far from the polytope.
    """
    from scipy.optimize import minimize

    y = np.asarray(y, dtype=float)
    B = np.asarray(B, dtype=float)
    b_od = np.asarray(b_od, dtype=float)

    def neg_dual(mu):
        x = np.clip(y - B.T @ mu, 0.0, 1.0)
        r = B @ x - b_od
        val = 0.5 * float((x - y) @ (x - y)) + float(mu @ r)
        return -val, -r

    res = minimize(neg_dual, np.zeros(B.shape[0]), jac=True,
                   method="L-BFGS-B",
                   options={"maxiter": 2000, "ftol": 1e-18, "gtol": 1e-12})
    u = y - B.T @ res.x
    x = np.clip(u, 0.0, 1.0)
    return _polish_flow(x, u, y, B, b_od)


def _polish_flow(x, u, y, B, b_od, margin=1e-7):
    """Equality-constrained least-squares refit on the inactive components.

    Falls back to the unpolished point when the refit leaves the box, which
    only happens under active-set misidentification at degenerate points.
    """
    free = (u > margin) & (u < 1.0 - margin)
    if not np.any(free):
        if np.max(np.abs(B @ x - b_od), initial=0.0) <= 1e-9:
            return x
        free = np.ones_like(free)
    Bf = B[:, free]
    rhs = Bf @ y[free] - (b_od - B[:, ~free] @ x[~free])
    w, *_ = np.linalg.lstsq(Bf @ Bf.T, rhs, rcond=None)
    xf = y[free] - Bf.T @ w
    if np.all(xf >= -1e-9) and np.all(xf <= 1.0 + 1e-9):
        out = x.copy()
        out[free] = np.clip(xf, 0.0, 1.0)
        if (np.max(np.abs(B @ out - b_od), initial=0.0)
                <= np.max(np.abs(B @ x - b_od), initial=0.0) + 1e-12):
            return out
    return x


def project_halfspace(y, a, beta) -> np.ndarray:
    """Projection onto {x : a^T x <= beta}."""
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    gap = float(a @ y - beta)
    if gap <= 0.0:
        return y.copy()
    return y - (gap / float(a @ a)) * a


def dykstra(y, projectors: Sequence[Callable], tol: float = DYKSTRA_TOL,
            max_iter: int = DYKSTRA_MAX_ITER) -> np.ndarray:
    """Dykstra's alternating projection onto an intersection of convex sets.

    ``projectors`` are exact projections onto the individual sets.  Stops
    when successive sweeps move the iterate by at most ``tol`` in inf-norm.
    """
    x = np.asarray(y, dtype=float).copy()
    corrections = [np.zeros_like(x) for _ in projectors]
    for _ in range(max_iter):
        x_prev = x.copy()
        # Stop only when the corrections settle as well: the iterate alone
        # can stall for many sweeps while the corrections still grow.
        corr_change = 0.0
        for j, proj in enumerate(projectors):
            z = proj(x + corrections[j])
            new_corr = x + corrections[j] - z
            corr_change = max(corr_change, float(
                np.max(np.abs(new_corr - corrections[j]), initial=0.0)))
            corrections[j] = new_corr
            x = z
        gap = max(float(np.max(np.abs(x - x_prev), initial=0.0)),
                  corr_change)
        if gap <= tol:
            return x
    raise ConvergenceError(
        f"dykstra did not converge in {max_iter} sweeps (gap {gap:.3e})",
        last=x, gap=gap)


def projector(spec) -> Callable[[np.ndarray], np.ndarray]:
    """Exact projection callable for a target-set description."""
    if isinstance(spec, Box):
        return lambda y: project_box(y, spec.lo, spec.hi)
    if isinstance(spec, BoxBudget):
        return lambda y: project_box_budget(y, spec.lo, spec.hi, spec.theta)
    if isinstance(spec, NonnegativeOrthant):
        return project_nonneg
    if isinstance(spec, (AffineSubspace, FlowPolytope)):
        if isinstance(spec, AffineSubspace):
            return lambda y: project_affine(y, spec.B, spec.b_od)
        return lambda y: project_individual(spec, y)
    if isinstance(spec, HalfspaceIntersection):
        return lambda y: project_individual(spec, y)
    raise DimensionError(f"no projector for {type(spec).__name__}")


def project_individual(cs: IndividualConstraintSet, y) -> np.ndarray:
    """Projection onto an individual constraint set, dispatched per variant."""
    if isinstance(cs, Box):
        return project_box(y, cs.lo, cs.hi)
    if isinstance(cs, BoxBudget):
        return project_box_budget(y, cs.lo, cs.hi, cs.theta)
    if isinstance(cs, FlowPolytope):
        _cached_affine_projector(cs.B, cs.b_od)  # consistency check
        return project_flow_polytope(np.asarray(y, dtype=float),
                                     cs.B, cs.b_od)
    if isinstance(cs, HalfspaceIntersection):
        projs = [
            (lambda a, beta: (lambda v: project_halfspace(v, a, beta)))(a, b)
            for a, b in zip(cs.normals, cs.offsets)
        ]
        if cs.box is not None:
            projs.insert(0, lambda v: np.clip(v, cs.box.lo, cs.box.hi))
        return dykstra(y, projs)
    raise DimensionError(f"no projection for {type(cs).__name__}")


_AFFINE_CACHE: dict = {}


def _cached_affine_projector(B, b_od):
    """Affine projector reusing a factorization keyed on the matrix identity."""
    key = (id(B), B.shape, b_od.tobytes())
    hit = _AFFINE_CACHE.get(key)
    if hit is not None:
        return hit
    BBt = B @ B.T
    pinv_BBt = np.linalg.pinv(BBt)
    x0 = B.T @ (pinv_BBt @ b_od)
    if np.max(np.abs(B @ x0 - b_od), initial=0.0) > 1e-8:
        raise InfeasibleSetError("system B x = b_od is inconsistent")

    def proj(y):
        return y - B.T @ (pinv_BBt @ (B @ y - b_od))

    if len(_AFFINE_CACHE) > 4096:
        _AFFINE_CACHE.clear()
    _AFFINE_CACHE[key] = proj
    return proj


class ProfileProjector:
    """Projection of an (M, n) strategy matrix onto the product of the
    agents' individual sets, vectorized when the sets share a variant."""

    def __init__(self, individual: Sequence[IndividualConstraintSet]):
        self.individual = tuple(individual)
        self._mode = "generic"
        first = self.individual[0]
        if all(isinstance(cs, BoxBudget) for cs in self.individual):
            self._mode = "box_budget"
            self._lo = np.stack([cs.lo for cs in self.individual])
            self._hi = np.stack([cs.hi for cs in self.individual])
            self._theta = np.array([cs.theta for cs in self.individual])
        elif all(isinstance(cs, Box) for cs in self.individual):
            self._mode = "box"
            self._lo = np.stack([cs.lo for cs in self.individual])
            self._hi = np.stack([cs.hi for cs in self.individual])
        elif (all(isinstance(cs, FlowPolytope) for cs in self.individual)
              and all(cs.B is first.B for cs in self.individual)):
            self._mode = "flow"
            self._B = first.B
            self._pinv_BBt = np.linalg.pinv(self._B @ self._B.T)
            self._b_ods = np.stack([cs.b_od for cs in self.individual])

    def __call__(self, Y: np.ndarray) -> np.ndarray:
        if self._mode == "box":
            return np.clip(Y, self._lo, self._hi)
        if self._mode == "box_budget":
            return project_box_budget_batch(Y, self._lo, self._hi, self._theta)
        if self._mode == "flow":
            return self._project_flow(Y)
        return np.stack([project_individual(cs, Y[i])
                         for i, cs in enumerate(self.individual)])

    def _project_flow(self, Y) -> np.ndarray:
        # Dual ascent for every agent at once: the dual objectives are
        # separable across agents, so one joint L-BFGS run maximizes them
        # simultaneously; each agent then gets an active-set polish.
        from scipy.optimize import minimize

        B = self._B
        Y = np.asarray(Y, dtype=float)
        M = Y.shape[0]
        V = B.shape[0]

        def neg_dual(mu_flat):
            Mu = mu_flat.reshape(M, V)
            X = np.clip(Y - Mu @ B, 0.0, 1.0)
            R = X @ B.T - self._b_ods
            val = 0.5 * float(np.sum((X - Y) ** 2)) + float(np.sum(Mu * R))
            return -val, -R.ravel()

        res = minimize(neg_dual, np.zeros(M * V), jac=True,
                       method="L-BFGS-B",
                       options={"maxiter": 2000, "ftol": 1e-18,
                                "gtol": 1e-12})
        U = Y - res.x.reshape(M, V) @ B
        X = np.clip(U, 0.0, 1.0)
        out = np.empty_like(X)
        for i in range(M):
            out[i] = _polish_flow(X[i], U[i], Y[i], B, self._b_ods[i])
        return out
