"""Aggregative game model: agents, costs, individual and coupling constraints.

The population of M agents each picks a strategy in R^n.  Costs depend on the
own strategy and on the population average; an affine constraint A x <= b may
couple all strategies.  Everything here is immutable after construction and
safe for concurrent reads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, InfeasibleSetError


def _vec(a, name="array"):
    out = np.asarray(a, dtype=float)
    if out.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {out.shape}")
    return out


# ---------------------------------------------------------------------------
# Strategy profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StrategyProfile:
    """Stacked decision vector of the whole population.

    ``entries`` has length M*n; agent i (0-based) owns the contiguous slice
    ``[i*n, (i+1)*n)``.
    """

    entries: np.ndarray
    M: int
    n: int

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float).copy()
        if self.M <= 0 or self.n <= 0:
            raise DimensionError("M and n must be positive")
        if e.ndim != 1 or e.size != self.M * self.n:
            raise DimensionError(
                f"profile length {e.size} != M*n = {self.M * self.n}"
            )
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @classmethod
    def from_matrix(cls, X) -> "StrategyProfile":
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise DimensionError("expected an (M, n) matrix")
        return cls(X.reshape(-1), X.shape[0], X.shape[1])

    def as_matrix(self) -> np.ndarray:
        return self.entries.reshape(self.M, self.n)

    def agent(self, i: int) -> np.ndarray:
        if not 0 <= i < self.M:
            raise IndexError(f"agent index {i} out of range [0, {self.M})")
        return self.entries[i * self.n : (i + 1) * self.n]

    def aggregate(self) -> np.ndarray:
        return aggregate_matrix(self.as_matrix())


def aggregate_matrix(X: np.ndarray) -> np.ndarray:
    """Average of the rows of an (M, n) strategy matrix.

    Uses a fixed agent-index-order reduction so repeated runs are bitwise
    identical.
    """
    X = np.asarray(X, dtype=float)
    return np.add.reduce(X, axis=0) / X.shape[0]


def aggregate(x: Union[StrategyProfile, np.ndarray], M: Optional[int] = None,
              n: Optional[int] = None) -> np.ndarray:
    """Population average (1/M) sum_i x^i of a strategy profile."""
    if isinstance(x, StrategyProfile):
        return x.aggregate()
    if M is None or n is None:
        raise DimensionError("aggregate of a raw vector needs M and n")
    x = _vec(x, "profile")
    if x.size != M * n:
        raise DimensionError(f"profile length {x.size} != M*n = {M * n}")
    return aggregate_matrix(x.reshape(M, n))


# ---------------------------------------------------------------------------
# Individual constraint sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box {x : lo <= x <= hi}."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo, hi = _vec(self.lo, "lo"), _vec(self.hi, "hi")
        if lo.shape != hi.shape:
            raise DimensionError("lo and hi must have the same shape")
        if np.any(lo > hi):
            raise InfeasibleSetError("box requires lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return self.lo.size

    def bounds(self):
        return self.lo, self.hi

    def violation(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(max(np.max(self.lo - x, initial=0.0),
                         np.max(x - self.hi, initial=0.0)))


@dataclass(frozen=True)
class BoxBudget:
    """Box intersected with a minimum-total constraint sum(x) >= theta."""

    lo: np.ndarray
    hi: np.ndarray
    theta: float

    def __post_init__(self):
        lo, hi = _vec(self.lo, "lo"), _vec(self.hi, "hi")
        if lo.shape != hi.shape:
            raise DimensionError("lo and hi must have the same shape")
        if np.any(lo > hi):
            raise InfeasibleSetError("box requires lo <= hi componentwise")
        if self.theta > float(np.sum(hi)) + 1e-12:
            raise InfeasibleSetError(
                f"budget theta={self.theta} exceeds sum(hi)={np.sum(hi)}"
            )
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "theta", float(self.theta))

    @property
    def dim(self):
        return self.lo.size

    def bounds(self):
        return self.lo, self.hi

    def violation(self, x) -> float:
        x = np.asarray(x, dtype=float)
        box = max(np.max(self.lo - x, initial=0.0),
                  np.max(x - self.hi, initial=0.0))
        return float(max(box, self.theta - float(np.sum(x))))


@dataclass(frozen=True)
class FlowPolytope:
    """Unit-box flows satisfying conservation B x = b_od.

    B is a node-edge incidence matrix (+1 head, -1 tail); b_od marks the
    origin (-1) and destination (+1) of the agent.
    """

    B: np.ndarray
    b_od: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        b_od = _vec(self.b_od, "b_od")
        if B.ndim != 2 or B.shape[0] != b_od.size:
            raise DimensionError("incidence matrix rows must match b_od length")
        vals = np.unique(b_od)
        if not np.all(np.isin(vals, (-1.0, 0.0, 1.0))):
            raise InfeasibleSetError("b_od entries must be in {-1, 0, 1}")
        if abs(float(np.sum(b_od))) > 1e-12:
            raise InfeasibleSetError("b_od must sum to zero")
        B = B.copy()
        B.setflags(write=False)
        b_od = b_od.copy()
        b_od.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "b_od", b_od)

    @property
    def dim(self):
        return self.B.shape[1]

    def bounds(self):
        e = self.B.shape[1]
        return np.zeros(e), np.ones(e)

    def violation(self, x) -> float:
        x = np.asarray(x, dtype=float)
        box = max(np.max(-x, initial=0.0), np.max(x - 1.0, initial=0.0))
        cons = float(np.max(np.abs(self.B @ x - self.b_od), initial=0.0))
        return float(max(box, cons))


@dataclass(frozen=True)
class HalfspaceIntersection:
    """Intersection of halfspaces a_j^T x <= beta_j, optionally with a box."""

    normals: np.ndarray
    offsets: np.ndarray
    box: Optional[Box] = None

    def __post_init__(self):
        normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        offsets = _vec(self.offsets, "offsets")
        if normals.shape[0] != offsets.size:
            raise DimensionError("one offset per halfspace required")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)

    @property
    def dim(self):
        return self.normals.shape[1]

    def bounds(self):
        if self.box is not None:
            return self.box.bounds()
        raise InfeasibleSetError(
            "halfspace intersection without a box is unbounded"
        )

    def violation(self, x) -> float:
        x = np.asarray(x, dtype=float)
        v = float(np.max(self.normals @ x - self.offsets, initial=0.0))
        if self.box is not None:
            v = max(v, self.box.violation(x))
        return v


IndividualConstraintSet = Union[Box, BoxBudget, FlowPolytope,
                                HalfspaceIntersection]


# ---------------------------------------------------------------------------
# Coupling constraint
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingConstraint:
    """Affine coupling constraint A x <= b on the stacked profile.

    The structured per-component form (1/M) sum_i x^i_t <= K_t is kept as
    ``cap``; it expands to A = (1/M)(1_M^T kron I_n), b = K but evaluates
    residuals without materializing A.
    """

    A: Optional[np.ndarray]
    b: np.ndarray
    M: int
    n: int
    cap: Optional[np.ndarray] = None

    @classmethod
    def dense(cls, A, b, M: int, n: int) -> "CouplingConstraint":
        A = np.asarray(A, dtype=float)
        b = _vec(b, "b")
        if A.ndim != 2 or A.shape != (b.size, M * n):
            raise DimensionError(
                f"A must be ({b.size}, {M * n}), got {A.shape}"
            )
        return cls(A=A.copy(), b=b, M=M, n=n, cap=None)

    @classmethod
    def per_component_cap(cls, K, M: int) -> "CouplingConstraint":
        K = _vec(K, "K")
        return cls(A=None, b=K.copy(), M=M, n=K.size, cap=K.copy())

    @property
    def m(self) -> int:
        return self.b.size

    def matrix(self) -> np.ndarray:
        """Dense A, built on demand for the structured form."""
        if self.A is not None:
            return self.A
        return np.kron(np.ones((1, self.M)), np.eye(self.n)) / self.M

    def agent_block(self, i: int) -> np.ndarray:
        """A_(:,i), the m x n block acting on agent i."""
        if self.cap is not None:
            return np.eye(self.n) / self.M
        return self.A[:, i * self.n : (i + 1) * self.n]

    def apply(self, X: np.ndarray) -> np.ndarray:
        """A x for an (M, n) strategy matrix."""
        if self.cap is not None:
            return aggregate_matrix(X)
        return self.A @ X.reshape(-1)

    def residual(self, X: np.ndarray) -> np.ndarray:
        """Slack b - A x; nonnegative iff the constraint holds."""
        return self.b - self.apply(X)

    def adjoint_blocks(self, lam: np.ndarray) -> np.ndarray:
        """(M, n) matrix whose row i is A_(:,i)^T lam."""
        if self.cap is not None:
            return np.tile(lam / self.M, (self.M, 1))
        return (self.A.T @ lam).reshape(self.M, self.n)

    def norm(self) -> float:
        """Largest singular value of A."""
        if self.cap is not None:
            return 1.0 / np.sqrt(self.M)
        return float(np.linalg.norm(self.A, 2))


# ---------------------------------------------------------------------------
# Price maps and separable utilities (building blocks for cost models)
# ---------------------------------------------------------------------------


class PriceMap:
    """Per-unit price as a function of the average usage level z."""

    def value(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jac(self, z: np.ndarray) -> np.ndarray:
        """Jacobian with rows d p_a / d z_b."""
        raise NotImplementedError


@dataclass(frozen=True)
class AffinePrice(PriceMap):
    C: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        C = np.asarray(self.C, dtype=float)
        c = _vec(self.c, "c")
        if C.shape != (c.size, c.size):
            raise DimensionError("C must be square and match c")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "c", c)

    def value(self, z):
        return self.C @ z + self.c

    def jac(self, z):
        return self.C


@dataclass(frozen=True)
class DiagonalPrice(PriceMap):
    """Componentwise price p_t(z_t) with analytic first and second derivatives.

    ``f``, ``df``, ``ddf`` map an n-vector z to the n-vector of per-component
    values/derivatives.
    """

    f: Callable[[np.ndarray], np.ndarray]
    df: Callable[[np.ndarray], np.ndarray]
    ddf: Callable[[np.ndarray], np.ndarray]

    def value(self, z):
        return np.asarray(self.f(z), dtype=float)

    def diag(self, z):
        return np.asarray(self.df(z), dtype=float)

    def diag2(self, z):
        return np.asarray(self.ddf(z), dtype=float)

    def jac(self, z):
        return np.diag(self.diag(z))


class Utility:
    """Separable smooth convex term v^i(x^i) in a price-times-usage cost."""

    def value(self, i: int, x_i: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, i: int, x_i: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_all(self, X: np.ndarray) -> np.ndarray:
        return np.stack([self.grad(i, X[i]) for i in range(X.shape[0])])

    def curvature(self) -> tuple:
        """(strong-convexity constant, gradient Lipschitz constant)."""
        raise NotImplementedError


class ZeroUtility(Utility):
    def value(self, i, x_i):
        return 0.0

    def grad(self, i, x_i):
        return np.zeros_like(np.asarray(x_i, dtype=float))

    def grad_all(self, X):
        return np.zeros_like(X)

    def curvature(self):
        return 0.0, 0.0


@dataclass(frozen=True)
class QuadraticTracking(Utility):
    """v^i(x) = gamma_i/2 * ||x - ref_i||^2."""

    gamma: np.ndarray
    ref: np.ndarray

    def __post_init__(self):
        gamma = _vec(self.gamma, "gamma")
        ref = np.asarray(self.ref, dtype=float)
        if ref.ndim != 2 or ref.shape[0] != gamma.size:
            raise DimensionError("ref must be (M, n) with one row per agent")
        if np.any(gamma < 0):
            raise InfeasibleSetError("tracking weights must be nonnegative")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "ref", ref)

    def value(self, i, x_i):
        d = np.asarray(x_i, dtype=float) - self.ref[i]
        return 0.5 * self.gamma[i] * float(d @ d)

    def grad(self, i, x_i):
        return self.gamma[i] * (np.asarray(x_i, dtype=float) - self.ref[i])

    def grad_all(self, X):
        return self.gamma[:, None] * (X - self.ref)

    def curvature(self):
        return float(np.min(self.gamma)), float(np.max(self.gamma))


# ---------------------------------------------------------------------------
# Cost models
# ---------------------------------------------------------------------------


class CostModel:
    """Evaluation interface for the per-agent cost J^i(x^i, z).

    ``grad_own`` differentiates with respect to x^i at fixed z; ``grad_agg``
    differentiates with respect to z at fixed x^i.
    """

    n: int

    def value(self, i: int, x_i: np.ndarray, z: np.ndarray) -> float:
        raise NotImplementedError

    def grad_own(self, i: int, x_i: np.ndarray, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad_agg(self, i: int, x_i: np.ndarray, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # Vectorized forms; the defaults loop over agents.
    def grad_own_all(self, X: np.ndarray, z: np.ndarray) -> np.ndarray:
        return np.stack([self.grad_own(i, X[i], z) for i in range(X.shape[0])])

    def grad_agg_all(self, X: np.ndarray, z: np.ndarray) -> np.ndarray:
        return np.stack([self.grad_agg(i, X[i], z) for i in range(X.shape[0])])


@dataclass(frozen=True)
class QuadraticCost(CostModel):
    """J^i = 1/2 x^T Q x + (C z + c^i)^T x with common Q, C."""

    Q: np.ndarray
    C: np.ndarray
    c: np.ndarray  # (M, n), one offset per agent

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        C = np.asarray(self.C, dtype=float)
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        n = Q.shape[0]
        if Q.shape != (n, n) or C.shape != (n, n) or c.shape[1] != n:
            raise DimensionError("Q, C must be n x n and c rows length n")
        if not np.allclose(Q, Q.T, atol=1e-12):
            raise DimensionError("Q must be symmetric")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "c", c)

    @property
    def n(self):
        return self.Q.shape[0]

    def value(self, i, x_i, z):
        x_i = np.asarray(x_i, dtype=float)
        z = np.asarray(z, dtype=float)
        return float(0.5 * x_i @ self.Q @ x_i + (self.C @ z + self.c[i]) @ x_i)

    def grad_own(self, i, x_i, z):
        return self.Q @ np.asarray(x_i, dtype=float) + self.C @ z + self.c[i]

    def grad_agg(self, i, x_i, z):
        return self.C.T @ np.asarray(x_i, dtype=float)

    def grad_own_all(self, X, z):
        return X @ self.Q.T + (self.C @ z)[None, :] + self.c

    def grad_agg_all(self, X, z):
        return X @ self.C


@dataclass(frozen=True)
class PriceTimesUsage(CostModel):
    """J^i = v^i(x^i) + p(z)^T x^i."""

    utility: Utility
    price: PriceMap
    n: int

    def value(self, i, x_i, z):
        x_i = np.asarray(x_i, dtype=float)
        return float(self.utility.value(i, x_i) + self.price.value(z) @ x_i)

    def grad_own(self, i, x_i, z):
        return self.utility.grad(i, x_i) + self.price.value(z)

    def grad_agg(self, i, x_i, z):
        x_i = np.asarray(x_i, dtype=float)
        if isinstance(self.price, DiagonalPrice):
            return self.price.diag(z) * x_i
        return self.price.jac(z).T @ x_i

    def grad_own_all(self, X, z):
        return self.utility.grad_all(X) + self.price.value(z)[None, :]

    def grad_agg_all(self, X, z):
        if isinstance(self.price, DiagonalPrice):
            return X * self.price.diag(z)[None, :]
        return X @ self.price.jac(z)


# ---------------------------------------------------------------------------
# The game itself
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AggregativeGame:
    M: int
    n: int
    cost: CostModel
    individual: tuple
    coupling: CouplingConstraint
    tag: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.M <= 0 or self.n <= 0:
            raise DimensionError("games require M >= 1 and n >= 1")
        individual = tuple(self.individual)
        if len(individual) != self.M:
            raise DimensionError("one individual constraint set per agent")
        for cs in individual:
            if cs.dim != self.n:
                raise DimensionError("individual set dimension mismatch")
        if self.coupling.M != self.M or self.coupling.n != self.n:
            raise DimensionError("coupling constraint dimension mismatch")
        if self.cost.n != self.n:
            raise DimensionError("cost model dimension mismatch")
        object.__setattr__(self, "individual", individual)

    def profile(self, x) -> StrategyProfile:
        if isinstance(x, StrategyProfile):
            return x
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return StrategyProfile.from_matrix(x)
        return StrategyProfile(x, self.M, self.n)

    def bounding_box(self):
        """Tightest common box containing every individual set."""
        lo = np.full(self.n, np.inf)
        hi = np.full(self.n, -np.inf)
        for cs in self.individual:
            l, h = cs.bounds()
            lo = np.minimum(lo, l)
            hi = np.maximum(hi, h)
        return lo, hi


def cost_value(game: AggregativeGame, i: int, x_i, z) -> float:
    """Cost J^i(x^i, z) of agent i at strategy x_i and average z."""
    if not 0 <= i < game.M:
        raise IndexError(f"agent index {i} out of range [0, {game.M})")
    x_i = _vec(x_i, "x_i")
    z = _vec(z, "z")
    if x_i.size != game.n or z.size != game.n:
        raise DimensionError("x_i and z must have length n")
    return game.cost.value(i, x_i, z)


@dataclass(frozen=True)
class FeasibilityReport:
    individual_violations: np.ndarray  # (M,) max violation per agent
    coupling_residual: np.ndarray  # b - A x
    feasible: bool


def feasibility_report(game: AggregativeGame, x, tol: float = 1e-6
                       ) -> FeasibilityReport:
    """Check individual and coupling feasibility of a profile within tol."""
    prof = game.profile(x)
    X = prof.as_matrix()
    viol = np.array([game.individual[i].violation(X[i])
                     for i in range(game.M)])
    resid = game.coupling.residual(X)
    feasible = bool(np.all(viol <= tol) and np.min(resid, initial=0.0) >= -tol)
    return FeasibilityReport(viol, resid, feasible)
