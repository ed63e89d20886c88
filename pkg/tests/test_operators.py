import numpy as np
import pytest

from aggeq.game import (AggregativeGame, Box, CouplingConstraint,
                        DiagonalPrice, PriceTimesUsage, QuadraticCost,
                        QuadraticTracking, ZeroUtility)
from aggeq.operators import (NASH, WARDROP, ExtendedOperator, build_operator,
                             default_sampler, monotonicity_analysis,
                             operator_gap, quadratic_monotonicity_conditions)
from aggeq.synthetic import build_quadratic_game


def quadratic_game(M=2, n=1, q=1.0, C=None, c=None, K=10.0):
    C = np.eye(n) if C is None else np.asarray(C, dtype=float)
    c = np.zeros((M, n)) if c is None else np.asarray(c, dtype=float)
    cost = QuadraticCost(Q=q * np.eye(n), C=C, c=c)
    individual = tuple(Box(np.zeros(n), np.ones(n)) for _ in range(M))
    coupling = CouplingConstraint.per_component_cap(np.full(n, K), M)
    return AggregativeGame(M=M, n=n, cost=cost, individual=individual,
                           coupling=coupling)


def sqrt_price_game(M=3, n=4, seed=0, utility=None):
    rng = np.random.default_rng(seed)
    d = rng.uniform(1.0, 3.0, size=n)
    price = DiagonalPrice(lambda z: np.sqrt(d + z),
                          lambda z: 0.5 / np.sqrt(d + z),
                          lambda z: -0.25 * (d + z) ** -1.5)
    if utility is None:
        utility = QuadraticTracking(rng.uniform(0.5, 2.0, size=M),
                                    rng.uniform(size=(M, n)))
    cost = PriceTimesUsage(utility=utility, price=price, n=n)
    individual = tuple(Box(np.zeros(n), np.ones(n)) for _ in range(M))
    coupling = CouplingConstraint.per_component_cap(np.ones(n), M)
    return AggregativeGame(M=M, n=n, cost=cost, individual=individual,
                           coupling=coupling)


class TestEvaluation:
    def test_quadratic_two_agent_values(self):
        game = quadratic_game()
        x = np.array([1.0, 0.0])
        f_w = build_operator(game, WARDROP).evaluate(x)
        f_n = build_operator(game, NASH).evaluate(x)
        assert np.allclose(f_w, [1.5, 0.5], atol=1e-12)
        assert np.allclose(f_n, [2.0, 0.5], atol=1e-12)

    def test_no_aggregate_coupling_flavors_coincide(self):
        game = quadratic_game(C=np.zeros((1, 1)), c=[[0.3], [0.7]])
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.normal(size=2)
            f_w = build_operator(game, WARDROP).evaluate(x)
            f_n = build_operator(game, NASH).evaluate(x)
            assert np.allclose(f_w, f_n, atol=0.0)
            X = x.reshape(2, 1)
            assert np.allclose(
                f_w, (X @ game.cost.Q.T + game.cost.c).reshape(-1),
                atol=1e-12)

    def test_identity_price_single_agent(self):
        price = DiagonalPrice(lambda z: z, lambda z: np.ones_like(z),
                              lambda z: np.zeros_like(z))
        cost = PriceTimesUsage(utility=ZeroUtility(), price=price, n=1)
        game = AggregativeGame(
            M=1, n=1, cost=cost, individual=(Box([0.0], [10.0]),),
            coupling=CouplingConstraint.per_component_cap([10.0], 1))
        assert np.allclose(build_operator(game, WARDROP).evaluate([2.0]),
                           [2.0])
        assert np.allclose(build_operator(game, NASH).evaluate([2.0]), [4.0])

    def test_quadratic_closed_form_matches_chain_rule(self):
        rng = np.random.default_rng(1)
        M, n = 3, 4
        Q = rng.normal(size=(n, n))
        Q = Q @ Q.T
        C = rng.normal(size=(n, n))
        c = rng.normal(size=(M, n))
        game = quadratic_game(M=M, n=n)
        cost = QuadraticCost(Q=Q, C=C, c=c)
        game = AggregativeGame(M=M, n=n, cost=cost,
                               individual=game.individual,
                               coupling=game.coupling)
        P = np.full((M, M), 1.0 / M)
        H_w = np.kron(np.eye(M), Q) + np.kron(P, C)
        H_n = H_w + np.kron(np.eye(M), C.T) / M
        for _ in range(10):
            x = rng.normal(size=M * n)
            cc = c.reshape(-1)
            assert np.max(np.abs(build_operator(game, WARDROP).evaluate(x)
                                 - (H_w @ x + cc))) <= 1e-12
            assert np.max(np.abs(build_operator(game, NASH).evaluate(x)
                                 - (H_n @ x + cc))) <= 1e-12


class TestJacobians:
    @pytest.mark.parametrize("flavor", [NASH, WARDROP])
    def test_quadratic_jacobian_matches_fd(self, flavor):
        rng = np.random.default_rng(2)
        M, n = 3, 2
        Q = rng.normal(size=(n, n))
        Q = Q @ Q.T
        cost = QuadraticCost(Q=Q, C=rng.normal(size=(n, n)),
                             c=rng.normal(size=(M, n)))
        base = quadratic_game(M=M, n=n)
        game = AggregativeGame(M=M, n=n, cost=cost,
                               individual=base.individual,
                               coupling=base.coupling)
        op = build_operator(game, flavor)
        x = rng.uniform(size=M * n)
        J = op.jacobian(x)
        J_fd = op._fd_jacobian(x.reshape(M, n))
        rel = np.max(np.abs(J - J_fd)) / (1.0 + np.max(np.abs(J)))
        assert rel <= 1e-4

    @pytest.mark.parametrize("flavor", [NASH, WARDROP])
    def test_diagonal_price_jacobian_matches_fd(self, flavor):
        game = sqrt_price_game()
        op = build_operator(game, flavor)
        rng = np.random.default_rng(3)
        x = rng.uniform(0.1, 0.9, size=game.M * game.n)
        J = op.jacobian(x)
        J_fd = op._fd_jacobian(x.reshape(game.M, game.n))
        rel = np.max(np.abs(J - J_fd)) / (1.0 + np.max(np.abs(J)))
        assert rel <= 1e-4

    def test_slot_blocks_assemble_consistently(self):
        game = sqrt_price_game()
        op = build_operator(game, NASH)
        rng = np.random.default_rng(4)
        X = rng.uniform(size=(game.M, game.n))
        blocks = op.slot_blocks(X)
        assert blocks is not None and blocks.shape == (game.n, game.M,
                                                       game.M)
        J = op.jacobian(X.reshape(-1))
        for t in range(game.n):
            assert np.allclose(J[t::game.n, t::game.n], blocks[t],
                               atol=1e-12)


class TestOperatorGap:
    def test_zero_gap_without_coupling(self):
        game = quadratic_game(C=np.zeros((1, 1)))
        gap, bound = operator_gap(game, np.array([0.7, 0.2]))
        assert gap == 0.0

    def test_hand_computed_gap(self):
        game = quadratic_game()
        gap, _ = operator_gap(game, np.array([1.0, 0.0]))
        assert gap == pytest.approx(0.5, abs=1e-12)

    def test_gap_scales_inversely_with_m(self):
        x_small = np.tile([1.0, 0.0], 2)  # M=4 pattern replicated
        game4 = quadratic_game(M=4)
        game16 = quadratic_game(M=16)
        gap4, _ = operator_gap(game4, x_small)
        gap16, _ = operator_gap(game16, np.tile([1.0, 0.0], 8))
        assert gap4 / gap16 == pytest.approx(2.0, rel=1e-6)

    @pytest.mark.parametrize("make_game", [
        lambda: build_quadratic_game(M=5, n=6, seed=0),
        lambda: sqrt_price_game(M=4, n=3),
    ])
    def test_gap_bound_on_random_feasible_points(self, make_game):
        game = make_game()
        sampler = default_sampler(game)
        rng = np.random.default_rng(5)
        for _ in range(100):
            X = sampler(rng)
            gap, bound = operator_gap(game, X.reshape(-1))
            assert gap <= bound + 1e-9


class TestMonotonicity:
    def test_identity_quadratic_exact(self):
        game = quadratic_game(M=3, n=2, q=1.0, C=np.zeros((2, 2)))
        rep = monotonicity_analysis(build_operator(game, NASH))
        assert rep.exact
        assert rep.alpha == pytest.approx(1.0, abs=1e-12)
        assert rep.lipschitz == pytest.approx(1.0, abs=1e-12)
        assert rep.safe_alpha() == rep.alpha

    def test_two_agent_nash_alpha(self):
        game = quadratic_game(M=2, n=1, q=0.1)
        rep = monotonicity_analysis(build_operator(game, NASH))
        assert rep.exact
        assert rep.alpha == pytest.approx(0.6, abs=1e-12)

    def test_exact_constants_match_dense_jacobian(self):
        rng = np.random.default_rng(6)
        for flavor in (NASH, WARDROP):
            for M in (1, 2, 5):
                n = 3
                Q = rng.normal(size=(n, n))
                Q = Q @ Q.T + 2 * np.eye(n)
                C = rng.normal(size=(n, n))
                base = quadratic_game(M=M, n=n)
                game = AggregativeGame(
                    M=M, n=n,
                    cost=QuadraticCost(Q=Q, C=C, c=np.zeros((M, n))),
                    individual=base.individual, coupling=base.coupling)
                op = build_operator(game, flavor)
                rep = monotonicity_analysis(op)
                J = op.jacobian(np.zeros(M * n))
                alpha_dense = float(np.min(np.linalg.eigvalsh(
                    0.5 * (J + J.T))))
                lip_dense = float(np.linalg.norm(J, 2))
                assert rep.alpha == pytest.approx(alpha_dense, abs=1e-9)
                assert rep.lipschitz == pytest.approx(lip_dense, abs=1e-9)

    def test_sampled_alpha_certifies_monotonicity(self):
        game = sqrt_price_game(M=3, n=3)
        op = build_operator(game, WARDROP)
        rep = monotonicity_analysis(op)
        assert not rep.exact and rep.samples > 0
        assert rep.safe_alpha() == pytest.approx(0.9 * rep.alpha)
        assert rep.safe_lipschitz() == pytest.approx(1.1 * rep.lipschitz)
        sampler = default_sampler(game)
        rng = np.random.default_rng(7)
        for _ in range(200):
            X1 = sampler(rng)
            X2 = sampler(rng)
            d = (X1 - X2).reshape(-1)
            inc = (op.evaluate_blocks(X1)
                   - op.evaluate_blocks(X2)).reshape(-1)
            assert float(inc @ d) >= (rep.alpha - 1e-7) * float(d @ d)

    def test_monotone_price_gives_monotone_wardrop(self):
        game = sqrt_price_game(M=3, n=3, utility=ZeroUtility())
        rep = monotonicity_analysis(build_operator(game, WARDROP))
        assert rep.alpha >= -1e-7

    def test_extended_operator_monotone(self):
        game = build_quadratic_game(M=4, n=3, seed=1)
        ext = ExtendedOperator(build_operator(game, NASH))
        sampler = default_sampler(game)
        rng = np.random.default_rng(8)
        for _ in range(100):
            X1, X2 = sampler(rng), sampler(rng)
            l1 = rng.uniform(0.0, 2.0, size=game.coupling.m)
            l2 = rng.uniform(0.0, 2.0, size=game.coupling.m)
            p1, d1 = ext.evaluate_blocks(X1, l1)
            p2, d2 = ext.evaluate_blocks(X2, l2)
            inner = (float(((p1 - p2) * (X1 - X2)).sum())
                     + float((-(d1 - d2)) @ (l1 - l2)) * -1.0)
            # dual block of T is -(Ax - b) = b - Ax; its difference is
            # -(A(x1-x2)) and pairs with (l1 - l2)
            inner = (float(((p1 - p2) * (X1 - X2)).sum())
                     + float((d1 - d2) @ (l1 - l2)))
            assert inner >= -1e-7

    def test_extended_operator_blocks(self):
        game = quadratic_game()
        base = build_operator(game, NASH)
        ext = ExtendedOperator(base)
        x = np.array([0.4, 0.9])
        lam = np.array([1.5])
        primal, dual = ext.evaluate(x, lam)
        X = x.reshape(2, 1)
        want = (base.evaluate_blocks(X)
                + game.coupling.adjoint_blocks(lam)).reshape(-1)
        assert np.allclose(primal, want, atol=0.0)
        assert np.allclose(dual, game.coupling.residual(X), atol=0.0)


class TestQuadraticConditions:
    def test_benchmark_matrices_hold(self):
        out = quadratic_monotonicity_conditions(0.1 * np.eye(3), np.eye(3))
        assert out["holds"]
        assert out["which_condition"] == "symmetric_positive_definite_price"

    def test_zero_price_schur(self):
        out = quadratic_monotonicity_conditions(np.eye(3), np.zeros((3, 3)))
        assert out["holds"]
        assert out["which_condition"] == "schur_complement"

    def test_large_nonsymmetric_price_fails(self):
        C = 10.0 * np.eye(2)
        C[0, 1] = 1.0
        out = quadratic_monotonicity_conditions(0.1 * np.eye(2), C)
        assert not out["holds"]
        assert out["which_condition"] is None
