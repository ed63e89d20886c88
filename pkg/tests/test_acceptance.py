"""End-to-end acceptance checks.

Each test prints one CRITERION line (PASS/FAIL) summarizing the check it
performs; assertions enforce the same condition.
"""

import os
import time

import numpy as np
import pytest

from aggeq.algorithms import (SolverConfig, asymmetric_projection,
                              extragradient, two_level_wardrop)
from aggeq.analysis import (distance_bounds, epsilon_nash, estimate_constants,
                            ev_dual_uniqueness, outer_sum_eigenvalue_check,
                            wardrop_epsilon_bound)
from aggeq.apps.ev import build_ev_game, generate_ev_params
from aggeq.apps.traffic import (build_network, build_route_choice_game,
                                load_network, traffic_bounds)
from aggeq.game import (AggregativeGame, Box, BoxBudget, CouplingConstraint,
                        FlowPolytope, QuadraticCost, aggregate_matrix)
from aggeq.operators import (NASH, WARDROP, build_operator, default_sampler,
                             monotonicity_analysis, operator_gap)
from aggeq.projection import (dykstra, project_box_budget, project_halfspace,
                              project_individual)
from aggeq.synthetic import build_quadratic_game

OLDENBURG_DIR = os.path.join(os.path.dirname(__file__), "..", "data",
                             "oldenburg")
SWEEP_M = (50, 100, 200, 400)
TWO_ROUTE_EDGES = [(0, 1, 1.0, 1.0), (1, 0, 1.0, 1.0),
                   (0, 1, 2.0, 2.0), (1, 0, 2.0, 2.0)]


def _report(num, ok, detail):
    print(f"CRITERION {num}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


def test_criterion_1_traffic_threshold():
    net = build_network([0, 1], TWO_ROUTE_EDGES, f=4e-3, h=7200.0)
    out = traffic_bounds(net, gamma_hat=0.5, M=100)
    thr = out["M_threshold"]
    _report(1, 16.09 <= thr <= 16.20,
            f"population threshold {thr:.4f} within [16.09, 16.20]")


def test_criterion_2_oldenburg_ingestion():
    nodes = os.path.join(OLDENBURG_DIR, "nodes.csv")
    edges = os.path.join(OLDENBURG_DIR, "edges.csv")
    if not (os.path.exists(nodes) and os.path.exists(edges)):
        print("CRITERION 2: SKIP - Oldenburg dataset not bundled")
        pytest.skip("Oldenburg dataset not present")
    t0 = time.time()
    net = load_network(nodes, edges, bbox=(3619.0, 4081.0, 3542.0, 4158.0))
    elapsed = time.time() - t0
    ok = (net.n_nodes == 175 and net.n_edges == 2 * 213 and elapsed < 5.0)
    _report(2, ok, f"{net.n_nodes} nodes, {net.n_edges // 2} undirected"
                   f" edges in {elapsed:.2f}s")


@pytest.fixture(scope="module")
def sweep_results():
    """Nash and Wardrop solutions across M for both game families."""
    out = {}
    t0 = time.time()
    for family in ("quadratic", "ev"):
        rows = []
        for M in SWEEP_M:
            if family == "quadratic":
                # The single-timescale step size shrinks with the coupling
                # norm, so the iteration count grows with M.
                cfg = SolverConfig(tol=1e-5, max_iter=300_000)
                game = build_quadratic_game(M, n=24, q=0.1, seed=0)
                res_n = asymmetric_projection(game, NASH, cfg)
                res_w = asymmetric_projection(game, WARDROP, cfg)
            else:
                # The EV mapping is only plainly monotone, so extragradient
                # converges sublinearly; 1e-4 keeps the sweep inside the
                # budget while staying far below the measured distances.
                cfg = SolverConfig(tol=1e-4)
                game = build_ev_game(generate_ev_params(M, seed=0))
                res_n = extragradient(game, NASH, cfg)
                res_w = extragradient(game, WARDROP, cfg)
            assert res_n.converged and res_w.converged, (family, M)
            Xn, Xw = res_n.x.as_matrix(), res_w.x.as_matrix()
            d_x = float(np.linalg.norm((Xn - Xw).reshape(-1)))
            d_s = float(np.linalg.norm(aggregate_matrix(Xn)
                                       - aggregate_matrix(Xw)))
            constants = estimate_constants(game)
            rows.append({"M": M, "game": game, "res_w": res_w,
                         "d_x": d_x, "d_s": d_s, "constants": constants,
                         "bounds": distance_bounds(constants, M, game.tag)})
        out[family] = rows
    out["elapsed"] = time.time() - t0
    return out


def test_criterion_3_distance_bounds(sweep_results):
    checks = []
    for family in ("quadratic", "ev"):
        rows = sweep_results[family]
        for row in rows:
            checks.append(row["d_x"] <= row["bounds"]["strategy_bound"]
                          + 1e-6)
            for key, val in row["bounds"].items():
                if "sigma" in key:
                    checks.append(row["d_s"] <= val + 1e-6)
        d100 = next(r["d_x"] for r in rows if r["M"] == 100)
        d400 = next(r["d_x"] for r in rows if r["M"] == 400)
        checks.append(d400 <= 0.6 * d100)
    elapsed = sweep_results["elapsed"]
    checks.append(elapsed < 600.0)
    _report(3, all(checks),
            f"distances within bounds, 1/sqrt(M) trend holds,"
            f" sweep took {elapsed:.0f}s")


def test_criterion_4_epsilon_nash(sweep_results):
    worst_slack = np.inf
    ok = True
    for family in ("quadratic", "ev"):
        for row in sweep_results[family]:
            eps = epsilon_nash(row["game"], row["res_w"].x.entries)
            bound = wardrop_epsilon_bound(row["constants"],
                                          row["M"])["generic"]
            ok = ok and (eps <= bound + 1e-6)
            worst_slack = min(worst_slack, bound - eps)
    _report(4, ok, f"epsilon-Nash of every Wardrop solution within"
                   f" 2*R*L2/M (worst slack {worst_slack:.2e})")


def test_criterion_5_ev_coupling():
    t0 = time.time()
    params = generate_ev_params(100, seed=0)
    game = build_ev_game(params)
    res = extragradient(game, NASH, SolverConfig(tol=1e-4))
    elapsed = time.time() - t0
    sigma = res.aggregate()
    cap_ok = bool(np.all(sigma <= 0.55 + 1e-4))
    active = res.lam > 1e-6
    compl_ok = bool(np.all(sigma[active] >= 0.55 - 1e-3))
    unique = ev_dual_uniqueness(res.x.as_matrix(), params, res.lam)
    ok = (res.converged and cap_ok and compl_ok and unique["unique"]
          and unique["witness_agent"] is not None and elapsed < 120.0)
    _report(5, ok,
            f"cap respected, duals active only on tight slots"
            f" ({active.sum()} of {game.n}), dual-uniqueness witness"
            f" agent {unique['witness_agent']}, {elapsed:.0f}s")


def test_criterion_6_cross_algorithm_agreement():
    t0 = time.time()
    game = build_quadratic_game(100, n=24, q=0.1, seed=0)
    cfg = SolverConfig(tol=1e-6)
    res_a = two_level_wardrop(game, cfg)
    res_b = asymmetric_projection(game, WARDROP, cfg)
    res_c = extragradient(game, WARDROP, cfg)
    elapsed = time.time() - t0
    d_ab = float(np.max(np.abs(res_a.x.entries - res_b.x.entries)))
    d_ac = float(np.max(np.abs(res_a.x.entries - res_c.x.entries)))
    ok = (res_a.converged and res_b.converged and res_c.converged
          and d_ab <= 1e-3 and d_ac <= 1e-3
          and res_b.primal_updates == res_b.dual_updates
          and elapsed < 300.0)
    _report(6, ok, f"pairwise max deviations {d_ab:.2e} / {d_ac:.2e},"
                   f" single-timescale updates balanced, {elapsed:.0f}s")


def test_criterion_7_brute_force_oracle():
    # Two tracking agents with a binding average cap.
    cost = QuadraticCost(Q=np.eye(1), C=np.eye(1),
                         c=np.array([[-2.0], [-2.0]]))
    game = AggregativeGame(
        M=2, n=1, cost=cost,
        individual=(Box([0.0], [2.0]), Box([0.0], [2.0])),
        coupling=CouplingConstraint.per_component_cap([0.5], 2))
    res = asymmetric_projection(game, NASH, SolverConfig(tol=1e-6))

    # The Nash mapping here is affine with a symmetric matrix, so the VI
    # solution minimizes the corresponding quadratic potential over the
    # feasible grid.
    H = np.array([[2.0, 0.5], [0.5, 2.0]])
    c = np.array([-2.0, -2.0])
    axis = np.arange(0.0, 2.0 + 1e-12, 1e-3)
    X1, X2 = np.meshgrid(axis, axis, indexing="ij")
    mask = (X1 + X2) / 2.0 <= 0.5 + 1e-12
    pts = np.stack([X1[mask], X2[mask]], axis=1)
    potential = 0.5 * np.einsum("ij,jk,ik->i", pts, H, pts) + pts @ c
    x_star = pts[int(np.argmin(potential))]
    F = H @ x_star + c
    vi_min = float(np.min((pts - x_star) @ F))
    d_oracle = float(np.max(np.abs(res.x.entries - x_star)))

    single = AggregativeGame(
        M=1, n=1,
        cost=QuadraticCost(Q=np.eye(1), C=np.zeros((1, 1)),
                           c=np.array([[-2.0]])),
        individual=(Box([0.0], [3.0]),),
        coupling=CouplingConstraint.per_component_cap([1.0], 1))
    res_s = asymmetric_projection(single, NASH, SolverConfig(tol=1e-6))
    kkt_ok = (abs(res_s.x.entries[0] - 1.0) <= 1e-4
              and abs(res_s.lam[0] - 1.0) <= 1e-4)

    ok = (res.converged and d_oracle <= 2e-3 and vi_min >= -1e-9
          and kkt_ok)
    _report(7, ok, f"grid oracle at {x_star}, solver deviation"
                   f" {d_oracle:.2e}, VI inequality min {vi_min:.1e},"
                   f" single-agent pair (1, 1) recovered")


def test_criterion_8_eigenvalue_suite():
    ok = True
    for M in range(1, 13):
        out = outer_sum_eigenvalue_check(M, n_random=10_000, seed=0)
        ok = ok and out["pass"]
    eq = outer_sum_eigenvalue_check(4, n_random=0)
    ok = ok and abs(eq["min_found"] - eq["bound"]) <= 1e-9
    _report(8, ok, "lambda_min >= -M/4 for M in 1..12 (vertices + 1e4"
                   " samples), equality witnessed at M=4")


def test_criterion_9_projection_suite():
    rng = np.random.default_rng(0)
    two_node_B = np.array([[-1.0, -1.0], [1.0, 1.0]])
    flow = FlowPolytope(two_node_B, np.array([-1.0, 1.0]))
    worst = {"idem": 0.0, "nonexp": 0.0, "var": -np.inf}
    count = 0
    while count < 1000:
        n = 4
        lo = rng.uniform(-1.0, 0.0, size=n)
        hi = lo + rng.uniform(0.5, 2.0, size=n)
        theta = float(lo.sum() + rng.uniform(0.2, 0.8) * (hi - lo).sum())
        box = Box(lo, hi)
        bb = BoxBudget(lo, hi, theta)
        for cs, dim in ((box, n), (bb, n), (flow, 2)):
            y1 = rng.uniform(-3.0, 3.0, size=dim)
            y2 = rng.uniform(-3.0, 3.0, size=dim)
            p1 = project_individual(cs, y1)
            p2 = project_individual(cs, y2)
            worst["idem"] = max(worst["idem"], float(np.max(np.abs(
                project_individual(cs, p1) - p1))))
            worst["nonexp"] = max(worst["nonexp"], float(
                np.linalg.norm(p1 - p2) - np.linalg.norm(y1 - y2)))
            if cs is flow:
                t = rng.uniform()
                x = np.array([t, 1.0 - t])
            elif cs is box:
                x = rng.uniform(lo, hi)
            else:
                x = project_individual(bb, rng.uniform(lo - 1.0, hi + 1.0))
            worst["var"] = max(worst["var"], float((y1 - p1) @ (x - p1)))
            count += 1
    budget_worst = 0.0
    for _ in range(50):
        n = 5
        lo = np.zeros(n)
        hi = rng.uniform(0.5, 2.0, size=n)
        theta = rng.uniform(0.2, 0.8) * float(hi.sum())
        y = rng.uniform(-1.0, 2.5, size=n)
        direct = project_box_budget(y, lo, hi, theta)
        via = dykstra(y, [
            lambda v, lo=lo, hi=hi: np.clip(v, lo, hi),
            lambda v, th=theta, n=n: project_halfspace(v, -np.ones(n), -th),
        ])
        budget_worst = max(budget_worst, float(np.max(np.abs(direct - via))))
    ok = (worst["idem"] <= 1e-7 and worst["nonexp"] <= 1e-7
          and worst["var"] <= 1e-7 and budget_worst <= 1e-6)
    _report(9, ok,
            f"1000+ instances: idempotence {worst['idem']:.1e},"
            f" non-expansiveness {worst['nonexp']:.1e}, variational"
            f" {worst['var']:.1e}, budget-vs-Dykstra {budget_worst:.1e}")


def test_criterion_10_operator_suite():
    t0 = time.time()
    ok = True
    worst_fd = 0.0
    games = [build_quadratic_game(5, n=6, seed=0),
             build_ev_game(generate_ev_params(4, seed=0, n=6))]
    rng = np.random.default_rng(1)
    for game in games:
        sampler = default_sampler(game)
        for flavor in (NASH, WARDROP):
            op = build_operator(game, flavor)
            X = sampler(rng)
            J = op.jacobian(X.reshape(-1))
            J_fd = op._fd_jacobian(X)
            rel = float(np.max(np.abs(J - J_fd))
                        / (1.0 + np.max(np.abs(J))))
            worst_fd = max(worst_fd, rel)
            ok = ok and rel <= 1e-4
        for _ in range(100):
            X = sampler(rng)
            gap, bound = operator_gap(game, X.reshape(-1))
            ok = ok and gap <= bound + 1e-9
    affine = AggregativeGame(
        M=3, n=2,
        cost=QuadraticCost(Q=np.eye(2), C=np.zeros((2, 2)),
                           c=np.zeros((3, 2))),
        individual=tuple(Box(np.zeros(2), np.ones(2)) for _ in range(3)),
        coupling=CouplingConstraint.per_component_cap(np.ones(2), 3))
    rep = monotonicity_analysis(build_operator(affine, NASH))
    ok = ok and rep.exact and abs(rep.alpha - 1.0) <= 1e-12
    elapsed = time.time() - t0
    ok = ok and elapsed < 60.0
    _report(10, ok,
            f"Jacobians match finite differences (worst rel {worst_fd:.1e}),"
            f" operator gap within L2/sqrt(M) on 100 points per game,"
            f" affine alpha exact, {elapsed:.0f}s")


def test_qualitative_cap_rerouting():
    t0 = time.time()
    M = 30
    results = {}
    for caps, label in ((None, "uncapped"),
                        (np.array([0.03, 1.0, 1.0, 1.0]), "capped")):
        net = build_network([0, 1], TWO_ROUTE_EDGES, f=0.15, h=2.0, K=caps)
        game = build_route_choice_game(net, od_pairs=[(0, 1)] * M, M=M,
                                       seed=0)
        res = two_level_wardrop(game, SolverConfig(tol=1e-5,
                                                   max_iter=20_000))
        assert res.converged, label
        results[label] = res.aggregate()
    elapsed = time.time() - t0
    uncapped, capped = results["uncapped"], results["capped"]
    ok = (capped[0] <= 0.03 + 1e-4 and capped[2] > uncapped[2] + 1e-6)
    _report("QUALITATIVE", ok,
            f"cap pushes loaded-edge flow {uncapped[0]:.3f} -> "
            f"{capped[0]:.3f} and reroutes the alternative"
            f" {uncapped[2]:.3f} -> {capped[2]:.3f}, {elapsed:.0f}s")
