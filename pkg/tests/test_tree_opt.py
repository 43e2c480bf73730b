import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_force, random_tree_problem
from octfield.geometry import Aabb
from octfield.octree import ROOT, NodeId, OctreeModel, child_ids
from octfield.tree_opt import (
    InfeasibleBudgetError,
    NodeStats,
    Option,
    StaleDecisionError,
    TreeDecision,
    TreeDecisionProblem,
    apply_decisions,
    assemble,
    coerce_partial_merges,
    compute_alpha,
    compute_beta,
    decision_to_json,
    error_shares,
    objective,
    octant_means,
    solve,
)

CUBE = Aabb(-np.ones(3), np.ones(3))


def level1_model():
    m = OctreeModel(CUBE, 2)
    m.split(ROOT)
    for n in m.active_leaves():
        m.attach(n, object())
    return m


def flat_stats(nodes, alpha=(0, 0, 0), beta=(0, 0, 0), opacity=0.5):
    return {n: NodeStats(alpha, beta, opacity) for n in nodes}


class TestStatistics:
    def test_vacuum_alpha(self):
        a = compute_alpha(np.zeros(64), np.arange(64) % 8, 0.1)
        np.testing.assert_array_equal(a, [0, 0, 0])

    def test_opaque_alpha_saturates(self):
        a = compute_alpha(np.full(64, 1e4), np.arange(64) % 8, 0.1)
        assert a[1] == pytest.approx(1.0) and a[2] == pytest.approx(1.0)

    def test_parent_alpha_is_shared_over_children(self):
        assert compute_alpha(np.ones(8), np.arange(8), 0.1, parent_alpha=0.8)[0] == pytest.approx(0.1)

    def test_empty_octants_count_zero(self):
        np.testing.assert_array_equal(octant_means([2.0, 4.0], [0, 0]), [3.0] + [0.0] * 7)

    def test_zero_error_beta(self):
        shares = error_shares(np.random.default_rng(0).random((5, 4)), np.zeros(5))
        np.testing.assert_array_equal(compute_beta(shares.ravel(), np.zeros(20, int)), 0.0)

    def test_single_sample_beta(self):
        shares = error_shares(np.array([[0.3]]), np.array([0.5]))
        assert compute_beta(shares.ravel(), np.array([0]))[1] == pytest.approx(0.5)

    def test_shares_conserve_ray_error(self):
        rng = np.random.default_rng(1)
        err = rng.random(6)
        shares = error_shares(rng.random((6, 9)), err)
        np.testing.assert_allclose(shares.sum(axis=1), err, rtol=1e-12)


class TestSolve:
    def test_all_zero_stats_keep(self):
        m = level1_model()
        p = assemble(m, flat_stats(m.active_leaves()), budget=8)
        for c in p.costs().values():
            assert c == {"merge": 1.0, "keep": 1.0, "split": 1.0}
        d = solve(p)
        assert all(o is Option.KEEP for o in d.choices.values())
        assert d.resources == 64

    def test_coordinated_merge(self):
        m = level1_model()
        p = assemble(m, flat_stats(m.active_leaves(), alpha=(1.0, 0.0, 0.0), opacity=0.5), budget=8)
        d = solve(p)
        assert all(o is Option.MERGE for o in d.choices.values())
        assert d.resources == 8

    def test_split_needs_merge_offset_at_tight_budget(self):
        m = OctreeModel(CUBE, 3)
        m.split(ROOT)
        m.split(NodeId(1, 0))
        for n in m.active_leaves():
            m.attach(n, object())
        leaves = m.active_leaves()  # 7 at level 1, 8 under (1, 0)
        stats = flat_stats(leaves, alpha=(0.0, 0.5, 0.9))
        for n in leaves:
            if n.level == 2:
                stats[n] = NodeStats((0.95, 0.2, 0.2), (0, 0, 0), 0.5)
        d = solve(assemble(m, stats, budget=len(leaves)))
        splits = [n for n, o in d.choices.items() if o is Option.SPLIT]
        merges = [n for n, o in d.choices.items() if o is Option.MERGE]
        assert len(splits) == 1 and len(merges) == 8
        assert d.resources == 8 * len(leaves)

    def test_infeasible(self):
        m = level1_model()
        p = assemble(m, flat_stats(m.active_leaves(), opacity=0.5), budget=0)
        with pytest.raises(InfeasibleBudgetError):
            solve(p)

    def test_deactivation_is_free(self):
        m = level1_model()
        stats = flat_stats(m.active_leaves(), opacity=0.001)
        d = solve(assemble(m, stats, budget=0))
        assert d.count(Option.DEACTIVATE) == 8 and d.resources == 0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_brute_force(self, seed):
        _, p = random_tree_problem(np.random.default_rng(seed))
        oracle = brute_force(p)
        if oracle is None:
            with pytest.raises(InfeasibleBudgetError):
                solve(p)
            return
        d = solve(p)
        assert d.objective == pytest.approx(oracle[0], abs=1e-9)
        assert objective(p, d.choices) == (pytest.approx(d.objective, abs=1e-12), d.resources)
        assert d.resources <= 8 * p.budget

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_monotone_deactivation(self, seed):
        rng = np.random.default_rng(seed)
        m, p = random_tree_problem(rng)
        stats = dict(p.nodes)
        counts = []
        for thr in (0.0, 0.005, 0.01, 0.3, 0.7, 1.1):
            q = assemble(m, stats, 10**4, p.lam, thr)
            counts.append(solve(q).count(Option.DEACTIVATE))
        assert counts == sorted(counts)

    def test_argmin_stable_under_beta_scaling(self):
        m = level1_model()
        stats = flat_stats(m.active_leaves(), alpha=(0.0, 0.2, 0.9), beta=(0.01, 0.02, 0.01), opacity=0.5)
        base = solve(assemble(m, stats, 10**4)).choices
        for k in (0.5, 2.0, 4.0):
            scaled = {n: NodeStats(s.alpha, s.beta * k, s.mean_opacity) for n, s in stats.items()}
            assert solve(assemble(m, scaled, 10**4)).choices == base

    def test_json_report(self):
        m = level1_model()
        p = assemble(m, flat_stats(m.active_leaves()), 8)
        doc = decision_to_json(p, solve(p))
        assert len(doc["nodes"]) == 8 and doc["eighths_used"] == 64


class TestApply:
    def test_empty_decision_noop(self):
        m = level1_model()
        before = dict(m.nodes)
        assert apply_decisions(m, TreeDecision({})) == []
        assert m.nodes == before

    def test_stale_decision(self):
        m = level1_model()
        p = assemble(m, flat_stats(m.active_leaves()), 64)
        d = solve(p)
        m.deactivate(NodeId(1, 3))
        with pytest.raises(StaleDecisionError):
            apply_decisions(m, d)

    def test_order_and_invariants(self):
        m = OctreeModel(CUBE, 3)
        m.split(ROOT)
        m.split(NodeId(1, 7))
        for n in m.active_leaves():
            m.attach(n, object())
        choices = {n: Option.KEEP for n in m.active_leaves()}
        for c in child_ids(NodeId(1, 7)):
            choices[c] = Option.MERGE
        choices[NodeId(1, 0)] = Option.SPLIT
        choices[NodeId(1, 1)] = Option.DEACTIVATE
        log = apply_decisions(m, TreeDecision(choices, tuple(m.active_leaves())))
        assert [e.kind for e in log] == ["deactivate", "merge", "split"]
        assert len(log[1].networks) == 8
        m.check_invariants(require_networks=False)
        assert m.is_leaf(NodeId(1, 7))

    def test_partial_merge_votes_coerced(self):
        m = level1_model()
        p = assemble(m, flat_stats(m.active_leaves()), 64)
        votes = {n: (Option.MERGE if n.index < 3 else Option.KEEP) for n in m.active_leaves()}
        fixed = coerce_partial_merges(p, votes)
        assert all(o is Option.KEEP for o in fixed.values())
        assert objective(p, votes) is None


def test_problem_rejects_missing_stats():
    m = level1_model()
    with pytest.raises(ValueError):
        assemble(m, {}, 8)


def test_problem_costs():
    p = TreeDecisionProblem([(NodeId(1, 0), NodeStats((0.2, 0.4, 0.6), (1.0, 0.5, 0.25), 0.5))], 8, lam=2.0)
    assert p.costs()[NodeId(1, 0)] == pytest.approx({"merge": 2.8, "keep": 1.6, "split": 0.9})
