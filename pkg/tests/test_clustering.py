import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohortsim.clustering import (
    ClusterState,
    PartitionConfig,
    RewardLedger,
    assign_round,
    estimate_reduction,
    exploit_reward,
    explore_reward,
    init_prototypes,
    partition_criteria,
    similarity_correlation,
    spawn_rewards,
    update_reward,
)
from cohortsim.cohorttree import CohortId, CohortNode, CohortTree

from conftest import make_client, make_population


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def two_group_deltas(n_per=4, dim=6, spread=0.05, seed=0):
    """Two tight antipodal direction groups; ids 0..n-1 then n..2n-1."""
    rng = np.random.default_rng(seed)
    base = unit(rng.normal(size=dim))
    deltas = {}
    for i in range(n_per):
        deltas[i] = base + rng.normal(size=dim) * spread
        deltas[n_per + i] = -base + rng.normal(size=dim) * spread
    return deltas


def bruteforce_two_clusters(deltas):
    """Exhaustive best 2-partition by within-cluster squared cost."""
    ids = sorted(deltas)
    x = {i: unit(deltas[i]) for i in ids}
    best, best_cost = None, np.inf
    for size in range(1, len(ids)):
        for group in itertools.combinations(ids, size):
            a = [x[i] for i in group]
            b = [x[i] for i in ids if i not in group]
            cost = 0.0
            for side in (a, b):
                mean = np.mean(side, axis=0)
                cost += sum(float(np.sum((v - mean) ** 2)) for v in side)
            if cost < best_cost:
                best_cost, best = cost, set(group)
    return best


class TestInitPrototypes:
    def test_antipodal_groups_separate_exactly(self):
        deltas = two_group_deltas(n_per=3)
        state = ClusterState(k=2)
        init_prototypes(state, deltas, rng=0)
        assert state.initialized
        oracle_side = bruteforce_two_clusters(deltas)
        got_side = {i for i, l in state.persisted_labels.items() if l == state.persisted_labels[min(oracle_side)]}
        assert got_side == oracle_side or (set(deltas) - got_side) == oracle_side

    def test_identical_gradients_collapse_to_one_cluster(self):
        deltas = {i: np.ones(4) for i in range(5)}
        state = ClusterState(k=2)
        init_prototypes(state, deltas, rng=1)
        labels = set(state.persisted_labels.values())
        assert len(labels) == 1

    def test_deterministic_given_rng(self):
        deltas = two_group_deltas(seed=3)
        a, b = ClusterState(k=2), ClusterState(k=2)
        init_prototypes(a, deltas, rng=np.random.default_rng(42))
        init_prototypes(b, deltas, rng=np.random.default_rng(42))
        assert a.persisted_labels == b.persisted_labels
        assert np.array_equal(a.round_centroids, b.round_centroids)

    def test_defers_below_k_participants(self):
        state = ClusterState(k=4)
        init_prototypes(state, {0: np.ones(3), 1: -np.ones(3)}, rng=0)
        assert not state.initialized
        assert state.persisted_labels == {}


def offline_lloyd(x, k, seed=0, iters=200):
    """Test-local K-means oracle, independent of the package implementation."""
    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(len(x), size=k, replace=False)]
    labels = np.zeros(len(x), dtype=int)
    for _ in range(iters):
        d = ((x[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        new_labels = d.argmin(axis=1)
        for j in range(k):
            if np.any(new_labels == j):
                centroids[j] = x[new_labels == j].mean(axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels


def agreement_after_relabel(a, b, k):
    best = 0.0
    for perm in itertools.permutations(range(k)):
        mapped = [perm[v] for v in a]
        best = max(best, float(np.mean([x == y for x, y in zip(mapped, b)])))
    return best


class TestAssignRound:
    def test_exact_centroid_match(self):
        state = ClusterState(k=2)
        deltas = two_group_deltas(n_per=3, spread=0.0)
        init_prototypes(state, deltas, rng=0)
        base = unit(deltas[0])
        probe = {**deltas, 99: base.copy()}
        labels = assign_round(state, probe)
        assert labels[99] == labels[0]

    def test_stationary_stream_matches_offline_oracle(self):
        rng = np.random.default_rng(7)
        dirs = [unit(rng.normal(size=8)) for _ in range(3)]
        deltas = {}
        for i in range(30):
            deltas[i] = dirs[i % 3] * rng.uniform(0.5, 2.0) + rng.normal(size=8) * 0.05
        state = ClusterState(k=3)
        init_prototypes(state, deltas, rng=1)
        for _ in range(3):
            online = assign_round(state, deltas)
        ids = sorted(deltas)
        x = np.stack([unit(deltas[i]) for i in ids])
        offline = offline_lloyd(x, 3, seed=2)
        got = [online[i] for i in ids]
        assert agreement_after_relabel(got, list(offline), 3) >= 0.95

    def test_new_client_joins_nearest_group(self):
        # hand-built: groups along +e1 and +e2; new client near +e1 mean
        deltas = {
            0: np.array([1.0, 0.1, 0.0]),
            1: np.array([1.0, -0.1, 0.0]),
            2: np.array([0.1, 1.0, 0.0]),
            3: np.array([-0.1, 1.0, 0.0]),
        }
        state = ClusterState(k=2)
        init_prototypes(state, deltas, rng=0)
        labels = assign_round(state, {**deltas, 9: np.array([0.9, 0.05, 0.0])})
        assert labels[9] == labels[0] == labels[1]

    def test_labels_always_in_range_and_participants_only(self):
        deltas = two_group_deltas(n_per=5, seed=9)
        state = ClusterState(k=2)
        init_prototypes(state, deltas, rng=0)
        subset = {i: deltas[i] for i in list(deltas)[:4]}
        labels = assign_round(state, subset)
        assert set(labels) == set(subset)
        assert all(0 <= l < 2 for l in labels.values())
        assert set(state.persisted_labels) == set(deltas)

    def test_vacated_cluster_reseeded_at_farthest(self):
        state = ClusterState(k=2)
        group = two_group_deltas(n_per=2, spread=0.0, seed=4)
        init_prototypes(state, group, rng=0)
        # next round only one side returns, plus one distant newcomer
        side = {i: group[i] for i in [0, 1]}
        far = unit(np.array([0, 0, 0, 0, 1.0, 0]))
        labels = assign_round(state, {**side, 50: far})
        assert labels[50] != labels[0]

    def test_requires_initialization(self):
        with pytest.raises(ValueError):
            assign_round(ClusterState(k=2), {0: np.ones(3)})


class TestExploitReward:
    def test_center_participant_gets_one_and_boundary_zero(self):
        # known member defines the center; the other sits exactly at T
        deltas = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0])}
        rewards = exploit_reward(deltas, known_members={0})
        assert rewards[0] == pytest.approx(1.0, abs=1e-12)
        assert rewards[1] == pytest.approx(0.0, abs=1e-12)

    def test_matches_bruteforce_recompute(self):
        rng = np.random.default_rng(11)
        deltas = {i: rng.normal(size=5) for i in range(5)}
        known = {1, 3}
        got = exploit_reward(deltas, known)
        # independent oracle: naive recomputation
        normed = {i: unit(v) for i, v in deltas.items()}
        center = (normed[1] + normed[3]) / 2
        dist = {i: float(np.linalg.norm(normed[i] - center)) for i in deltas}
        values = np.array([dist[i] for i in sorted(deltas)])
        t = values.mean() + values.std()
        for i in deltas:
            assert got[i] == pytest.approx(1.0 - dist[i] / t, rel=1e-12)

    def test_all_identical_perfect_fit(self):
        deltas = {i: np.array([2.0, 0.0]) for i in range(4)}
        rewards = exploit_reward(deltas, known_members=set(deltas))
        assert all(r == 1.0 for r in rewards.values())

    def test_fallback_when_no_known_member_present(self):
        deltas = {0: np.array([1.0, 0.0]), 1: np.array([1.0, 0.1])}
        with_known = exploit_reward(deltas, known_members=set(deltas))
        fallback = exploit_reward(deltas, known_members={77})
        assert with_known == fallback

    def test_outlier_sign_property(self):
        rng = np.random.default_rng(12)
        base = unit(rng.normal(size=6))
        deltas = {i: base + rng.normal(size=6) * 0.05 for i in range(10)}
        deltas[99] = -base  # clear outlier
        rewards = exploit_reward(deltas, known_members=set(range(10)))
        assert rewards[99] < 0.0
        normed = {i: unit(v) for i, v in deltas.items()}
        center = np.mean([normed[i] for i in range(10)], axis=0)
        d = np.array([np.linalg.norm(normed[i] - center) for i in sorted(deltas)])
        t = d.mean() + d.std()
        for idx, i in enumerate(sorted(deltas)):
            if d[idx] > t:
                assert rewards[i] < 0.0
            elif d[idx] < t:
                assert rewards[i] > 0.0


class TestUpdateReward:
    def test_paper_default_first_update(self):
        ledger = RewardLedger(gamma=0.2)
        update_reward(ledger, 1, "c", 1.0)
        assert ledger.get(1, "c") == pytest.approx(0.2, abs=1e-15)

    def test_fixed_point(self):
        ledger = RewardLedger(gamma=0.2)
        ledger.rewards[(1, "c")] = 0.37
        update_reward(ledger, 1, "c", 0.37)
        assert ledger.get(1, "c") == pytest.approx(0.37, abs=1e-15)

    def test_geometric_approach_closed_form(self):
        ledger = RewardLedger(gamma=0.2)
        for t in range(1, 40):
            update_reward(ledger, 0, "c", 1.0)
            assert ledger.get(0, "c") == pytest.approx(1.0 - 0.8**t, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(
        st.floats(-5, 5, allow_nan=False),
        st.floats(-5, 5, allow_nan=False),
        st.floats(0.05, 1.0, allow_nan=False),
    )
    def test_contraction(self, r_old, delta, gamma):
        ledger = RewardLedger(gamma=gamma)
        ledger.rewards[(0, "c")] = r_old
        update_reward(ledger, 0, "c", delta)
        lhs = abs(ledger.get(0, "c") - delta)
        rhs = (1 - gamma) * abs(r_old - delta)
        assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            update_reward(RewardLedger(), 0, "c", float("nan"))


def build_fig_tree() -> CohortTree:
    """Tree with leaves 0.0.0, 0.0.1 and 0.1 (root and 0.0 internal)."""
    tree = CohortTree()
    tree.root.status = "internal"
    tree.root.children = [CohortId((0,)), CohortId((1,))]
    n00 = CohortNode(id=CohortId((0,)), status="internal",
                     children=[CohortId((0, 0)), CohortId((0, 1))])
    tree.nodes[n00.id] = n00
    for pid in [(1,), (0, 0), (0, 1)]:
        tree.nodes[CohortId(pid)] = CohortNode(id=CohortId(pid))
    return tree


class TestExploreReward:
    def test_hierarchy_example_exact(self):
        tree = build_fig_tree()
        ledger = RewardLedger()
        explore_reward(tree, ledger, 0, CohortId((0, 1)), -3.0)
        assert ledger.get(0, CohortId((0, 0))) == -1.0  # distance 2
        assert ledger.get(0, CohortId((1,))) == -0.75  # distance 3
        # farther cohort ends up ranked higher for a negative reward
        assert ledger.get(0, CohortId((1,))) > ledger.get(0, CohortId((0, 0)))

    def test_zero_delta_no_change(self):
        tree = build_fig_tree()
        ledger = RewardLedger()
        explore_reward(tree, ledger, 0, CohortId((0, 1)), 0.0)
        assert all(v == 0.0 for v in ledger.rewards.values())

    def test_equidistant_equal_increments(self):
        tree = build_fig_tree()
        ledger = RewardLedger()
        explore_reward(tree, ledger, 0, CohortId((1,)), 2.0)
        assert ledger.get(0, CohortId((0, 0))) == ledger.get(0, CohortId((0, 1)))

    def test_monotone_in_distance(self):
        tree = build_fig_tree()
        pos = RewardLedger()
        explore_reward(tree, pos, 0, CohortId((0, 1)), 3.0)
        assert pos.get(0, CohortId((0, 0))) > pos.get(0, CohortId((1,))) > 0

    def test_explored_cohort_untouched(self):
        tree = build_fig_tree()
        ledger = RewardLedger()
        explore_reward(tree, ledger, 0, CohortId((0, 1)), 1.0)
        assert (0, CohortId((0, 1))) not in ledger.rewards


class TestSpawnRewards:
    def test_label_bonus(self):
        ledger = RewardLedger()
        ledger.rewards[(5, "p")] = 0.4
        spawn_rewards(ledger, "p", ["c0", "c1"], {5: 1})
        assert ledger.get(5, "c0") == pytest.approx(0.4)
        assert ledger.get(5, "c1") == pytest.approx(0.5)

    def test_unlabeled_inherits_unchanged(self):
        ledger = RewardLedger()
        ledger.rewards[(2, "p")] = 0.3
        spawn_rewards(ledger, "p", ["c0", "c1"], {})
        assert ledger.get(2, "c0") == ledger.get(2, "c1") == pytest.approx(0.3)

    def test_no_parent_entry_no_children(self):
        ledger = RewardLedger()
        ledger.rewards[(2, "other")] = 0.9
        spawn_rewards(ledger, "p", ["c0", "c1"], {2: 0})
        assert (2, "c0") not in ledger.rewards


class TestEstimateReduction:
    def test_two_tight_antipodal_groups(self):
        deltas = two_group_deltas(n_per=10, spread=0.02, seed=5)
        state = ClusterState(k=2)
        init_prototypes(state, deltas, rng=0)
        assign_round(state, deltas)
        rho = estimate_reduction(state, deltas)
        assert rho < 0.2

    def test_isotropic_gradients_near_one(self):
        rng = np.random.default_rng(6)
        deltas = {i: rng.normal(size=64) for i in range(10_000)}
        state = ClusterState(k=2)
        init_prototypes(state, deltas, rng=1)
        rho = estimate_reduction(state, deltas)
        assert rho > 0.8

    def test_identical_gradients_defined_as_one(self):
        deltas = {i: np.ones(5) for i in range(6)}
        state = ClusterState(k=2)
        init_prototypes(state, deltas, rng=0)
        rho = estimate_reduction(state, deltas)
        assert rho == 1.0

    def test_smoothing_over_history(self):
        deltas = two_group_deltas(n_per=6, spread=0.02, seed=8)
        state = ClusterState(k=2)
        init_prototypes(state, deltas, rng=0)
        values = [estimate_reduction(state, deltas, round_index=r) for r in range(6)]
        assert len(state.dispersion_history) == 6
        raw = [i / o for _, o, i in state.dispersion_history[-5:]]
        assert values[-1] == pytest.approx(np.mean(raw))


def stable_state(k=2, rho=0.5):
    """State with injected history: stable labels, prescribed ratio."""
    state = ClusterState(k=k)
    state.initialized = True
    state.churn_history = [0.0, 0.1, 0.05]
    state.dispersion_history = [(r, 1.0, rho) for r in range(5)]
    return state


class TestPartitionCriteria:
    CFG = PartitionConfig(
        alpha=1.0,
        min_participants_per_cohort=10,
        clustering_start_round=10,
        partition_window=(20, 80),
        max_tree_depth=3,
    )

    def call(self, state, resource=200, rnd=40, depth=0, root=200.0, g0=1.0, cfg=None):
        return partition_criteria(
            state, cfg or self.CFG, resource, rnd, depth, root, g0
        )

    def test_high_rho_blocks_split(self):
        # 0.9 > 1/sqrt(2) ~ 0.707
        decision = self.call(stable_state(rho=0.9))
        assert not decision.split
        assert not decision.clauses["reduction"]

    def test_all_clauses_pass(self):
        decision = self.call(stable_state(rho=0.5), resource=200)
        assert decision.split and decision.arity == 2

    def test_resource_below_floor_blocks_regardless_of_rho(self):
        # alpha * sqrt(P0) / G0 = sqrt(200)/0.1 ~ 141 per child
        decision = self.call(stable_state(rho=0.01), resource=200, g0=0.1)
        assert not decision.split
        assert not decision.clauses["resource"]

    def test_depth_cap(self):
        decision = self.call(stable_state(rho=0.5), depth=3)
        assert not decision.split and not decision.clauses["depth"]

    def test_window_gates(self):
        assert not self.call(stable_state(rho=0.5), rnd=10).split  # before window
        assert not self.call(stable_state(rho=0.5), rnd=90).split  # after window

    def test_unstable_labels_block(self):
        state = stable_state(rho=0.5)
        state.churn_history = [0.0, 0.5, 0.0]
        assert not self.call(state).split

    @settings(max_examples=40, deadline=None)
    @given(st.integers(10, 400), st.integers(0, 300))
    def test_monotone_in_resource(self, resource, extra):
        state = stable_state(rho=0.5)
        low = self.call(state, resource=resource)
        high = self.call(state, resource=resource + extra)
        assert not (low.split and not high.split)

    def test_exhaustive_truth_table(self):
        for window_ok, rho_ok, res_ok, depth_ok in itertools.product([0, 1], repeat=4):
            state = stable_state(rho=0.5 if rho_ok else 0.9)
            if not window_ok:
                state.churn_history = [0.9, 0.9, 0.9]
            decision = self.call(
                state,
                resource=200 if res_ok else 10,
                depth=0 if depth_ok else 3,
            )
            assert decision.split == bool(window_ok and rho_ok and res_ok and depth_ok)


class TestSimilarityCorrelation:
    def test_perfect_monotone_agreement(self):
        # Two distinct pairwise values only, so Pearson r is exactly 1.
        deltas = {
            0: np.array([1.0, 0.0]),
            1: np.array([0.0, 1.0]),
            2: np.array([0.5, 0.5]),
        }
        clients = [
            make_client(0, [1.0, 0.0]),
            make_client(1, [0.0, 1.0]),
            make_client(2, [0.5, 0.5]),
        ]
        for c, h in zip(clients, [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]):
            c.label_histogram = np.array(h)
        pop = make_population(clients, num_classes=2)
        assert similarity_correlation(deltas, pop) == pytest.approx(1.0, abs=1e-9)

    def test_independent_near_zero(self):
        rng = np.random.default_rng(13)
        clients = []
        deltas = {}
        for i in range(15):  # 105 pairs
            h = rng.dirichlet(np.ones(4))
            c = make_client(i, h)
            c.label_histogram = h
            clients.append(c)
            deltas[i] = rng.normal(size=12)
        pop = make_population(clients, num_classes=4)
        assert abs(similarity_correlation(deltas, pop)) < 0.3

    def test_anticorrelated_negative(self):
        # similar histograms get orthogonal gradients and vice versa
        clients = [
            make_client(0, [1.0, 0.0]),
            make_client(1, [1.0, 0.0]),
            make_client(2, [0.0, 1.0]),
        ]
        for c, h in zip(clients, [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]):
            c.label_histogram = np.array(h)
        deltas = {
            0: np.array([1.0, 0.0]),
            1: np.array([0.0, 1.0]),
            2: np.array([0.9, 0.45]),
        }
        pop = make_population(clients, num_classes=2)
        assert similarity_correlation(deltas, pop) < 0.0

    def test_zero_variance_defined_zero(self):
        clients = [make_client(i, [0.5, 0.5]) for i in range(3)]
        pop = make_population(clients, num_classes=2)
        deltas = {i: np.array([1.0, 0.0]) for i in range(3)}
        assert similarity_correlation(deltas, pop) == 0.0

    def test_too_few_participants(self):
        clients = [make_client(i, [0.5, 0.5]) for i in range(2)]
        pop = make_population(clients, num_classes=2)
        with pytest.raises(ValueError):
            similarity_correlation({0: np.ones(2), 1: np.ones(2)}, pop)


class TestNormalizationInvariance:
    def test_scaling_leaves_everything_unchanged(self):
        deltas = two_group_deltas(n_per=5, seed=20)
        scaled = {i: 37.5 * v for i, v in deltas.items()}

        s1, s2 = ClusterState(k=2), ClusterState(k=2)
        init_prototypes(s1, deltas, rng=5)
        init_prototypes(s2, scaled, rng=5)
        assert s1.persisted_labels == s2.persisted_labels

        l1 = assign_round(s1, deltas)
        l2 = assign_round(s2, scaled)
        assert l1 == l2

        r1 = exploit_reward(deltas, {0, 1})
        r2 = exploit_reward(scaled, {0, 1})
        for i in r1:
            assert np.sign(r1[i]) == np.sign(r2[i])
            assert r1[i] == pytest.approx(r2[i], rel=1e-9)

        rho1 = estimate_reduction(s1, deltas)
        rho2 = estimate_reduction(s2, scaled)
        assert rho1 == pytest.approx(rho2, rel=1e-9)
