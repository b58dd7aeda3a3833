from __future__ import annotations

import json

import pytest

from caltrace.conflicts import (
    ChainTopology,
    ConflictGraph,
    Fixture,
    InvalidProbability,
    InvalidTopology,
    extract_conflict_sets,
    facility_name,
    gen_chain,
    gen_conflict_sized_universe,
    gen_er_graph,
    maximal_cliques,
)
from caltrace.labels import IntegrityLadder, validate_label

from oracles import brute_force_maximal_cliques, brute_force_universe


class TestErGraph:
    def test_p_zero(self):
        assert gen_er_graph(5, 0.0, 42).edges == frozenset()

    def test_p_one(self):
        assert gen_er_graph(3, 1.0, 7).edges == {(0, 1), (0, 2), (1, 2)}

    def test_deterministic(self):
        assert gen_er_graph(30, 0.3, 5) == gen_er_graph(30, 0.3, 5)
        assert gen_er_graph(30, 0.3, 5).edges != gen_er_graph(30, 0.3, 6).edges

    @pytest.mark.parametrize("p", [-0.1, 1.5])
    def test_invalid_probability(self, p):
        with pytest.raises(InvalidProbability):
            gen_er_graph(3, p, 0)

    def test_mean_edge_count(self):
        # binomial expectation p * n(n-1)/2 = 495
        counts = [len(gen_er_graph(100, 0.1, seed).edges) for seed in range(1000)]
        mean = sum(counts) / len(counts)
        assert abs(mean - 495) <= 0.05 * 495

    def test_no_self_loops(self):
        g = gen_er_graph(20, 0.5, 1)
        assert all(a < b for a, b in g.edges)


class TestCliques:
    def test_triangle(self):
        u = extract_conflict_sets(gen_er_graph(3, 1.0, 0))
        assert u.sets == ((facility_name(0), facility_name(1), facility_name(2)),)

    def test_path(self):
        g = ConflictGraph(3, frozenset({(0, 1), (1, 2)}), 0.0, None)
        expected = brute_force_universe(3, g.edges)
        assert expected == [("F000", "F001"), ("F001", "F002")]
        assert list(extract_conflict_sets(g).sets) == expected
        assert extract_conflict_sets(g).positions_of("F001") == (1, 2)

    def test_empty_graph(self):
        u = extract_conflict_sets(gen_er_graph(4, 0.0, 0))
        assert u.n == 0 and len(u.facilities) == 4

    @pytest.mark.parametrize("seed", range(40))
    def test_matches_brute_force(self, seed):
        n = 3 + seed % 8
        g = gen_er_graph(n, 0.2 + 0.1 * (seed % 6), seed)
        assert maximal_cliques(g) == brute_force_maximal_cliques(n, g.edges)
        assert list(extract_conflict_sets(g).sets) == brute_force_universe(n, g.edges)


class TestConflictSizedUniverse:
    def test_size_one(self):
        u = gen_conflict_sized_universe(1, 0)
        assert u.n == 0 and len(u.facilities) == 1

    def test_size_three(self):
        u = gen_conflict_sized_universe(3, 0)
        assert [len(s) for s in u.sets] == [3]

    def test_sweep(self):
        sizes = []
        for target in range(1, 51):
            u = gen_conflict_sized_universe(target, 11)
            sizes.append(max((len(s) for s in u.sets), default=1))
            assert u == gen_conflict_sized_universe(target, 11)
        assert sizes == list(range(1, 51))


class TestGenChain:
    def test_single_root(self):
        fx = gen_chain(ChainTopology(1, 1), gen_conflict_sized_universe(2, 0), IntegrityLadder(3), 0)
        assert len(fx.reports) == 1 and fx.reports[0].parents == ()
        assert fx.reports[0].label.rank == 3

    def test_binary_tree(self):
        fx = gen_chain(ChainTopology(3, 2), gen_conflict_sized_universe(2, 0), IntegrityLadder(3), 0)
        assert len(fx.reports) == 7 == ChainTopology(3, 2).node_count()
        leaf = next(r for r in fx.reports if r.device_id == fx.leaf)
        assert leaf.label.rank == 1

    def test_fifty_levels(self):
        fx = gen_chain(ChainTopology(50, 1), gen_conflict_sized_universe(4, 0), IntegrityLadder(50), 0)
        store = fx.build_store()
        assert len(fx.reports) == 50
        res = store.trace_verify(fx.leaf, fx.reports[0].issued_at)
        assert res.complete and len(res.visited) == 50

    def test_ranks_clamped(self):
        fx = gen_chain(ChainTopology(6, 1), gen_conflict_sized_universe(4, 0), IntegrityLadder(3), 0)
        ranks = {r.device_id: r.label.rank for r in fx.reports}
        assert [ranks[f"L{lv:03d}-000"] for lv in range(6)] == [1, 2, 3, 3, 3, 3]

    def test_invalid_topology(self):
        with pytest.raises(InvalidTopology):
            ChainTopology(0, 1)
        with pytest.raises(InvalidTopology):
            gen_chain("deep", gen_conflict_sized_universe(2, 0), IntegrityLadder(2), 0)

    @pytest.mark.parametrize("seed", range(10))
    def test_labels_valid_and_deterministic(self, seed):
        u = extract_conflict_sets(gen_er_graph(12, 0.3, seed))
        topo = ChainTopology(5, 1 + seed % 4, 8)
        fx = gen_chain(topo, u, IntegrityLadder(5), seed)
        for r in fx.reports:
            assert validate_label(r.label, u, fx.ladder) is None
        assert fx.to_manifest() == gen_chain(topo, u, IntegrityLadder(5), seed).to_manifest()
        fx.build_store()  # lifecycle rules and acyclicity hold on replay

    def test_manifest_round_trip(self, tmp_path):
        u = extract_conflict_sets(gen_er_graph(10, 0.3, 2))
        fx = gen_chain(ChainTopology(4, 2), u, IntegrityLadder(4), 2)
        manifest = json.loads(json.dumps(fx.to_manifest()))
        assert manifest["prng"] and manifest["seed"] == 2
        again = Fixture.from_manifest(manifest)
        assert again.build_store().export() == fx.build_store().export()
