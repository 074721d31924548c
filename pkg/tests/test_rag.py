from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmptgen.cluster import InvalidWeights
from mmptgen.fragment import parse_fragment, tokenize
from mmptgen.infill import InfillConfig
from mmptgen.mmp import MmptDatabase, MmptRecord
from mmptgen.model import CallableScorer, GenerationConfig, TokenVocabulary, train_reference
from mmptgen.rag import (
    ClusterConditionedScorer,
    EmptyRetrieval,
    InconsistentDimensions,
    RagConfig,
    SteeringInstance,
    allocate_budget,
    rag_generate,
    random_steering_instance,
    verify_steering,
)
from mmptgen.retrieval import build_index
from oracles import exhaustive_infill

TOY_TOKENS = ["[*:1]", "C", "O", "N", "(", ")"]
GROUP_A = ["[*:1]CCCCO", "[*:1]CCCCN"]
GROUP_B = ["[*:1]NN(O)O", "[*:1]NN(O)N"]


def hashed_scorer(tokens, salt: int = 0) -> CallableScorer:
    vocab = TokenVocabulary(tokens)

    def fn(inp, prefix):
        seed = int.from_bytes(hashlib.sha256(repr((salt, inp, prefix)).encode()).digest()[:8], "little")
        w = np.random.default_rng(seed).gamma(0.7, size=vocab.n_outputs) + 1e-3
        return w / w.sum()

    return CallableScorer(vocab, fn)


def star_db(query: str, outputs) -> MmptDatabase:
    return MmptDatabase([MmptRecord(query, y) for y in outputs])


class TestAllocateBudget:
    @pytest.mark.parametrize(
        "weights,total,want",
        [((0.5, 0.3, 0.2), 100, (50, 30, 20)), ((1 / 3,) * 3, 10, (4, 3, 3)), ((0.5, 0.5), 0, (0, 0)), ((1.0,), 7, (7,))],
    )
    def test_examples(self, weights, total, want):
        assert tuple(allocate_budget(weights, total)) == want

    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12).filter(lambda w: sum(w) > 1e-3),
           st.integers(0, 5000))
    def test_largest_remainder(self, w, total):
        p = [x / sum(w) for x in w]
        if abs(sum(p) - 1.0) > 1e-12:
            return
        alloc = allocate_budget(p, total)
        assert sum(alloc) == total
        assert all(abs(n - q * total) < 1 for n, q in zip(alloc, p))

    @pytest.mark.parametrize("weights", [(0.5, 0.6), (-0.1, 1.1), ()])
    def test_invalid(self, weights):
        with pytest.raises(InvalidWeights):
            allocate_budget(weights, 10)


class TestSteering:
    def test_gates_closed(self):
        rng = np.random.default_rng(0)
        inst = random_steering_instance(rng)
        closed = SteeringInstance(inst.base, inst.cluster_dists, np.zeros(len(inst.gates)), inst.weights)
        dev, alpha_bar = verify_steering(closed)
        assert dev == 0.0 and alpha_bar == 0.0

    def test_gates_open_exact(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            inst = random_steering_instance(rng)
            opened = SteeringInstance(inst.base, inst.cluster_dists, np.ones(len(inst.gates)), inst.weights)
            assert verify_steering(opened) == (0.0, 1.0)

    def test_gates_open_uniform(self):
        rng = np.random.default_rng(1)
        dists = rng.dirichlet(np.ones(10), size=4)
        inst = SteeringInstance(rng.dirichlet(np.ones(10)), dists, np.ones(4), np.full(4, 0.25))
        dev, alpha_bar = verify_steering(inst)
        assert alpha_bar == 1.0
        assert dev == 0.0

    def test_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            inst = random_steering_instance(rng, 8, 50)
            dev, alpha_bar = verify_steering(inst)
            assert dev < 1e-12
            assert 0.0 <= alpha_bar <= inst.gates.max() <= 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(InconsistentDimensions):
            SteeringInstance(np.full(3, 1 / 3), np.full((2, 4), 0.25), np.ones(2), np.full(2, 0.5))
        with pytest.raises(InconsistentDimensions):
            SteeringInstance(np.full(3, 1 / 3), np.full((2, 3), 1 / 3), np.ones(3), np.full(2, 0.5))


class TestClusterConditionedScorer:
    def setup_method(self):
        self.base = hashed_scorer(TOY_TOKENS)
        self.members = [parse_fragment(t) for t in GROUP_A]

    def test_gate_zero_is_base(self):
        s = ClusterConditionedScorer(self.base, self.members, gate=0.0)
        for prefix in [(), ("[*:1]",), ("[*:1]", "C", "C")]:
            assert np.array_equal(s.next_distribution(("C",), prefix), self.base.next_distribution(("C",), prefix))

    def test_on_trie_mixture(self):
        s = ClusterConditionedScorer(self.base, self.members, gate=0.4, delta=0.01)
        prefix = tuple(tokenize("[*:1]CCCC"))
        ref = s.cluster_distribution(prefix)
        vocab = self.base.vocab
        assert ref[vocab.id_of("O")] == ref[vocab.id_of("N")] > 0.4
        p = s.next_distribution(("C",), prefix)
        assert np.allclose(p, 0.6 * self.base.next_distribution(("C",), prefix) + 0.4 * ref, atol=0, rtol=0)
        assert abs(p.sum() - 1.0) < 1e-12

    def test_off_trie_is_base(self):
        s = ClusterConditionedScorer(self.base, self.members, gate=0.9)
        prefix = ("O", "O")
        assert s.cluster_distribution(prefix) is None
        assert np.array_equal(s.next_distribution(("C",), prefix), self.base.next_distribution(("C",), prefix))

    def test_rejects_gate(self):
        with pytest.raises(ValueError):
            ClusterConditionedScorer(self.base, self.members, gate=1.5)


class TestRagGenerate:
    def exact_cfg(self, **kw) -> RagConfig:
        return RagConfig(infill=InfillConfig.exhaustive(3), gate=0.0, **kw)

    def test_toy_pipeline_oracle(self):
        query = "[*:1]CC"
        db = star_db(query, GROUP_A + GROUP_B)
        scorer = hashed_scorer(TOY_TOKENS, 5)
        res = rag_generate(scorer, build_index(db), db, parse_fragment(query), self.exact_cfg(per_cluster=3))
        assert res.mode == "rag"
        groups = sorted(sorted(m.canonical for m in t.cluster.members) for t in res.templates)
        assert groups == sorted(sorted(parse_fragment(x).canonical for x in g) for g in (GROUP_A, GROUP_B))
        want: dict[str, float] = {}
        for tpl, n_k in zip(res.templates, res.budgets):
            blanks = [(lo, min(hi, 3)) for lo, hi in (InfillConfig.exhaustive(3).blank_bounds(b) for b in tpl.template.blanks)]
            for canon, lp in exhaustive_infill(scorer, tokenize(query), tpl.template, n_k, blanks):
                want[canon] = max(lp, want.get(canon, -np.inf))
        got = {c.fragment.canonical: c.log_prob for c in res.candidates}
        assert got.keys() == want.keys()
        for k in got:
            assert got[k] == pytest.approx(want[k], abs=1e-12)

    def test_singleton_contains_neighbor_output(self, synthetic_db):
        query = "[*:1]CC"
        db = star_db(query, ["[*:1]C(=O)O"])
        scorer = train_reference(synthetic_db)
        res = rag_generate(scorer, build_index(db), db, parse_fragment(query), RagConfig(per_cluster=5))
        assert not res.templates[0].template.blanks
        assert [c.fragment.canonical for c in res.candidates] == ["[*:1]C(=O)O"]

    def test_zero_weight_cluster(self):
        query = "[*:1]CC"
        db = star_db(query, GROUP_A + GROUP_B)
        cfg = self.exact_cfg(per_cluster=4, weights=(1.0, 0.0))
        res = rag_generate(hashed_scorer(TOY_TOKENS, 1), build_index(db), db, parse_fragment(query), cfg)
        assert tuple(res.budgets) == (8, 0)
        assert res.candidates
        assert {c.cluster_id for c in res.candidates} == {1}

    def test_bounds_and_provenance(self, synthetic_db):
        scorer = train_reference(synthetic_db)
        index = build_index(synthetic_db)
        cfg = RagConfig(k_inputs=50, n_clusters=4, per_cluster=10)
        for s in synthetic_db.inputs()[:8]:
            res = rag_generate(scorer, index, synthetic_db, parse_fragment(s), cfg)
            assert len(res.candidates) <= sum(res.budgets)
            by_id = {t.cluster.id: t for t in res.templates}
            names = [c.fragment.canonical for c in res.candidates]
            assert len(names) == len(set(names))
            for c in res.candidates:
                assert parse_fragment(c.fragment.canonical).canonical == c.fragment.canonical
                assert by_id[c.cluster_id].template.matches(c.tokens)
                assert parse_fragment("".join(c.tokens)).canonical == c.fragment.canonical
                assert c.template == by_id[c.cluster_id].template.to_wire()
            lps = [c.log_prob for c in res.candidates]
            assert lps == sorted(lps, reverse=True)

    def test_empty_retrieval_fallback(self, synthetic_db):
        db = star_db("[*:1]CC", ["[*:1]CO"])
        scorer = train_reference(synthetic_db)
        query = parse_fragment("[*:1]CC[*:2]")
        cfg = RagConfig(fallback=GenerationConfig(beam_width=5))
        res = rag_generate(scorer, build_index(db), db, query, cfg)
        assert res.mode == "fm-fallback"
        assert all(c.cluster_id is None for c in res.candidates)
        with pytest.raises(EmptyRetrieval):
            rag_generate(scorer, build_index(db), db, query, RagConfig(allow_fallback=False))

    def test_jsonl_deterministic(self, synthetic_db):
        scorer = train_reference(synthetic_db)
        index = build_index(synthetic_db)
        q = parse_fragment(synthetic_db.inputs()[2])
        cfg = RagConfig(k_inputs=40, n_clusters=3, per_cluster=8)
        a = rag_generate(scorer, index, synthetic_db, q, cfg).jsonl()
        b = rag_generate(scorer, index, synthetic_db, q, cfg).jsonl()
        assert a == b
        row = json.loads(a.splitlines()[0])
        assert set(row) == {"query", "candidate", "log_prob", "cluster_id", "template", "mode"}

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RagConfig(gate=2.0)
        with pytest.raises(ValueError):
            RagConfig(n_clusters=0)

    def test_gate_changes_scores_not_template(self, synthetic_db):
        scorer = train_reference(synthetic_db)
        index = build_index(synthetic_db)
        q = parse_fragment(synthetic_db.inputs()[7])
        plain = rag_generate(scorer, index, synthetic_db, q, RagConfig(k_inputs=40, per_cluster=8, gate=0.0))
        gated = rag_generate(scorer, index, synthetic_db, q, RagConfig(k_inputs=40, per_cluster=8, gate=0.5))
        assert [t.template for t in plain.templates] == [t.template for t in gated.templates]
        assert {c.cluster_id for c in gated.candidates} <= {t.cluster.id for t in gated.templates}
