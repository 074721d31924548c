from __future__ import annotations

import hashlib
import math
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmptgen.fragment import parse_fragment, tokenize
from mmptgen.infill import (
    Blank,
    DisconnectedKeepSet,
    Fixed,
    InfillConfig,
    InfillStats,
    MaskedTemplate,
    NoValidCompletion,
    NotADistribution,
    branch_limit,
    effective_token_count,
    emissions,
    fragment_matches,
    prompt_generate,
    template_from_substructure,
)
from mmptgen.model import CallableScorer, TokenVocabulary, train_reference
from mmptgen.synthetic import random_fragment
from oracles import exhaustive_infill, sequence_score

TOY_TOKENS = ["C", "O", "N", "(", ")", "=", "[*:1]", "Cl"]


def hashed_scorer(tokens, salt: int = 0) -> CallableScorer:
    vocab = TokenVocabulary(tokens)

    def fn(inp, prefix):
        seed = int.from_bytes(hashlib.sha256(repr((salt, inp, prefix)).encode()).digest()[:8], "little")
        w = np.random.default_rng(seed).gamma(0.5, size=vocab.n_outputs) + 1e-3
        return w / w.sum()

    return CallableScorer(vocab, fn)


class RecordingScorer:
    """Passes distributions through and keeps a copy of each one."""

    def __init__(self, inner):
        self.inner = inner
        self.vocab = inner.vocab
        self.seen: list[np.ndarray] = []

    def next_distribution(self, input, prefix):
        p = self.inner.next_distribution(input, prefix)
        self.seen.append(p)
        return p


def renyi2_count(p) -> float:
    return 2.0 ** (-math.log2(sum(x * x for x in p)))


class TestEffectiveTokenCount:
    def test_uniform_four(self):
        assert effective_token_count([0.25] * 4) == pytest.approx(4.0, abs=1e-9)

    def test_degenerate(self):
        assert effective_token_count([1.0, 0.0, 0.0]) == 1.0

    def test_two_point(self):
        assert abs(effective_token_count([0.8, 0.2]) - renyi2_count([0.8, 0.2])) < 1e-9
        assert abs(effective_token_count([0.8, 0.2]) - 1 / 0.68) < 1e-9

    @pytest.mark.parametrize("p", [[0.5, 0.6], [-0.1, 1.1], [], [float("nan"), 1.0]])
    def test_rejects(self, p):
        with pytest.raises(NotADistribution):
            effective_token_count(p)

    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30).filter(lambda w: sum(w) > 1e-6))
    def test_range_and_oracle(self, w):
        p = np.asarray(w) / sum(w)
        n = effective_token_count(p)
        assert 1.0 - 1e-9 <= n <= len(p) + 1e-9
        assert n == pytest.approx(renyi2_count(p), rel=1e-9)

    @pytest.mark.parametrize("p,limit", [([0.25] * 4, 4), ([1.0, 0.0], 1), ([0.8, 0.2], 2), ([0.5, 0.5], 2)])
    def test_branch_limit(self, p, limit):
        assert branch_limit(np.asarray(p)) == limit
        assert branch_limit(np.asarray(p), cap=1) == 1


class TestTemplates:
    def test_keep_all(self):
        f = parse_fragment("[*:1]CC(=O)N")
        t = template_from_substructure(f, range(len(f.atoms)))
        assert not t.blanks
        assert t.fixed_tokens == list(f.canonical_tokens)

    def test_keep_none(self):
        f = parse_fragment("[*:1]CC(=O)N")
        t = template_from_substructure(f, [])
        assert t.slots == (Blank(1, None, len(f.canonical_tokens)),)

    def test_ethanol_carbons(self):
        f = parse_fragment("CCO")
        keep = [i for i, a in enumerate(f.atoms) if a.element == "C"]
        assert template_from_substructure(f, keep).slots == (Fixed("C"), Fixed("C"), Blank(1, None, 1))

    def test_disconnected(self):
        f = parse_fragment("CCO")
        ends = [i for i in range(3) if f.degree(i) == 1]
        with pytest.raises(DisconnectedKeepSet):
            template_from_substructure(f, ends)

    @given(st.integers(0, 2**32 - 1))
    def test_source_matches_own_template(self, seed):
        r = random.Random(seed)
        f = random_fragment(r, r.randint(2, 12), r.randint(0, 2))
        # grow a connected keep set from a random atom
        keep = {r.randrange(len(f.atoms))}
        for _ in range(r.randint(0, len(f.atoms))):
            frontier = [n for i in keep for n, _ in f.neighbors(i) if n not in keep]
            if frontier:
                keep.add(r.choice(frontier))
        t = template_from_substructure(f, keep)
        assert t.matches(f.canonical_tokens)
        assert fragment_matches(t, f)
        assert sum(b.origin for b in t.blanks) + len(t.fixed_tokens) == len(f.canonical_tokens)

    def test_wire_round_trip(self):
        f = parse_fragment("[*:1]CC(=O)N")
        t = template_from_substructure(f, [i for i, a in enumerate(f.atoms) if a.element == "C"])
        assert MaskedTemplate.from_wire(t.to_wire()) == t
        assert MaskedTemplate.from_wire("[*:1]C<BLANK>").slots == (Fixed("[*:1]"), Fixed("C"), Blank())

    def test_adjacent_blanks_merge(self):
        t = MaskedTemplate((Fixed("C"), Blank(1, 2), Blank(0, 1)))
        assert t.slots == (Fixed("C"), Blank(1, 3))

    def test_bounds(self):
        with pytest.raises(ValueError):
            Blank(2, 1)
        with pytest.raises(ValueError):
            MaskedTemplate(())

    def test_margin_bounds(self):
        cfg = InfillConfig(length_margin=7)
        assert cfg.blank_bounds(Blank(1, None, 10)) == (3, 11)
        assert cfg.blank_bounds(Blank(1, None, 2)) == (1, 9)
        assert cfg.blank_bounds(Blank(1, 4, None)) == (1, 4)

    def test_emissions_all_parse_to_same(self):
        f = parse_fragment("[*:1]c1ccc(CO)cc1")
        for toks in emissions(f):
            assert parse_fragment("".join(toks)).canonical == f.canonical


class TestPromptGenerate:
    def test_no_blanks(self):
        s = hashed_scorer(TOY_TOKENS)
        t = MaskedTemplate.from_tokens(tokenize("[*:1]CO"))
        (c,) = prompt_generate(s, ("C",), t, 1)
        assert c.fragment.canonical == "[*:1]CO"
        assert c.log_prob == pytest.approx(sequence_score(s, ("C",), tokenize("[*:1]CO")), abs=1e-12)

    def test_hopeless_template(self):
        s = hashed_scorer(TOY_TOKENS)
        t = MaskedTemplate((Fixed("Cl"), Fixed("Cl"), Fixed("Cl"), Blank(0, 2)))
        with pytest.raises(NoValidCompletion):
            prompt_generate(s, ("C",), t, 3, InfillConfig.exhaustive())

    def test_zero_k(self):
        assert prompt_generate(hashed_scorer(TOY_TOKENS), ("C",), MaskedTemplate.free(2), 0) == []

    def test_six_tokens_two_blank_top3(self):
        tokens = ["C", "O", "N", "(", ")", "[*:1]"]
        s = hashed_scorer(tokens, salt=3)
        t = MaskedTemplate((Fixed("[*:1]"), Fixed("C"), Blank(2, 2)))
        got = prompt_generate(s, ("C",), t, 3, InfillConfig.exhaustive())
        want = exhaustive_infill(s, ("C",), t, 3, [(2, 2)])
        assert [c.fragment.canonical for c in got] == [w[0] for w in want]
        assert [c.log_prob for c in got] == pytest.approx([w[1] for w in want], abs=1e-12)

    @given(st.integers(0, 2**32 - 1), st.integers(0, 3), st.integers(0, 3), st.integers(1, 8))
    def test_exhaustive_oracle(self, salt, lo, span, k):
        hi = min(3, lo + span)
        r = random.Random(salt)
        s = hashed_scorer(TOY_TOKENS, salt)
        head = [Fixed("[*:1]")] + [Fixed(r.choice(["C", "O", "N"])) for _ in range(r.randint(0, 2))]
        tail = [Fixed("C")] if r.random() < 0.5 else []
        t = MaskedTemplate(tuple(head + [Blank(lo, hi)] + tail))
        want = exhaustive_infill(s, ("C",), t, k, [(lo, hi)])
        if not want:
            with pytest.raises(NoValidCompletion):
                prompt_generate(s, ("C",), t, k, InfillConfig.exhaustive())
            return
        got = prompt_generate(s, ("C",), t, k, InfillConfig.exhaustive())
        assert [c.fragment.canonical for c in got] == [w[0] for w in want]
        assert [c.log_prob for c in got] == pytest.approx([w[1] for w in want], abs=1e-12)

    def test_branching_bound_instrumented(self, synthetic_db):
        base = train_reference(synthetic_db)
        r = random.Random(9)
        records = list(synthetic_db.records)
        expansions = violations = widest = 0
        while expansions < 10_000:
            rec = r.choice(records)
            full = parse_fragment(rec.to_variable)
            keep = {0}
            for _ in range(r.randint(0, len(full.atoms) // 2)):
                frontier = [n for i in keep for n, _ in full.neighbors(i) if n not in keep]
                if frontier:
                    keep.add(r.choice(frontier))
            template = template_from_substructure(full, keep)
            scorer = RecordingScorer(base)
            stats = InfillStats(branching=[])
            try:
                cands = prompt_generate(scorer, tokenize(rec.from_variable), template, 50, InfillConfig(), stats)
            except NoValidCompletion:
                cands = []
            assert len(stats.branching) == len(scorer.seen) == stats.expansions
            for (children, limit), p in zip(stats.branching, scorer.seen):
                assert children <= limit <= max(1, math.ceil(renyi2_count(p) - 1e-9))
            for c in cands:
                assert template.matches(c.tokens)
            expansions += stats.expansions
            violations += stats.violations
            widest = max(widest, stats.max_children)
        assert violations == 0
        assert widest >= 2

    def test_cap(self):
        s = hashed_scorer(TOY_TOKENS, 1)
        stats = InfillStats(branching=[])
        prompt_generate(s, ("C",), MaskedTemplate((Fixed("[*:1]"), Blank(1, 4))), 5, InfillConfig(n_eff_cap=2), stats)
        assert all(c <= 2 for c, _ in stats.branching)

    def test_budget(self):
        s = hashed_scorer(TOY_TOKENS, 2)
        stats = InfillStats()
        cfg = InfillConfig(max_total_candidates=15, top_scored=200)
        try:
            prompt_generate(s, ("C",), MaskedTemplate((Fixed("[*:1]"), Blank(1, 5))), 100, cfg, stats)
        except NoValidCompletion:
            pass
        assert stats.candidates <= 15

    def test_max_new_tokens(self):
        s = hashed_scorer(TOY_TOKENS, 4)
        cfg = InfillConfig(max_new_tokens_per_blank=2, neff_branching=False, max_total_candidates=None, top_scored=None)
        t = MaskedTemplate((Fixed("[*:1]"), Blank(1, None)))
        for c in prompt_generate(s, ("C",), t, 20, cfg):
            assert len(c.tokens) <= 3

    def test_sorted_unique_valid(self, synthetic_db):
        s = train_reference(synthetic_db)
        rec = synthetic_db.records[0]
        full = parse_fragment(rec.to_variable)
        t = template_from_substructure(full, [0])
        got = prompt_generate(s, tokenize(rec.from_variable), t, 30)
        lps = [c.log_prob for c in got]
        assert lps == sorted(lps, reverse=True)
        assert len({c.fragment.canonical for c in got}) == len(got)
        for c in got:
            assert parse_fragment(c.fragment.canonical).canonical == c.fragment.canonical
            assert t.matches(c.tokens)
