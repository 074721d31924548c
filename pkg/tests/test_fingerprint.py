from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmptgen.fingerprint import (
    FingerprintVec,
    LengthMismatch,
    ZeroVector,
    cosine_sim,
    fnv1a_64,
    morgan_fingerprint,
    tanimoto,
)
from mmptgen.fragment import parse_fragment
from mmptgen.synthetic import random_fragment, random_permutation

bitsets = st.frozensets(st.integers(0, 255), max_size=40)


def fp(bits, nbits=256) -> FingerprintVec:
    return FingerprintVec.from_bits(bits, nbits)


class TestHash:
    # Published FNV-1a 64-bit test vectors.
    @pytest.mark.parametrize("data,value", [(b"", 0xCBF29CE484222325), (b"a", 0xAF63DC4C8601EC8C), (b"foobar", 0x85944171F73967E8)])
    def test_vectors(self, data, value):
        assert fnv1a_64(data) == value


class TestMorgan:
    def test_deterministic(self):
        f = parse_fragment("[*:1]c1ccc(Cl)cc1")
        assert morgan_fingerprint(f) == morgan_fingerprint(parse_fragment("[*:1]c1ccc(Cl)cc1"))

    def test_single_atom_radius_zero(self):
        assert morgan_fingerprint(parse_fragment("C"), radius=0).popcount == 1

    def test_permuted_ten_atoms(self):
        rng = random.Random(3)
        f = random_fragment(rng, 9, 1)
        assert len(f.atoms) == 10
        g = f.relabel(random_permutation(rng, 10))
        assert g.canonical == f.canonical
        assert morgan_fingerprint(g) == morgan_fingerprint(f)

    def test_graph_invariance_hundred(self):
        rng = random.Random(11)
        for _ in range(100):
            f = random_fragment(rng, rng.randint(1, 15), rng.randint(0, 2))
            g = f.relabel(random_permutation(rng, len(f.atoms)))
            assert morgan_fingerprint(f, 2, 1024) == morgan_fingerprint(g, 2, 1024)

    def test_wildcard_changes_bits(self):
        assert morgan_fingerprint(parse_fragment("[*:1]CC")) != morgan_fingerprint(parse_fragment("CC"))

    def test_rejects_bad_sizes(self):
        with pytest.raises(ValueError):
            morgan_fingerprint(parse_fragment("C"), nbits=1000)
        with pytest.raises(ValueError):
            morgan_fingerprint(parse_fragment("C"), radius=-1)

    def test_words_match_bits(self):
        v = morgan_fingerprint(parse_fragment("[*:1]c1ccncc1"), 2, 256)
        words = v.to_words()
        unpacked = np.unpackbits(words.view(np.uint8), bitorder="little")
        assert np.array_equal(unpacked, v.to_array())


class TestSimilarity:
    def test_tanimoto_identity(self):
        x = fp({1, 5, 9})
        assert tanimoto(x, x) == 1.0

    def test_tanimoto_disjoint(self):
        assert tanimoto(fp({1, 2}), fp({3, 4})) == 0.0

    def test_tanimoto_counting(self):
        assert tanimoto(fp({1, 2, 3}), fp({2, 3, 4})) == 0.5

    def test_tanimoto_both_empty(self):
        assert tanimoto(fp(set()), fp(set())) == 1.0

    def test_cosine_identity_and_disjoint(self):
        x = fp({1, 2, 3})
        assert cosine_sim(x, x) == pytest.approx(1.0, abs=1e-15)
        assert cosine_sim(fp({1}), fp({2})) == 0.0

    def test_cosine_formula(self):
        assert cosine_sim(fp({1, 2, 3, 4}), fp({3, 4})) == pytest.approx(2 / math.sqrt(8), abs=1e-15)

    def test_cosine_zero_vector(self):
        with pytest.raises(ZeroVector):
            cosine_sim(fp(set()), fp({1}))

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            tanimoto(fp({1}, 256), fp({1}, 512))
        with pytest.raises(LengthMismatch):
            cosine_sim(fp({1}, 256), fp({1}, 512))

    @given(bitsets, bitsets)
    def test_symmetry(self, a, b):
        assert tanimoto(fp(a), fp(b)) == tanimoto(fp(b), fp(a))
        if a and b:
            assert cosine_sim(fp(a), fp(b)) == cosine_sim(fp(b), fp(a))

    @given(bitsets, bitsets)
    def test_containment(self, a, extra):
        b = a | extra
        if b:
            assert tanimoto(fp(a), fp(b)) == len(a) / len(b)

    @given(bitsets, bitsets)
    def test_ranges(self, a, b):
        assert 0.0 <= tanimoto(fp(a), fp(b)) <= 1.0
        if a and b:
            assert 0.0 <= cosine_sim(fp(a), fp(b)) <= 1.0 + 1e-15
