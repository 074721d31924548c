"""Nearest-input retrieval over an MMPT database and label-set expansion.

Distinct input variables are fingerprinted into an HNSW index. A query fetches
its nearest inputs by cosine similarity, collects every output those inputs
were transformed into, keeps outputs with the query's attachment count and
ranks them by Tanimoto similarity to the query.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from mmptgen.fingerprint import DEFAULT_NBITS, DEFAULT_RADIUS, FingerprintVec, cosine_sim, morgan_fingerprint, tanimoto
from mmptgen.fragment import Fragment, parse_fragment
from mmptgen.hnsw import HnswIndex
from mmptgen.mmp import MmptDatabase

DEFAULT_K_INPUTS = 500
DEFAULT_MAX_OUTPUTS = 1000


class EmptyDatabase(ValueError):
    pass


class Scored(NamedTuple):
    fragment: Fragment
    similarity: float


@dataclass(frozen=True)
class RetrievalResult:
    query: Fragment
    matched_inputs: list[Scored]
    expanded_outputs: list[Scored]


@dataclass
class RetrievalIndex:
    ann: HnswIndex
    inputs: list[str]          # canonical input variable per index row
    radius: int = DEFAULT_RADIUS
    nbits: int = DEFAULT_NBITS

    def __len__(self) -> int:
        return len(self.inputs)

    def fingerprint(self, f: Fragment) -> FingerprintVec:
        return morgan_fingerprint(f, self.radius, self.nbits)

    def save(self, path: str | Path) -> None:
        self.ann.save(path, {"radius": self.radius, "nbits": self.nbits, "inputs": self.inputs})

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalIndex":
        ann, meta = HnswIndex.load(path)
        return cls(ann, list(meta["inputs"]), meta["radius"], meta["nbits"])


def build_index(
    db: MmptDatabase,
    radius: int = DEFAULT_RADIUS,
    nbits: int = DEFAULT_NBITS,
    m: int = 16,
    ef_construction: int = 200,
    ef_search: int = 100,
    seed: int = 0,
) -> RetrievalIndex:
    """Index every distinct input variable of ``db`` (sorted canonical order).

    Raises:
        EmptyDatabase: ``db`` holds no records.
    """
    inputs = db.inputs()
    if not inputs:
        raise EmptyDatabase("cannot index an empty database")
    words = np.stack([morgan_fingerprint(parse_fragment(s), radius, nbits).to_words() for s in inputs])
    ann = HnswIndex.build(words, m, ef_construction, ef_search, seed)
    return RetrievalIndex(ann, inputs, radius, nbits)


def retrieve(
    index: RetrievalIndex,
    db: MmptDatabase,
    query: Fragment,
    k_inputs: int = DEFAULT_K_INPUTS,
    max_outputs: int = DEFAULT_MAX_OUTPUTS,
    ef_search: int | None = None,
) -> RetrievalResult:
    """Nearest inputs, then their outputs filtered by attachment count and ranked by Tanimoto.

    ``ef_search`` defaults to the index setting and is raised to ``k_inputs``
    when smaller, since a layer search cannot return more than ``ef`` nodes.
    """
    if k_inputs < 1:
        raise ValueError("k_inputs must be positive")
    qfp = index.fingerprint(query)
    ef = max(index.ann.ef_search if ef_search is None else ef_search, k_inputs)
    _, rows = index.ann.search(qfp.to_words(), k_inputs, ef)

    matched = []
    for row in rows[0]:
        if row < 0:
            continue
        frag = parse_fragment(index.inputs[row])
        matched.append(Scored(frag, cosine_sim(qfp, index.fingerprint(frag))))
    qcanon = query.canonical
    matched.sort(key=lambda s: (-s.similarity, s.fragment.canonical != qcanon, s.fragment.canonical))

    n_attach = query.attachment_count
    outputs: dict[str, Scored] = {}
    for hit in matched:
        for out in db.outputs_for(hit.fragment.canonical):
            if out in outputs:
                continue
            frag = parse_fragment(out)
            if frag.attachment_count != n_attach:
                continue
            outputs[out] = Scored(frag, tanimoto(qfp, index.fingerprint(frag)))
    ranked = sorted(outputs.values(), key=lambda s: (-s.similarity, s.fragment.canonical))
    return RetrievalResult(query, matched, ranked[:max_outputs])
