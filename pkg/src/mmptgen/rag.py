"""Retrieval-augmented generation and the steering-mixture identity.

``rag_generate`` runs retrieve -> cluster -> template -> budget -> infill and
returns the canonical union of per-cluster candidates. ``verify_steering``
checks numerically that mixing gated cluster-conditioned distributions with
weights ``w_k`` equals one interpolation between the base distribution and a
single pooled reference distribution.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from mmptgen.cluster import (
    DEFAULT_MAX_CLUSTER_SIZE,
    DEFAULT_THRESHOLD,
    ClusterTemplate,
    Clusterer,
    InvalidWeights,
    McsLinkageClusterer,
    make_cluster_templates,
)
from mmptgen.fragment import Fragment, FragmentError, TokenSequence, parse_fragment, tokenize
from mmptgen.infill import InfillConfig, InfillStats, MaskedTemplate, NoValidCompletion, matching_emission, prompt_generate
from mmptgen.mmp import MmptDatabase
from mmptgen.model import DEFAULT_DELTA, ConditionalScorer, GenerationConfig, TokenVocabulary, beam_generate
from mmptgen.retrieval import DEFAULT_K_INPUTS, DEFAULT_MAX_OUTPUTS, RetrievalIndex, RetrievalResult, retrieve

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9


class EmptyRetrieval(RuntimeError):
    pass


class InconsistentDimensions(ValueError):
    pass


@dataclass(frozen=True)
class BudgetAllocation:
    budgets: tuple[int, ...]
    total: int

    def __iter__(self):
        return iter(self.budgets)

    def __len__(self) -> int:
        return len(self.budgets)

    def __getitem__(self, k: int) -> int:
        return self.budgets[k]


def allocate_budget(weights: Sequence[float], total: int) -> BudgetAllocation:
    """Largest-remainder apportionment of ``total`` over simplex ``weights``.

    Each share gets ``floor(w_k * total)``; the leftover units go to the
    largest fractional parts, lower index first on ties.
    """
    w = [float(x) for x in weights]
    if not w:
        raise InvalidWeights("no weights")
    if total < 0:
        raise ValueError("total must be non-negative")
    if any(x < 0 or not math.isfinite(x) for x in w):
        raise InvalidWeights("weights must be finite and non-negative")
    if abs(math.fsum(w) - 1.0) > SIMPLEX_TOL:
        raise InvalidWeights(f"weights sum to {math.fsum(w)!r}, not 1")
    # Rounding to 9 places removes float noise such as 0.3 * 100 = 30.000000000000004.
    quotas = [round(x * total, 9) for x in w]
    base = [math.floor(q) for q in quotas]
    leftover = total - sum(base)
    order = sorted(range(len(w)), key=lambda k: (-(quotas[k] - base[k]), k))
    for k in order[:leftover]:
        base[k] += 1
    return BudgetAllocation(tuple(base), total)


@dataclass(frozen=True)
class SteeringInstance:
    base: np.ndarray                 # (n,)
    cluster_dists: np.ndarray        # (K, n)
    gates: np.ndarray                # (K,) in [0, 1]
    weights: np.ndarray              # (K,) on the simplex

    def __post_init__(self) -> None:
        base = np.asarray(self.base, dtype=np.float64)
        dists = np.atleast_2d(np.asarray(self.cluster_dists, dtype=np.float64))
        gates = np.asarray(self.gates, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if base.ndim != 1 or dists.shape[1] != base.shape[0]:
            raise InconsistentDimensions("cluster distributions and base differ in length")
        if gates.shape != (dists.shape[0],) or weights.shape != (dists.shape[0],):
            raise InconsistentDimensions("need one gate and one weight per cluster")
        for name, vec in (("base", base[None, :]), ("cluster", dists), ("weights", weights[None, :])):
            if np.any(vec < 0) or np.any(np.abs(vec.sum(axis=1) - 1.0) > 1e-12):
                raise ValueError(f"{name} vectors must be probability distributions")
        if np.any(gates < 0) or np.any(gates > 1):
            raise ValueError("gates must lie in [0, 1]")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "cluster_dists", dists)
        object.__setattr__(self, "gates", gates)
        object.__setattr__(self, "weights", closed_simplex(weights))


def closed_simplex(weights: np.ndarray) -> np.ndarray:
    """Shift the last weight (by at most the validation tolerance) so the left-to-right float sum is 1.0."""
    w = np.array(weights, dtype=np.float64)
    head = 0.0
    for x in w[:-1]:
        head += float(x)
    last = 1.0 - head
    if last >= 0.0:
        w[-1] = last
    return w


def steered_mixture(inst: SteeringInstance) -> np.ndarray:
    """Left-hand side, sum_k w_k [(1 - a_k) base + a_k p_k], with the base coefficient collected."""
    base_coef = 0.0
    steer = np.zeros_like(inst.base)
    for w, a, p in zip(inst.weights, inst.gates, inst.cluster_dists):
        base_coef += float(w) * (1.0 - float(a))
        steer += (float(w) * float(a)) * p
    return base_coef * inst.base + steer


def pooled_reference(inst: SteeringInstance) -> tuple[float, np.ndarray | None]:
    """Mean gate and the gate-weighted reference distribution (``None`` when every gate is shut)."""
    alpha_bar = 0.0
    for w, a in zip(inst.weights, inst.gates):
        alpha_bar += float(w) * float(a)
    if alpha_bar == 0.0:
        return 0.0, None
    ref = np.zeros_like(inst.base)
    for w, a, p in zip(inst.weights, inst.gates, inst.cluster_dists):
        ref += (float(w) * float(a) / alpha_bar) * p
    return alpha_bar, ref


def verify_steering(inst: SteeringInstance) -> tuple[float, float]:
    """Max pointwise gap between the gated mixture and its two-component form, and the mean gate."""
    lhs = steered_mixture(inst)
    alpha_bar, ref = pooled_reference(inst)
    rhs = inst.base.copy() if ref is None else (1.0 - alpha_bar) * inst.base + alpha_bar * ref
    return float(np.max(np.abs(lhs - rhs))), alpha_bar


def random_steering_instance(rng: np.random.Generator, max_clusters: int = 8, max_outcomes: int = 50) -> SteeringInstance:
    k = int(rng.integers(1, max_clusters + 1))
    n = int(rng.integers(2, max_outcomes + 1))

    def simplex(size) -> np.ndarray:
        x = rng.dirichlet(np.ones(size[-1]), size=size[:-1]) if len(size) > 1 else rng.dirichlet(np.ones(size[0]))
        return x / x.sum(axis=-1, keepdims=True)

    return SteeringInstance(simplex((n,)), simplex((k, n)), rng.uniform(0.0, 1.0, size=k), simplex((k,)))


class ClusterConditionedScorer:
    """Base scorer gated toward a prefix-trie distribution over one cluster's members.

    ``next = (1 - gate) * base + gate * p_cluster`` wherever the prefix is a
    prefix of some member emission; elsewhere the base distribution is used
    unchanged. Member emissions are chosen to fit the cluster template when
    one does, so the trie follows the template's token order. With
    ``gate = 0`` this is exactly the base scorer.
    """

    def __init__(
        self,
        base: ConditionalScorer,
        members: Sequence[Fragment],
        template: MaskedTemplate | None = None,
        gate: float = 0.5,
        delta: float = DEFAULT_DELTA,
    ):
        if not 0.0 <= gate <= 1.0:
            raise ValueError("gate must lie in [0, 1]")
        if delta <= 0:
            raise ValueError("smoothing delta must be positive")
        self.base = base
        self.gate = float(gate)
        self.delta = float(delta)
        vocab: TokenVocabulary = base.vocab
        self._trie: dict[tuple[int, ...], dict[int, int]] = {}
        for m in members:
            tokens = matching_emission(template, m) if template is not None else None
            if tokens is None:
                tokens = tokenize(m.canonical)
            try:
                ids = [vocab.id_of(t) for t in tokens]
            except KeyError:
                continue  # a member outside the vocabulary cannot be scored anyway
            ids.append(vocab.eos_id)
            for i, tok in enumerate(ids):
                node = self._trie.setdefault(tuple(ids[:i]), {})
                node[tok] = node.get(tok, 0) + 1
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    @property
    def vocab(self) -> TokenVocabulary:
        return self.base.vocab

    def cluster_distribution(self, prefix: TokenSequence) -> np.ndarray | None:
        try:
            ids = tuple(self.vocab.id_of(t) for t in prefix)
        except KeyError:
            return None
        vec = self._cache.get(ids)
        if vec is None:
            counts = self._trie.get(ids)
            if counts is None:
                return None
            vec = np.full(self.vocab.n_outputs, self.delta)
            for tok, c in counts.items():
                vec[tok] += c
            vec = self._cache[ids] = vec / vec.sum()
        return vec

    def next_distribution(self, input: TokenSequence, prefix: TokenSequence) -> np.ndarray:
        p = self.base.next_distribution(input, prefix)
        if self.gate == 0.0:
            return p
        ref = self.cluster_distribution(prefix)
        if ref is None:
            return p
        return (1.0 - self.gate) * p + self.gate * ref


@dataclass(frozen=True)
class RagConfig:
    k_inputs: int = DEFAULT_K_INPUTS
    max_outputs: int = DEFAULT_MAX_OUTPUTS
    cluster_pool: int = 100
    n_clusters: int = 10
    per_cluster: int = 50
    weights: tuple[float, ...] | None = None
    threshold: float = DEFAULT_THRESHOLD
    max_cluster_size: int = DEFAULT_MAX_CLUSTER_SIZE
    ef_search: int | None = None
    infill: InfillConfig = field(default_factory=InfillConfig)
    fallback: GenerationConfig | None = None
    allow_fallback: bool = True
    gate: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.gate <= 1.0:
            raise ValueError("gate must lie in [0, 1]")
        for name in ("k_inputs", "max_outputs", "cluster_pool", "n_clusters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.per_cluster < 0:
            raise ValueError("per_cluster must be non-negative")

    def fallback_config(self) -> GenerationConfig:
        if self.fallback is not None:
            return self.fallback
        total = max(1, self.n_clusters * self.per_cluster)
        return GenerationConfig(beam_width=total, max_length=50, top_k_outputs=total)


class RagCandidate(NamedTuple):
    fragment: Fragment
    log_prob: float
    cluster_id: int | None
    template: str | None
    tokens: TokenSequence = ()   # the emitted token string


@dataclass
class RagResult:
    query: Fragment
    candidates: list[RagCandidate]
    mode: str                                    # "rag" or "fm-fallback"
    retrieval: RetrievalResult | None = None
    templates: list[ClusterTemplate] = field(default_factory=list)
    budgets: BudgetAllocation | None = None
    stats: dict[int, InfillStats] = field(default_factory=dict)

    def jsonl(self) -> str:
        lines = []
        for c in self.candidates:
            lines.append(json.dumps({
                "query": self.query.canonical,
                "candidate": c.fragment.canonical,
                "log_prob": c.log_prob,
                "cluster_id": c.cluster_id,
                "template": c.template,
                "mode": self.mode,
            }))
        return "".join(line + "\n" for line in lines)


def resolve_weights(weights: Sequence[float] | None, n: int) -> list[float] | None:
    """Fit an explicit weight list to ``n`` clusters: extra entries dropped, missing ones zero."""
    if weights is None:
        return None
    w = [float(x) for x in weights][:n] + [0.0] * max(0, n - len(weights))
    if any(x < 0 for x in w):
        raise InvalidWeights("weights must be non-negative")
    if sum(w) <= 0:
        raise InvalidWeights("no positive weight falls on a retrieved cluster")
    return w


def union_candidates(per_cluster: Iterable[tuple[int, str, Sequence]]) -> list[RagCandidate]:
    """Canonical union: each fragment keeps its best log-prob, lower cluster id on ties."""
    best: dict[str, RagCandidate] = {}
    for cid, wire, cands in per_cluster:
        for c in cands:
            key = c.fragment.canonical
            cur = best.get(key)
            if cur is None or c.log_prob > cur.log_prob or (c.log_prob == cur.log_prob and cid < cur.cluster_id):
                best[key] = RagCandidate(c.fragment, c.log_prob, cid, wire, c.tokens)
    return sorted(best.values(), key=lambda c: (-c.log_prob, c.fragment.canonical))


def free_generate(scorer: ConditionalScorer, query: Fragment, cfg: GenerationConfig) -> list[RagCandidate]:
    out = []
    for hyp in beam_generate(scorer, tokenize(query.canonical), cfg):
        try:
            frag = parse_fragment(hyp.text)
        except FragmentError:
            continue
        out.append(RagCandidate(frag, hyp.log_prob, None, None, hyp.tokens))
    return out


def rag_generate(
    scorer: ConditionalScorer,
    index: RetrievalIndex,
    db: MmptDatabase,
    query: Fragment,
    cfg: RagConfig = RagConfig(),
    clusterer: Clusterer | None = None,
) -> RagResult:
    """Union of per-cluster template completions for ``query``.

    The ``cluster_pool`` best outputs by Tanimoto are clustered; the
    ``n_clusters`` largest clusters (ties by id) get templates and a budget of
    ``per_cluster`` each, redistributed by the weights. Each cluster's
    completions are scored by the base scorer gated toward that cluster's
    members (``cfg.gate``; 0 keeps the template as a pure hard constraint).

    Raises:
        EmptyRetrieval: nothing retrieved and ``allow_fallback`` is off.
    """
    clusterer = clusterer or McsLinkageClusterer(cfg.threshold, cfg.max_cluster_size)
    found = retrieve(index, db, query, cfg.k_inputs, cfg.max_outputs, cfg.ef_search)
    if not found.expanded_outputs:
        if not cfg.allow_fallback:
            raise EmptyRetrieval(f"no outputs retrieved for {query.canonical}")
        logger.info("empty retrieval for %s; falling back to free generation", query.canonical)
        return RagResult(query, free_generate(scorer, query, cfg.fallback_config()), "fm-fallback", found)

    pool = [s.fragment for s in found.expanded_outputs[: cfg.cluster_pool]]
    clusters = clusterer(pool)[: cfg.n_clusters]
    weights = resolve_weights(cfg.weights, len(clusters))
    templates = make_cluster_templates(clusters, weights)
    budgets = allocate_budget([t.weight for t in templates], cfg.per_cluster * len(templates))

    input_tokens = tokenize(query.canonical)
    per_cluster = []
    stats: dict[int, InfillStats] = {}
    for tpl, n_k in zip(templates, budgets):
        if n_k == 0:
            continue
        st = stats[tpl.cluster.id] = InfillStats()
        steered = ClusterConditionedScorer(scorer, tpl.cluster.members, tpl.template, cfg.gate) if cfg.gate > 0 else scorer
        try:
            cands = prompt_generate(steered, input_tokens, tpl.template, n_k, cfg.infill, st)
        except NoValidCompletion:
            logger.info("cluster %d produced no valid completion", tpl.cluster.id)
            continue
        per_cluster.append((tpl.cluster.id, tpl.template.to_wire(), cands))
    return RagResult(query, union_candidates(per_cluster), "rag", found, templates, budgets, stats)
