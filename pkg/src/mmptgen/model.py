"""Conditional token scorers over fragment strings and beam-search decoding.

The reference scorer interpolates two count models:

* a memorization table that, for an input variable seen in training, spreads
  mass over the continuations of the targets it was paired with, and
* a backoff n-gram over target token sequences that ignores the input.

``p = lam * p_mem + (1 - lam) * p_ngram``, both add-delta smoothed so every
token keeps non-zero probability. When the input or prefix was never seen
the memorization term defers to the n-gram.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Protocol, Sequence, runtime_checkable

import numpy as np

from mmptgen.fragment import FragmentError, TokenSequence, detokenize, parse_fragment, tokenize
from mmptgen.mmp import MmptDatabase

BOS, EOS, MASK, BLANK = "<bos>", "<eos>", "<mask>", "<blank>"
SPECIALS = (BOS, EOS, MASK, BLANK)

CHECKPOINT_FORMAT = "mmptgen-reference-scorer"
CHECKPOINT_VERSION = 1

DEFAULT_ORDER = 3
DEFAULT_DELTA = 0.01
DEFAULT_LAMBDA = 0.7


class EmptyTrainingSet(ValueError):
    pass


class UnknownToken(KeyError):
    pass


class TokenVocabulary:
    """Fragment tokens plus the four specials.

    Next-token distributions are indexed by ``output_ids``: the fragment
    tokens in vocabulary order followed by EOS at the last position.
    """

    def __init__(self, tokens: Iterable[str]):
        tokens = sorted(set(tokens))
        clash = set(tokens) & set(SPECIALS)
        if clash:
            raise ValueError(f"special tokens used as fragment tokens: {sorted(clash)}")
        self.tokens: tuple[str, ...] = tuple(tokens)
        self.specials: tuple[str, ...] = SPECIALS
        self._id = {tok: i for i, tok in enumerate(self.tokens)}
        self.eos_id = len(self.tokens)
        self._id[EOS] = self.eos_id
        offset = self.eos_id + 1
        for k, tok in enumerate(s for s in SPECIALS if s != EOS):
            self._id[tok] = offset + k

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._id and token not in SPECIALS

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TokenVocabulary) and self.tokens == other.tokens

    @property
    def n_outputs(self) -> int:
        return len(self.tokens) + 1

    @property
    def output_tokens(self) -> tuple[str, ...]:
        return self.tokens + (EOS,)

    def id_of(self, token: str) -> int:
        try:
            return self._id[token]
        except KeyError:
            raise UnknownToken(token) from None

    def token_of(self, idx: int) -> str:
        if 0 <= idx < len(self.tokens):
            return self.tokens[idx]
        if idx == self.eos_id:
            return EOS
        specials = [s for s in SPECIALS if s != EOS]
        k = idx - self.eos_id - 1
        if 0 <= k < len(specials):
            return specials[k]
        raise IndexError(idx)


@runtime_checkable
class ConditionalScorer(Protocol):
    vocab: TokenVocabulary

    def next_distribution(self, input: TokenSequence, prefix: TokenSequence) -> np.ndarray:
        """Probabilities over ``vocab.output_tokens`` (fragment tokens then EOS)."""
        ...


class CallableScorer:
    """Wraps ``fn(input, prefix) -> probabilities`` as a scorer (closed-form toys, neural adapters)."""

    def __init__(self, vocab: TokenVocabulary, fn: Callable[[TokenSequence, TokenSequence], Sequence[float]]):
        self.vocab = vocab
        self._fn = fn

    def next_distribution(self, input: TokenSequence, prefix: TokenSequence) -> np.ndarray:
        p = np.asarray(self._fn(tuple(input), tuple(prefix)), dtype=np.float64)
        if p.shape != (self.vocab.n_outputs,):
            raise ValueError(f"expected {self.vocab.n_outputs} probabilities, got shape {p.shape}")
        return p


def _input_key(tokens: TokenSequence) -> str:
    text = detokenize(tokens)
    try:
        return parse_fragment(text).canonical
    except FragmentError:
        return text


def _smoothed(counts: dict[int, int], size: int, delta: float) -> np.ndarray:
    vec = np.full(size, delta, dtype=np.float64)
    for idx, c in counts.items():
        vec[idx] += c
    return vec / vec.sum()


class ReferenceScorer:
    """Memorization + backoff n-gram scorer. Build with :func:`train_reference`."""

    def __init__(
        self,
        vocab: TokenVocabulary,
        memory: dict[str, dict[str, int]],
        order: int = DEFAULT_ORDER,
        delta: float = DEFAULT_DELTA,
        lam: float = DEFAULT_LAMBDA,
    ):
        if order < 2:
            raise ValueError("n-gram order must be at least 2")
        if delta <= 0:
            raise ValueError("smoothing delta must be positive")
        if not 0.0 <= lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        self.vocab = vocab
        self.order = order
        self.delta = float(delta)
        self.lam = float(lam)
        self.memory = {k: dict(sorted(v.items())) for k, v in sorted(memory.items())}

        # prefix trie per input: (input, prefix ids) -> {next id: count}
        self._trie: dict[tuple[str, tuple[int, ...]], dict[int, int]] = defaultdict(lambda: defaultdict(int))
        # n-gram context (length 0..order-1, BOS padded) -> {next id: count}
        self._ngram: dict[tuple[int, ...], dict[int, int]] = defaultdict(lambda: defaultdict(int))
        bos = self.vocab.id_of(BOS)
        for key, targets in self.memory.items():
            for target, count in targets.items():
                ids = [self.vocab.id_of(t) for t in tokenize(target)] + [self.vocab.eos_id]
                padded = [bos] * (order - 1) + ids
                for t, nxt in enumerate(ids):
                    self._trie[(key, tuple(ids[:t]))][nxt] += count
                    ctx = padded[t:t + order - 1]
                    for j in range(order):
                        self._ngram[tuple(ctx[len(ctx) - j:]) if j else ()][nxt] += count
        self._trie = {k: dict(v) for k, v in self._trie.items()}
        self._ngram = {k: dict(v) for k, v in self._ngram.items()}
        self._ngram_cache: dict[tuple[int, ...], np.ndarray] = {}
        self._mem_cache: dict[tuple[str, tuple[int, ...]], np.ndarray] = {}
        self._key_cache: dict[TokenSequence, str] = {}
        self._ids_cache: dict[TokenSequence, tuple[int, ...]] = {}

    def _ids(self, prefix: TokenSequence) -> tuple[int, ...]:
        ids = self._ids_cache.get(prefix)
        if ids is None:
            ids = tuple(self.vocab.id_of(t) for t in prefix)
            if any(i >= self.vocab.eos_id for i in ids):
                raise UnknownToken("special token inside a prefix")
            if len(self._ids_cache) > 1_000_000:
                self._ids_cache.clear()
            self._ids_cache[prefix] = ids
        return ids

    def _key(self, input: TokenSequence) -> str:
        key = self._key_cache.get(input)
        if key is None:
            key = self._key_cache[input] = _input_key(input)
        return key

    def ngram_distribution(self, prefix_ids: tuple[int, ...]) -> np.ndarray:
        bos = self.vocab.id_of(BOS)
        padded = (bos,) * (self.order - 1) + prefix_ids
        ctx = padded[len(padded) - (self.order - 1):]
        for j in range(self.order - 1, -1, -1):
            sub = ctx[len(ctx) - j:] if j else ()
            if sub in self._ngram:
                vec = self._ngram_cache.get(sub)
                if vec is None:
                    vec = self._ngram_cache[sub] = _smoothed(self._ngram[sub], self.vocab.n_outputs, self.delta)
                return vec
        return np.full(self.vocab.n_outputs, 1.0 / self.vocab.n_outputs)

    def memory_distribution(self, key: str, prefix_ids: tuple[int, ...]) -> np.ndarray | None:
        node = (key, prefix_ids)
        if node not in self._trie:
            return None
        vec = self._mem_cache.get(node)
        if vec is None:
            vec = self._mem_cache[node] = _smoothed(self._trie[node], self.vocab.n_outputs, self.delta)
        return vec

    def next_distribution(self, input: TokenSequence, prefix: TokenSequence) -> np.ndarray:
        return self._distribution(self._key(tuple(input)), self._ids(tuple(prefix)))

    def _distribution(self, key: str, prefix_ids: tuple[int, ...]) -> np.ndarray:
        p_ng = self.ngram_distribution(prefix_ids)
        if self.lam == 0.0:
            return p_ng
        p_mem = self.memory_distribution(key, prefix_ids)
        if p_mem is None:
            return p_ng
        return self.lam * p_mem + (1.0 - self.lam) * p_ng

    def save(self, path: str | Path) -> None:
        """Write a versioned JSON checkpoint; refuses to overwrite."""
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "hyperparameters": {"order": self.order, "delta": self.delta, "lambda": self.lam},
            "vocabulary": list(self.vocab.tokens),
            "specials": list(SPECIALS),
            "memory": self.memory,
            "ngram": [
                [[self.vocab.token_of(i) for i in ctx],
                 {self.vocab.token_of(i): c for i, c in sorted(nxt.items())}]
                for ctx, nxt in sorted(self._ngram.items())
            ],
        }
        with open(path, "x", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "ReferenceScorer":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a reference scorer checkpoint")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
        hp = payload["hyperparameters"]
        scorer = cls(TokenVocabulary(payload["vocabulary"]), payload["memory"],
                     hp["order"], hp["delta"], hp["lambda"])
        stored = {
            tuple(scorer.vocab.id_of(t) for t in ctx): {scorer.vocab.id_of(t): c for t, c in nxt.items()}
            for ctx, nxt in payload["ngram"]
        }
        if stored != scorer._ngram:
            raise ValueError(f"{path}: n-gram table does not match the memorization table")
        return scorer


def train_reference(
    db: MmptDatabase,
    order: int = DEFAULT_ORDER,
    delta: float = DEFAULT_DELTA,
    lam: float = DEFAULT_LAMBDA,
    extra_tokens: Iterable[str] = (),
) -> ReferenceScorer:
    """Fit the reference scorer on the train split of ``db`` (all records if untagged).

    Raises:
        EmptyTrainingSet: no training records.
    """
    records = db.train().records
    if not records:
        raise EmptyTrainingSet("no training records")
    memory: dict[str, Counter] = defaultdict(Counter)
    tokens: set[str] = set(extra_tokens)
    for rec in records:
        memory[rec.from_variable][rec.to_variable] += rec.count
        tokens.update(tokenize(rec.to_variable))
        tokens.update(tokenize(rec.from_variable))
    return ReferenceScorer(TokenVocabulary(tokens), {k: dict(v) for k, v in memory.items()}, order, delta, lam)


def sequence_log_prob(scorer: ConditionalScorer, input: TokenSequence, output: TokenSequence) -> float:
    """Sum of token log-probabilities of ``output`` followed by EOS."""
    vocab = scorer.vocab
    input, output = tuple(input), tuple(output)
    total = 0.0
    for t in range(len(output) + 1):
        p = scorer.next_distribution(input, output[:t])
        idx = vocab.eos_id if t == len(output) else vocab.id_of(output[t])
        if idx > vocab.eos_id or (t < len(output) and idx == vocab.eos_id):
            raise UnknownToken(output[t])
        total += math.log(p[idx])
    return total


@dataclass(frozen=True)
class GenerationConfig:
    beam_width: int = 1000
    max_length: int = 50
    top_k_outputs: int | None = None
    dedup: bool = True
    keep_truncated: bool = False

    def __post_init__(self) -> None:
        if self.beam_width < 1 or self.max_length < 1:
            raise ValueError("beam_width and max_length must be positive")
        if not 1 <= self.k <= self.beam_width:
            raise ValueError("need beam_width >= top_k_outputs >= 1")

    @property
    def k(self) -> int:
        return self.beam_width if self.top_k_outputs is None else self.top_k_outputs


class Hypothesis(NamedTuple):
    tokens: TokenSequence
    log_prob: float
    truncated: bool = False

    @property
    def text(self) -> str:
        return detokenize(self.tokens)


def dedup_key(tokens: TokenSequence) -> str:
    """Canonical string when the tokens parse, else the raw text."""
    text = detokenize(tokens)
    try:
        return parse_fragment(text).canonical
    except FragmentError:
        return text


class _Pool:
    """Best finished hypotheses, keeping only what can still reach the top ``k``."""

    def __init__(self, k: int, dedup: bool):
        self.k = k
        self.dedup = dedup
        self.best: dict[object, tuple[Hypothesis, str]] = {}
        self.floor = -math.inf

    def add(self, hyp: Hypothesis) -> None:
        if hyp.log_prob < self.floor:
            return
        key = dedup_key(hyp.tokens)
        slot = key if self.dedup else hyp.tokens
        old = self.best.get(slot)
        if old is None or _order(hyp, key) < _order(*old):
            self.best[slot] = (hyp, key)
        if len(self.best) >= 2 * self.k:
            self._prune()

    def _prune(self) -> None:
        ranked = sorted(self.best.items(), key=lambda kv: _order(*kv[1]))[: self.k]
        self.best = dict(ranked)
        self.floor = ranked[-1][1][0].log_prob

    def kth(self) -> float:
        if len(self.best) < self.k:
            return -math.inf
        return heapq.nlargest(self.k, (h.log_prob for h, _ in self.best.values()))[-1]

    def ranked(self) -> list[Hypothesis]:
        return [h for h, key in sorted(self.best.values(), key=lambda p: _order(*p))][: self.k]


def _order(hyp: Hypothesis, key: str) -> tuple:
    return (-hyp.log_prob, key, hyp.text)


def beam_generate(scorer: ConditionalScorer, input: TokenSequence, cfg: GenerationConfig = GenerationConfig()) -> list[Hypothesis]:
    """Beam search over ``scorer``; returns EOS-terminated hypotheses, best first.

    Every step keeps the ``beam_width`` best live extensions (ties by token
    string). Finished hypotheses accumulate in a pool that is ranked at the end,
    equal scores ordered by canonical string.
    """
    input = tuple(input)
    if not input:
        raise ValueError("input must be non-empty")
    vocab = scorer.vocab
    eos = vocab.eos_id
    live: list[tuple[float, TokenSequence]] = [(0.0, ())]
    pool = _Pool(cfg.k, cfg.dedup)
    for step in range(cfg.max_length + 1):
        if not live:
            break
        scores = np.empty((len(live), vocab.n_outputs))
        for r, (lp, prefix) in enumerate(live):
            with np.errstate(divide="ignore"):
                scores[r] = lp + np.log(scorer.next_distribution(input, prefix))
        for r, (lp, prefix) in enumerate(live):
            if np.isfinite(scores[r, eos]):
                pool.add(Hypothesis(prefix, float(scores[r, eos])))
        if step == cfg.max_length:
            if cfg.keep_truncated:
                for lp, prefix in live:
                    pool.add(Hypothesis(prefix, lp, True))
            break
        scores[:, eos] = -np.inf
        flat = scores.ravel()
        n_finite = int(np.isfinite(flat).sum())
        width = min(cfg.beam_width, n_finite)
        if width == 0:
            break
        threshold = np.partition(flat, flat.size - width)[flat.size - width]
        picks = np.flatnonzero(flat >= threshold)
        cand = []
        for idx in picks:
            r, c = divmod(int(idx), vocab.n_outputs)
            tokens = live[r][1] + (vocab.tokens[c],)
            cand.append((-float(flat[idx]), tokens))
        cand.sort(key=lambda x: (x[0], detokenize(x[1]), x[1]))
        live = [(-neg, toks) for neg, toks in cand[:width]]
        # Log-probs only fall with length: once k finished beat every live prefix, stop.
        if live[0][0] < pool.kth():
            break
    return pool.ranked()


def validity_fraction(hyps: Sequence[Hypothesis]) -> float:
    """Share of hypotheses that parse as fragments (0.0 for an empty list)."""
    if not hyps:
        return 0.0
    ok = 0
    for h in hyps:
        try:
            parse_fragment(h.text)
            ok += 1
        except FragmentError:
            pass
    return ok / len(hyps)
