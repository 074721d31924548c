"""Masked templates and likelihood-guided template completion.

A template is a run of fixed tokens and variable-length blanks. Completion is
a best-first search over partial token strings: a node's priority is its
accumulated log-probability, so finished candidates leave the queue in
exactly descending sequence log-likelihood. At blank positions only the
``ceil(N_eff)`` most probable options are expanded, where ``N_eff = 1 / sum p^2``
is the effective number of tokens of the next-token distribution.
"""

from __future__ import annotations

import heapq
import itertools
import math
import re
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np

from mmptgen.fragment import Fragment, FragmentError, TokenSequence, detokenize, emit, parse_fragment, tokenize
from mmptgen.model import ConditionalScorer

BLANK_MARKER = "<BLANK>"
MASK_MARKER = "?*"

_WIRE_RE = re.compile(r"((?:\?\*)+|<BLANK>)")


class NotADistribution(ValueError):
    pass


class DisconnectedKeepSet(ValueError):
    pass


class NoValidCompletion(RuntimeError):
    pass


def effective_token_count(p: Sequence[float] | np.ndarray, atol: float = 1e-9) -> float:
    """Renyi order-2 effective support size, ``1 / sum(p_i^2)``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise NotADistribution("probabilities must be a non-empty non-negative vector")
    if abs(p.sum() - 1.0) > atol:
        raise NotADistribution(f"probabilities sum to {p.sum()!r}, not 1")
    return float(1.0 / np.dot(p, p))


def branch_limit(p: np.ndarray, cap: int | None = None) -> int:
    """``ceil(N_eff)``, at least 1, optionally capped; ``p`` is trusted to be a distribution."""
    # The tiny slack keeps 4.000000000000001 from becoming 5.
    limit = max(1, math.ceil(1.0 / float(np.dot(p, p)) - 1e-9))
    return limit if cap is None else max(1, min(limit, cap))


@dataclass(frozen=True)
class Fixed:
    token: str


@dataclass(frozen=True)
class Blank:
    """A masked span of ``min_tokens..max_tokens`` tokens (``None``: no upper bound).

    ``origin`` is the length of the span it replaced, when known.
    """

    min_tokens: int = 1
    max_tokens: int | None = None
    origin: int | None = None

    def __post_init__(self) -> None:
        if self.min_tokens < 0:
            raise ValueError("blank min_tokens must be >= 0")
        if self.max_tokens is not None and self.max_tokens < self.min_tokens:
            raise ValueError("blank max_tokens must be >= min_tokens")
        if self.origin is not None and self.origin < 0:
            raise ValueError("blank origin must be >= 0")

    def merge(self, other: "Blank") -> "Blank":
        hi = None if self.max_tokens is None or other.max_tokens is None else self.max_tokens + other.max_tokens
        origin = None if self.origin is None or other.origin is None else self.origin + other.origin
        return Blank(self.min_tokens + other.min_tokens, hi, origin)


Slot = Union[Fixed, Blank]


@dataclass(frozen=True)
class MaskedTemplate:
    slots: tuple[Slot, ...]
    source: str | None = field(default=None, compare=False)  # fragment the template came from

    def __post_init__(self) -> None:
        if not self.slots:
            raise ValueError("a template needs at least one slot")
        merged: list[Slot] = []
        for slot in self.slots:
            if not isinstance(slot, (Fixed, Blank)):
                raise TypeError(f"not a template slot: {slot!r}")
            if isinstance(slot, Blank) and merged and isinstance(merged[-1], Blank):
                merged[-1] = merged[-1].merge(slot)
            else:
                merged.append(slot)
        object.__setattr__(self, "slots", tuple(merged))

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "MaskedTemplate":
        return cls(tuple(Fixed(t) for t in tokens))

    @classmethod
    def free(cls, max_tokens: int | None = None) -> "MaskedTemplate":
        return cls((Blank(1, max_tokens),))

    @property
    def blanks(self) -> list[Blank]:
        return [s for s in self.slots if isinstance(s, Blank)]

    @property
    def fixed_tokens(self) -> list[str]:
        return [s.token for s in self.slots if isinstance(s, Fixed)]

    def to_wire(self, per_token: bool = True) -> str:
        """Render with ``?*`` per masked token (when the origin length is known) or ``<BLANK>``."""
        parts = []
        for slot in self.slots:
            if isinstance(slot, Fixed):
                parts.append(slot.token)
            elif per_token and slot.origin:
                parts.append(MASK_MARKER * slot.origin)
            else:
                parts.append(BLANK_MARKER)
        return "".join(parts)

    @classmethod
    def from_wire(cls, text: str) -> "MaskedTemplate":
        slots: list[Slot] = []
        for piece in _WIRE_RE.split(text):
            if not piece:
                continue
            if piece == BLANK_MARKER:
                slots.append(Blank())
            elif piece.startswith(MASK_MARKER):
                slots.append(Blank(1, None, len(piece) // len(MASK_MARKER)))
            else:
                slots.extend(Fixed(t) for t in tokenize(piece))
        return cls(tuple(slots))

    def matches(self, tokens: Sequence[str]) -> bool:
        """Whether ``tokens`` fit the template (fixed tokens verbatim, blanks within bounds)."""
        tokens = tuple(tokens)
        n = len(tokens)
        reachable = {0}
        for slot in self.slots:
            nxt = set()
            for pos in reachable:
                if isinstance(slot, Fixed):
                    if pos < n and tokens[pos] == slot.token:
                        nxt.add(pos + 1)
                else:
                    hi = n - pos if slot.max_tokens is None else min(slot.max_tokens, n - pos)
                    nxt.update(range(pos + slot.min_tokens, pos + hi + 1))
            reachable = nxt
            if not reachable:
                return False
        return n in reachable


def _branch_parents(tokens: Sequence[str], owners: Sequence[tuple[str, int]]) -> dict[int, int]:
    """Token position of each parenthesis -> atom index the branch hangs from."""
    parents: dict[int, int] = {}
    stack: list[int] = []
    current = -1
    for pos, (kind, idx) in enumerate(owners):
        if kind == "atom":
            current = idx
        elif kind == "open":
            stack.append(current)
            parents[pos] = current
        elif kind == "close":
            current = stack.pop()
            parents[pos] = current
    return parents


def _keep_is_connected(full: Fragment, keep: set[int]) -> bool:
    start = next(iter(keep))
    seen = {start}
    frontier = [start]
    while frontier:
        x = frontier.pop()
        for y, _ in full.neighbors(x):
            if y in keep and y not in seen:
                seen.add(y)
                frontier.append(y)
    return seen == keep


def template_from_tokens(
    tokens: Sequence[str], owners: Sequence[tuple[str, int]], full: Fragment, keep: set[int]
) -> MaskedTemplate:
    parents = _branch_parents(tokens, owners)
    slots: list[Slot] = []
    run = 0
    for pos, (tok, (kind, idx)) in enumerate(zip(tokens, owners)):
        if kind == "atom":
            kept = idx in keep
        elif kind in ("bond", "ring"):
            bond = full.bonds[idx]
            kept = bond.begin in keep and bond.end in keep
        else:
            kept = idx in keep and parents[pos] in keep
        if kept:
            if run:
                slots.append(Blank(1, None, run))
                run = 0
            slots.append(Fixed(tok))
        else:
            run += 1
    if run:
        slots.append(Blank(1, None, run))
    return MaskedTemplate(tuple(slots), full.canonical)


def template_from_substructure(full: Fragment, keep: Sequence[int] | set[int]) -> MaskedTemplate:
    """Mask every token of the canonical emission of ``full`` outside ``keep``.

    Atom tokens follow their atom, bond and ring-closure tokens are kept only
    when both ends are kept, and parentheses only when the branch and the atom
    it hangs from are both kept. Each maximal masked run becomes one blank
    whose ``origin`` is the run length.

    Raises:
        DisconnectedKeepSet: ``keep`` does not induce a connected subgraph.
    """
    keep = set(keep)
    if any(not 0 <= i < len(full.atoms) for i in keep):
        raise IndexError("keep index out of range")
    if keep and not _keep_is_connected(full, keep):
        raise DisconnectedKeepSet("kept atoms do not form a connected subgraph")
    return template_from_tokens(full.canonical_tokens, full.canonical_owners, full, keep)


def emissions(f: Fragment) -> list[TokenSequence]:
    """Canonical emission first, then one emission rooted at each other atom."""
    out = [f.canonical_tokens]
    rank = {atom: r for r, atom in enumerate(f.canonical_order)}
    n = len(f.atoms)
    for root in f.canonical_order[1:]:
        ranks = [rank[i] + 1 for i in range(n)]
        ranks[root] = 0
        toks = emit(f, ranks).tokens
        if toks not in out:
            out.append(toks)
    return out


def matching_emission(template: MaskedTemplate, f: Fragment) -> TokenSequence | None:
    """First emission of ``f`` (canonical, then by root) that fits ``template``."""
    for tokens in emissions(f):
        if template.matches(tokens):
            return tokens
    return None


def fragment_matches(template: MaskedTemplate, f: Fragment) -> bool:
    """Whether some depth-first emission of ``f`` fits ``template``."""
    return matching_emission(template, f) is not None


@dataclass(frozen=True)
class InfillConfig:
    max_new_tokens_per_blank: int = 11
    max_total_candidates: int | None = 200
    top_scored: int | None = 200
    length_margin: int | None = 7
    n_eff_cap: int | None = None
    neff_branching: bool = True
    max_expansions: int = 20_000

    def __post_init__(self) -> None:
        for name in ("max_new_tokens_per_blank", "max_total_candidates", "top_scored",
                     "length_margin", "n_eff_cap", "max_expansions"):
            value = getattr(self, name)
            if value is not None and value < (0 if name == "length_margin" else 1):
                raise ValueError(f"{name} must be positive")

    @classmethod
    def exhaustive(cls, max_new_tokens_per_blank: int = 11) -> "InfillConfig":
        """No branching cap, no candidate budget: exact top-K under the template."""
        return cls(max_new_tokens_per_blank, None, None, None, None, False, 10**9)

    def blank_bounds(self, blank: Blank) -> tuple[int, int]:
        lo = blank.min_tokens
        hi = self.max_new_tokens_per_blank
        if blank.max_tokens is not None:
            hi = min(hi, blank.max_tokens)
        if blank.origin is not None and self.length_margin is not None:
            lo = max(lo, blank.origin - self.length_margin)
            hi = min(hi, blank.origin + self.length_margin)
        return lo, hi


@dataclass
class InfillStats:
    expansions: int = 0
    candidates: int = 0
    scored: int = 0
    valid: int = 0
    max_children: int = 0
    violations: int = 0
    exhausted_guard: bool = False
    branching: list[tuple[int, int]] | None = None  # (children, limit) per expansion when recorded


class Candidate(NamedTuple):
    fragment: Fragment
    log_prob: float
    tokens: TokenSequence


class _Node(NamedTuple):
    tokens: TokenSequence
    slot: int        # index of the slot being filled
    filled: int      # tokens emitted into the current blank
    done: bool


def prompt_generate(
    scorer: ConditionalScorer,
    input: TokenSequence,
    template: MaskedTemplate,
    k: int,
    cfg: InfillConfig = InfillConfig(),
    stats: InfillStats | None = None,
) -> list[Candidate]:
    """Top-``k`` valid completions of ``template`` by sequence log-likelihood.

    Candidates leave the search queue in descending score, so the first
    ``min(max_total_candidates, top_scored)`` finished sequences are the
    scored pool; invalid fragments are dropped and canonical duplicates keep
    their best-scoring token string.

    Raises:
        NoValidCompletion: the explored pool holds no parseable fragment.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return []
    stats = stats if stats is not None else InfillStats()
    input = tuple(input)
    vocab = scorer.vocab
    slots = template.slots
    bounds = [cfg.blank_bounds(s) if isinstance(s, Blank) else (1, 1) for s in slots]
    if any(lo > hi for lo, hi in bounds):
        raise NoValidCompletion("a blank has no admissible length under the configured margins")
    fixed_ids = [vocab.id_of(s.token) if isinstance(s, Fixed) else -1 for s in slots]
    budget = min(x for x in (cfg.max_total_candidates, cfg.top_scored, math.inf) if x is not None)

    counter = itertools.count()
    heap: list[tuple[float, str, int, _Node]] = [(0.0, "", next(counter), _Node((), 0, 0, False))]
    results: list[Candidate] = []
    seen: set[str] = set()

    def push(score: float, node: _Node) -> None:
        if math.isfinite(score):
            heapq.heappush(heap, (-score, detokenize(node.tokens), next(counter), node))

    while heap and len(results) < k and stats.candidates < budget:
        neg, text, _, node = heapq.heappop(heap)
        score = -neg
        if node.done:
            stats.candidates += 1
            stats.scored += 1
            try:
                frag = parse_fragment(text)
            except FragmentError:
                continue
            stats.valid += 1
            if frag.canonical not in seen:
                seen.add(frag.canonical)
                results.append(Candidate(frag, score, node.tokens))
            continue
        if stats.expansions >= cfg.max_expansions:
            stats.exhausted_guard = True
            break
        stats.expansions += 1
        p = scorer.next_distribution(input, node.tokens)
        with np.errstate(divide="ignore"):
            logp = np.log(p)

        # options: (probability, label, child node, token id)
        options: list[tuple[float, str, _Node, int]] = []

        def close_option(next_slot: int) -> None:
            if next_slot == len(slots):
                options.append((p[vocab.eos_id], "", _Node(node.tokens, next_slot, 0, True), vocab.eos_id))
            else:
                tid = fixed_ids[next_slot]
                tok = vocab.tokens[tid]
                options.append((p[tid], tok, _Node(node.tokens + (tok,), next_slot + 1, 0, False), tid))

        if node.slot == len(slots):
            close_option(node.slot)
        elif isinstance(slots[node.slot], Fixed):
            close_option(node.slot)
        else:
            lo, hi = bounds[node.slot]
            if node.filled < hi:
                for tid, tok in enumerate(vocab.tokens):
                    options.append((p[tid], tok, _Node(node.tokens + (tok,), node.slot, node.filled + 1, False), tid))
            if node.filled >= lo:
                close_option(node.slot + 1)

        if isinstance(slots[node.slot] if node.slot < len(slots) else None, Blank) and cfg.neff_branching:
            limit = branch_limit(p, cfg.n_eff_cap)
            options.sort(key=lambda o: (-o[0], o[1], o[2].slot))
            options = options[:limit]
        else:
            limit = len(options) if not cfg.neff_branching else branch_limit(p, cfg.n_eff_cap)
        children = sum(1 for o in options if o[0] > 0)
        stats.max_children = max(stats.max_children, children)
        if children > limit:
            stats.violations += 1
        if stats.branching is not None:
            stats.branching.append((children, limit))
        for prob, _, child, tid in options:
            if prob > 0:
                push(score + float(logp[tid]), child)

    if not results:
        raise NoValidCompletion(f"no parseable completion among {stats.candidates} candidates")
    return results
