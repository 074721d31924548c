"""Fragment grammar: lexing, parsing, validation and canonical emission.

The grammar is a constrained linear notation for molecular fragments:

    organic atoms    B C N O P S F Cl Br I   (aromatic: b c n o p s)
    bracket atoms    [<elem><charge><Hn>]    e.g. [nH], [N+H3], [O-]
    attachment       [*:n]                   numbered wildcard, n >= 1
    bonds            - = # :
    branches         ( )
    ring closures    1-9 and %nn
    components       .                       (always rejected as disconnected)

Validity means syntax, per-element valence bounds, paired ring closures,
wildcards of degree one on a single bond, attachment numbers {1..m}, and a
connected graph. No aromaticity perception is attempted: aromatic atoms
must sit on at least two aromatic ring bonds.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence


class FragmentError(ValueError):
    """Base class for every rejection raised by the fragment grammar."""


class FragmentSyntaxError(FragmentError):
    """Unbalanced brackets or branches, unmatched ring closures, misplaced bonds."""


class LexError(FragmentSyntaxError):
    """A character (or byte) outside the lexical grammar."""


class ValenceError(FragmentError):
    """An atom exceeds its valence bound, or a wildcard is not singly bonded once."""


class DisconnectedError(FragmentError):
    """The graph has more than one connected component."""


class AttachmentError(FragmentError):
    """Attachment map numbers are repeated or do not form {1..m}."""


class BondOrder(IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def valence(self) -> int:
        return 1 if self is BondOrder.AROMATIC else int(self)


ORGANIC_ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC_ELEMENTS = ("B", "C", "N", "O", "P", "S")

VALENCE_BOUND = {
    "B": 3, "C": 4, "N": 3, "O": 2, "P": 5, "S": 6,
    "F": 1, "Cl": 1, "Br": 1, "I": 1,
}
# Normal valences used for implicit hydrogens on unbracketed atoms.
DEFAULT_VALENCES = {
    "B": (3,), "C": (4,), "N": (3,), "O": (2,), "P": (3, 5), "S": (2, 4, 6),
    "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,),
}
ATOMIC_NUMBER = {
    "*": 0, "B": 5, "C": 6, "N": 7, "O": 8, "F": 9,
    "P": 15, "S": 16, "Cl": 17, "Br": 35, "I": 53,
}
# IUPAC standard atomic weights (abridged).
ATOMIC_WEIGHT = {
    "H": 1.008, "B": 10.81, "C": 12.011, "N": 14.007, "O": 15.999,
    "F": 18.998, "P": 30.974, "S": 32.06, "Cl": 35.45, "Br": 79.904,
    "I": 126.904,
}

MAX_CHARGE = 4

TokenSequence = tuple[str, ...]

_TOKEN_RE = re.compile(
    r"\[[^\[\]]*\]"      # bracket atom, validated by the parser
    r"|Cl|Br"
    r"|[BCNOPSFIbcnops]"
    r"|[-=#:]"
    r"|[()]"
    r"|%[1-9][0-9]"
    r"|[1-9]"
    r"|\."
)
_BRACKET_RE = re.compile(
    r"^(?:\*:(?P<map>[1-9][0-9]{0,2})"
    r"|(?P<elem>Cl|Br|[BCNOPSFI]|[bcnops])"
    r"(?P<c1>\+\+|--|[+-][0-9]?)?"
    r"(?:H(?P<h>[0-9]?))?"
    r"(?P<c2>\+\+|--|[+-][0-9]?)?)$"
)

_BOND_SYMBOLS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE,
                 "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}


@dataclass(frozen=True)
class Atom:
    """One graph node. ``element`` is ``"*"`` for an attachment wildcard."""

    element: str
    aromatic: bool = False
    charge: int = 0
    hcount: int = 0
    map_number: int | None = None

    @property
    def is_wildcard(self) -> bool:
        return self.element == "*"

    @property
    def symbol(self) -> str:
        return self.element.lower() if self.aromatic else self.element


class Bond(NamedTuple):
    begin: int
    end: int
    order: BondOrder

    def other(self, atom: int) -> int:
        return self.end if atom == self.begin else self.begin


def tokenize(text: str) -> TokenSequence:
    """Split a fragment string into grammar tokens.

    Concatenating the returned tokens reproduces ``text`` exactly.

    Raises:
        LexError: on a character that starts no token (including an
            unterminated bracket).
    """
    tokens: list[str] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise LexError(f"unexpected character {text[pos]!r} at position {pos}")
        tokens.append(m.group())
        pos = m.end()
    return tuple(tokens)


def detokenize(tokens: Iterable[str]) -> str:
    return "".join(tokens)


def is_atom_token(token: str) -> bool:
    return token.startswith("[") or token[0].isalpha()


def is_ring_token(token: str) -> bool:
    return token[0] == "%" or token.isdigit()


def _parse_charge(text: str | None) -> int:
    if not text:
        return 0
    sign = 1 if text[0] == "+" else -1
    if len(text) == 1:
        return sign
    if text[1] in "+-":
        return 2 * sign
    return sign * int(text[1:])


def _parse_bracket(token: str) -> tuple[Atom, bool]:
    m = _BRACKET_RE.match(token[1:-1])
    if m is None:
        raise FragmentSyntaxError(f"malformed bracket atom {token!r}")
    if m.group("map") is not None:
        return Atom("*", map_number=int(m.group("map"))), True
    if m.group("c1") and m.group("c2"):
        raise FragmentSyntaxError(f"charge given twice in {token!r}")
    elem = m.group("elem")
    aromatic = elem.islower()
    element = elem.capitalize() if aromatic else elem
    charge = _parse_charge(m.group("c1") or m.group("c2"))
    if abs(charge) > MAX_CHARGE:
        raise FragmentSyntaxError(f"charge out of range in {token!r}")
    h = m.group("h")
    hcount = 0 if h is None else (1 if h == "" else int(h))
    return Atom(element, aromatic=aromatic, charge=charge, hcount=hcount), True


def _organic_atom(token: str) -> Atom:
    if token.islower():
        return Atom(token.upper(), aromatic=True)
    return Atom(token)


def default_hcount(element: str, aromatic: bool, bond_valence: int) -> int:
    """Implicit hydrogens of an unbracketed atom with the given bond valence."""
    valences = DEFAULT_VALENCES[element]
    if aromatic:
        return max(0, valences[0] - bond_valence - 1)
    for v in valences:
        if v >= bond_valence:
            return v - bond_valence
    return 0


def valence_bound(atom: Atom) -> int:
    base = VALENCE_BOUND[atom.element]
    if atom.element == "C":
        bound = base - abs(atom.charge)
    elif atom.element == "B":
        bound = base - atom.charge
    else:
        bound = base + atom.charge
    return max(bound, 0)


def bridge_bonds(n_atoms: int, bonds: Sequence[Bond]) -> set[int]:
    """Indices of bonds not contained in any cycle (iterative Tarjan)."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n_atoms)]
    for k, b in enumerate(bonds):
        adj[b.begin].append((b.end, k))
        adj[b.end].append((b.begin, k))
    disc = [-1] * n_atoms
    low = [0] * n_atoms
    bridges: set[int] = set()
    timer = 0
    for root in range(n_atoms):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            node, via, it = stack[-1]
            advanced = False
            for nbr, k in it:
                if k == via:
                    continue
                if disc[nbr] == -1:
                    disc[nbr] = low[nbr] = timer
                    timer += 1
                    stack.append((nbr, k, iter(adj[nbr])))
                    advanced = True
                    break
                low[node] = min(low[node], disc[nbr])
            if advanced:
                continue
            stack.pop()
            if stack:
                parent = stack[-1][0]
                low[parent] = min(low[parent], low[node])
                if low[node] > disc[parent]:
                    bridges.add(via)
    return bridges


def _components(n_atoms: int, bonds: Sequence[Bond]) -> int:
    parent = list(range(n_atoms))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for b in bonds:
        ra, rb = find(b.begin), find(b.end)
        if ra != rb:
            parent[ra] = rb
    return len({find(i) for i in range(n_atoms)})


def _validate(atoms: Sequence[Atom], bonds: Sequence[Bond], strict: bool) -> None:
    n = len(atoms)
    if n == 0:
        raise FragmentSyntaxError("empty fragment")
    valence = [0] * n
    degree = [0] * n
    aromatic_bonds = [0] * n
    for b in bonds:
        for a in (b.begin, b.end):
            valence[a] += b.order.valence
            degree[a] += 1
            if b.order is BondOrder.AROMATIC:
                aromatic_bonds[a] += 1
        if b.order is BondOrder.AROMATIC and strict:
            if not (atoms[b.begin].aromatic and atoms[b.end].aromatic):
                raise ValenceError("aromatic bond between non-aromatic atoms")

    maps = []
    for i, atom in enumerate(atoms):
        if atom.is_wildcard:
            incident = [b for b in bonds if i in (b.begin, b.end)]
            if len(incident) != 1:
                raise ValenceError(f"attachment point [*:{atom.map_number}] must have exactly one bond")
            bond = incident[0]
            if bond.order is not BondOrder.SINGLE:
                raise ValenceError(f"attachment point [*:{atom.map_number}] must be singly bonded")
            if atoms[bond.other(i)].is_wildcard:
                raise ValenceError("attachment points may not bond to each other")
            maps.append(atom.map_number)
            continue
        if valence[i] + atom.hcount > valence_bound(atom):
            raise ValenceError(
                f"atom {i} ({atom.symbol}) has valence {valence[i] + atom.hcount}, "
                f"bound {valence_bound(atom)}"
            )
        if strict and atom.aromatic and aromatic_bonds[i] < 2:
            raise ValenceError(f"aromatic atom {i} ({atom.symbol}) is not on an aromatic ring")

    if strict and sorted(maps) != list(range(1, len(maps) + 1)):
        raise AttachmentError(f"attachment numbers {sorted(maps)} do not form 1..{len(maps)}")

    if _components(n, bonds) != 1:
        raise DisconnectedError("fragment is not connected")

    if strict:
        bridges = bridge_bonds(n, bonds)
        for k, b in enumerate(bonds):
            if b.order is BondOrder.AROMATIC and k in bridges:
                raise ValenceError("aromatic bond outside a ring")


def parse_fragment(text: str | bytes) -> "Fragment":
    """Parse and validate a fragment string.

    Raises:
        LexError, FragmentSyntaxError: the text does not follow the grammar.
        ValenceError: an atom exceeds its bound or a wildcard is misbonded.
        AttachmentError: attachment numbers are not exactly 1..m.
        DisconnectedError: the graph has several components.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise LexError(f"invalid UTF-8: {exc}") from None
    if not text:
        raise FragmentSyntaxError("empty fragment string")
    tokens = tokenize(text)

    atoms: list[Atom] = []
    bracketed: list[bool] = []
    raw_bonds: dict[tuple[int, int], str | None] = {}
    ring_bond_keys: set[tuple[int, int]] = set()
    prev: int | None = None
    pending: str | None = None
    branches: list[int] = []
    rings: dict[str, tuple[int, str | None]] = {}
    last = "start"

    def add_bond(a: int, b: int, symbol: str | None) -> tuple[int, int]:
        if a == b:
            raise FragmentSyntaxError("ring closure onto the same atom")
        key = (a, b) if a < b else (b, a)
        if key in raw_bonds:
            raise FragmentSyntaxError(f"duplicate bond between atoms {a} and {b}")
        raw_bonds[key] = symbol
        return key

    for pos, tok in enumerate(tokens):
        if is_atom_token(tok):
            if tok[0] == "[":
                atom, br = _parse_bracket(tok)
            else:
                atom, br = _organic_atom(tok), False
            idx = len(atoms)
            atoms.append(atom)
            bracketed.append(br)
            if prev is not None:
                add_bond(prev, idx, pending)
            pending = None
            prev = idx
            last = "atom"
        elif tok in _BOND_SYMBOLS:
            if last not in ("atom", "ring", "open", "close"):
                raise FragmentSyntaxError(f"misplaced bond {tok!r} at token {pos}")
            pending = tok
            last = "bond"
        elif tok == "(":
            if last not in ("atom", "ring", "close"):
                raise FragmentSyntaxError(f"misplaced '(' at token {pos}")
            branches.append(prev)
            last = "open"
        elif tok == ")":
            if not branches or last not in ("atom", "ring", "close"):
                raise FragmentSyntaxError(f"unbalanced ')' at token {pos}")
            prev = branches.pop()
            last = "close"
        elif tok == ".":
            if last not in ("atom", "ring", "close") or branches:
                raise FragmentSyntaxError(f"misplaced '.' at token {pos}")
            prev = None
            last = "dot"
        else:
            if last not in ("atom", "ring", "bond"):
                raise FragmentSyntaxError(f"misplaced ring closure {tok!r} at token {pos}")
            if tok in rings:
                other, symbol = rings.pop(tok)
                if symbol and pending and symbol != pending:
                    raise FragmentSyntaxError(f"conflicting bond symbols on ring closure {tok}")
                ring_bond_keys.add(add_bond(other, prev, symbol or pending))
            else:
                rings[tok] = (prev, pending)
            pending = None
            last = "ring"
    if pending is not None or last in ("bond", "open", "dot", "start"):
        raise FragmentSyntaxError("fragment ends inside a bond or branch")
    if branches:
        raise FragmentSyntaxError("unclosed branch")
    if rings:
        raise FragmentSyntaxError(f"unmatched ring closure(s) {sorted(rings)}")

    bonds: list[Bond] = []
    implicit: list[int] = []
    for (a, b), symbol in sorted(raw_bonds.items()):
        if symbol is None:
            both = atoms[a].aromatic and atoms[b].aromatic
            order = BondOrder.AROMATIC if both else BondOrder.SINGLE
            if both:
                implicit.append(len(bonds))
        else:
            order = _BOND_SYMBOLS[symbol]
        bonds.append(Bond(a, b, order))
    if implicit:
        # An unmarked bond between aromatic atoms outside any ring is single.
        bridges = bridge_bonds(len(atoms), bonds)
        for k in implicit:
            if k in bridges:
                bonds[k] = bonds[k]._replace(order=BondOrder.SINGLE)

    valence = [0] * len(atoms)
    for b in bonds:
        valence[b.begin] += b.order.valence
        valence[b.end] += b.order.valence
    for i, atom in enumerate(atoms):
        if not bracketed[i]:
            h = default_hcount(atom.element, atom.aromatic, valence[i])
            atoms[i] = Atom(atom.element, atom.aromatic, 0, h)
    return Fragment.build(atoms, bonds)


@dataclass(frozen=True)
class _Emission:
    text: str
    tokens: TokenSequence
    # (kind, index) per token; kind in {"atom", "bond", "ring", "open", "close"}
    owners: tuple[tuple[str, int], ...]
    order: tuple[int, ...]  # atom indices by canonical rank


@dataclass(frozen=True, eq=False)
class Fragment:
    """An immutable, validated molecular graph with attachment wildcards.

    Equality and hashing follow the canonical form, so two fragments compare
    equal exactly when they are isomorphic.
    """

    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    _adj: tuple[tuple[tuple[int, int], ...], ...] = field(repr=False, compare=False, default=())

    @classmethod
    def build(cls, atoms: Iterable[Atom], bonds: Iterable[Bond], strict: bool = True) -> "Fragment":
        """Construct from explicit atoms (with hydrogen counts) and bonds.

        ``strict=False`` skips the aromatic-ring and attachment-numbering
        rules; it is used for substructure patterns such as MCS results.
        """
        atoms = tuple(atoms)
        bonds = tuple(Bond(min(b[0], b[1]), max(b[0], b[1]), BondOrder(b[2])) for b in bonds)
        _validate(atoms, bonds, strict)
        adj: list[list[tuple[int, int]]] = [[] for _ in atoms]
        for k, b in enumerate(bonds):
            adj[b.begin].append((b.end, k))
            adj[b.end].append((b.begin, k))
        return cls(atoms, bonds, tuple(tuple(a) for a in adj))

    def __len__(self) -> int:
        return len(self.atoms)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Fragment):
            return NotImplemented
        return self.canonical == other.canonical

    def __hash__(self) -> int:
        return hash(self.canonical)

    def __str__(self) -> str:
        return self.canonical

    def neighbors(self, atom: int) -> tuple[tuple[int, int], ...]:
        """(neighbor index, bond index) pairs."""
        return self._adj[atom]

    def degree(self, atom: int) -> int:
        return len(self._adj[atom])

    def bond_between(self, a: int, b: int) -> Bond | None:
        for nbr, k in self._adj[a]:
            if nbr == b:
                return self.bonds[k]
        return None

    def bond_valence(self, atom: int) -> int:
        return sum(self.bonds[k].order.valence for _, k in self._adj[atom])

    @property
    def heavy_atom_count(self) -> int:
        return sum(1 for a in self.atoms if not a.is_wildcard)

    @property
    def attachment_count(self) -> int:
        return sum(1 for a in self.atoms if a.is_wildcard)

    @cached_property
    def ring_bonds(self) -> frozenset[int]:
        bridges = bridge_bonds(len(self.atoms), self.bonds)
        return frozenset(k for k in range(len(self.bonds)) if k not in bridges)

    @cached_property
    def _emission(self) -> _Emission:
        return _canonical_emission(self)

    @property
    def canonical(self) -> str:
        return self._emission.text

    @property
    def canonical_tokens(self) -> TokenSequence:
        return self._emission.tokens

    @property
    def canonical_owners(self) -> tuple[tuple[str, int], ...]:
        return self._emission.owners

    @property
    def canonical_order(self) -> tuple[int, ...]:
        """Atom indices sorted by canonical rank."""
        return self._emission.order

    def relabel(self, permutation: Sequence[int]) -> "Fragment":
        """Return an isomorphic copy where old atom ``i`` becomes ``permutation[i]``."""
        atoms: list[Atom | None] = [None] * len(self.atoms)
        for old, new in enumerate(permutation):
            atoms[new] = self.atoms[old]
        bonds = [(permutation[b.begin], permutation[b.end], b.order) for b in self.bonds]
        return Fragment.build(atoms, bonds, strict=False)  # type: ignore[arg-type]


def attachment_count(f: Fragment) -> int:
    return f.attachment_count


def molecular_weight(f: Fragment) -> float:
    """Heavy atoms plus attached hydrogens; wildcards contribute nothing."""
    total = 0.0
    for atom in f.atoms:
        if atom.is_wildcard:
            continue
        total += ATOMIC_WEIGHT[atom.element] + atom.hcount * ATOMIC_WEIGHT["H"]
    return total


# -- canonical ranking -------------------------------------------------------

def _dense_rank(keys: Sequence) -> list[int]:
    distinct = sorted(set(keys))
    index = {k: i for i, k in enumerate(distinct)}
    return [index[k] for k in keys]


def atom_invariant(f: Fragment, i: int) -> tuple:
    atom = f.atoms[i]
    return (
        0 if atom.is_wildcard else 1,
        atom.map_number or 0,
        ATOMIC_NUMBER[atom.element],
        int(atom.aromatic),
        f.degree(i),
        atom.charge,
        atom.hcount,
    )


def _refine(f: Fragment, ranks: list[int]) -> list[int]:
    n_classes = len(set(ranks))
    while True:
        keys = [
            (ranks[i], tuple(sorted((int(f.bonds[k].order), ranks[j]) for j, k in f.neighbors(i))))
            for i in range(len(ranks))
        ]
        new = _dense_rank(keys)
        count = len(set(new))
        if count == n_classes:
            return new
        ranks, n_classes = new, count


def initial_ranks(f: Fragment) -> list[int]:
    """Refined neighborhood classes (Morgan-style) before tie breaking."""
    return _refine(f, _dense_rank([atom_invariant(f, i) for i in range(len(f.atoms))]))


def _bond_symbol(f: Fragment, bond: Bond) -> str:
    if bond.order is BondOrder.DOUBLE:
        return "="
    if bond.order is BondOrder.TRIPLE:
        return "#"
    if bond.order is BondOrder.SINGLE:
        if f.atoms[bond.begin].aromatic and f.atoms[bond.end].aromatic:
            return "-"
    return ""


def atom_token(f: Fragment, i: int) -> str:
    atom = f.atoms[i]
    if atom.is_wildcard:
        return f"[*:{atom.map_number}]"
    if atom.charge == 0 and atom.hcount == default_hcount(atom.element, atom.aromatic, f.bond_valence(i)):
        return atom.symbol
    text = "[" + atom.symbol
    if atom.charge:
        sign = "+" if atom.charge > 0 else "-"
        text += sign if abs(atom.charge) == 1 else f"{sign}{abs(atom.charge)}"
    if atom.hcount:
        text += "H" if atom.hcount == 1 else f"H{atom.hcount}"
    return text + "]"


def _ring_label(digit: int) -> str:
    return str(digit) if digit < 10 else f"%{digit}"


def emit(f: Fragment, ranks: Sequence[int]) -> _Emission:
    """Depth-first emission following ``ranks`` (lower rank visited first)."""
    n = len(f.atoms)
    start = min(range(n), key=lambda i: ranks[i])

    # First pass: spanning tree and ring-closure bonds.
    visited = [False] * n
    children: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    ring_open: list[list[int]] = [[] for _ in range(n)]
    ring_close: list[list[int]] = [[] for _ in range(n)]
    seen_bond = [False] * len(f.bonds)
    sorted_nbrs = [sorted(f.neighbors(i), key=lambda p: ranks[p[0]]) for i in range(n)]
    visited[start] = True
    stack = [(start, iter(sorted_nbrs[start]))]
    while stack:
        node, it = stack[-1]
        for nbr, k in it:
            if seen_bond[k]:
                continue
            seen_bond[k] = True
            if visited[nbr]:
                ring_open[nbr].append(k)
                ring_close[node].append(k)
                continue
            visited[nbr] = True
            children[node].append((nbr, k))
            stack.append((nbr, iter(sorted_nbrs[nbr])))
            break
        else:
            stack.pop()

    tokens: list[str] = []
    owners: list[tuple[str, int]] = []
    order: list[int] = []
    digits: dict[int, int] = {}
    free: list[int] = []
    next_digit = 1

    work: list[tuple] = [("atom", start, -1)]
    while work:
        item = work.pop()
        if item[0] == "tok":
            tokens.append(item[1])
            owners.append(item[2])
            continue
        _, a, via = item
        order.append(a)
        if via >= 0:
            sym = _bond_symbol(f, f.bonds[via])
            if sym:
                tokens.append(sym)
                owners.append(("bond", via))
        tokens.append(atom_token(f, a))
        owners.append(("atom", a))
        for k in sorted(ring_close[a], key=lambda k: digits[k]):
            d = digits.pop(k)
            tokens.append(_ring_label(d))
            owners.append(("ring", k))
            free.append(d)
        free.sort()
        for k in sorted(ring_open[a], key=lambda k: ranks[f.bonds[k].other(a)]):
            if free:
                d = free.pop(0)
            else:
                d = next_digit
                next_digit += 1
            digits[k] = d
            sym = _bond_symbol(f, f.bonds[k])
            if sym:
                tokens.append(sym)
                owners.append(("bond", k))
            tokens.append(_ring_label(d))
            owners.append(("ring", k))
        kids = children[a]
        for pos in range(len(kids) - 1, -1, -1):
            c, k = kids[pos]
            if pos == len(kids) - 1:
                work.append(("atom", c, k))
            else:
                work.append(("tok", ")", ("close", c)))
                work.append(("atom", c, k))
                work.append(("tok", "(", ("open", c)))
    return _Emission("".join(tokens), tuple(tokens), tuple(owners), tuple(order))


def _orbit_of(u: int, gens: list[list[int]]) -> set[int]:
    orbit = {u}
    frontier = [u]
    while frontier:
        x = frontier.pop()
        for g in gens:
            y = g[x]
            if y not in orbit:
                orbit.add(y)
                frontier.append(y)
    return orbit


def _canonical_emission(f: Fragment) -> _Emission:
    """Search over tie-breaking choices and keep the smallest emitted string.

    Each search node individualizes one atom of the first non-singleton
    class and refines again. Leaves that emit identical strings reveal
    automorphisms, which prune equivalent siblings.
    """
    n = len(f.atoms)
    best: list[_Emission | None] = [None]
    first_leaf: dict[str, tuple[int, ...]] = {}
    automorphisms: list[list[int]] = []

    def leaf(ranks: list[int]) -> None:
        em = emit(f, ranks)
        order = tuple(sorted(range(n), key=lambda i: ranks[i]))
        if em.text in first_leaf:
            ref = first_leaf[em.text]
            perm = [0] * n
            for a, b in zip(ref, order):
                perm[a] = b
            automorphisms.append(perm)
        else:
            first_leaf[em.text] = order
        if best[0] is None or em.text < best[0].text:
            best[0] = _Emission(em.text, em.tokens, em.owners, order)

    def search(ranks: list[int], path: tuple[int, ...]) -> None:
        counts: dict[int, list[int]] = {}
        for i, r in enumerate(ranks):
            counts.setdefault(r, []).append(i)
        cell = next((counts[r] for r in sorted(counts) if len(counts[r]) > 1), None)
        if cell is None:
            leaf(ranks)
            return
        explored: list[int] = []
        for v in cell:
            if explored:
                gens = [g for g in automorphisms if all(g[p] == p for p in path)]
                if gens and any(v in _orbit_of(u, gens) for u in explored):
                    continue
            keys = [(ranks[i], 0 if i == v else 1) for i in range(n)]
            search(_refine(f, _dense_rank(keys)), path + (v,))
            explored.append(v)

    search(initial_ranks(f), ())
    assert best[0] is not None
    return best[0]


def canonicalize(f: Fragment) -> str:
    """Canonical string: identical for isomorphic fragments, re-parses to ``f``."""
    return f.canonical


def canonical_string(text: str) -> str:
    return parse_fragment(text).canonical


__all__ = [
    "AttachmentError", "Atom", "Bond", "BondOrder", "DisconnectedError", "Fragment",
    "FragmentError", "FragmentSyntaxError", "LexError", "TokenSequence", "ValenceError",
    "attachment_count", "canonical_string", "canonicalize", "detokenize", "emit",
    "molecular_weight", "parse_fragment", "tokenize",
]
