"""Maximum common connected substructure and labeled subgraph embedding.

Atoms match on element and aromaticity (wildcards only match wildcards),
bonds match on order. Common subgraphs are not required to be induced: a
bond present in one fragment but not the other is simply left out.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from mmptgen.fragment import Atom, Bond, Fragment, default_hcount


class NoCommonSubstructure(ValueError):
    pass


def atom_label(atom: Atom, with_charge: bool = False) -> tuple:
    if atom.is_wildcard:
        return ("*",)
    if with_charge:
        return (atom.element, atom.aromatic, atom.charge)
    return (atom.element, atom.aromatic)


def find_embedding(pattern: Fragment, target: Fragment, with_charge: bool = False) -> dict[int, int] | None:
    """Injective map of ``pattern`` atoms onto ``target`` preserving labels and bonds."""
    n = len(pattern.atoms)
    if n > len(target.atoms):
        return None
    p_labels = [atom_label(a, with_charge) for a in pattern.atoms]
    t_labels = [atom_label(a, with_charge) for a in target.atoms]

    # Visit pattern atoms breadth-first so each one after the first has a mapped neighbor.
    order = [0]
    seen = {0}
    for node in order:
        for nbr, _ in sorted(pattern.neighbors(node), key=lambda p: -pattern.degree(p[0])):
            if nbr not in seen:
                seen.add(nbr)
                order.append(nbr)
    if len(order) != n:
        return None

    mapping: dict[int, int] = {}
    used: set[int] = set()

    def consistent(p: int, t: int) -> bool:
        if p_labels[p] != t_labels[t] or target.degree(t) < pattern.degree(p):
            return False
        for nbr, k in pattern.neighbors(p):
            if nbr in mapping:
                tb = target.bond_between(t, mapping[nbr])
                if tb is None or tb.order != pattern.bonds[k].order:
                    return False
        return True

    def candidates(p: int) -> Sequence[int]:
        for nbr, _ in pattern.neighbors(p):
            if nbr in mapping:
                return [t for t, _ in target.neighbors(mapping[nbr])]
        return range(len(target.atoms))

    def extend(depth: int) -> bool:
        if depth == n:
            return True
        p = order[depth]
        for t in candidates(p):
            if t in used or not consistent(p, t):
                continue
            mapping[p] = t
            used.add(t)
            if extend(depth + 1):
                return True
            del mapping[p]
            used.discard(t)
        return False

    return dict(mapping) if extend(0) else None


def has_substructure(pattern: Fragment, target: Fragment) -> bool:
    return find_embedding(pattern, target, with_charge=True) is not None


@dataclass(frozen=True)
class McsResult:
    pairs: tuple[tuple[int, int], ...]   # (atom in a, atom in b)
    bonds: tuple[int, ...]               # matched bond indices in a
    fragment: Fragment

    @property
    def n_atoms(self) -> int:
        return len(self.pairs)

    @property
    def n_heavy(self) -> int:
        return self.fragment.heavy_atom_count


def _pattern_fragment(a: Fragment, atoms: Sequence[int], bonds: Sequence[int]) -> Fragment:
    index = {old: new for new, old in enumerate(atoms)}
    new_bonds = [Bond(index[a.bonds[k].begin], index[a.bonds[k].end], a.bonds[k].order) for k in bonds]
    valence = [0] * len(atoms)
    for b in new_bonds:
        valence[b.begin] += b.order.valence
        valence[b.end] += b.order.valence
    new_atoms = []
    for new, old in enumerate(atoms):
        atom = a.atoms[old]
        if atom.is_wildcard:
            new_atoms.append(atom)
        else:
            new_atoms.append(Atom(atom.element, atom.aromatic, 0,
                                  default_hcount(atom.element, atom.aromatic, valence[new])))
    return Fragment.build(new_atoms, new_bonds, strict=False)


def mcs_match(a: Fragment, b: Fragment) -> McsResult:
    """Exact maximum common connected substructure by branch and bound.

    Maximizes matched heavy atoms, then all matched atoms (wildcards
    included), then matched bonds. The search visits atoms in canonical rank
    order, so the first optimum found is the same for any atom numbering of
    the inputs.

    Raises:
        NoCommonSubstructure: no atom label is shared.
    """
    la = [atom_label(x) for x in a.atoms]
    lb = [atom_label(x) for x in b.atoms]
    rank_a = {atom: r for r, atom in enumerate(a.canonical_order)}
    rank_b = {atom: r for r, atom in enumerate(b.canonical_order)}
    order_a = list(a.canonical_order)
    order_b = list(b.canonical_order)
    nbrs_a = [sorted(a.neighbors(i), key=lambda p: rank_a[p[0]]) for i in range(len(a.atoms))]

    heavy_a = [not x.is_wildcard for x in a.atoms]
    best: list = [(0, 0, -1), (), ()]  # (heavy, atoms, bonds), pairs, bond ids

    mapping: dict[int, int] = {}
    used_b: set[int] = set()
    matched_bonds: list[int] = []
    excluded: set[int] = set()               # earlier seeds, never matched again
    blocked: dict[int, frozenset] = {}       # atom -> mapped neighbors it was refused through
    n_heavy = [0]

    def reachable() -> list[int]:
        seen = set(mapping)
        frontier = list(mapping)
        out = []
        while frontier:
            x = frontier.pop()
            for y, _ in a.neighbors(x):
                if y not in seen and y not in excluded:
                    seen.add(y)
                    out.append(y)
                    frontier.append(y)
        return out

    def bound(reach: list[int]) -> tuple[int, int, int]:
        counts: dict[tuple, int] = {}
        for x in reach:
            counts[la[x]] = counts.get(la[x], 0) + 1
        free_b: dict[tuple, int] = {}
        for y in range(len(b.atoms)):
            if y not in used_b:
                free_b[lb[y]] = free_b.get(lb[y], 0) + 1
        extra_heavy = extra = 0
        for lab, c in counts.items():
            k = min(c, free_b.get(lab, 0))
            extra += k
            if lab != ("*",):
                extra_heavy += k
        pool = set(mapping) | set(reach)
        reach_set = set(reach)
        extra_bonds = sum(
            1 for bond in a.bonds
            if (bond.begin in reach_set or bond.end in reach_set)
            and bond.begin in pool and bond.end in pool
        )
        return n_heavy[0] + extra_heavy, len(mapping) + extra, len(matched_bonds) + extra_bonds

    def search() -> None:
        score = (n_heavy[0], len(mapping), len(matched_bonds))
        if score > best[0]:
            best[0] = score
            best[1] = tuple(sorted(mapping.items()))
            best[2] = tuple(sorted(matched_bonds))
        reach = reachable()
        if not reach or bound(reach) <= best[0]:
            return
        # An atom refused through its current mapped neighbors may still join
        # later through a neighbor that is not mapped yet.
        frontier = [
            x for x in reach
            if any(y in mapping and y not in blocked.get(x, ()) for y, _ in a.neighbors(x))
        ]
        if not frontier:
            return
        u = min(frontier, key=lambda x: rank_a[x])
        for v in order_b:
            if v in used_b or lb[v] != la[u]:
                continue
            new_bonds = []
            for w, k in nbrs_a[u]:
                if w in mapping:
                    bb = b.bond_between(v, mapping[w])
                    if bb is not None and bb.order == a.bonds[k].order:
                        new_bonds.append(k)
            if not new_bonds:
                continue
            mapping[u] = v
            used_b.add(v)
            n_heavy[0] += heavy_a[u]
            matched_bonds.extend(new_bonds)
            search()
            del matched_bonds[len(matched_bonds) - len(new_bonds):]
            n_heavy[0] -= heavy_a[u]
            used_b.discard(v)
            del mapping[u]
        previous = blocked.get(u)
        blocked[u] = frozenset(y for y, _ in a.neighbors(u) if y in mapping) | (previous or frozenset())
        search()
        if previous is None:
            del blocked[u]
        else:
            blocked[u] = previous

    # Seeds are heavy atoms only; a wildcard joins through its single bond.
    for s in order_a:
        if a.atoms[s].is_wildcard:
            continue
        for t in order_b:
            if lb[t] != la[s]:
                continue
            mapping[s] = t
            used_b.add(t)
            n_heavy[0] = 1
            search()
            n_heavy[0] = 0
            used_b.discard(t)
            del mapping[s]
        excluded.add(s)
    if best[0][0] == 0:
        raise NoCommonSubstructure("fragments share no heavy-atom label")
    pairs = best[1]
    frag = _pattern_fragment(a, [p for p, _ in pairs], best[2])
    return McsResult(pairs, best[2], frag)


def mcs(a: Fragment, b: Fragment) -> Fragment:
    """The maximum common connected substructure of ``a`` and ``b`` as a pattern fragment."""
    return mcs_match(a, b).fragment


def mcs_many(fragments: Sequence[Fragment]) -> Fragment:
    """Fold pairwise MCS over ``fragments`` in canonical order, re-verified against all."""
    if not fragments:
        raise ValueError("no fragments")
    members = sorted(fragments, key=lambda f: f.canonical)
    common = members[0]
    for other in members[1:]:
        common = mcs(common, other)
    while True:
        failing = [m for m in members if find_embedding(common, m) is None]
        if not failing:
            return common
        common = mcs(common, failing[0])


def _similarity(a: Fragment, b: Fragment) -> float:
    smaller = min(a.heavy_atom_count, b.heavy_atom_count)
    if smaller == 0:
        raise ValueError("fragments must have heavy atoms")
    try:
        result = mcs_match(a, b)
    except NoCommonSubstructure:
        return 0.0
    return result.n_heavy / smaller


# Fragments hash and compare by canonical form, so the cache is isomorphism-aware.
_similarity_cached = lru_cache(maxsize=200_000)(_similarity)


def shared_substructure_similarity(a: Fragment, b: Fragment) -> float:
    """MCS heavy-atom count normalized by the smaller fragment."""
    if a.canonical == b.canonical:
        return 1.0
    if b.canonical < a.canonical:
        a, b = b, a
    return _similarity_cached(a, b)
