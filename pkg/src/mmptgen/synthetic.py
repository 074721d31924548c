"""Seeded generators for random fragments, molecules and toy MMPT corpora.

Used by the test suite, the acceptance harness and the ``demo-corpus`` CLI
command; nothing here is needed for the pipeline proper.
"""

from __future__ import annotations

import random
from typing import Sequence

from mmptgen.fragment import (
    Atom,
    Bond,
    BondOrder,
    DEFAULT_VALENCES,
    Fragment,
    FragmentError,
    default_hcount,
)

_ELEMENTS = ("C", "C", "C", "C", "C", "N", "N", "O", "O", "F", "Cl", "S", "Br")
_RING_VARIANTS = ("cccccc", "ccccnc", "cccncc", "cnccnc")


def _capacity(atoms: list[Atom], valence: list[int], i: int) -> int:
    atom = atoms[i]
    return DEFAULT_VALENCES[atom.element][0] - valence[i] - (1 if atom.aromatic else 0)


def random_fragment(
    rng: random.Random,
    n_heavy: int,
    n_attach: int = 0,
    ring_prob: float = 0.3,
    aromatic_prob: float = 0.3,
    elements: Sequence[str] = _ELEMENTS,
    max_tries: int = 200,
) -> Fragment:
    """Draw a valid fragment with ``n_heavy`` heavy atoms and ``n_attach`` wildcards."""
    for _ in range(max_tries):
        frag = _try_fragment(rng, n_heavy, n_attach, ring_prob, aromatic_prob, elements)
        if frag is not None:
            return frag
    raise RuntimeError(f"could not draw a fragment with {n_heavy} atoms and {n_attach} attachments")


def _try_fragment(rng, n_heavy, n_attach, ring_prob, aromatic_prob, elements):
    atoms: list[Atom] = []
    bonds: list[tuple[int, int, BondOrder]] = []
    valence: list[int] = []

    def add_bond(a: int, b: int, order: BondOrder) -> None:
        bonds.append((a, b, order))
        valence[a] += order.valence
        valence[b] += order.valence

    if n_heavy >= 6 and rng.random() < aromatic_prob:
        ring = rng.choice(_RING_VARIANTS)
        for ch in ring:
            atoms.append(Atom(ch.upper(), aromatic=True))
            valence.append(0)
        for k in range(6):
            add_bond(k, (k + 1) % 6, BondOrder.AROMATIC)
    else:
        atoms.append(Atom(rng.choice(elements)))
        valence.append(0)

    while len(atoms) < n_heavy:
        open_atoms = [i for i in range(len(atoms)) if _capacity(atoms, valence, i) > 0]
        if not open_atoms:
            return None
        parent = rng.choice(open_atoms)
        elem = rng.choice(elements)
        atoms.append(Atom(elem))
        valence.append(0)
        child = len(atoms) - 1
        order = BondOrder.SINGLE
        room = min(_capacity(atoms, valence, parent), DEFAULT_VALENCES[elem][0])
        if not atoms[parent].aromatic and room >= 2 and rng.random() < 0.15:
            order = BondOrder.DOUBLE
        add_bond(parent, child, order)

    if rng.random() < ring_prob and len(atoms) >= 4:
        adjacent = {(min(a, b), max(a, b)) for a, b, _ in bonds}
        pairs = [
            (a, b)
            for a in range(len(atoms))
            for b in range(a + 1, len(atoms))
            if (a, b) not in adjacent
            and not atoms[a].aromatic and not atoms[b].aromatic
            and _capacity(atoms, valence, a) > 0 and _capacity(atoms, valence, b) > 0
        ]
        if pairs:
            a, b = rng.choice(pairs)
            add_bond(a, b, BondOrder.SINGLE)

    for m in range(1, n_attach + 1):
        hosts = [i for i in range(len(atoms)) if not atoms[i].is_wildcard
                 and _capacity(atoms, valence, i) > 0]
        if not hosts:
            return None
        host = rng.choice(hosts)
        atoms.append(Atom("*", map_number=m))
        valence.append(0)
        add_bond(host, len(atoms) - 1, BondOrder.SINGLE)

    final = []
    for i, atom in enumerate(atoms):
        if atom.is_wildcard:
            final.append(atom)
        else:
            final.append(Atom(atom.element, atom.aromatic, 0,
                              default_hcount(atom.element, atom.aromatic, valence[i])))
    try:
        return Fragment.build(final, [Bond(a, b, o) for a, b, o in bonds])
    except FragmentError:
        return None


def random_permutation(rng: random.Random, n: int) -> list[int]:
    perm = list(range(n))
    rng.shuffle(perm)
    return perm


SYNTHETIC_CORES = (
    "[*:1]c1ccc({})cc1",
    "[*:1]c1cccc({})c1",
    "[*:1]c1ccc({})nc1",
    "[*:1]CC{}",
    "[*:1]CCC{}",
    "[*:1]OC{}",
    "[*:1]C(=O)N{}",
    "[*:1]C1CCN({})CC1",
)
SYNTHETIC_SUBSTITUENTS = (
    "C", "CC", "O", "OC", "N", "F", "Cl", "Br", "C#N", "C(F)(F)F", "N(C)C", "C(C)C", "OCC", "C(=O)C",
)


def synthetic_variables(
    cores: Sequence[str] = SYNTHETIC_CORES,
    substituents: Sequence[str] = SYNTHETIC_SUBSTITUENTS,
) -> dict[tuple[int, int], str]:
    """Canonical variable for every (core, substituent) combination."""
    from mmptgen.fragment import parse_fragment

    return {
        (c, s): parse_fragment(core.format(sub)).canonical
        for c, core in enumerate(cores)
        for s, sub in enumerate(substituents)
    }


def synthetic_mmpt_database(
    seed: int = 0,
    n_transformations: int = 500,
    same_core_prob: float = 0.75,
    max_count: int = 3,
):
    """Symmetric toy MMPT database over core x substituent variable families.

    Pairs mostly swap the substituent on a shared core (otherwise the core
    under a shared substituent), so inputs have close structural neighbors
    whose outputs overlap, as in real matched-pair data. Both directions of
    each pair are recorded with the same count.
    """
    from mmptgen.mmp import MmptDatabase, MmptRecord

    if n_transformations % 2:
        raise ValueError("n_transformations must be even (records come in both directions)")
    rng = random.Random(seed)
    variables = synthetic_variables()
    n_cores, n_subs = len(SYNTHETIC_CORES), len(SYNTHETIC_SUBSTITUENTS)
    pairs: dict[tuple[str, str], int] = {}
    limit = n_cores * n_subs * (n_subs - 1) // 2 + n_subs * n_cores * (n_cores - 1) // 2
    if n_transformations // 2 > limit:
        raise ValueError("more transformations requested than the families allow")
    while len(pairs) < n_transformations // 2:
        if rng.random() < same_core_prob:
            c = rng.randrange(n_cores)
            s1, s2 = rng.sample(range(n_subs), 2)
            a, b = variables[(c, s1)], variables[(c, s2)]
        else:
            s = rng.randrange(n_subs)
            c1, c2 = rng.sample(range(n_cores), 2)
            a, b = variables[(c1, s)], variables[(c2, s)]
        key = (min(a, b), max(a, b))
        if key not in pairs:
            pairs[key] = rng.randint(1, max_count)
    records = []
    for (a, b), count in sorted(pairs.items()):
        records.append(MmptRecord(a, b, count=count))
        records.append(MmptRecord(b, a, count=count))
    return MmptDatabase(records)
