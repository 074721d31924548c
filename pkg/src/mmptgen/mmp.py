"""Matched molecular pair extraction: cut enumeration, pairing, filters, splits."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import random
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

from mmptgen.fragment import (
    Atom,
    Bond,
    BondOrder,
    Fragment,
    FragmentError,
    molecular_weight,
    parse_fragment,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_VARIABLE_RATIO = 0.33
DEFAULT_MIN_MOL_WEIGHT = 200.0
DEFAULT_TRAIN_FRAC = 0.9

TSV_COLUMNS = ("from_variable", "to_variable", "constant", "left_id", "right_id", "count", "split")


class Split(NamedTuple):
    constant: str
    variable: str


@dataclass(frozen=True)
class MmptRecord:
    """One directed transformation ``from_variable -> to_variable`` (canonical strings).

    ``constant``, ``left_id`` and ``right_id`` describe the first matched pair
    (in sorted order) that produced the transformation; ``count`` is the
    number of ordered matched pairs aggregated into it.
    """

    from_variable: str
    to_variable: str
    constant: str = ""
    left_id: str = ""
    right_id: str = ""
    count: int = 1
    split: str = ""

    @property
    def key(self) -> tuple[str, str]:
        return (self.from_variable, self.to_variable)


@dataclass
class MmptDatabase:
    records: list[MmptRecord]
    by_input: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.reindex()

    def reindex(self) -> None:
        self.by_input = defaultdict(list)
        for i, rec in enumerate(self.records):
            self.by_input[rec.from_variable].append(i)
        self.by_input = dict(self.by_input)

    def __len__(self) -> int:
        return len(self.records)

    def inputs(self) -> list[str]:
        return sorted(self.by_input)

    def outputs_for(self, variable: str) -> list[str]:
        return sorted({self.records[i].to_variable for i in self.by_input.get(variable, ())})

    def transformations(self) -> list[tuple[str, str]]:
        return sorted({r.key for r in self.records})

    def subset(self, split: str) -> "MmptDatabase":
        return MmptDatabase([r for r in self.records if r.split == split])

    def train(self) -> "MmptDatabase":
        """Train-tagged records; the whole database when nothing is tagged."""
        if not any(r.split for r in self.records):
            return self
        return self.subset("train")

    def targets(self) -> set[str]:
        return {r.to_variable for r in self.records}

    def pairs(self) -> set[tuple[str, str]]:
        return {r.key for r in self.records}

    def to_tsv(self, path: str | Path) -> None:
        with open(path, "x", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(TSV_COLUMNS)
            for r in self.records:
                writer.writerow([r.from_variable, r.to_variable, r.constant,
                                 r.left_id, r.right_id, r.count, r.split])

    @classmethod
    def from_tsv(cls, path: str | Path, canonicalize: bool = False) -> "MmptDatabase":
        records = []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh, delimiter="\t")
            missing = {"from_variable", "to_variable"} - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: missing TSV columns {sorted(missing)}")
            for row in reader:
                src, dst = row["from_variable"], row["to_variable"]
                if canonicalize:
                    src, dst = parse_fragment(src).canonical, parse_fragment(dst).canonical
                records.append(MmptRecord(
                    src, dst,
                    row.get("constant") or "",
                    row.get("left_id") or "",
                    row.get("right_id") or "",
                    int(row.get("count") or 1),
                    row.get("split") or "",
                ))
        return cls(records)


@dataclass(frozen=True)
class ExtractionReport:
    molecules_in: int
    molecules_kept: int
    rejected_parse: int
    rejected_weight: int
    rejected_filter: int
    matched_pairs: int
    distinct_transformations: int
    distinct_unordered: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


# -- cutting -----------------------------------------------------------------

def cuttable_bonds(m: Fragment) -> list[int]:
    """Acyclic single bonds between two heavy atoms."""
    out = []
    for k, b in enumerate(m.bonds):
        if b.order is not BondOrder.SINGLE or k in m.ring_bonds:
            continue
        if m.atoms[b.begin].is_wildcard or m.atoms[b.end].is_wildcard:
            continue
        out.append(k)
    return out


def _cut(m: Fragment, cut: Sequence[int]) -> list[tuple[list[Atom], list[Bond], list[int]]]:
    """Remove ``cut`` bonds, capping both ends with wildcards.

    Returns one ``(atoms, bonds, cut_ids)`` piece per component; the wildcard
    that replaces cut bond ``cut[j]`` carries map number ``j + 1`` on both sides.
    """
    atoms = list(m.atoms)
    bonds = [b for k, b in enumerate(m.bonds) if k not in set(cut)]
    for j, k in enumerate(cut):
        b = m.bonds[k]
        for host in (b.begin, b.end):
            atoms.append(Atom("*", map_number=j + 1))
            bonds.append(Bond(host, len(atoms) - 1, BondOrder.SINGLE))

    parent = list(range(len(atoms)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for b in bonds:
        parent[find(b.begin)] = find(b.end)
    groups: dict[int, list[int]] = defaultdict(list)
    for i in range(len(atoms)):
        groups[find(i)].append(i)

    pieces = []
    for members in sorted(groups.values()):
        index = {old: new for new, old in enumerate(members)}
        piece_atoms = [atoms[i] for i in members]
        piece_bonds = [Bond(index[b.begin], index[b.end], b.order)
                       for b in bonds if b.begin in index]
        cut_ids = sorted(a.map_number for a in piece_atoms if a.is_wildcard)
        pieces.append((piece_atoms, piece_bonds, cut_ids))
    return pieces


def _renumber(atoms: list[Atom], mapping: dict[int, int]) -> list[Atom]:
    return [replace(a, map_number=mapping[a.map_number]) if a.is_wildcard else a for a in atoms]


def _single_cut_splits(m: Fragment, k: int) -> list[tuple[Split, Fragment, Fragment]]:
    (a_atoms, a_bonds, _), (b_atoms, b_bonds, _) = _cut(m, [k])
    fa = Fragment.build(a_atoms, a_bonds)
    fb = Fragment.build(b_atoms, b_bonds)
    return [(Split(fa.canonical, fb.canonical), fa, fb),
            (Split(fb.canonical, fa.canonical), fb, fa)]


def _multi_cut_split(m: Fragment, cut: Sequence[int]) -> tuple[Split, int] | None:
    pieces = _cut(m, cut)
    n = len(cut)
    central = [p for p in pieces if len(p[2]) == n]
    others = [p for p in pieces if len(p[2]) == 1]
    if len(central) != 1 or len(others) != n:
        return None
    v_atoms, v_bonds, _ = central[0]
    # Constant pieces are keyed by their canonical form with a placeholder label.
    labelled = []
    for atoms, bonds, (cid,) in others:
        probe = Fragment.build(_renumber(atoms, {cid: 1}), bonds)
        labelled.append((probe.canonical, cid, atoms, bonds))
    labelled.sort(key=lambda t: t[0])
    strings = [t[0] for t in labelled]
    # Identical constant pieces are interchangeable: keep the labelling that
    # gives the smallest variable string.
    groups = [list(g) for _, g in itertools.groupby(range(n), key=lambda i: strings[i])]
    best_var: str | None = None
    best_map: dict[int, int] | None = None
    for perms in itertools.product(*(itertools.permutations(g) for g in groups)):
        order = [i for p in perms for i in p]
        mapping = {labelled[src][1]: pos + 1 for pos, src in enumerate(order)}
        var = Fragment.build(_renumber(v_atoms, mapping), v_bonds).canonical
        if best_var is None or var < best_var:
            best_var, best_map = var, mapping
    assert best_map is not None and best_var is not None
    parts = []
    for _, cid, atoms, bonds in labelled:
        piece = Fragment.build(_renumber(atoms, {cid: best_map[cid]}), bonds, strict=False)
        parts.append(piece.canonical)
    heavy = sum(1 for a in v_atoms if not a.is_wildcard)
    return Split(".".join(sorted(parts)), best_var), heavy


def fragment_molecule(m: Fragment, max_cuts: int = 1) -> set[Split]:
    """Enumerate (constant, variable) splits over acyclic single-bond cuts.

    With one cut both orientations are returned. With two or three cuts the
    variable is the piece touching every cut and the constant is the
    ``.``-joined set of remaining pieces.
    """
    return {split for split, _ in _iter_splits(m, max_cuts)}


def _iter_splits(m: Fragment, max_cuts: int) -> Iterator[tuple[Split, int]]:
    """Yield each split with the heavy-atom count of its variable."""
    if not 1 <= max_cuts <= 3:
        raise ValueError("max_cuts must be between 1 and 3")
    bonds = cuttable_bonds(m)
    for k in bonds:
        for split, _, var in _single_cut_splits(m, k):
            yield split, var.heavy_atom_count
    for n in range(2, max_cuts + 1):
        for cut in itertools.combinations(bonds, n):
            found = _multi_cut_split(m, cut)
            if found is not None:
                yield found


def substitute(constant: Fragment, variable: Fragment) -> Fragment:
    """Join ``variable`` into ``constant`` at matching attachment numbers."""
    c_n = len(constant.atoms)
    atoms = list(constant.atoms) + list(variable.atoms)
    bonds = list(constant.bonds) + [Bond(b.begin + c_n, b.end + c_n, b.order) for b in variable.bonds]

    def wildcards(frag: Fragment, offset: int) -> dict[int, int]:
        return {a.map_number: i + offset for i, a in enumerate(frag.atoms) if a.is_wildcard}

    cw, vw = wildcards(constant, 0), wildcards(variable, c_n)
    removed: set[int] = set()
    new_bonds: list[Bond] = []
    for num in sorted(set(cw) & set(vw)):
        ci, vi = cw[num], vw[num]
        ch = next(b.other(ci) for b in bonds if ci in (b.begin, b.end))
        vh = next(b.other(vi) for b in bonds if vi in (b.begin, b.end))
        removed.update((ci, vi))
        new_bonds.append(Bond(ch, vh, BondOrder.SINGLE))
    keep = [i for i in range(len(atoms)) if i not in removed]
    index = {old: new for new, old in enumerate(keep)}
    final_bonds = [Bond(index[b.begin], index[b.end], b.order)
                   for b in bonds + new_bonds if b.begin in index and b.end in index]
    final_atoms = [atoms[i] for i in keep]
    strict = not any(a.is_wildcard for a in final_atoms)
    return Fragment.build(final_atoms, final_bonds, strict=strict)


def variable_ratio(variable: Fragment, whole: Fragment) -> float:
    """Heavy atoms of ``variable`` over heavy atoms of ``whole`` (wildcards excluded)."""
    total = whole.heavy_atom_count
    if total == 0:
        raise ValueError("whole has no heavy atoms")
    return variable.heavy_atom_count / total


# -- database ----------------------------------------------------------------

MoleculePredicate = Callable[[Fragment], bool]


def read_corpus(path: str | Path) -> list[tuple[str, str]]:
    """Read ``{"id": ..., "smiles": ...}`` JSON lines."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "id" not in obj or "smiles" not in obj:
                raise ValueError(f"{path}:{lineno}: expected keys 'id' and 'smiles'")
            out.append((str(obj["id"]), str(obj["smiles"])))
    return out


def alert_predicate(alerts: Iterable[Fragment]) -> MoleculePredicate:
    """Predicate rejecting molecules that contain any of ``alerts`` as a subgraph."""
    from mmptgen.mcs import has_substructure

    patterns = list(alerts)

    def accept(mol: Fragment) -> bool:
        return not any(has_substructure(p, mol) for p in patterns)

    return accept


def load_alerts(path: str | Path) -> list[Fragment]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(parse_fragment(line))
    return out


def _molecule_splits(args: tuple[str, int, float]) -> list[Split]:
    smiles, max_cuts, max_ratio = args
    mol = parse_fragment(smiles)
    heavy = mol.heavy_atom_count
    keep = {split for split, var_heavy in _iter_splits(mol, max_cuts)
            if var_heavy / heavy <= max_ratio + 1e-12}
    return sorted(keep)


def build_mmpt_database(
    corpus: Sequence[tuple[str, str]],
    max_cuts: int = 1,
    max_variable_ratio: float = DEFAULT_MAX_VARIABLE_RATIO,
    min_mol_weight: float = DEFAULT_MIN_MOL_WEIGHT,
    predicate: MoleculePredicate | None = None,
    workers: int = 1,
) -> tuple[MmptDatabase, ExtractionReport]:
    """Pair molecules that share a constant and aggregate their transformations.

    ``corpus`` holds ``(id, smiles)`` tuples. Molecules failing to parse, the
    weight gate or ``predicate`` are dropped before fragmentation. For every
    unordered pair of molecules sharing a constant, both directions are
    emitted; identical directed transformations are merged into one record
    whose ``count`` is the number of ordered matched pairs.
    """
    if not corpus:
        raise ValueError("empty corpus")
    kept: list[tuple[str, str]] = []
    rejected_parse = rejected_weight = rejected_filter = 0
    for mol_id, smiles in corpus:
        try:
            mol = parse_fragment(smiles)
        except FragmentError:
            rejected_parse += 1
            continue
        if mol.attachment_count:
            rejected_parse += 1
            continue
        if molecular_weight(mol) < min_mol_weight:
            rejected_weight += 1
            continue
        if predicate is not None and not predicate(mol):
            rejected_filter += 1
            continue
        kept.append((mol_id, mol.canonical))

    jobs = [(smiles, max_cuts, max_variable_ratio) for _, smiles in kept]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_mol = list(pool.map(_molecule_splits, jobs, chunksize=64))
    else:
        per_mol = [_molecule_splits(job) for job in jobs]

    by_constant: dict[str, list[tuple[int, str]]] = defaultdict(list)
    for pos, splits in enumerate(per_mol):
        for split in splits:
            by_constant[split.constant].append((pos, split.variable))

    counts: dict[tuple[str, str], int] = defaultdict(int)
    exemplar: dict[tuple[str, str], tuple[str, str, str]] = {}
    matched = 0
    for constant in sorted(by_constant):
        entries = by_constant[constant]
        for (i, vi), (j, vj) in itertools.combinations(entries, 2):
            if i == j or vi == vj:
                continue
            for (a, va), (b, vb) in (((i, vi), (j, vj)), ((j, vj), (i, vi))):
                key = (va, vb)
                counts[key] += 1
                matched += 1
                ex = (constant, kept[a][0], kept[b][0])
                if key not in exemplar or ex < exemplar[key]:
                    exemplar[key] = ex

    records = [
        MmptRecord(src, dst, *exemplar[(src, dst)], count=counts[(src, dst)])
        for src, dst in sorted(counts)
    ]
    unordered = {tuple(sorted(k)) for k in counts}
    report = ExtractionReport(
        molecules_in=len(corpus),
        molecules_kept=len(kept),
        rejected_parse=rejected_parse,
        rejected_weight=rejected_weight,
        rejected_filter=rejected_filter,
        matched_pairs=matched,
        distinct_transformations=len(records),
        distinct_unordered=len(unordered),
    )
    logger.info("extracted %d transformations from %d molecules", len(records), len(kept))
    return MmptDatabase(records), report


def split_dataset(db: MmptDatabase, train_frac: float = DEFAULT_TRAIN_FRAC, seed: int = 0) -> MmptDatabase:
    """Tag every distinct transformation ``train`` or ``test``.

    Keys are sorted, shuffled with ``random.Random(seed)``, and the first
    ``ceil(train_frac * N)`` become train.
    """
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    keys = sorted({r.key for r in db.records})
    random.Random(seed).shuffle(keys)
    n_train = math.ceil(round(train_frac * len(keys), 9))
    train = set(keys[:n_train])
    tagged = [replace(r, split="train" if r.key in train else "test") for r in db.records]
    return MmptDatabase(tagged)
