"""Validity, novelty and recall metrics, task protocols, beam sweeps and PCA exports.

All counting metrics are exact integer ratios. A fraction with a zero
denominator is reported as 0 with ``defined = False`` (rendered ``"n/a"`` in
JSON) so empty strata never masquerade as perfect or failed scores.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from mmptgen.fingerprint import DEFAULT_NBITS, DEFAULT_RADIUS, morgan_fingerprint
from mmptgen.fragment import Fragment, FragmentError, parse_fragment, tokenize
from mmptgen.mmp import MmptDatabase
from mmptgen.model import ConditionalScorer, GenerationConfig, beam_generate

DEFAULT_MAX_GENERATIONS = 1000


class DegenerateVariance(ValueError):
    pass


@dataclass(frozen=True)
class Ratio:
    numerator: int
    denominator: int

    @property
    def defined(self) -> bool:
        return self.denominator > 0

    @property
    def value(self) -> float:
        return self.numerator / self.denominator if self.denominator else 0.0

    def exact(self) -> Fraction:
        return Fraction(self.numerator, self.denominator) if self.denominator else Fraction(0)

    def as_json(self) -> dict:
        return {
            "value": self.value if self.defined else "n/a",
            "numerator": self.numerator,
            "denominator": self.denominator,
        }


def config_hash(config: Mapping) -> str:
    """Short digest of a JSON-serializable config, used in output headers."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _canonical_or_none(text: str) -> Fragment | None:
    try:
        return parse_fragment(text)
    except FragmentError:
        return None


def _valid_outputs(input_frag: Fragment, outputs: Iterable[str]) -> list[Fragment | None]:
    n_attach = input_frag.attachment_count
    out = []
    for text in outputs:
        frag = _canonical_or_none(text)
        out.append(frag if frag is not None and frag.attachment_count == n_attach else None)
    return out


def compute_validity(outputs_per_input: Mapping[str, Sequence[str]]) -> Ratio:
    """Raw outputs that parse and keep the input's attachment count, over all raw outputs."""
    valid = total = 0
    for inp, outs in outputs_per_input.items():
        checked = _valid_outputs(parse_fragment(inp), outs)
        valid += sum(f is not None for f in checked)
        total += len(checked)
    return Ratio(valid, total)


def compute_novelty(
    outputs_per_input: Mapping[str, Sequence[str]],
    training_targets: Iterable[str],
    training_pairs: Iterable[tuple[str, str]] = (),
    pair_level: bool = False,
) -> tuple[Ratio, Ratio]:
    """``(novel/valid, novel/all)``; novel means valid and absent from training.

    Absence is judged on the canonical output string by default, or on the
    ``(input, output)`` pair when ``pair_level`` is set.
    """
    targets = set(training_targets)
    pairs = set(training_pairs)
    novel = valid = total = 0
    for inp, outs in outputs_per_input.items():
        src = parse_fragment(inp)
        for frag in _valid_outputs(src, outs):
            total += 1
            if frag is None:
                continue
            valid += 1
            seen = (src.canonical, frag.canonical) in pairs if pair_level else frag.canonical in targets
            novel += not seen
    return Ratio(novel, valid), Ratio(novel, total)


@dataclass(frozen=True)
class InputRecall:
    input: str
    recovered_in: int
    total_in: int
    recovered_out: int
    total_out: int

    @property
    def recovered(self) -> int:
        return self.recovered_in + self.recovered_out

    @property
    def total(self) -> int:
        return self.total_in + self.total_out


@dataclass(frozen=True)
class RecallResult:
    per_input: tuple[InputRecall, ...]
    max_generations: int

    def _macro(self, rec, tot) -> Fraction | None:
        vals = [Fraction(rec(r), tot(r)) for r in self.per_input if tot(r) > 0]
        return sum(vals, Fraction(0)) / len(vals) if vals else None

    @property
    def recall(self) -> Fraction | None:
        return self._macro(lambda r: r.recovered, lambda r: r.total)

    @property
    def recall_i(self) -> Fraction | None:
        return self._macro(lambda r: r.recovered_in, lambda r: r.total_in)

    @property
    def recall_o(self) -> Fraction | None:
        return self._macro(lambda r: r.recovered_out, lambda r: r.total_out)

    def micro(self) -> dict[str, Ratio]:
        return {
            "recall": Ratio(sum(r.recovered for r in self.per_input), sum(r.total for r in self.per_input)),
            "recall_i": Ratio(sum(r.recovered_in for r in self.per_input), sum(r.total_in for r in self.per_input)),
            "recall_o": Ratio(sum(r.recovered_out for r in self.per_input), sum(r.total_out for r in self.per_input)),
        }


def compute_recall(
    outputs_per_input: Mapping[str, Sequence[str]],
    ground_truth: Mapping[str, Iterable[str]],
    training_pairs: Iterable[tuple[str, str]],
    max_generations: int = DEFAULT_MAX_GENERATIONS,
) -> RecallResult:
    """Per-input recovered ground truth, split into in- and out-of-training strata.

    Only the first ``max_generations`` outputs of each input count. Inputs
    without ground truth are skipped; inputs absent from ``outputs_per_input``
    recover nothing. Ground truth and outputs are compared canonically.
    """
    if max_generations < 1:
        raise ValueError("max_generations must be positive")
    pairs = set(training_pairs)
    rows = []
    for inp in sorted(ground_truth):
        gt = {parse_fragment(g).canonical for g in ground_truth[inp]}
        if not gt:
            continue
        src = parse_fragment(inp).canonical
        produced = {f.canonical for f in map(_canonical_or_none, outputs_per_input.get(inp, ())[:max_generations]) if f is not None}
        gt_in = {g for g in gt if (src, g) in pairs}
        gt_out = gt - gt_in
        rows.append(InputRecall(src, len(gt_in & produced), len(gt_in), len(gt_out & produced), len(gt_out)))
    return RecallResult(tuple(rows), max_generations)


def _fraction_json(x: Fraction | None):
    return "n/a" if x is None else float(x)


@dataclass(frozen=True)
class MetricReport:
    validity: Ratio
    novel_over_valid: Ratio
    novel_over_all: Ratio
    recall: RecallResult | None = None
    meta: dict = field(default_factory=dict)

    @property
    def valid(self) -> float:
        return self.validity.value

    def as_json(self) -> dict:
        out = {
            "valid": self.validity.as_json(),
            "novel_over_valid": self.novel_over_valid.as_json(),
            "novel_over_all": self.novel_over_all.as_json(),
        }
        if self.recall is not None:
            out.update({
                "recall": _fraction_json(self.recall.recall),
                "recall_i": _fraction_json(self.recall.recall_i),
                "recall_o": _fraction_json(self.recall.recall_o),
                "micro": {k: v.as_json() for k, v in self.recall.micro().items()},
                "n_inputs": len(self.recall.per_input),
                "max_generations": self.recall.max_generations,
            })
        out["meta"] = self.meta
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_json(), indent=2, sort_keys=True) + "\n"


def evaluate(
    outputs_per_input: Mapping[str, Sequence[str]],
    train: MmptDatabase,
    ground_truth: Mapping[str, Iterable[str]] | None = None,
    pair_level: bool = False,
    max_generations: int = DEFAULT_MAX_GENERATIONS,
    meta: dict | None = None,
) -> MetricReport:
    capped = {k: list(v)[:max_generations] for k, v in outputs_per_input.items()}
    nv, na = compute_novelty(capped, train.targets(), train.pairs(), pair_level)
    recall = compute_recall(capped, ground_truth, train.pairs(), max_generations) if ground_truth is not None else None
    return MetricReport(compute_validity(capped), nv, na, recall, dict(meta or {}))


def task_ground_truth(task: int, train: MmptDatabase, evaluation: MmptDatabase) -> dict[str, set[str]]:
    """Ground truth per input for the three protocols.

    1. In-distribution: ``evaluation``'s test-tagged transformations (all of
       them when untagged) that are not training pairs.
    2. Within-project: every transformation of ``evaluation``.
    3. Cross-project: transformations of ``evaluation`` whose input also
       occurs as an input of ``train``.
    """
    if task == 1:
        tagged = any(r.split for r in evaluation.records)
        held = evaluation.subset("test") if tagged else evaluation
        seen = train.pairs()
        keys = [k for k in held.pairs() if k not in seen]
    elif task == 2:
        keys = list(evaluation.pairs())
    elif task == 3:
        known = set(train.inputs())
        keys = [k for k in evaluation.pairs() if k[0] in known]
    else:
        raise ValueError(f"unknown task {task}; expected 1, 2 or 3")
    gt: dict[str, set[str]] = {}
    for src, dst in sorted(keys):
        gt.setdefault(src, set()).add(dst)
    return gt


def beam_validity_sweep(
    scorer: ConditionalScorer,
    inputs: Sequence[str],
    beam_sizes: Sequence[int],
    max_length: int = 50,
) -> list[tuple[int, float]]:
    """Mean per-input validity of beam outputs for each beam size."""
    if not inputs:
        raise ValueError("no inputs to sweep")
    rows = []
    for beam in beam_sizes:
        cfg = GenerationConfig(beam_width=beam, max_length=max_length)
        per_input = []
        for inp in inputs:
            outs = [h.text for h in beam_generate(scorer, tokenize(parse_fragment(inp).canonical), cfg)]
            per_input.append(compute_validity({inp: outs}).value)
        rows.append((beam, float(np.mean(per_input))))
    return rows


def sweep_csv(rows: Sequence[tuple[int, float]], chash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={chash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["beam", "avg_validity"])
    for beam, v in rows:
        writer.writerow([beam, repr(v)])
    return buf.getvalue()


@dataclass(frozen=True)
class PcaProjection:
    coords: np.ndarray        # (n, 2)
    components: np.ndarray    # (2, d), unit rows
    explained: np.ndarray     # (2,) fraction of total variance


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return -v if v[int(np.argmax(np.abs(v)))] < 0 else v


def pca_project(x: np.ndarray) -> PcaProjection:
    """Top-2 principal components of the mean-centered rows of ``x``.

    The covariance eigenproblem is solved with Lanczos iteration (a fixed
    start vector keeps it deterministic); tiny dimensions use a dense solver.
    Each component is signed so its largest-magnitude loading is positive.

    Raises:
        DegenerateVariance: fewer than 3 rows or zero total variance.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise DegenerateVariance("need at least 3 points")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    total = float(np.trace(cov))
    if total <= 0.0:
        raise DegenerateVariance("all points are identical")
    d = cov.shape[0]
    if d <= 3:
        vals, vecs = np.linalg.eigh(cov)
        order = np.argsort(vals)[::-1][:2]
        vals, vecs = vals[order], vecs[:, order]
        if d == 1:
            vals = np.append(vals, 0.0)
            vecs = np.hstack([vecs, np.zeros((1, 1))])
    else:
        from scipy.sparse.linalg import eigsh

        vals, vecs = eigsh(cov, k=2, which="LA", v0=np.ones(d) / np.sqrt(d))
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
    comps = np.stack([_fix_sign(vecs[:, i]) for i in range(2)])
    explained = np.clip(vals, 0.0, None) / total
    return PcaProjection(centered @ comps.T, comps, explained)


def pca_coverage(
    fragment_sets: Sequence[tuple[str, Sequence[Fragment]]],
    radius: int = DEFAULT_RADIUS,
    nbits: int = DEFAULT_NBITS,
) -> tuple[list[str], PcaProjection]:
    labels, rows = [], []
    for label, frags in fragment_sets:
        for f in frags:
            labels.append(label)
            rows.append(morgan_fingerprint(f, radius, nbits).to_array())
    if len(rows) < 3:
        raise DegenerateVariance("need at least 3 fragments")
    return labels, pca_project(np.stack(rows).astype(np.float64))


def pca_coverage_export(
    fragment_sets: Sequence[tuple[str, Sequence[Fragment]]],
    radius: int = DEFAULT_RADIUS,
    nbits: int = DEFAULT_NBITS,
    chash: str | None = None,
) -> str:
    """CSV ``label,x,y`` of Morgan fingerprints projected on their top-2 principal components."""
    labels, proj = pca_coverage(fragment_sets, radius, nbits)
    buf = io.StringIO()
    buf.write(f"# config_hash={chash or config_hash({'radius': radius, 'nbits': nbits})}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label", "x", "y"])
    for label, (px, py) in zip(labels, proj.coords):
        writer.writerow([label, repr(float(px)), repr(float(py))])
    return buf.getvalue()
