"""Command-line entry point: ``mmptgen <subcommand> ...``.

Exit codes: 0 success, 1 usage error (bad flag, bad config key, output
already exists), 2 data error (unreadable or invalid input data, failed
check). Every subcommand that writes an output also writes
``<output>.manifest.json`` with the resolved configuration, input digests
and library versions.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from mmptgen.fragment import FragmentError, parse_fragment, tokenize

logger = logging.getLogger("mmptgen")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

SWEEP_GRIDS = {
    "n_clusters": (3, 5, 10, 20),
    "per_cluster": (10, 25, 50, 100),
    "length_margin": (3, 5, 7, 9),
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


# -- config ------------------------------------------------------------------

def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; keys use flag names with ``_`` or ``-``."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _apply_config(sub: argparse.ArgumentParser, argv: Sequence[str], config: dict[str, str]) -> argparse.Namespace:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults: dict[str, Any] = {}
    for key, value in config.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r} for {sub.prog}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r}: expected a boolean, got {value!r}")
            defaults[key] = value.lower() in ("true", "1", "yes")
            continue
        try:
            defaults[key] = action.type(value) if action.type else value
        except (TypeError, ValueError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from exc
        if action.choices is not None and defaults[key] not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {sorted(action.choices)}")
    sub.set_defaults(**defaults)
    # Required flags satisfied by the config are no longer required on the command line.
    for key in defaults:
        actions[key].required = False
    return sub.parse_args(argv)


# -- io helpers ----------------------------------------------------------------

def _digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict[str, str]:
    out = {"python": platform.python_version()}
    for name in ("artifact", "numpy", "scipy", "numba"):
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            out[name] = "unknown"
    return out


def _fresh(path: str | Path | None) -> None:
    if path is None:
        return
    p = Path(path)
    for target in (p, p.with_name(p.name + ".manifest.json")):
        if target.exists():
            raise UsageError(f"refusing to overwrite existing file {target}")


def _write_text(path: str | Path, text: str) -> None:
    with open(path, "x", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _manifest(args: argparse.Namespace, inputs: Sequence[str | None]) -> None:
    out = getattr(args, "output", None)
    if out is None:
        return
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    doc = {
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _digest(p) for p in inputs if p is not None and Path(p).is_file()},
        "output_sha256": _digest(out) if Path(out).is_file() else None,
        "versions": _versions(),
    }
    _write_text(Path(out).with_name(Path(out).name + ".manifest.json"),
                json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _say(args: argparse.Namespace, summary: dict, text: str) -> None:
    print(json.dumps(summary, sort_keys=True, default=str) if args.json else text)


def _load_db(path: str | Path):
    from mmptgen.mmp import MmptDatabase

    try:
        return MmptDatabase.from_tsv(path, canonicalize=True)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read database {path}: {exc}") from exc


def _read_queries(args: argparse.Namespace) -> list[str]:
    queries = list(args.query or [])
    if getattr(args, "queries", None):
        with open(args.queries, encoding="utf-8") as fh:
            queries += [line.split()[0] for line in fh if line.strip() and not line.startswith("#")]
    if not queries:
        raise UsageError("give --query or --queries")
    try:
        return [parse_fragment(q).canonical for q in queries]
    except FragmentError as exc:
        raise DataError(f"invalid query: {exc}") from exc


def _scorer(args: argparse.Namespace, train=None):
    from mmptgen.model import ReferenceScorer, train_reference

    if getattr(args, "checkpoint", None):
        return ReferenceScorer.load(args.checkpoint)
    if train is None:
        raise UsageError("--checkpoint is required")
    return train_reference(train, args.order, args.delta, args.lam)


def _index(args: argparse.Namespace, train):
    from mmptgen.retrieval import RetrievalIndex, build_index

    if getattr(args, "index", None):
        return RetrievalIndex.load(args.index)
    return build_index(train, args.radius, args.nbits, seed=args.seed)


def _parse_weights(text: str | None) -> tuple[float, ...] | None:
    if text is None or text == "uniform":
        return None
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--weights: expected 'uniform' or comma-separated numbers, got {text!r}") from exc


def _checked(build: Callable[..., Any], *args, **kwargs):
    """Construct a config object, turning its validation errors into usage errors."""
    try:
        return build(*args, **kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _infill_config(args: argparse.Namespace):
    from mmptgen.infill import InfillConfig

    return _checked(
        InfillConfig,
        max_new_tokens_per_blank=args.max_new_tokens,
        max_total_candidates=args.max_candidates,
        top_scored=args.top_scored,
        length_margin=args.length_margin,
        n_eff_cap=args.n_eff_cap,
        neff_branching=not args.no_neff_branching,
        max_expansions=args.max_expansions,
    )


def _rag_config(args: argparse.Namespace, **overrides):
    from dataclasses import replace

    from mmptgen.rag import RagConfig

    cfg = _checked(
        RagConfig,
        k_inputs=args.k_inputs,
        max_outputs=args.max_outputs,
        cluster_pool=args.cluster_pool,
        n_clusters=args.n_clusters,
        per_cluster=args.per_cluster,
        weights=_parse_weights(args.weights),
        threshold=args.threshold,
        max_cluster_size=args.max_cluster_size,
        ef_search=args.ef_search,
        infill=_infill_config(args),
        gate=args.gate,
        allow_fallback=not args.no_fallback,
    )
    infill = {k: overrides.pop(k) for k in list(overrides) if hasattr(cfg.infill, k)}
    if infill:
        overrides["infill"] = _checked(replace, cfg.infill, **infill)
    return _checked(replace, cfg, **overrides)


# -- subcommands ---------------------------------------------------------------

def cmd_ingest(args: argparse.Namespace) -> int:
    """SMILES lines (``smiles [id]``) to canonical corpus JSON lines."""
    _fresh(args.output)
    rows, bad = [], 0
    with open(args.input, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            mol_id = parts[1] if len(parts) > 1 else f"mol{lineno}"
            try:
                canonical = parse_fragment(parts[0]).canonical
            except FragmentError as exc:
                bad += 1
                logger.warning("%s:%d: skipped: %s", args.input, lineno, exc)
                continue
            rows.append(json.dumps({"id": mol_id, "smiles": canonical}))
    if not rows:
        raise DataError(f"{args.input}: no parseable molecules")
    _write_text(args.output, "".join(r + "\n" for r in rows))
    _manifest(args, [args.input])
    _say(args, {"molecules": len(rows), "skipped": bad}, f"ingested {len(rows)} molecules ({bad} skipped)")
    return EXIT_OK


def cmd_pairs(args: argparse.Namespace) -> int:
    from mmptgen.mmp import alert_predicate, build_mmpt_database, load_alerts, read_corpus

    _fresh(args.output)
    if not 1 <= args.max_cuts <= 3:
        raise UsageError("--max-cuts must be 1, 2 or 3")
    if not 0.0 < args.max_variable_ratio <= 1.0:
        raise UsageError("--max-variable-ratio must lie in (0, 1]")
    try:
        corpus = read_corpus(args.corpus)
        predicate = alert_predicate(load_alerts(args.alerts)) if args.alerts else None
    except (ValueError, FragmentError) as exc:
        raise DataError(str(exc)) from exc
    if not corpus:
        raise DataError(f"{args.corpus}: empty corpus")
    db, report = build_mmpt_database(corpus, args.max_cuts, args.max_variable_ratio, args.min_weight,
                                     predicate, workers=args.threads or 1)
    db.to_tsv(args.output)
    _manifest(args, [args.corpus, args.alerts])
    summary = report.as_dict()
    _say(args, summary, " ".join(f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    from mmptgen.mmp import split_dataset

    _fresh(args.output)
    if not 0.0 < args.train_frac < 1.0:
        raise UsageError("--train-frac must lie strictly between 0 and 1")
    tagged = split_dataset(_load_db(args.db), args.train_frac, args.seed)
    tagged.to_tsv(args.output)
    _manifest(args, [args.db])
    n_train = len({r.key for r in tagged.records if r.split == "train"})
    n_test = len({r.key for r in tagged.records if r.split == "test"})
    _say(args, {"train": n_train, "test": n_test}, f"train={n_train} test={n_test} distinct transformations")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    from mmptgen.model import EmptyTrainingSet, train_reference

    _fresh(args.output)
    try:
        scorer = train_reference(_load_db(args.db), args.order, args.delta, args.lam)
    except EmptyTrainingSet as exc:
        raise DataError(str(exc)) from exc
    scorer.save(args.output)
    _manifest(args, [args.db])
    summary = {"vocabulary": len(scorer.vocab.tokens), "inputs": len(scorer.memory)}
    _say(args, summary, f"trained on {summary['inputs']} inputs, vocabulary {summary['vocabulary']}")
    return EXIT_OK


def _jsonl_out(args: argparse.Namespace, lines: list[str]) -> None:
    text = "".join(lines)
    if args.output:
        _write_text(args.output, text)
    else:
        sys.stdout.write(text)


def cmd_generate(args: argparse.Namespace) -> int:
    from mmptgen.model import GenerationConfig, beam_generate

    _fresh(args.output)
    queries = _read_queries(args)
    scorer = _scorer(args)
    cfg = _checked(GenerationConfig, beam_width=args.beam, max_length=args.max_length, top_k_outputs=args.top_k)
    lines = []
    for q in queries:
        for h in beam_generate(scorer, tokenize(q), cfg):
            lines.append(json.dumps({"query": q, "candidate": h.text, "log_prob": h.log_prob,
                                     "truncated": h.truncated}) + "\n")
    _jsonl_out(args, lines)
    _manifest(args, [args.checkpoint, args.queries])
    return EXIT_OK


def cmd_infill(args: argparse.Namespace) -> int:
    from mmptgen.infill import DisconnectedKeepSet, MaskedTemplate, NoValidCompletion, prompt_generate, template_from_substructure

    _fresh(args.output)
    queries = _read_queries(args)
    scorer = _scorer(args)
    if (args.template is None) == (args.scaffold is None):
        raise UsageError("give exactly one of --template or --scaffold with --keep")
    try:
        if args.template is not None:
            template = MaskedTemplate.from_wire(args.template)
        else:
            if not args.keep:
                raise UsageError("--scaffold needs --keep")
            keep = {int(x) for x in args.keep.split(",")}
            template = template_from_substructure(parse_fragment(args.scaffold), keep)
    except (FragmentError, DisconnectedKeepSet, IndexError) as exc:
        raise DataError(f"bad template: {exc}") from exc
    except ValueError as exc:
        raise UsageError(f"bad template: {exc}") from exc
    cfg = _infill_config(args)
    lines = []
    for q in queries:
        try:
            cands = prompt_generate(scorer, tokenize(q), template, args.k, cfg)
        except NoValidCompletion as exc:
            logger.warning("%s: %s", q, exc)
            continue
        for c in cands:
            lines.append(json.dumps({"query": q, "candidate": c.fragment.canonical, "log_prob": c.log_prob,
                                     "template": template.to_wire()}) + "\n")
    _jsonl_out(args, lines)
    _manifest(args, [args.checkpoint, args.queries])
    return EXIT_OK


def cmd_index(args: argparse.Namespace) -> int:
    from mmptgen.retrieval import RetrievalIndex, build_index

    if args.load:
        index = RetrievalIndex.load(args.load)
        if not args.query:
            _say(args, {"inputs": len(index)}, f"index of {len(index)} inputs")
            return EXIT_OK
        rows = []
        for q in _read_queries(args):
            fp = index.fingerprint(parse_fragment(q))
            dist, ids = index.ann.search(fp.to_words(), args.k, max(args.ef_search or index.ann.ef_search, args.k))
            hits = [{"input": index.inputs[i], "cosine": 1.0 - float(d)} for d, i in zip(dist[0], ids[0]) if i >= 0]
            rows.append({"query": q, "neighbors": hits})
        print(json.dumps(rows) if args.json else "\n".join(
            f"{r['query']}\t" + " ".join(f"{h['input']}:{h['cosine']:.3f}" for h in r["neighbors"]) for r in rows))
        return EXIT_OK
    if not args.db or not args.output:
        raise UsageError("building an index needs --db and --output")
    _fresh(args.output)
    index = build_index(_load_db(args.db).train(), args.radius, args.nbits, args.m, args.ef_construction,
                        args.ef_search or 100, args.seed)
    index.save(args.output)
    _manifest(args, [args.db])
    _say(args, {"inputs": len(index)}, f"indexed {len(index)} inputs")
    return EXIT_OK


def cmd_rag(args: argparse.Namespace) -> int:
    from mmptgen.rag import EmptyRetrieval, rag_generate

    _fresh(args.output)
    queries = _read_queries(args)
    train = _load_db(args.db).train()
    scorer = _scorer(args, train)
    index = _index(args, train)
    cfg = _rag_config(args)
    lines = []
    for q in queries:
        try:
            result = rag_generate(scorer, index, train, parse_fragment(q), cfg)
        except EmptyRetrieval as exc:
            raise DataError(str(exc)) from exc
        lines.append(result.jsonl())
    _jsonl_out(args, lines)
    _manifest(args, [args.db, args.checkpoint, args.index, args.queries])
    return EXIT_OK


def _generate_outputs(args: argparse.Namespace, mode: str, train, queries: Sequence[str], scorer=None, index=None, **rag_overrides) -> dict[str, list[str]]:
    from mmptgen.model import GenerationConfig, beam_generate
    from mmptgen.rag import rag_generate
    from mmptgen.retrieval import retrieve

    out: dict[str, list[str]] = {}
    if mode == "fm":
        cfg = _checked(GenerationConfig, beam_width=args.beam, max_length=args.max_length)
        for q in queries:
            out[q] = [h.text for h in beam_generate(scorer, tokenize(q), cfg)]
    elif mode == "rag":
        cfg = _rag_config(args, **rag_overrides)
        for q in queries:
            out[q] = [c.fragment.canonical for c in rag_generate(scorer, index, train, parse_fragment(q), cfg).candidates]
    else:
        for q in queries:
            found = retrieve(index, train, parse_fragment(q), args.k_inputs, args.max_generations, args.ef_search)
            out[q] = [s.fragment.canonical for s in found.expanded_outputs]
    return out


def _task_setup(args: argparse.Namespace):
    from mmptgen.metrics import task_ground_truth

    db = _load_db(args.train)
    if args.task == 1:
        evaluation = _load_db(args.future) if args.future else db
        train = db.train()
    else:
        if not args.future:
            raise UsageError(f"--task {args.task} needs --future")
        train, evaluation = db.train(), _load_db(args.future)
    gt = task_ground_truth(args.task, train, evaluation)
    if args.limit:
        gt = dict(sorted(gt.items())[: args.limit])
    if not gt:
        raise DataError("no ground-truth transformations for this task")
    return train, gt


def cmd_eval(args: argparse.Namespace) -> int:
    from mmptgen.metrics import config_hash, evaluate

    _fresh(args.output)
    train, gt = _task_setup(args)
    scorer = _scorer(args, train) if args.mode != "retrieval" else None
    index = _index(args, train) if args.mode != "fm" else None
    outputs = _generate_outputs(args, args.mode, train, sorted(gt), scorer, index)
    meta = {"task": args.task, "mode": args.mode, "config_hash": config_hash(
        {k: v for k, v in vars(args).items() if k not in ("func", "output", "json")})}
    report = evaluate(outputs, train, gt, args.pair_level_novelty, args.max_generations, meta)
    text = report.to_json()
    if args.output:
        _write_text(args.output, text)
        _manifest(args, [args.train, args.future, args.checkpoint, args.index])
    doc = report.as_json()
    _say(args, doc, " ".join(f"{k}={doc[k]['value'] if isinstance(doc[k], dict) else doc[k]}"
                             for k in ("valid", "novel_over_valid", "novel_over_all", "recall", "recall_i", "recall_o")))
    return EXIT_OK


def cmd_steer_check(args: argparse.Namespace) -> int:
    from mmptgen.rag import SteeringInstance, random_steering_instance, verify_steering

    if args.trials < 1:
        raise UsageError("--trials must be positive")
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.trials):
        dev, _ = verify_steering(random_steering_instance(rng, args.max_clusters, args.max_outcomes))
        worst = max(worst, dev)
    for gate in (0.0, 1.0):
        inst = random_steering_instance(rng, args.max_clusters, args.max_outcomes)
        inst = SteeringInstance(inst.base, inst.cluster_dists, np.full(len(inst.gates), gate), inst.weights)
        worst = max(worst, verify_steering(inst)[0])
    ok = worst < args.tolerance
    _say(args, {"trials": args.trials, "max_deviation": worst, "ok": ok},
         f"max deviation {worst:.3e} over {args.trials} instances ({'ok' if ok else 'FAILED'})")
    return EXIT_OK if ok else EXIT_DATA


def cmd_sweep(args: argparse.Namespace) -> int:
    from mmptgen.metrics import beam_validity_sweep, compute_recall, config_hash, sweep_csv

    _fresh(args.output)
    train, gt = _task_setup(args)
    scorer = _scorer(args, train)
    chash = config_hash({k: v for k, v in vars(args).items() if k not in ("func", "output", "json")})
    if args.kind == "beam":
        sizes = [int(x) for x in args.values.split(",")] if args.values else [1, 10, 50, 100]
        text = sweep_csv(beam_validity_sweep(scorer, sorted(gt), sizes, args.max_length), chash)
    else:
        index = _index(args, train)
        grid = [int(x) for x in args.values.split(",")] if args.values else list(SWEEP_GRIDS[args.kind])
        lines = [f"# config_hash={chash}\n", f"{args.kind},recall,recall_i,recall_o\n"]
        for value in grid:
            outputs = _generate_outputs(args, "rag", train, sorted(gt), scorer, index, **{args.kind: value})
            r = compute_recall(outputs, gt, train.pairs(), args.max_generations)
            cells = ["n/a" if x is None else repr(float(x)) for x in (r.recall, r.recall_i, r.recall_o)]
            lines.append(f"{value},{','.join(cells)}\n")
        text = "".join(lines)
    if args.output:
        _write_text(args.output, text)
        _manifest(args, [args.train, args.future, args.checkpoint, args.index])
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--json", action="store_true", help="print machine-readable JSON to stdout")
    p.add_argument("--threads", type=int, default=None, help="cap worker threads")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _model_opts() -> argparse.ArgumentParser:
    from mmptgen.model import DEFAULT_DELTA, DEFAULT_LAMBDA, DEFAULT_ORDER

    p = _Parser(add_help=False)
    p.add_argument("--checkpoint")
    p.add_argument("--order", type=int, default=DEFAULT_ORDER)
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--lam", type=float, default=DEFAULT_LAMBDA)
    return p


def _query_opts() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--query", action="append", help="input variable (repeatable)")
    p.add_argument("--queries", help="file with one input variable per line")
    return p


def _infill_opts() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--max-new-tokens", type=int, default=11)
    p.add_argument("--max-candidates", type=int, default=200)
    p.add_argument("--top-scored", type=int, default=200)
    p.add_argument("--length-margin", type=int, default=7)
    p.add_argument("--n-eff-cap", type=int, default=None)
    p.add_argument("--no-neff-branching", action="store_true")
    p.add_argument("--max-expansions", type=int, default=20_000)
    return p


def _rag_opts() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--index")
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--nbits", type=int, default=2048)
    p.add_argument("--k-inputs", type=int, default=500)
    p.add_argument("--max-outputs", type=int, default=1000)
    p.add_argument("--cluster-pool", type=int, default=100)
    p.add_argument("--n-clusters", type=int, default=10)
    p.add_argument("--per-cluster", type=int, default=50)
    p.add_argument("--weights", default="uniform", help="'uniform' or comma-separated cluster weights")
    p.add_argument("--threshold", type=float, default=0.70)
    p.add_argument("--max-cluster-size", type=int, default=10)
    p.add_argument("--ef-search", type=int, default=None)
    p.add_argument("--gate", type=float, default=0.5, help="pull toward cluster members during infilling")
    p.add_argument("--no-fallback", action="store_true", help="fail instead of free generation on empty retrieval")
    return p


def _task_opts() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    p.add_argument("--task", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--train", required=True, help="training database TSV (train split used when tagged)")
    p.add_argument("--future", help="evaluation database TSV (tasks 2 and 3)")
    p.add_argument("--limit", type=int, default=None, help="evaluate only the first N inputs")
    p.add_argument("--beam", type=int, default=1000)
    p.add_argument("--max-length", type=int, default=50)
    p.add_argument("--max-generations", type=int, default=1000)
    return p


COMMANDS: dict[str, tuple[Callable[[argparse.Namespace], int], str]] = {
    "ingest": (cmd_ingest, "SMILES lines to a canonical corpus"),
    "pairs": (cmd_pairs, "corpus to transformation database"),
    "split": (cmd_split, "tag train/test transformations"),
    "train": (cmd_train, "fit the reference scorer"),
    "generate": (cmd_generate, "free beam generation"),
    "infill": (cmd_infill, "template-constrained generation"),
    "index": (cmd_index, "build or query the retrieval index"),
    "rag": (cmd_rag, "retrieval-augmented generation"),
    "eval": (cmd_eval, "task protocols and metrics"),
    "steer-check": (cmd_steer_check, "numerical check of the steering identity"),
    "sweep": (cmd_sweep, "hyperparameter and beam-validity sweeps"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmptgen", description="Matched molecular pair transformation generation.")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common, model, query, infill, rag, task = _common(), _model_opts(), _query_opts(), _infill_opts(), _rag_opts(), _task_opts()

    p = subs.add_parser("ingest", parents=[common], help=COMMANDS["ingest"][1])
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = subs.add_parser("pairs", parents=[common], help=COMMANDS["pairs"][1])
    p.add_argument("--corpus", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--max-cuts", type=int, default=1)
    p.add_argument("--max-variable-ratio", type=float, default=0.33)
    p.add_argument("--min-weight", type=float, default=200.0)
    p.add_argument("--alerts", help="file of forbidden substructures, one per line")

    p = subs.add_parser("split", parents=[common], help=COMMANDS["split"][1])
    p.add_argument("--db", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--train-frac", type=float, default=0.9)

    p = subs.add_parser("train", parents=[common, model], help=COMMANDS["train"][1])
    p.add_argument("--db", required=True)
    p.add_argument("--output", required=True)

    p = subs.add_parser("generate", parents=[common, model, query], help=COMMANDS["generate"][1])
    p.add_argument("--output")
    p.add_argument("--beam", type=int, default=1000)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--max-length", type=int, default=50)

    p = subs.add_parser("infill", parents=[common, model, query, infill], help=COMMANDS["infill"][1])
    p.add_argument("--output")
    p.add_argument("--template", help="wire template, e.g. '[*:1]c1ccc(cc1)?*?*'")
    p.add_argument("--scaffold", help="fragment whose atoms outside --keep are masked")
    p.add_argument("--keep", help="comma-separated atom indices of --scaffold to keep")
    p.add_argument("--k", type=int, default=50)

    p = subs.add_parser("index", parents=[common, query], help=COMMANDS["index"][1])
    p.add_argument("--db")
    p.add_argument("--output")
    p.add_argument("--load", help="load an index instead of building one")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--nbits", type=int, default=2048)
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--ef-construction", type=int, default=200)
    p.add_argument("--ef-search", type=int, default=None)

    p = subs.add_parser("rag", parents=[common, model, query, infill, rag], help=COMMANDS["rag"][1])
    p.add_argument("--db", required=True)
    p.add_argument("--output")

    p = subs.add_parser("eval", parents=[common, model, infill, rag, task], help=COMMANDS["eval"][1])
    p.add_argument("--mode", choices=("fm", "rag", "retrieval"), default="rag")
    p.add_argument("--pair-level-novelty", action="store_true")
    p.add_argument("--output")

    p = subs.add_parser("steer-check", parents=[common], help=COMMANDS["steer-check"][1])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--max-clusters", type=int, default=8)
    p.add_argument("--max-outcomes", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=1e-12)

    p = subs.add_parser("sweep", parents=[common, model, infill, rag, task], help=COMMANDS["sweep"][1])
    p.add_argument("--kind", choices=("beam", *SWEEP_GRIDS), default="n_clusters")
    p.add_argument("--values", help="comma-separated grid overriding the default one")
    p.add_argument("--output")
    return parser


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    argv = list(argv)
    choices = parser._subparsers._group_actions[0].choices
    # Config values must be known before the strict parse, since they may satisfy required flags.
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or not argv or argv[0] not in choices:
        return parser.parse_args(argv)
    try:
        config = read_config(known.config)
    except OSError as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from exc
    command = argv[0]
    args = _apply_config(choices[command], argv[1:], config)
    args.command = command
    return args


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        from mmptgen.hnsw import set_threads

        set_threads(args.threads)
    try:
        return COMMANDS[args.command][0](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FragmentError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
