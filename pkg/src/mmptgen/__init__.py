"""Variable-to-variable analog generation over matched molecular pair transformations."""

from mmptgen.cluster import ClusterTemplate, cluster_outputs, make_cluster_templates
from mmptgen.fingerprint import FingerprintVec, cosine_sim, morgan_fingerprint, tanimoto
from mmptgen.fragment import (
    Atom,
    BondOrder,
    DisconnectedError,
    Fragment,
    FragmentError,
    FragmentSyntaxError,
    LexError,
    ValenceError,
    attachment_count,
    canonicalize,
    detokenize,
    parse_fragment,
    tokenize,
)
from mmptgen.infill import InfillConfig, MaskedTemplate, effective_token_count, prompt_generate, template_from_substructure
from mmptgen.mcs import mcs, shared_substructure_similarity
from mmptgen.metrics import MetricReport, compute_novelty, compute_recall, compute_validity, evaluate
from mmptgen.mmp import MmptDatabase, MmptRecord, build_mmpt_database, fragment_molecule, split_dataset
from mmptgen.model import GenerationConfig, ReferenceScorer, beam_generate, sequence_log_prob, train_reference
from mmptgen.rag import RagConfig, RagResult, allocate_budget, rag_generate, verify_steering
from mmptgen.retrieval import RetrievalIndex, build_index, retrieve

__version__ = "0.1.0"

__all__ = [
    "Atom",
    "BondOrder",
    "ClusterTemplate",
    "DisconnectedError",
    "FingerprintVec",
    "Fragment",
    "FragmentError",
    "FragmentSyntaxError",
    "GenerationConfig",
    "InfillConfig",
    "LexError",
    "MaskedTemplate",
    "MetricReport",
    "MmptDatabase",
    "MmptRecord",
    "RagConfig",
    "RagResult",
    "ReferenceScorer",
    "RetrievalIndex",
    "ValenceError",
    "allocate_budget",
    "attachment_count",
    "beam_generate",
    "build_index",
    "build_mmpt_database",
    "canonicalize",
    "cluster_outputs",
    "compute_novelty",
    "compute_recall",
    "compute_validity",
    "cosine_sim",
    "detokenize",
    "effective_token_count",
    "evaluate",
    "fragment_molecule",
    "make_cluster_templates",
    "mcs",
    "morgan_fingerprint",
    "parse_fragment",
    "prompt_generate",
    "rag_generate",
    "retrieve",
    "sequence_log_prob",
    "shared_substructure_similarity",
    "split_dataset",
    "tanimoto",
    "template_from_substructure",
    "tokenize",
    "train_reference",
    "verify_steering",
    "__version__",
]
