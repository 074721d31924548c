"""Clustering of retrieved outputs and per-cluster MCS templates."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np
from scipy.cluster.hierarchy import linkage, to_tree
from scipy.spatial.distance import squareform

from mmptgen.fingerprint import morgan_fingerprint
from mmptgen.fragment import Fragment
from mmptgen.infill import MaskedTemplate, template_from_substructure
from mmptgen.mcs import find_embedding, mcs_many, shared_substructure_similarity

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.70
DEFAULT_MAX_CLUSTER_SIZE = 10


class InvalidWeights(ValueError):
    pass


@dataclass(frozen=True)
class Cluster:
    id: int
    members: tuple[Fragment, ...]

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("a cluster needs at least one member")
        names = [m.canonical for m in self.members]
        if len(set(names)) != len(names):
            raise ValueError("cluster members must be distinct")

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class ClusterTemplate:
    cluster: Cluster
    mcs: Fragment
    template: MaskedTemplate
    weight: float

    def as_json(self) -> dict:
        return {
            "cluster_id": self.cluster.id,
            "members": [m.canonical for m in self.cluster.members],
            "mcs": self.mcs.canonical,
            "template": self.template.to_wire(),
            "weight": self.weight,
        }


class Clusterer(Protocol):
    def __call__(self, outputs: Sequence[Fragment]) -> list[Cluster]:
        ...


def _distinct(outputs: Iterable[Fragment]) -> list[Fragment]:
    seen: dict[str, Fragment] = {}
    for f in outputs:
        seen.setdefault(f.canonical, f)
    return [seen[k] for k in sorted(seen)]


def _number(groups: list[list[Fragment]]) -> list[Cluster]:
    groups = [sorted(g, key=lambda f: f.canonical) for g in groups]
    groups.sort(key=lambda g: (-len(g), g[0].canonical))
    return [Cluster(i + 1, tuple(g)) for i, g in enumerate(groups)]


def similarity_matrix(frags: Sequence[Fragment]) -> np.ndarray:
    n = len(frags)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = shared_substructure_similarity(frags[i], frags[j])
    return sim


def cluster_outputs(
    outputs: Sequence[Fragment],
    threshold: float = DEFAULT_THRESHOLD,
    max_cluster_size: int = DEFAULT_MAX_CLUSTER_SIZE,
) -> list[Cluster]:
    """Average-linkage clusters over ``1 - MCS similarity``, cut at ``1 - threshold``.

    Walking down from the dendrogram root, a node becomes a cluster once its
    merge height is within the cut and it holds at most ``max_cluster_size``
    members; larger nodes split into their two children. A node whose members
    are all at distance 0 cannot be separated and is kept oversized.
    Duplicates (by canonical form) are merged first. Ids are 1-based by
    descending size, ties by smallest canonical member.
    """
    if not outputs:
        raise ValueError("nothing to cluster")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    if max_cluster_size < 1:
        raise ValueError("max_cluster_size must be positive")
    frags = _distinct(outputs)
    if len(frags) == 1:
        return _number([frags])
    dist = np.clip(1.0 - similarity_matrix(frags), 0.0, 1.0)
    np.fill_diagonal(dist, 0.0)
    root = to_tree(linkage(squareform(dist, checks=False), method="average"))
    cut = (1.0 - threshold) + 1e-12

    groups: list[list[Fragment]] = []
    stack = [root]
    while stack:
        node = stack.pop()
        size = node.get_count()
        if node.dist <= cut and (size <= max_cluster_size or node.dist <= 0.0):
            if size > max_cluster_size:
                logger.warning("keeping an unsplittable cluster of %d mutually identical members", size)
            groups.append([frags[i] for i in node.pre_order()])
        else:
            stack.extend((node.get_right(), node.get_left()))
    return _number(groups)


@dataclass(frozen=True)
class McsLinkageClusterer:
    threshold: float = DEFAULT_THRESHOLD
    max_cluster_size: int = DEFAULT_MAX_CLUSTER_SIZE

    def __call__(self, outputs: Sequence[Fragment]) -> list[Cluster]:
        return cluster_outputs(outputs, self.threshold, self.max_cluster_size)


@dataclass(frozen=True)
class FingerprintDensityClusterer:
    """HDBSCAN over Jaccard distances of output fingerprints; noise points become singletons."""

    min_cluster_size: int = 2
    radius: int = 2
    nbits: int = 2048

    def __call__(self, outputs: Sequence[Fragment]) -> list[Cluster]:
        from sklearn.cluster import HDBSCAN

        frags = _distinct(outputs)
        if len(frags) < max(2, self.min_cluster_size):
            return _number([[f] for f in frags])
        bits = np.stack([morgan_fingerprint(f, self.radius, self.nbits).to_array() for f in frags]).astype(bool)
        inter = bits.astype(np.int64) @ bits.T.astype(np.int64)
        pop = bits.sum(axis=1)
        union = pop[:, None] + pop[None, :] - inter
        dist = np.where(union > 0, 1.0 - inter / np.maximum(union, 1), 0.0)
        labels = HDBSCAN(min_cluster_size=self.min_cluster_size, metric="precomputed").fit_predict(dist)
        groups: dict[int, list[Fragment]] = {}
        singles = []
        for f, lab in zip(frags, labels):
            if lab < 0:
                singles.append([f])
            else:
                groups.setdefault(int(lab), []).append(f)
        return _number(list(groups.values()) + singles)


def normalize_weights(weights: Sequence[float] | None, n: int) -> list[float]:
    if weights is None:
        return [1.0 / n] * n
    w = [float(x) for x in weights]
    if len(w) != n:
        raise InvalidWeights(f"{len(w)} weights for {n} clusters")
    if any(x < 0 or not np.isfinite(x) for x in w):
        raise InvalidWeights("weights must be finite and non-negative")
    total = sum(w)
    if total <= 0:
        raise InvalidWeights("weights sum to zero")
    return [x / total for x in w]


def cluster_template(cluster: Cluster) -> tuple[Fragment, MaskedTemplate]:
    """MCS of the members and the template it induces on the first member."""
    rep = cluster.members[0]
    common = mcs_many(cluster.members) if len(cluster) > 1 else rep
    mapping = find_embedding(common, rep)
    if mapping is None:
        raise AssertionError("cluster MCS does not embed in its representative")
    return common, template_from_substructure(rep, set(mapping.values()))


def make_cluster_templates(clusters: Sequence[Cluster], weights: Sequence[float] | None = None) -> list[ClusterTemplate]:
    if not clusters:
        raise ValueError("no clusters")
    norm = normalize_weights(weights, len(clusters))
    out = []
    for cluster, w in zip(clusters, norm):
        common, template = cluster_template(cluster)
        out.append(ClusterTemplate(cluster, common, template, w))
    return out


def dump_templates(templates: Sequence[ClusterTemplate]) -> str:
    return "".join(json.dumps(t.as_json(), sort_keys=True) + "\n" for t in templates)
