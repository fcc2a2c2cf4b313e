"""
K-Means grouping of malicious code vectors.

Centroids are seeded with k-means++ from a fixed seed and refined with
plain Lloyd iterations, so the same vectors and seed always give the same
clusters.
"""
import json
import math
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from loguru import logger
from scipy.spatial.distance import cdist
from sklearn.cluster import kmeans_plusplus

from ruleforge.services.errors import ClusterTooSmall, DimensionMismatch, EmptyInput, KTooLarge
from ruleforge.services.models import BasicUnit, CodeCluster, CodeVector, MemberRef

DEFAULT_SEED = 42
DEFAULT_MAX_ITER = 500
DEFAULT_INTRA_THRESHOLD = 0.85


def choose_k(n: int, override: Optional[int] = None) -> int:
    """Default k = max(1, floor(sqrt(n / 2))); an override is capped at n."""
    if n < 1:
        raise EmptyInput("cannot choose k for an empty vector set")
    if override is not None:
        if override > n:
            logger.warning(f"⚠️  k={override} exceeds {n} vectors, using k={n}")
        return max(1, min(override, n))
    return max(1, int(math.floor(math.sqrt(n / 2))))


def intra_similarity(distances: np.ndarray, members: Optional[np.ndarray] = None,
                     centroid: Optional[np.ndarray] = None, metric: str = "inverse_distance") -> float:
    """
    Mean member-to-centroid similarity in [0, 1].

    ``inverse_distance`` maps each euclidean distance d to 1 / (1 + d);
    ``cosine`` uses the clipped cosine between member and centroid.
    """
    if metric == "inverse_distance":
        return float(np.mean(1.0 / (1.0 + distances)))
    if metric == "cosine":
        sims = []
        c_norm = float(np.linalg.norm(centroid))
        for row in members:
            r_norm = float(np.linalg.norm(row))
            if r_norm == 0.0 or c_norm == 0.0:
                sims.append(1.0 if r_norm == c_norm else 0.0)
            else:
                sims.append(float(np.dot(row, centroid) / (r_norm * c_norm)))
        return float(np.clip(np.mean(sims), 0.0, 1.0))
    raise ValueError(f"unknown similarity metric '{metric}'")


def kmeans(
    vectors: Sequence[CodeVector],
    k: int,
    seed: int = DEFAULT_SEED,
    max_iter: int = DEFAULT_MAX_ITER,
    similarity: str = "inverse_distance",
) -> List[CodeCluster]:
    """
    Cluster vectors with seeded k-means++ initialisation and Lloyd updates.

    Args:
        vectors: Code vectors of one dimension; ``source`` identifies members
        k: Number of clusters (1..len(vectors))
        seed: Centroid seeding PRNG seed
        max_iter: Iteration cap

    Returns:
        Non-empty clusters ordered by their first member, ids from 0
    """
    if not vectors:
        raise EmptyInput("kmeans needs at least one vector")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(vectors):
        raise KTooLarge(f"k={k} exceeds the number of vectors ({len(vectors)})")
    if len({v.dim for v in vectors}) != 1:
        raise DimensionMismatch("kmeans needs vectors of one dimension")

    X = np.vstack([v.values for v in vectors]).astype(np.float64)
    centers, _ = kmeans_plusplus(X, n_clusters=k, random_state=seed)
    centers = centers.astype(np.float64)

    labels = None
    previous_objective = math.inf
    for iteration in range(max_iter):
        squared = cdist(X, centers, "sqeuclidean")
        new_labels = squared.argmin(axis=1)
        objective = float(squared[np.arange(len(X)), new_labels].sum())
        if __debug__:
            assert objective <= previous_objective + 1e-9 * max(1.0, abs(previous_objective)), (
                f"k-means objective increased at iteration {iteration}"
            )
        previous_objective = objective
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            mask = labels == j
            if mask.any():
                centers[j] = X[mask].mean(axis=0)

    clusters = []
    order = sorted(set(labels.tolist()), key=lambda j: int(np.argmax(labels == j)))
    for new_id, j in enumerate(order):
        index = np.flatnonzero(labels == j)
        members = X[index]
        centroid = centers[j]
        distances = np.sqrt(((members - centroid) ** 2).sum(axis=1))
        refs = tuple(
            vectors[i].source if vectors[i].source is not None else MemberRef("", "", int(i))
            for i in index
        )
        clusters.append(CodeCluster(
            id=new_id,
            members=refs,
            centroid=CodeVector(centroid.copy()),
            intra_similarity=intra_similarity(distances, members, centroid, similarity),
            distances=tuple(float(d) for d in distances),
        ))

    dropped = k - len(clusters)
    if dropped:
        logger.debug(f"k-means left {dropped} empty cluster(s)")
    return clusters


def filter_clusters(clusters: Sequence[CodeCluster], threshold: float = DEFAULT_INTRA_THRESHOLD) -> List[CodeCluster]:
    """Keep clusters whose intra-similarity is at least ``threshold``."""
    return [c for c in clusters if c.intra_similarity >= threshold]


def select_representatives(
    cluster: CodeCluster,
    units: Mapping[MemberRef, BasicUnit],
    n: int = 2,
    strict: bool = False,
) -> List[BasicUnit]:
    """
    The ``n`` members nearest the centroid, preferring distinct packages.

    Ties break on (distance, package, file). A cluster with fewer than
    ``n`` members returns all of them, or raises ClusterTooSmall when
    ``strict``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    ranked = sorted(
        zip(cluster.distances, cluster.members),
        key=lambda item: (item[0], item[1].package, item[1].file, item[1].unit_index),
    )
    if len(ranked) < n:
        if strict:
            raise ClusterTooSmall(f"cluster {cluster.id} has {len(ranked)} members, {n} requested")
        logger.warning(f"⚠️  Cluster {cluster.id} has only {len(ranked)} member(s); using all")
        return [units[ref] for _, ref in ranked]

    chosen: List[MemberRef] = []
    seen_packages = set()
    for _, ref in ranked:
        if len(chosen) == n:
            break
        if ref.package not in seen_packages:
            chosen.append(ref)
            seen_packages.add(ref.package)
    for _, ref in ranked:
        if len(chosen) == n:
            break
        if ref not in chosen:
            chosen.append(ref)
    return [units[ref] for ref in chosen]


def cluster_manifest(clusters: Sequence[CodeCluster], k: int, seed: int, retained_ids: Sequence[int] = ()) -> str:
    """Canonical JSON description of a clustering run."""
    retained = set(retained_ids)
    payload: Dict = {
        "k": k,
        "seed": seed,
        "clusters": [dict(c.to_dict(), retained=c.id in retained) for c in clusters],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def clusters_from_manifest(data: Dict) -> List[CodeCluster]:
    """Rebuild clusters (without centroids) from a manifest mapping."""
    clusters = []
    for entry in data["clusters"]:
        clusters.append(CodeCluster(
            id=entry["id"],
            members=tuple(MemberRef(m[0], m[1], m[2]) for m in entry["members"]),
            centroid=CodeVector(np.zeros(0)),
            intra_similarity=entry["intra_similarity"],
            distances=tuple(entry.get("distances", [])),
        ))
    return clusters
