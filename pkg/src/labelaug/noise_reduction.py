"""Anchor-guided cluster curation of noisy web search results.

For every class the top-ranked results become anchors. The remaining
samples are over-segmented with spherical k-means, and a cluster survives
when its centroid lies within a cosine distance of some anchor.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from .data_model import (
    DatasetManifest,
    PipelineConfig,
    SampleRecord,
    Stage,
    global_average_pool,
    require_stage,
)
from .errors import EmptyClass, InvariantViolation, SampleError, TooFewSamples

log = logging.getLogger(__name__)

MAX_ITER = 100
_INERTIA_SLACK = 1e-9


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize rows; all-zero rows stay zero."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


@dataclass(frozen=True)
class AnchorSet:
    class_index: int
    anchor_vectors: np.ndarray  # (R, C), unit rows
    anchor_ids: tuple[str, ...]


@dataclass(frozen=True)
class ClusterModel:
    class_index: int
    centroids: np.ndarray  # (k_c, C), unit rows
    assignments: dict[Hashable, int]
    inertia: float
    inertia_trace: tuple[float, ...] = ()
    iterations: int = 0


def _by_rank(samples: Sequence[SampleRecord]) -> list[int]:
    return sorted(range(len(samples)), key=lambda i: (samples[i].rank, samples[i].id))


def select_anchors(samples: Sequence[SampleRecord], features: Sequence[np.ndarray], count: int,
                   class_index: int | None = None) -> AnchorSet:
    """The ``count`` best-ranked samples (ties broken by id), normalized."""
    if len(samples) == 0:
        raise EmptyClass("cannot select anchors from an empty class")
    if len(features) != len(samples):
        raise ValueError("one feature vector per sample is required")
    order = _by_rank(samples)[:count]
    vecs = normalize_rows(np.stack([np.asarray(features[i], dtype=np.float64) for i in order]))
    k = samples[0].query_class if class_index is None else class_index
    return AnchorSet(k, vecs, tuple(samples[i].id for i in order))


def _cos_dist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return 1.0 - x @ c.T


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [int(rng.integers(n))]
    closest = np.maximum(_cos_dist(x, x[centers[0]][None, :])[:, 0], 0.0)
    for _ in range(1, k):
        weights = closest**2
        total = weights.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=weights / total))
        centers.append(idx)
        closest = np.minimum(closest, np.maximum(_cos_dist(x, x[idx][None, :])[:, 0], 0.0))
    return x[centers].copy()


def _inertia(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = x - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeans_cluster(vectors: np.ndarray, k_c: int, seed: int, ids: Sequence[Hashable] | None = None,
                   class_index: int = -1, max_iter: int = MAX_ITER) -> ClusterModel:
    """Spherical k-means with k-means++ seeding.

    Points are assigned by cosine similarity and centroids are re-normalized
    means. ``inertia`` is the sum of squared Euclidean distances between each
    point and its centroid (for unit vectors that is twice the cosine
    distance). Raises InvariantViolation if an iteration ever increases it.
    """
    x = normalize_rows(vectors)
    n = x.shape[0]
    if k_c < 1 or n < k_c:
        raise TooFewSamples(f"need at least k_c={k_c} vectors, got {n}")
    ids = list(range(n)) if ids is None else list(ids)
    rng = np.random.default_rng(seed)

    centroids = _kmeanspp(x, k_c, rng)
    labels = np.argmax(x @ centroids.T, axis=1)
    trace = [_inertia(x, centroids, labels)]
    it = 0
    for it in range(1, max_iter + 1):
        centroids = _update_centroids(x, labels, centroids)
        trace.append(_inertia(x, centroids, labels))
        new_labels = np.argmax(x @ centroids.T, axis=1)
        trace.append(_inertia(x, centroids, new_labels))
        for prev, cur in zip(trace[-3:-1], trace[-2:]):
            if cur > prev + _INERTIA_SLACK * max(1.0, prev):
                raise InvariantViolation(f"k-means inertia rose from {prev} to {cur} at iteration {it}")
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels

    return ClusterModel(
        class_index=class_index,
        centroids=centroids,
        assignments={i: int(lab) for i, lab in zip(ids, labels)},
        inertia=trace[-1],
        inertia_trace=tuple(trace),
        iterations=it,
    )


def _update_centroids(x: np.ndarray, labels: np.ndarray, old: np.ndarray) -> np.ndarray:
    k = old.shape[0]
    sums = np.zeros_like(old)
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    new = old.copy()
    filled = counts > 0
    norms = np.linalg.norm(sums, axis=1)
    # a non-empty cluster whose members cancel out keeps its old centroid
    ok = filled & (norms > 0)
    new[ok] = sums[ok] / norms[ok, None]
    for j in np.flatnonzero(~filled):
        # empty cluster: move it onto the point farthest from its nearest centroid
        others = np.delete(new, j, axis=0)
        nearest = np.max(x @ others.T, axis=1) if others.size else np.zeros(x.shape[0])
        new[j] = x[int(np.argmin(nearest))]
    return new


def anchor_distances(model: ClusterModel, anchors: AnchorSet) -> np.ndarray:
    """Cosine distance from each centroid to its nearest anchor."""
    return np.min(_cos_dist(model.centroids, anchors.anchor_vectors), axis=1)


def select_clusters(model: ClusterModel, anchors: AnchorSet, threshold: float) -> set[int]:
    if model.class_index != anchors.class_index:
        raise ValueError("cluster model and anchors belong to different classes")
    dist = anchor_distances(model, anchors)
    chosen = {int(j) for j in np.flatnonzero(dist <= threshold)}
    if not chosen:
        chosen = {int(np.argmin(dist))}
    return chosen


@dataclass(frozen=True)
class ClassReport:
    class_index: int
    class_name: str
    samples: int
    anchors: int
    clusters: int
    clusters_kept: int
    kept: int
    dropped: int
    warning: str | None = None


def curate_class(k: int, samples: list[SampleRecord], manifest: DatasetManifest,
                 config: PipelineConfig) -> tuple[list[SampleRecord], ClassReport]:
    name = manifest.classes[k]
    if not samples:
        msg = f"class {name!r} has no samples; removed"
        log.warning(msg)
        return [], ClassReport(k, name, 0, 0, 0, 0, 0, 0, warning=msg)

    feats = []
    for s in samples:
        try:
            feats.append(global_average_pool(manifest.load_features(s)))
        except Exception as exc:
            raise SampleError(s.id, exc) from exc

    anchors = select_anchors(samples, feats, config.anchors_per_class, class_index=k)
    anchor_ids = set(anchors.anchor_ids)
    rest = [i for i, s in enumerate(samples) if s.id not in anchor_ids]

    keep_ids = set(anchor_ids)
    n_clusters = n_kept_clusters = 0
    if rest:
        n_clusters = min(config.clusters_per_class, len(rest))
        model = kmeans_cluster(
            np.stack([feats[i] for i in rest]), n_clusters,
            seed=_class_seed(config.seed, k), ids=[samples[i].id for i in rest], class_index=k,
        )
        chosen = select_clusters(model, anchors, config.cluster_accept_threshold)
        n_kept_clusters = len(chosen)
        keep_ids.update(sid for sid, j in model.assignments.items() if j in chosen)

    kept = [s for s in samples if s.id in keep_ids]
    report = ClassReport(k, name, len(samples), len(anchor_ids), n_clusters, n_kept_clusters,
                         len(kept), len(samples) - len(kept))
    return kept, report


def _class_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def curate_dataset(manifest: DatasetManifest, config: PipelineConfig, threads: int = 1
                   ) -> tuple[DatasetManifest, list[ClassReport]]:
    """Noise-reduce a raw manifest into a curated single-label manifest.

    Kept samples retain their original order and receive ``{query_class}``
    as their label set.
    """
    require_stage(manifest, Stage.RAW)
    groups = manifest.by_class()

    def work(k: int):
        return curate_class(k, groups[k], manifest, config)

    ks = range(manifest.num_classes)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, ks))
    else:
        results = [work(k) for k in ks]

    keep = {s.id for kept, _ in results for s in kept}
    reports = [r for _, r in results]
    out = [
        SampleRecord(s.id, s.query_class, s.rank, s.feature_path, labels=(s.query_class,))
        for s in manifest.samples
        if s.id in keep
    ]
    provenance = dict(manifest.provenance)
    provenance["curate"] = {
        "anchors_per_class": config.anchors_per_class,
        "clusters_per_class": config.clusters_per_class,
        "cluster_accept_threshold": config.cluster_accept_threshold,
        "seed": config.seed,
    }
    warnings = [r.warning for r in reports if r.warning]
    if warnings:
        provenance["curate"]["warnings"] = warnings
    return manifest.advance(Stage.CURATED, out, provenance), reports


def format_report(reports: Sequence[ClassReport]) -> str:
    header = f"{'class':<20} {'samples':>8} {'anchors':>8} {'clusters':>9} {'kept_cl':>8} {'kept':>6} {'dropped':>8}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.class_name[:20]:<20} {r.samples:>8} {r.anchors:>8} {r.clusters:>9} "
            f"{r.clusters_kept:>8} {r.kept:>6} {r.dropped:>8}"
        )
    total = sum(r.samples for r in reports)
    kept = sum(r.kept for r in reports)
    lines.append("-" * len(header))
    lines.append(f"{'total':<20} {total:>8} {'':>8} {'':>9} {'':>8} {kept:>6} {total - kept:>8}")
    return "\n".join(lines)
