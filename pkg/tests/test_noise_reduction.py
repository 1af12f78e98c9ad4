import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labelaug.data_model import DatasetManifest, FeatureMap, PipelineConfig, SampleRecord, Stage, save_feature_map
from labelaug.errors import EmptyClass, SampleError, StageMismatch, TooFewSamples
from labelaug.noise_reduction import (
    AnchorSet,
    ClusterModel,
    curate_dataset,
    format_report,
    kmeans_cluster,
    normalize_rows,
    select_anchors,
    select_clusters,
)


def recs(ranks, k=0):
    return [SampleRecord(f"s{r:02d}", k, r, f"{r}.vfm") for r in ranks]


# ---- anchors ----------------------------------------------------------------


def test_anchors_are_lowest_ranks():
    samples = recs(range(10))
    feats = [np.eye(10)[i] * (i + 1) for i in range(10)]
    a = select_anchors(samples, feats, 3)
    assert a.anchor_ids == ("s00", "s01", "s02")
    assert np.allclose(np.linalg.norm(a.anchor_vectors, axis=1), 1.0, atol=1e-9)


def test_fewer_samples_than_anchors():
    a = select_anchors(recs([0, 1]), [np.ones(3), np.ones(3)], 5)
    assert len(a.anchor_ids) == 2


def test_empty_class():
    with pytest.raises(EmptyClass):
        select_anchors([], [], 3)


@settings(max_examples=50, deadline=None)
@given(st.permutations(list(range(12))), st.integers(1, 12))
def test_anchor_choice_ignores_input_order(perm, r):
    rng = np.random.default_rng(0)
    feats = {i: rng.normal(size=4) for i in range(12)}
    sorted_set = select_anchors(recs(range(12)), [feats[i] for i in range(12)], r)
    shuffled = select_anchors(recs(perm), [feats[i] for i in perm], r)
    assert shuffled.anchor_ids == sorted_set.anchor_ids
    assert np.array_equal(shuffled.anchor_vectors, sorted_set.anchor_vectors)


def test_rank_ties_broken_by_id():
    samples = [SampleRecord("b", 0, 0, "b"), SampleRecord("a", 0, 0, "a"), SampleRecord("c", 0, 1, "c")]
    a = select_anchors(samples, [np.ones(2)] * 3, 2)
    assert a.anchor_ids == ("a", "b")


# ---- k-means ---------------------------------------------------------------


def test_one_cluster_per_point():
    x = normalize_rows(np.random.default_rng(0).normal(size=(6, 4)))
    m = kmeans_cluster(x, 6, seed=0)
    assert m.inertia == pytest.approx(0.0, abs=1e-12)
    assert sorted(m.assignments.values()) == list(range(6))
    for i, j in m.assignments.items():
        assert np.allclose(m.centroids[j], x[i])


def brute_force_partition(x, k):
    """Minimum-inertia assignment of ``x`` into ``k`` non-empty groups with normalized-mean centroids."""
    best = None
    for labels in itertools.product(range(k), repeat=len(x)):
        labels = np.array(labels)
        if len(set(labels)) != k:
            continue
        cents = normalize_rows(np.stack([x[labels == j].sum(0) for j in range(k)]))
        inertia = float(((x - cents[labels]) ** 2).sum())
        if best is None or inertia < best[0] - 1e-12:
            best = (inertia, labels, cents)
    return best


def test_two_blobs_on_circle():
    ang = np.array([0.1, 0.2, 2.0, 2.1])
    x = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    inertia, labels, cents = brute_force_partition(x, 2)
    m = kmeans_cluster(x, 2, seed=3)
    assert m.inertia == pytest.approx(inertia, abs=1e-12)
    got = sorted(map(tuple, np.round(m.centroids, 12)))
    want = sorted(map(tuple, np.round(cents, 12)))
    assert np.allclose(got, want)
    assert m.assignments[0] == m.assignments[1] != m.assignments[2] == m.assignments[3]


def test_identical_vectors():
    x = np.tile([0.6, 0.8], (5, 1))
    m = kmeans_cluster(x, 2, seed=0)
    assert m.inertia == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(m.centroids).all()
    assert np.allclose(np.linalg.norm(m.centroids, axis=1), 1.0)


def test_too_few_samples():
    with pytest.raises(TooFewSamples):
        kmeans_cluster(np.eye(3), 4, seed=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(5, 60), st.integers(1, 8))
def test_kmeans_inertia_non_increasing(seed, n, k):
    rng = np.random.default_rng(seed)
    x = normalize_rows(rng.normal(size=(n, 5)) + rng.normal(size=(1, 5)))
    m = kmeans_cluster(x, min(k, n), seed=seed)
    trace = np.array(m.inertia_trace)
    assert (np.diff(trace) <= 1e-9 * np.maximum(1, trace[:-1])).all()
    assert m.inertia >= 0
    assert np.allclose(np.linalg.norm(m.centroids, axis=1), 1.0, atol=1e-9)
    assert set(m.assignments) == set(range(n))


def test_kmeans_deterministic():
    x = normalize_rows(np.random.default_rng(5).normal(size=(40, 6)))
    a, b = kmeans_cluster(x, 5, seed=9), kmeans_cluster(x, 5, seed=9)
    assert np.array_equal(a.centroids, b.centroids) and a.assignments == b.assignments


# ---- cluster selection -------------------------------------------------------


def model_with(centroids, k=0):
    return ClusterModel(k, normalize_rows(centroids), {}, 0.0)


def anchors_with(vectors, k=0):
    return AnchorSet(k, normalize_rows(vectors), tuple(f"a{i}" for i in range(len(vectors))))


def test_centroid_equal_to_anchor_selected():
    m = model_with(np.eye(3))
    assert select_clusters(m, anchors_with(np.eye(3)[[1]]), 0.0) == {1}


def test_orthogonal_fallback_takes_first_index():
    m = model_with(np.eye(4)[:3])
    assert select_clusters(m, anchors_with(np.eye(4)[[3]]), 0.3) == {0}


def brute_selection(centroids, anchors, t):
    d = [min(1.0 - sum(c[i] * a[i] for i in range(len(c))) for a in anchors) for c in centroids]
    chosen = {j for j, v in enumerate(d) if v <= t}
    return chosen or {min(range(len(d)), key=lambda j: (d[j], j))}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 10), st.integers(1, 6), st.floats(0, 2))
def test_selection_matches_pairwise_scan(seed, kc, r, t):
    rng = np.random.default_rng(seed)
    cents = normalize_rows(rng.normal(size=(kc, 5)))
    anchors = normalize_rows(rng.normal(size=(r, 5)))
    assert select_clusters(model_with(cents), anchors_with(anchors), t) == brute_selection(cents, anchors, t)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 1.5))
def test_selection_invariant_to_centroid_order(seed, t):
    rng = np.random.default_rng(seed)
    cents = normalize_rows(rng.normal(size=(6, 4)))
    anchors = anchors_with(rng.normal(size=(3, 4)))
    perm = rng.permutation(6)
    a = select_clusters(model_with(cents), anchors, t)
    b = select_clusters(model_with(cents[perm]), anchors, t)
    assert a == {int(perm[j]) for j in b}


def test_selection_class_mismatch():
    with pytest.raises(ValueError):
        select_clusters(model_with(np.eye(2), k=0), anchors_with(np.eye(2), k=1), 0.3)


# ---- curate_dataset ------------------------------------------------------------


def write_raw(tmp_path, per_class, classes=("a", "b")):
    """``per_class``: {k: [(rank, gap_vector), ...]}"""
    samples = []
    for k, items in per_class.items():
        for rank, vec in items:
            sid = f"{classes[k]}_{rank:03d}"
            rel = f"{sid}.vfm"
            save_feature_map(FeatureMap(np.tile(vec, (2, 2, 1))), tmp_path / rel)
            samples.append(SampleRecord(sid, k, rank, rel))
    return DatasetManifest(classes, samples, Stage.RAW, {}, root=tmp_path)


def test_tight_blob_keeps_everything(tmp_path):
    rng = np.random.default_rng(0)
    base = np.array([1.0, 0.2, 0.0, 0.1])
    items = [(r, base + rng.normal(0, 0.01, 4)) for r in range(30)]
    m = write_raw(tmp_path, {0: items, 1: []})
    out, reports = curate_dataset(m, PipelineConfig())
    assert len(out.samples) == 30
    assert out.stage is Stage.CURATED


def test_planted_mixture_precision(tmp_path):
    rng = np.random.default_rng(1)
    good = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    noise = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 0.0])
    items, truth = [], {}
    order = rng.permutation(100)
    for i, r in enumerate(order):
        is_good = i < 70 if r >= 5 else True
        vec = (good if is_good else noise) + rng.normal(0, 0.15, 6)
        items.append((int(r), np.abs(vec)))
        truth[f"a_{int(r):03d}"] = is_good
    m = write_raw(tmp_path, {0: items, 1: []})
    out, _ = curate_dataset(m, PipelineConfig(clusters_per_class=8))
    kept = [s.id for s in out.samples]
    assert sum(truth[s] for s in kept) / len(kept) >= 0.85


def test_empty_class_removed_with_warning(tmp_path):
    m = write_raw(tmp_path, {0: [(r, np.ones(3) + r) for r in range(10)], 1: []})
    out, reports = curate_dataset(m, PipelineConfig())
    assert out.classes == ("a", "b")
    assert all(s.query_class == 0 for s in out.samples)
    assert reports[1].warning and "b" in out.provenance["curate"]["warnings"][0]


def test_curation_invariants(tmp_path):
    rng = np.random.default_rng(2)
    per = {k: [(r, np.abs(rng.normal(size=5)) + 2 * np.eye(5)[k]) for r in range(25)] for k in range(2)}
    m = write_raw(tmp_path, per)
    cfg = PipelineConfig(anchors_per_class=4, seed=11)
    out, _ = curate_dataset(m, cfg)
    raw_ids = [s.id for s in m.samples]
    kept = [s.id for s in out.samples]
    assert set(kept) <= set(raw_ids)
    assert kept == [i for i in raw_ids if i in set(kept)]
    for k, name in enumerate(m.classes):
        anchors = {f"{name}_{r:03d}" for r in range(4)}
        assert anchors <= set(kept)
    assert all(s.labels == (s.query_class,) for s in out.samples)
    prov = out.provenance["curate"]
    assert (prov["anchors_per_class"], prov["clusters_per_class"], prov["cluster_accept_threshold"], prov["seed"]) \
        == (4, 8, 0.35, 11)
    again, _ = curate_dataset(m, cfg)
    assert again == out
    threaded, _ = curate_dataset(m, cfg, threads=3)
    assert threaded == out


def test_curate_requires_raw(tmp_path):
    m = write_raw(tmp_path, {0: [(0, np.ones(2))], 1: []})
    cur = m.advance(Stage.CURATED, m.samples, {})
    with pytest.raises(StageMismatch):
        curate_dataset(cur, PipelineConfig())


def test_loader_error_names_sample(tmp_path):
    m = write_raw(tmp_path, {0: [(r, np.ones(2) * (r + 1)) for r in range(3)], 1: []})
    (tmp_path / "a_001.vfm").write_bytes(b"junk")
    with pytest.raises(SampleError, match="a_001"):
        curate_dataset(m, PipelineConfig())


def test_report_table(tmp_path):
    m = write_raw(tmp_path, {0: [(r, np.ones(3) + r) for r in range(10)], 1: []})
    _, reports = curate_dataset(m, PipelineConfig())
    text = format_report(reports)
    assert "kept" in text and text.splitlines()[-1].startswith("total")
