import json
import struct
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from labelaug.data_model import (
    DatasetManifest,
    FeatureMap,
    LabelRecord,
    ManifestWriter,
    PipelineConfig,
    SampleRecord,
    Stage,
    decode_feature_map,
    encode_feature_map,
    global_average_pool,
    iter_manifest,
    load_feature_map,
    read_manifest,
    require_stage,
    save_feature_map,
    write_manifest,
)
from labelaug.errors import (
    BadMagic,
    ConfigError,
    DimensionMismatch,
    IoFailure,
    NonFiniteValue,
    ParseError,
    StageMismatch,
    UnknownClassName,
)


def vfm_bytes(h, w, c, floats):
    return b"VFM1" + struct.pack("<III", h, w, c) + np.asarray(floats, dtype="<f4").tobytes()


# ---- feature maps ---------------------------------------------------------


def test_load_7x7x2048(tmp_path):
    vals = np.random.default_rng(0).normal(size=7 * 7 * 2048)
    p = tmp_path / "a.vfm"
    p.write_bytes(vfm_bytes(7, 7, 2048, vals))
    fm = load_feature_map(p)
    assert fm.shape == (7, 7, 2048)
    assert np.array_equal(fm.values.ravel(), vals.astype("<f4"))


def test_load_minimal(tmp_path):
    p = tmp_path / "a.vfm"
    p.write_bytes(vfm_bytes(1, 1, 1, [0.0]))
    fm = load_feature_map(p)
    assert fm.shape == (1, 1, 1) and fm.values[0, 0, 0] == 0.0


def test_short_payload_is_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        decode_feature_map(vfm_bytes(2, 2, 3, np.zeros(11)))


def test_long_payload_is_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        decode_feature_map(vfm_bytes(2, 2, 3, np.zeros(13)))


def test_bad_magic():
    with pytest.raises(BadMagic):
        decode_feature_map(b"VFM2" + struct.pack("<III", 1, 1, 1) + b"\0" * 4)
    with pytest.raises(BadMagic):
        decode_feature_map(b"VF")


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_rejected(bad):
    with pytest.raises(NonFiniteValue):
        decode_feature_map(vfm_bytes(1, 1, 2, [0.0, bad]))


def test_missing_file_is_io_failure(tmp_path):
    with pytest.raises(IoFailure):
        load_feature_map(tmp_path / "nope.vfm")


def test_header_is_little_endian():
    raw = encode_feature_map(FeatureMap(np.zeros((2, 3, 4))))
    assert raw[:4] == b"VFM1"
    assert struct.unpack("<III", raw[4:16]) == (2, 3, 4)
    assert len(raw) == 16 + 2 * 3 * 4 * 4


def test_row_major_layout():
    vals = np.arange(2 * 3 * 2, dtype=np.float32).reshape(2, 3, 2)
    raw = encode_feature_map(FeatureMap(vals))
    flat = np.frombuffer(raw[16:], dtype="<f4")
    # [y][x][c]
    assert flat[(1 * 3 + 2) * 2 + 1] == vals[1, 2, 1]


@pytest.mark.parametrize("shape", [(7, 7, 2048), (1, 1, 1)])
def test_save_load_round_trip(tmp_path, shape):
    vals = np.random.default_rng(1).normal(size=shape).astype(np.float32)
    p = tmp_path / "m.vfm"
    save_feature_map(FeatureMap(vals), p)
    assert load_feature_map(p) == FeatureMap(vals)


def test_single_value_round_trip(tmp_path):
    p = tmp_path / "m.vfm"
    save_feature_map(FeatureMap(np.array([[[3.5]]])), p)
    assert load_feature_map(p).values[0, 0, 0] == 3.5


def test_denormals_bit_identical(tmp_path):
    bits = np.array([1, 2, 0x007FFFFF, 0x80000001, 0x00400000, 0x80000000], dtype="<u4")
    vals = bits.view("<f4").reshape(1, 2, 3)
    p = tmp_path / "d.vfm"
    save_feature_map(FeatureMap(vals), p)
    back = load_feature_map(p).values.reshape(-1).view("<u4")
    assert np.array_equal(back, bits)


def test_feature_map_is_read_only():
    fm = FeatureMap(np.zeros((1, 1, 1)))
    with pytest.raises(ValueError):
        fm.values[0, 0, 0] = 1.0


def test_atomic_save_leaves_no_partial_file(tmp_path, monkeypatch):
    import labelaug.data_model as dm

    def boom(_fmap):
        raise RuntimeError("encoder died")

    monkeypatch.setattr(dm, "encode_feature_map", boom)
    with pytest.raises(RuntimeError):
        dm.save_feature_map(FeatureMap(np.zeros((1, 1, 1))), tmp_path / "x.vfm")
    assert list(tmp_path.iterdir()) == []


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=5),
                  elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_encode_decode_involution(vals):
    fm = FeatureMap(vals)
    raw = encode_feature_map(fm)
    assert decode_feature_map(raw) == fm
    assert encode_feature_map(decode_feature_map(raw)) == raw


# ---- GAP ------------------------------------------------------------------


def test_gap_small():
    fm = FeatureMap(np.array([1, 2, 3, 4], dtype=np.float32).reshape(2, 2, 1))
    assert global_average_pool(fm).tolist() == [2.5]


@pytest.mark.parametrize("shape", [(1, 1, 3), (7, 7, 5), (3, 2, 1)])
def test_gap_constant(shape):
    fm = FeatureMap(np.full(shape, 1.25))
    assert np.array_equal(global_average_pool(fm), np.full(shape[2], 1.25))


def test_gap_matches_naive_loop():
    vals = np.random.default_rng(2).normal(size=(7, 7, 4)).astype(np.float32)
    got = global_average_pool(FeatureMap(vals))
    for c in range(4):
        total = 0.0
        for y in range(7):
            for x in range(7):
                total += float(vals[y, x, c])
        assert abs(got[c] - total / 49) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-10, 10), st.floats(-10, 10))
def test_gap_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    m1 = rng.normal(size=(4, 3, 5))
    m2 = rng.normal(size=(4, 3, 5))
    lhs = global_average_pool(a * m1 + b * m2)
    rhs = a * global_average_pool(m1) + b * global_average_pool(m2)
    assert np.allclose(lhs, rhs, atol=1e-6)


# ---- manifests ------------------------------------------------------------


def small_manifest(stage=Stage.RAW):
    samples = [
        SampleRecord("a", 0, 0, "features/a.vfm", (0,)),
        SampleRecord("b", 1, 0, "features/b.vfm", (1,)),
        SampleRecord("c", 0, 1, "features/c.vfm", ()),
    ]
    return DatasetManifest(("cat", "dog"), samples, stage, {"note": "x"})


def test_manifest_round_trip(tmp_path):
    m = small_manifest()
    p = tmp_path / "m.jsonl"
    write_manifest(m, p)
    back = read_manifest(p)
    assert back == m
    assert [s.id for s in back.samples] == ["a", "b", "c"]
    p2 = tmp_path / "m2.jsonl"
    write_manifest(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_manifest_round_trip_with_label_info(tmp_path):
    info = (LabelRecord(0, "original", ((0, 0, 3, 4),), 1.5, 0.25), LabelRecord(1, "augmented", (), -2.0, 3.0))
    m = DatasetManifest(("a", "b"), [SampleRecord("x", 0, 0, "x.vfm", (0, 1), info)], Stage.AUGMENTED, {})
    p = tmp_path / "m.jsonl"
    write_manifest(m, p)
    assert read_manifest(p) == m


def test_unknown_class_index(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(
        json.dumps({"format": "labelaug-manifest/1", "classes": ["a", "b"], "stage": "raw", "provenance": {}}) + "\n"
        + json.dumps({"id": "x", "query_class": 0, "rank": 0, "feature_path": "x", "labels": [5]}) + "\n"
    )
    with pytest.raises(UnknownClassName, match="line 2"):
        read_manifest(p)


def test_unknown_class_in_constructor():
    with pytest.raises(UnknownClassName):
        DatasetManifest(("a", "b"), [SampleRecord("x", 5, 0, "x")])


def test_parse_error_has_line_number(tmp_path):
    p = tmp_path / "m.jsonl"
    write_manifest(small_manifest(), p)
    lines = p.read_text().splitlines()
    lines.insert(2, "{not json")
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as info:
        read_manifest(p)
    assert info.value.line == 3


def test_duplicate_ids_rejected(tmp_path):
    p = tmp_path / "m.jsonl"
    with pytest.raises(ParseError):
        with ManifestWriter(p, ["a"], Stage.RAW, {}) as w:
            w.write(SampleRecord("x", 0, 0, "x"))
            w.write(SampleRecord("x", 0, 1, "x"))
    assert not p.exists()


@pytest.mark.parametrize("classes", [[], ["a", "a"]])
def test_bad_class_lists(classes):
    with pytest.raises(ParseError):
        DatasetManifest(classes, [])


def test_stage_transitions():
    m = small_manifest()
    cur = m.advance(Stage.CURATED, m.samples, {})
    aug = cur.advance(Stage.AUGMENTED, cur.samples, {})
    assert aug.stage is Stage.AUGMENTED
    with pytest.raises(StageMismatch):
        m.advance(Stage.AUGMENTED, m.samples, {})
    with pytest.raises(StageMismatch):
        aug.advance(Stage.RAW, m.samples, {})
    with pytest.raises(StageMismatch):
        require_stage(aug, Stage.RAW)


def test_streaming_250k_records_memory_ceiling(tmp_path):
    p = tmp_path / "big.jsonl"
    n = 250_000
    with ManifestWriter(p, [f"c{k}" for k in range(96)], Stage.RAW, {}) as w:
        for i in range(n):
            w.write(SampleRecord(f"s{i:06d}", i % 96, i // 96, f"features/s{i:06d}.vfm"))
    tracemalloc.start()
    header, records = iter_manifest(p)
    count = sum(1 for _ in records)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert count == n and len(header["classes"]) == 96
    # the duplicate-id set is the only O(n) state; feature maps are never touched
    assert peak < 48 * 2**20, f"peak {peak / 2**20:.1f} MiB"


# ---- config ---------------------------------------------------------------


def test_pipeline_config_defaults_round_trip():
    cfg = PipelineConfig()
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert (cfg.intermediate_resize, cfg.output_size) == (63, 224)


@pytest.mark.parametrize("field,value", [
    ("prob_threshold", 1.0), ("prob_threshold", 0.0), ("iou_threshold", 1.5), ("area_threshold", 0.0),
    ("uncertainty_threshold", 0.0), ("anchors_per_class", 0), ("clusters_per_class", -1),
    ("cluster_accept_threshold", -0.1), ("seed", -1), ("iou_mode", "box"), ("cam_bias", "half"),
])
def test_pipeline_config_rejects(field, value):
    with pytest.raises(ConfigError):
        PipelineConfig(**{field: value})


def test_pipeline_config_unknown_key():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"prob_treshold": 0.5})


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.01, 0.99),
       st.one_of(st.none(), st.floats(0.01, 100)), st.integers(0, 2**32 - 1))
def test_pipeline_config_lossless(tp, iou, area, tu, seed):
    cfg = PipelineConfig(prob_threshold=tp, iou_threshold=iou, area_threshold=area,
                         uncertainty_threshold=tu, seed=seed)
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
