"""Core data types and on-disk formats.

Feature maps travel as VFM1 binaries::

    b"VFM1" | uint32 H | uint32 W | uint32 C | float32[H*W*C]   (little endian, row-major y, x, c)

Manifests are line-delimited JSON: one header object followed by one object
per sample, so they can be streamed without touching the feature files.
"""

from __future__ import annotations

import contextlib
import enum
import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import IO, Any, Iterable, Iterator

import numpy as np

from .errors import (
    BadMagic,
    ConfigError,
    DimensionMismatch,
    IoFailure,
    NonFiniteValue,
    ParseError,
    StageMismatch,
    UnknownClassName,
)

VFM_MAGIC = b"VFM1"
_VFM_HEADER = struct.Struct("<4sIII")
MANIFEST_FORMAT = "labelaug-manifest/1"


# --------------------------------------------------------------------------
# Feature maps
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Backbone activations of one image, stored as float32 ``(H, W, C)``."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise DimensionMismatch(f"feature map must be a non-empty HxWxC array, got {arr.shape}")
        arr = np.array(arr, dtype="<f4", order="C", copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteValue("feature map contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def as_float64(self) -> np.ndarray:
        return self.values.astype(np.float64)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.shape == other.shape and self.values.tobytes() == other.values.tobytes()

    __hash__ = None  # type: ignore[assignment]


def encode_feature_map(fmap: FeatureMap) -> bytes:
    h, w, c = fmap.shape
    return _VFM_HEADER.pack(VFM_MAGIC, h, w, c) + fmap.values.tobytes(order="C")


def decode_feature_map(data: bytes) -> FeatureMap:
    if len(data) < _VFM_HEADER.size:
        raise BadMagic("file too short for a VFM1 header")
    magic, h, w, c = _VFM_HEADER.unpack_from(data)
    if magic != VFM_MAGIC:
        raise BadMagic(f"expected magic {VFM_MAGIC!r}, found {magic!r}")
    if h < 1 or w < 1 or c < 1:
        raise DimensionMismatch(f"zero dimension in header ({h}, {w}, {c})")
    payload = data[_VFM_HEADER.size:]
    expected = h * w * c * 4
    if len(payload) != expected:
        raise DimensionMismatch(
            f"payload holds {len(payload) / 4:g} floats, header ({h}, {w}, {c}) needs {h * w * c}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    return FeatureMap(values)


def load_feature_map(path: str | os.PathLike) -> FeatureMap:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read feature map {path}: {exc}") from exc
    return decode_feature_map(data)


def save_feature_map(fmap: FeatureMap, path: str | os.PathLike) -> None:
    try:
        with atomic_write(path, "wb") as fh:
            fh.write(encode_feature_map(fmap))
    except OSError as exc:
        raise IoFailure(f"cannot write feature map {path}: {exc}") from exc


def global_average_pool(fmap: FeatureMap | np.ndarray) -> np.ndarray:
    """Spatial mean of every channel, in float64."""
    values = fmap.values if isinstance(fmap, FeatureMap) else np.asarray(fmap)
    return values.astype(np.float64).mean(axis=(0, 1))


@contextlib.contextmanager
def atomic_write(path: str | os.PathLike, mode: str = "w") -> Iterator[IO[Any]]:
    """Write through a temp file in the destination directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        kwargs = {} if "b" in mode else {"encoding": "utf-8", "newline": "\n"}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------


class Stage(str, enum.Enum):
    RAW = "raw"
    CURATED = "curated"
    AUGMENTED = "augmented"

    @property
    def order(self) -> int:
        return list(Stage).index(self)


@dataclass(frozen=True)
class LabelRecord:
    """Per-label detail attached to augmented manifests."""

    class_index: int
    provenance: str  # "original" | "augmented"
    bboxes: tuple[tuple[int, int, int, int], ...]
    score: float
    sigma2: float

    def to_json(self) -> dict[str, Any]:
        return {
            "class": self.class_index,
            "provenance": self.provenance,
            "bboxes": [list(b) for b in self.bboxes],
            "score": self.score,
            "sigma2": self.sigma2,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "LabelRecord":
        return cls(
            class_index=int(obj["class"]),
            provenance=str(obj["provenance"]),
            bboxes=tuple(tuple(int(v) for v in b) for b in obj["bboxes"]),
            score=float(obj["score"]),
            sigma2=float(obj["sigma2"]),
        )


@dataclass(frozen=True)
class SampleRecord:
    id: str
    query_class: int
    rank: int
    feature_path: str
    labels: tuple[int, ...] = ()
    label_info: tuple[LabelRecord, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", tuple(sorted(set(int(k) for k in self.labels))))
        if self.rank < 0:
            raise ParseError(f"sample {self.id!r} has negative rank {self.rank}")

    def to_json(self) -> dict[str, Any]:
        obj: dict[str, Any] = {
            "id": self.id,
            "query_class": self.query_class,
            "rank": self.rank,
            "feature_path": self.feature_path,
            "labels": list(self.labels),
        }
        if self.label_info is not None:
            obj["label_info"] = [rec.to_json() for rec in self.label_info]
        return obj

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "SampleRecord":
        info = obj.get("label_info")
        return cls(
            id=str(obj["id"]),
            query_class=int(obj["query_class"]),
            rank=int(obj["rank"]),
            feature_path=str(obj["feature_path"]),
            labels=tuple(int(k) for k in obj.get("labels", [])),
            label_info=None if info is None else tuple(LabelRecord.from_json(r) for r in info),
        )


@dataclass(frozen=True)
class DatasetManifest:
    classes: tuple[str, ...]
    samples: tuple[SampleRecord, ...]
    stage: Stage = Stage.RAW
    provenance: dict[str, Any] = field(default_factory=dict)
    # directory that relative feature paths resolve against; not part of identity
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "stage", Stage(self.stage))
        _check_classes(self.classes)
        for s in self.samples:
            _check_record(s, len(self.classes))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def feature_file(self, sample: SampleRecord) -> Path:
        p = Path(sample.feature_path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def load_features(self, sample: SampleRecord) -> FeatureMap:
        return load_feature_map(self.feature_file(sample))

    def by_class(self) -> dict[int, list[SampleRecord]]:
        groups: dict[int, list[SampleRecord]] = {k: [] for k in range(self.num_classes)}
        for s in self.samples:
            groups[s.query_class].append(s)
        return groups

    def advance(self, stage: Stage, samples: Iterable[SampleRecord], provenance: dict[str, Any]) -> "DatasetManifest":
        """Next-stage manifest; refuses to move backwards or skip nothing."""
        if stage.order != self.stage.order + 1:
            raise StageMismatch(f"cannot move manifest from stage {self.stage.value} to {stage.value}")
        return replace(self, samples=tuple(samples), stage=stage, provenance=provenance)


def require_stage(manifest: DatasetManifest, stage: Stage) -> None:
    if manifest.stage is not stage:
        raise StageMismatch(f"expected a {stage.value} manifest, got stage {manifest.stage.value}")


def _check_classes(classes: tuple[str, ...]) -> None:
    if len(classes) < 1:
        raise ParseError("manifest needs at least one class")
    if len(set(classes)) != len(classes):
        raise ParseError("class names must be unique")


def _check_record(s: SampleRecord, k: int) -> None:
    for idx in (s.query_class, *s.labels):
        if not 0 <= idx < k:
            raise UnknownClassName(f"sample {s.id!r} references class index {idx}, manifest has {k} classes")


def _dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


class ManifestWriter:
    """Streaming writer; the file only appears once the context exits cleanly."""

    def __init__(self, path: str | os.PathLike, classes: Iterable[str], stage: Stage, provenance: dict[str, Any]):
        self.path = Path(path)
        self.classes = tuple(classes)
        self.stage = Stage(stage)
        self.provenance = provenance
        _check_classes(self.classes)
        self._ctx = None
        self._fh: IO[str] | None = None
        self._seen: set[str] = set()

    def __enter__(self) -> "ManifestWriter":
        self._ctx = atomic_write(self.path, "w")
        self._fh = self._ctx.__enter__()
        head = {"format": MANIFEST_FORMAT, "classes": list(self.classes), "stage": self.stage.value,
                "provenance": self.provenance}
        self._fh.write(_dumps(head) + "\n")
        return self

    def write(self, sample: SampleRecord) -> None:
        _check_record(sample, len(self.classes))
        if sample.id in self._seen:
            raise ParseError(f"duplicate sample id {sample.id!r}")
        self._seen.add(sample.id)
        self._fh.write(_dumps(sample.to_json()) + "\n")

    def __exit__(self, *exc) -> None:
        self._ctx.__exit__(*exc)


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    try:
        with ManifestWriter(path, manifest.classes, manifest.stage, manifest.provenance) as writer:
            for s in manifest.samples:
                writer.write(s)
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def _parse_line(line: str, lineno: int) -> dict[str, Any]:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", lineno)
    return obj


def iter_manifest(path: str | os.PathLike) -> tuple[dict[str, Any], Iterator[SampleRecord]]:
    """Open a manifest for streaming.

    Returns the parsed header and a lazy iterator over sample records; the
    file stays open until the iterator is exhausted.
    """
    fh = _open_text(path)
    first = fh.readline()
    if not first.strip():
        fh.close()
        raise ParseError("missing header", 1)
    header = _parse_line(first, 1)
    try:
        if header.get("format") != MANIFEST_FORMAT:
            raise ParseError(f"unknown manifest format {header.get('format')!r}", 1)
        classes = tuple(header["classes"])
        _check_classes(classes)
        Stage(header["stage"])
    except (KeyError, ValueError, TypeError) as exc:
        fh.close()
        raise ParseError(f"malformed header: {exc}", 1) from None
    except ParseError:
        fh.close()
        raise

    def records() -> Iterator[SampleRecord]:
        seen: set[str] = set()
        with fh:
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                obj = _parse_line(line, lineno)
                try:
                    rec = SampleRecord.from_json(obj)
                except (KeyError, ValueError, TypeError) as exc:
                    raise ParseError(f"malformed record: {exc}", lineno) from None
                except ParseError as exc:
                    raise ParseError(str(exc), lineno) from None
                try:
                    _check_record(rec, len(classes))
                except UnknownClassName as exc:
                    raise UnknownClassName(f"line {lineno}: {exc}") from None
                if rec.id in seen:
                    raise ParseError(f"duplicate sample id {rec.id!r}", lineno)
                seen.add(rec.id)
                yield rec

    return header, records()


def _open_text(path: str | os.PathLike) -> IO[str]:
    try:
        return open(path, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc


def read_manifest(path: str | os.PathLike) -> DatasetManifest:
    header, records = iter_manifest(path)
    samples = tuple(records)
    return DatasetManifest(
        classes=tuple(header["classes"]),
        samples=samples,
        stage=Stage(header["stage"]),
        provenance=header.get("provenance", {}),
        root=Path(path).resolve().parent,
    )


# --------------------------------------------------------------------------
# Pipeline configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    anchors_per_class: int = 5
    clusters_per_class: int = 8
    cluster_accept_threshold: float = 0.35
    prob_threshold: float = 0.7
    iou_threshold: float = 0.5
    area_threshold: float = 0.05
    # None: calibrate on the training set at ``uncertainty_percentile``
    uncertainty_threshold: float | None = None
    uncertainty_percentile: float = 80.0
    intermediate_resize: int = 63
    output_size: int = 224
    two_step_resize: bool = True
    iou_mode: str = "mask"
    # "full": pixel logit = raw + bias; "spread": raw + bias / (H*W)
    cam_bias: str = "full"
    seed: int = 0

    def __post_init__(self) -> None:
        checks = [
            (self.anchors_per_class >= 1, "anchors_per_class must be >= 1"),
            (self.clusters_per_class >= 1, "clusters_per_class must be >= 1"),
            (self.cluster_accept_threshold >= 0, "cluster_accept_threshold must be >= 0"),
            (0 < self.prob_threshold < 1, "prob_threshold must lie in (0, 1)"),
            (0 < self.iou_threshold < 1, "iou_threshold must lie in (0, 1)"),
            (0 < self.area_threshold < 1, "area_threshold must lie in (0, 1)"),
            (self.uncertainty_threshold is None or self.uncertainty_threshold > 0,
             "uncertainty_threshold must be > 0"),
            (0 < self.uncertainty_percentile <= 100, "uncertainty_percentile must lie in (0, 100]"),
            (self.intermediate_resize >= 1, "intermediate_resize must be >= 1"),
            (self.output_size >= 1, "output_size must be >= 1"),
            (self.iou_mode in ("mask", "bbox"), "iou_mode must be 'mask' or 'bbox'"),
            (self.cam_bias in ("full", "spread"), "cam_bias must be 'full' or 'spread'"),
            (isinstance(self.seed, int) and self.seed >= 0, "seed must be an unsigned integer"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PipelineConfig":
        return build_dataclass(cls, data)


def build_dataclass(cls, data: dict[str, Any]):
    """Construct a config dataclass from a plain mapping, rejecting unknown keys."""
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(known[name], value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _coerce(f, value: Any) -> Any:
    kind = str(f.type)
    if value is None:
        return None
    try:
        if kind.startswith("bool"):
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind.startswith("float"):
            v = float(value)
            if not math.isfinite(v):
                raise ValueError(value)
            return v
        if kind.startswith("tuple"):
            return tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {value!r} for field {f.name}") from None
    return value
