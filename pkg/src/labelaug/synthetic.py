"""Synthetic web-search datasets with known ground truth, and run scoring.

Each class owns a disjoint bundle of channels. A rendered feature map
carries its primary class's bundle over the object area; a "collision"
image carries a second class's bundle in the complementary half of the
grid. Noisy search results are images of other classes or of distractor
concepts that belong to no class at all.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .augment import AUGMENTED, ORIGINAL
from .data_model import (
    DatasetManifest,
    FeatureMap,
    SampleRecord,
    Stage,
    atomic_write,
    build_dataclass,
    save_feature_map,
)
from .errors import ConfigError, IdMismatch, IoFailure, ParseError

NO_CLASS = -1
_CURATION_STREAM = 1
_MULTILABEL_STREAM = 2


@dataclass(frozen=True)
class SyntheticSpec:
    K: int = 10
    C: int = 64
    samples_per_class: int = 200
    noise_fraction: float = 0.0
    blob_spread: float = 0.5
    multilabel_fraction: float = 0.0
    grid: tuple[int, int] = (7, 7)
    seed: int = 0
    signal: float = 1.0
    pixel_noise: float = 0.5
    # object strength is drawn from 1 +/- strength_spread
    strength_spread: float = 0.3
    # share of the top-ranked results that are true class members
    top_rank_purity: float = 0.95
    # share of images with a weak look-alike patch of some other class
    confuser_fraction: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))
        checks = [
            (self.K >= 1, "K must be >= 1"),
            (self.C >= self.K, "C must be >= K (one channel bundle per class)"),
            (self.samples_per_class >= 1, "samples_per_class must be >= 1"),
            (0 <= self.noise_fraction < 1, "noise_fraction must lie in [0, 1)"),
            (self.blob_spread > 0, "blob_spread must be positive"),
            (0 <= self.multilabel_fraction <= 1, "multilabel_fraction must lie in [0, 1]"),
            (len(self.grid) == 2 and min(self.grid) >= 1, "grid must be two positive integers"),
            (self.seed >= 0, "seed must be an unsigned integer"),
            (self.signal > 0 and self.pixel_noise >= 0, "signal must be positive, pixel_noise >= 0"),
            (0 <= self.strength_spread < 1, "strength_spread must lie in [0, 1)"),
            (0 <= self.top_rank_purity <= 1, "top_rank_purity must lie in [0, 1]"),
            (0 <= self.confuser_fraction <= 1, "confuser_fraction must lie in [0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        return build_dataclass(cls, data)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    def class_names(self) -> tuple[str, ...]:
        width = max(2, len(str(self.K - 1)))
        return tuple(f"class_{k:0{width}d}" for k in range(self.K))


class Signatures:
    """Channel patterns of the classes and of the distractor concepts."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        b = spec.C // spec.K
        self.bundle = b
        cls = np.zeros((spec.K, spec.C))
        for k in range(spec.K):
            cls[k, k * b:(k + 1) * b] = 1.0 / math.sqrt(b)
        self.classes = cls
        rng = np.random.default_rng([spec.seed, 0])
        dis = rng.random((spec.K, spec.C))
        self.distractors = dis / np.linalg.norm(dis, axis=1, keepdims=True)

    def pattern(self, concept: int) -> np.ndarray:
        """Class index ``k >= 0`` or distractor ``-(d + 1)``."""
        if concept >= 0:
            return self.classes[concept]
        return self.distractors[-concept - 1]


def half_mask(h: int, w: int, axis: int, first: bool) -> np.ndarray:
    """Boolean (H, W) mask of one half of the grid, split along ``axis``."""
    yy, xx = np.mgrid[0:h, 0:w]
    coord, n = (xx, w) if axis == 1 else (yy, h)
    lower = coord < (n + 1) // 2
    return lower if first else ~lower


def render(sigs: Signatures, primary: int, secondary: int | None, rng: np.random.Generator,
           confuser: int | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Render one feature map; returns the map and the primary's area mask (None if full).

    A ``confuser`` class is painted at reduced strength over one quadrant; it
    is not a visible class for ground-truth purposes.
    """
    spec = sigs.spec
    h, w = spec.grid
    scale = math.sqrt(sigs.bundle)
    amp = spec.signal * scale

    def appearance(concept: int) -> np.ndarray:
        # one image-level appearance per object, so GAP vectors form a blob
        jitter = rng.normal(0.0, spec.blob_spread / math.sqrt(spec.C), size=spec.C)
        strength = rng.uniform(1.0 - spec.strength_spread, 1.0 + spec.strength_spread)
        return amp * (strength * sigs.pattern(concept) + jitter)

    fmap = np.zeros((h, w, spec.C))
    primary_mask = None
    if secondary is None:
        fmap += appearance(primary)
    else:
        axis = int(rng.integers(2)) if min(h, w) > 1 else (1 if w > 1 else 0)
        primary_mask = half_mask(h, w, axis, bool(rng.integers(2)))
        fmap[primary_mask] += appearance(primary)
        fmap[~primary_mask] += appearance(secondary)
    if confuser is not None:
        qh, qw = (h + 1) // 2, (w + 1) // 2
        y0 = int(rng.integers(2)) * (h - qh)
        x0 = int(rng.integers(2)) * (w - qw)
        fmap[y0:y0 + qh, x0:x0 + qw] += rng.uniform(0.5, 0.9) * amp * sigs.pattern(confuser)
    fmap += rng.normal(0.0, spec.pixel_noise, size=fmap.shape)
    return fmap.astype(np.float32), primary_mask


def _planted_count(n: int, fraction: float) -> int:
    return int(round(n * fraction))


def _pick_secondary(rng: np.random.Generator, k: int, n_classes: int) -> int:
    other = int(rng.integers(n_classes - 1))
    return other + 1 if other >= k else other


def _pick_confuser(rng: np.random.Generator, k: int, secondary: int | None, n_classes: int) -> int | None:
    choices = [c for c in range(n_classes) if c != k and c != secondary]
    return int(rng.choice(choices)) if choices else None


@dataclass
class GroundTruth:
    """True primary concept and visible classes per sample id."""

    samples: dict[str, dict[str, Any]]
    spec: dict[str, Any]

    def primary(self, sid: str) -> int:
        return self.samples[sid]["primary"]

    def classes(self, sid: str) -> set[int]:
        return set(self.samples[sid]["classes"])

    def save(self, path: str | os.PathLike) -> None:
        with atomic_write(path, "w") as fh:
            json.dump({"spec": self.spec, "samples": self.samples}, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GroundTruth":
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise IoFailure(f"cannot read ground truth {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ParseError(f"ground truth is not valid JSON: {exc.msg}", exc.lineno) from None
        return cls(obj["samples"], obj.get("spec", {}))


def _write_map(out_dir: Path, sid: str, values: np.ndarray) -> str:
    rel = f"features/{sid}.vfm"
    save_feature_map(FeatureMap(values), out_dir / rel)
    return rel


def _collision_flags(rng: np.random.Generator, n: int, fraction: float, k_total: int) -> np.ndarray:
    flags = np.zeros(n, dtype=bool)
    if k_total > 1:
        flags[rng.permutation(n)[:_planted_count(n, fraction)]] = True
    return flags


def generate_curation_set(spec: SyntheticSpec, out_dir: str | os.PathLike) -> tuple[DatasetManifest, GroundTruth]:
    """Raw manifest of noisy search results for every class, plus ground truth.

    Per class, ``round(samples_per_class * noise_fraction)`` results show
    another class or a distractor. The top-ranked results (the first tenth,
    at least ``2 * anchors``) are in-class with probability
    ``top_rank_purity``; the remaining ranks are shuffled.
    """
    out_dir = Path(out_dir)
    sigs = Signatures(spec)
    n = spec.samples_per_class
    samples: list[SampleRecord] = []
    truth: dict[str, dict[str, Any]] = {}
    names = spec.class_names()
    for k in range(spec.K):
        crng = np.random.default_rng([spec.seed, _CURATION_STREAM, k])
        n_noise = _planted_count(n, spec.noise_fraction)
        is_noise = np.zeros(n, dtype=bool)
        is_noise[crng.permutation(n)[:n_noise]] = True
        collide = _collision_flags(crng, n, spec.multilabel_fraction, spec.K)
        confused = _collision_flags(crng, n, spec.confuser_fraction, spec.K)
        ranks = _assign_ranks(is_noise, spec.top_rank_purity, crng)
        for i in range(n):
            rng = np.random.default_rng([spec.seed, _CURATION_STREAM, k, i])
            if is_noise[i]:
                concept = int(rng.integers(2 * spec.K - 1))
                # other classes and distractors are equally likely
                if concept < spec.K - 1:
                    concept = concept + 1 if concept >= k else concept
                else:
                    concept = -(concept - (spec.K - 1) + 1)
            else:
                concept = k
            secondary = None
            if collide[i] and concept >= 0:
                secondary = _pick_secondary(rng, concept, spec.K)
            confuser = None
            if confused[i] and concept >= 0:
                confuser = _pick_confuser(rng, concept, secondary, spec.K)
            values, _ = render(sigs, concept, secondary, rng, confuser)
            sid = f"{names[k]}_{i:05d}"
            rel = _write_map(out_dir, sid, values)
            samples.append(SampleRecord(sid, k, int(ranks[i]), rel))
            visible = sorted({c for c in (concept, secondary) if c is not None and c >= 0})
            truth[sid] = {"primary": concept if concept >= 0 else NO_CLASS, "classes": visible}
    manifest = DatasetManifest(names, samples, Stage.RAW, {"synth": spec.to_dict()}, root=out_dir)
    return manifest, GroundTruth(truth, spec.to_dict())


def _assign_ranks(is_noise: np.ndarray, purity: float, rng: np.random.Generator) -> np.ndarray:
    n = len(is_noise)
    top = min(n, max(10, n // 10))
    clean = list(rng.permutation(np.flatnonzero(~is_noise)))
    noisy = list(rng.permutation(np.flatnonzero(is_noise)))
    order = []
    for _ in range(top):
        want_clean = rng.random() < purity
        pool = clean if (want_clean and clean) or not noisy else noisy
        order.append(pool.pop())
    rest = np.array(clean + noisy, dtype=int)
    order.extend(rest[rng.permutation(len(rest))].tolist())
    ranks = np.empty(n, dtype=int)
    ranks[np.array(order, dtype=int)] = np.arange(n)
    return ranks


def generate_multilabel_maps(spec: SyntheticSpec, out_dir: str | os.PathLike
                             ) -> tuple[DatasetManifest, GroundTruth]:
    """Curated single-label manifest where a planted share of images collide.

    Exactly ``round(multilabel_fraction * total)`` images carry a second
    class in the half of the grid the primary does not occupy; the manifest
    only records the primary.
    """
    out_dir = Path(out_dir)
    sigs = Signatures(spec)
    names = spec.class_names()
    total = spec.K * spec.samples_per_class
    grng = np.random.default_rng([spec.seed, _MULTILABEL_STREAM])
    collide = _collision_flags(grng, total, spec.multilabel_fraction, spec.K)
    confused = _collision_flags(grng, total, spec.confuser_fraction, spec.K)
    samples = []
    truth: dict[str, dict[str, Any]] = {}
    for j in range(total):
        k, i = divmod(j, spec.samples_per_class)
        rng = np.random.default_rng([spec.seed, _MULTILABEL_STREAM, k, i])
        secondary = _pick_secondary(rng, k, spec.K) if collide[j] else None
        confuser = _pick_confuser(rng, k, secondary, spec.K) if confused[j] else None
        values, primary_mask = render(sigs, k, secondary, rng, confuser)
        sid = f"{names[k]}_{i:05d}"
        rel = _write_map(out_dir, sid, values)
        samples.append(SampleRecord(sid, k, i, rel, labels=(k,)))
        entry: dict[str, Any] = {"primary": k, "classes": sorted({k} | ({secondary} if secondary is not None else set()))}
        if primary_mask is not None:
            entry["primary_half"] = primary_mask.astype(int).tolist()
        truth[sid] = entry
    manifest = DatasetManifest(names, samples, Stage.CURATED, {"synth": spec.to_dict()}, root=out_dir)
    return manifest, GroundTruth(truth, spec.to_dict())


@dataclass(frozen=True)
class Metrics:
    curation_precision: float
    augment_precision: float
    augment_recall: float
    labels_added_pct: float
    precision_undefined: bool = False
    samples: int = 0
    labels_in: int = 0
    labels_out: int = 0
    added: int = 0
    added_correct: int = 0
    missing: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def table(self) -> str:
        flag = " (no labels added)" if self.precision_undefined else ""
        rows = [
            f"{'':<20} {'Precision':>10} {'Labels added':>13}",
            f"{'augmentation':<20} {100 * self.augment_precision:>9.1f}% {self.labels_added_pct:>12.1f}%{flag}",
            "",
            f"curation precision  {100 * self.curation_precision:.1f}%  ({self.samples} samples kept)",
            f"augmentation recall {100 * self.augment_recall:.1f}%  ({self.added_correct}/{self.missing} missing labels recovered)",
        ]
        return "\n".join(rows)


def _original_labels(s: SampleRecord) -> set[int]:
    if s.label_info is None:
        return set(s.labels)
    return {r.class_index for r in s.label_info if r.provenance == ORIGINAL}


def score_run(truth: GroundTruth, manifest: DatasetManifest) -> Metrics:
    """Compare a manifest against ground truth.

    With no added labels, augmentation precision is reported as 1.0 and
    flagged; with no missing labels, recall is 1.0.
    """
    unknown = [s.id for s in manifest.samples if s.id not in truth.samples]
    if unknown:
        raise IdMismatch(f"{len(unknown)} sample(s) absent from ground truth, e.g. {unknown[0]!r}")
    correct = labels_in = labels_out = added = added_ok = missing = 0
    for s in manifest.samples:
        visible = truth.classes(s.id)
        original = _original_labels(s)
        extra = set(s.labels) - original
        if s.label_info is not None and any(
            r.provenance not in (ORIGINAL, AUGMENTED) for r in s.label_info
        ):
            raise ParseError(f"sample {s.id!r} has an unknown label provenance")
        correct += truth.primary(s.id) == s.query_class
        labels_in += len(original)
        labels_out += len(s.labels)
        added += len(extra)
        added_ok += len(extra & visible)
        missing += len(visible - original)
    n = len(manifest.samples)
    return Metrics(
        curation_precision=correct / n if n else 1.0,
        augment_precision=added_ok / added if added else 1.0,
        augment_recall=added_ok / missing if missing else 1.0,
        labels_added_pct=100.0 * (labels_out - labels_in) / labels_in if labels_in else 0.0,
        precision_undefined=added == 0,
        samples=n,
        labels_in=labels_in,
        labels_out=labels_out,
        added=added,
        added_correct=added_ok,
        missing=missing,
    )
