"""Turn CAM regions into extra labels.

Per image: regions for every class, drop small ones, cross-class NMS,
then veto classes whose predicted variance is too high. The original label
is always kept, whatever the filters say.
"""

from __future__ import annotations

import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cam import ClassActivationMap, Region, compute_all_cams, extract_regions, write_pgm
from .data_model import DatasetManifest, FeatureMap, LabelRecord, PipelineConfig, SampleRecord, Stage, require_stage
from .errors import SampleError
from .uncertainty_head import HeadParams, forward, pooled_features, predict

ORIGINAL = "original"
AUGMENTED = "augmented"


@dataclass(frozen=True)
class AugmentedLabel:
    class_index: int
    surviving_regions: tuple[Region, ...]
    sigma2: float
    provenance: str
    score: float

    def to_record(self) -> LabelRecord:
        return LabelRecord(self.class_index, self.provenance,
                           tuple(r.bbox for r in self.surviving_regions), self.score, self.sigma2)


def mask_iou(a: Region, b: Region) -> float:
    inter = np.count_nonzero(a.mask & b.mask)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def bbox_iou(a: Region, b: Region) -> float:
    ax0, ay0, ax1, ay1 = a.bbox
    bx0, by0, bx1, by1 = b.bbox
    iw = min(ax1, bx1) - max(ax0, bx0) + 1
    ih = min(ay1, by1) - max(ay0, by0) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (ax1 - ax0 + 1) * (ay1 - ay0 + 1)
    area_b = (bx1 - bx0 + 1) * (by1 - by0 + 1)
    return inter / (area_a + area_b - inter)


def nms_order(regions: Sequence[Region]) -> list[Region]:
    return sorted(regions, key=lambda r: (-r.score, r.class_index, r.bbox))


def nms(regions: Sequence[Region], iou_threshold: float, mode: str = "mask") -> list[Region]:
    """Greedy cross-class suppression.

    Regions are visited by descending class score (ties: class index, then
    bbox). A region is kept iff its IoU with every region kept so far is at
    most ``iou_threshold``.
    """
    iou = mask_iou if mode == "mask" else bbox_iou
    kept: list[Region] = []
    for r in nms_order(regions):
        if all(iou(r, q) <= iou_threshold for q in kept):
            kept.append(r)
    return kept


def filter_regions(regions: Iterable[Region], area_threshold: float) -> list[Region]:
    return [r for r in regions if r.area_fraction >= area_threshold]


def filter_by_uncertainty(candidates: Iterable[tuple[int, float]], threshold: float) -> list[int]:
    """Classes whose predicted variance does not exceed ``threshold``."""
    return [k for k, s2 in candidates if s2 <= threshold]


def calibrate_uncertainty(sigma2: np.ndarray, percentile: float) -> float:
    """Variance cutoff at the given percentile of ``sigma2``.

    Uses the inverted-CDF definition so the cutoff is an observed value and
    keeping ``sigma2 <= cutoff`` retains ``ceil(p/100 * n)`` entries.
    """
    return float(np.percentile(np.ravel(sigma2), percentile, method="inverted_cdf"))


def training_label_variances(manifest: DatasetManifest, params: HeadParams) -> np.ndarray:
    """Predicted variance of every (sample, label) pair of a labelled manifest.

    With single-label data that is one value per sample: how unsure the head
    is about the labels it was trained on.
    """
    if not manifest.samples:
        return np.ones(1)
    sigma2 = forward(params, pooled_features(manifest)).sigma2
    return np.array([sigma2[i, k] for i, s in enumerate(manifest.samples) for k in s.labels] or [1.0])


def propose_labels(cams: Sequence[ClassActivationMap], sigma2: np.ndarray, original: Iterable[int],
                   config: PipelineConfig, threshold: float) -> list[AugmentedLabel]:
    """Decide the label set of one image from its CAMs and predicted variances."""
    candidates: list[Region] = []
    for cam in cams:
        candidates.extend(extract_regions(cam, config.prob_threshold))
    survivors = nms(filter_regions(candidates, config.area_threshold), config.iou_threshold, config.iou_mode)

    by_class: dict[int, list[Region]] = {}
    for r in survivors:
        by_class.setdefault(r.class_index, []).append(r)

    original = set(original)
    new = sorted(k for k in by_class if k not in original)
    accepted = set(filter_by_uncertainty(((k, float(sigma2[k])) for k in new), threshold))

    labels = []
    for k in sorted(original | accepted):
        regions = tuple(sorted(by_class.get(k, []), key=lambda r: r.bbox))
        labels.append(AugmentedLabel(k, regions, float(sigma2[k]),
                                     ORIGINAL if k in original else AUGMENTED, cams[k].score))
    return labels


def augment_sample(sample: SampleRecord, fmap: FeatureMap, params: HeadParams, config: PipelineConfig,
                   threshold: float) -> tuple[SampleRecord, list[AugmentedLabel]]:
    out = predict(params, fmap)
    cams = compute_all_cams(params, fmap, config)
    labels = propose_labels(cams, out.sigma2, sample.labels, config, threshold)
    record = SampleRecord(
        sample.id, sample.query_class, sample.rank, sample.feature_path,
        labels=tuple(lab.class_index for lab in labels),
        label_info=tuple(lab.to_record() for lab in labels),
    )
    return record, labels


def augment_labels(manifest: DatasetManifest, params: HeadParams, config: PipelineConfig,
                   threads: int = 1, dump_dir: str | os.PathLike | None = None) -> DatasetManifest:
    """Add CAM-supported labels to every image of a curated manifest.

    When ``config.uncertainty_threshold`` is unset, the cutoff is calibrated on
    this (training) manifest; see ``training_label_variances``. With
    ``dump_dir`` set, the probability grid of every output label is written
    there as ``<id>_<class>.pgm``.
    """
    require_stage(manifest, Stage.CURATED)
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
    threshold = config.uncertainty_threshold
    if threshold is None:
        threshold = calibrate_uncertainty(training_label_variances(manifest, params), config.uncertainty_percentile)

    def work(sample: SampleRecord) -> SampleRecord:
        try:
            fmap = manifest.load_features(sample)
            record, labels = augment_sample(sample, fmap, params, config, threshold)
            if dump_dir is not None:
                cams = compute_all_cams(params, fmap, config)
                for lab in labels:
                    write_pgm(cams[lab.class_index].prob, Path(dump_dir) / f"{sample.id}_{lab.class_index}.pgm")
            return record
        except Exception as exc:
            raise SampleError(sample.id, exc) from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(work, manifest.samples))
    else:
        records = [work(s) for s in manifest.samples]

    provenance = dict(manifest.provenance)
    settings = config.to_dict()
    settings["uncertainty_threshold_effective"] = threshold
    provenance["augment"] = settings
    return manifest.advance(Stage.AUGMENTED, records, provenance)


def addition_summary(manifest: DatasetManifest) -> dict:
    """Labels-added percentage and per-class addition counts."""
    before = after = 0
    per_class: Counter[str] = Counter()
    for s in manifest.samples:
        info = s.label_info or ()
        originals = [r for r in info if r.provenance == ORIGINAL] if info else list(s.labels)
        before += len(originals)
        after += len(s.labels)
        for r in info:
            if r.provenance == AUGMENTED:
                per_class[manifest.classes[r.class_index]] += 1
    pct = 100.0 * (after - before) / before if before else 0.0
    return {"labels_before": before, "labels_after": after, "labels_added_pct": pct,
            "added_per_class": dict(sorted(per_class.items()))}
