"""Class scores, class activation maps and region proposals."""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .data_model import FeatureMap, PipelineConfig
from .errors import ShapeMismatch
from .uncertainty_head import HeadParams, sigmoid

# cross-shaped structuring element: 4-connectivity
_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class ClassActivationMap:
    class_index: int
    raw: np.ndarray  # (H, W) weighted channel sum
    prob: np.ndarray  # (S, S) pixel probabilities after upsampling
    score: float


@dataclass(frozen=True, eq=False)
class Region:
    class_index: int
    mask: np.ndarray  # (S, S) bool, one 4-connected component
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive
    area_fraction: float
    score: float

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def _check(params: HeadParams, fmap: FeatureMap) -> None:
    if fmap.channels != params.channels:
        raise ShapeMismatch(f"feature map has {fmap.channels} channels, head expects {params.channels}")


def compute_scores(params: HeadParams, fmap: FeatureMap) -> np.ndarray:
    """Class scores for all classes: sum over pixels of the weighted channels, plus bias."""
    _check(params, fmap)
    spatial_sum = fmap.as_float64().sum(axis=(0, 1))
    return params.score_weights @ spatial_sum + params.score_bias


def compute_score(params: HeadParams, fmap: FeatureMap, k: int) -> float:
    return float(compute_scores(params, fmap)[k])


def raw_cams(params: HeadParams, fmap: FeatureMap) -> np.ndarray:
    """``(K, H, W)`` stack of weighted channel sums, one per class."""
    _check(params, fmap)
    return np.einsum("yxc,kc->kyx", fmap.as_float64(), params.score_weights)


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the corner-aligned linear weights of output sample i."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    m.setflags(write=False)
    return m


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of the last two axes.

    Output corners coincide with input corners; a single-pixel axis is
    replicated. Leading axes are treated as a batch.
    """
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape[-2:]
    if h == out_h and w == out_w:
        return grid.copy()
    rh = _interp_matrix(h, out_h)
    rw = _interp_matrix(w, out_w)
    return rh @ grid @ rw.T


def upsample(grid: np.ndarray, config: PipelineConfig) -> np.ndarray:
    s = config.output_size
    if config.two_step_resize and grid.shape[-1] < config.intermediate_resize < s:
        mid = config.intermediate_resize
        grid = bilinear_resize(grid, mid, mid)
    return bilinear_resize(grid, s, s)


def bias_offset(bias: np.ndarray, h: int, w: int, mode: str) -> np.ndarray:
    """Per-pixel share of the class bias added before the sigmoid.

    ``"full"``: the whole bias, so a pixel's probability is what the head
    would output for an image made of that pixel alone. ``"spread"``: the
    bias divided over the H*W grid cells, so the pre-sigmoid field sums to
    the class score.
    """
    bias = np.asarray(bias, dtype=np.float64)
    return bias if mode == "full" else bias / (h * w)


def _probabilities(raw: np.ndarray, bias: np.ndarray, config: PipelineConfig) -> np.ndarray:
    h, w = raw.shape[-2:]
    offset = bias_offset(bias, h, w, config.cam_bias)
    return sigmoid(upsample(raw, config) + np.reshape(offset, offset.shape + (1, 1)))


def compute_cam(params: HeadParams, fmap: FeatureMap, k: int, config: PipelineConfig | None = None
                ) -> ClassActivationMap:
    """CAM for class ``k``.

    ``raw`` sums to ``score - bias_k``. Pixel probabilities are
    ``sigmoid(upsampled_raw + offset)`` with the offset chosen by
    ``config.cam_bias`` (see ``bias_offset``).
    """
    config = config or PipelineConfig()
    _check(params, fmap)
    raw = fmap.as_float64() @ params.score_weights[k]
    score = float(raw.sum() + params.score_bias[k])
    prob = _probabilities(raw, np.asarray(params.score_bias[k]), config)
    return ClassActivationMap(k, raw, prob, score)


def compute_all_cams(params: HeadParams, fmap: FeatureMap, config: PipelineConfig) -> list[ClassActivationMap]:
    raw = raw_cams(params, fmap)
    scores = raw.sum(axis=(1, 2)) + params.score_bias
    prob = _probabilities(raw, params.score_bias, config)
    return [ClassActivationMap(k, raw[k], prob[k], float(scores[k])) for k in range(params.num_classes)]


def extract_regions(cam: ClassActivationMap, prob_threshold: float, output_size: int | None = None) -> list[Region]:
    """One Region per 4-connected component of ``prob > prob_threshold``."""
    prob = cam.prob
    if output_size is not None and prob.shape != (output_size, output_size):
        raise ShapeMismatch(f"probability grid is {prob.shape}, expected {output_size}x{output_size}")
    hot = prob > prob_threshold
    labels, n = ndimage.label(hot, structure=_FOUR)
    if n == 0:
        return []
    total = hot.size
    regions = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        mask = labels == i
        ys, xs = sl
        bbox = (xs.start, ys.start, xs.stop - 1, ys.stop - 1)
        regions.append(Region(cam.class_index, mask, bbox, float(mask.sum()) / total, cam.score))
    return regions


def write_pgm(prob: np.ndarray, path: str | os.PathLike) -> None:
    """Dump a probability grid as a binary 8-bit portable graymap."""
    img = np.clip(np.round(np.asarray(prob) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
