"""Per-class sigmoid classifier on pooled features with a learned log-variance.

Both layers are linear maps of the GAP vector. For each class the loss is

    0.5 * exp(-s_k) * BCE_k + 0.5 * s_k,     s_k = log sigma_k^2

so a confidently wrong class can buy a smaller data term by raising its
predicted variance, at the price of the ``0.5 * s_k`` penalty. Minimizing
over ``s_k`` alone gives ``sigma_k^2 = BCE_k``.

The head clips its predicted ``s`` to ``[LOG_VAR_MIN, LOG_VAR_MAX]``. Without
the floor the loss is unbounded below on separable data (BCE -> 0 drives
s -> -inf and the exp(-s) weighting blows up the logit steps).
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_model import (
    DatasetManifest,
    FeatureMap,
    Stage,
    atomic_write,
    build_dataclass,
    global_average_pool,
    require_stage,
)
from .errors import (
    BadMagic,
    ConfigError,
    DimensionMismatch,
    EmptyDataset,
    IoFailure,
    NonFiniteValue,
    SampleError,
    ShapeMismatch,
)

log = logging.getLogger(__name__)

LOG_VAR_MIN = -2.0
LOG_VAR_MAX = 6.0

VHP_MAGIC = b"VHP1"
_VHP_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True, eq=False)
class HeadParams:
    score_weights: np.ndarray  # (K, C)
    score_bias: np.ndarray  # (K,)
    unc_weights: np.ndarray  # (K, C)
    unc_bias: np.ndarray  # (K,)

    def __post_init__(self) -> None:
        for f in fields(self):
            arr = np.array(getattr(self, f.name), dtype=np.float64)
            object.__setattr__(self, f.name, arr)
        k, c = self.score_weights.shape
        if self.unc_weights.shape != (k, c) or self.score_bias.shape != (k,) or self.unc_bias.shape != (k,):
            raise ShapeMismatch("head parameter blocks disagree on (K, C)")
        if not all(np.isfinite(a).all() for a in self.blocks()):
            raise NonFiniteValue("head parameters must be finite")

    @property
    def num_classes(self) -> int:
        return self.score_weights.shape[0]

    @property
    def channels(self) -> int:
        return self.score_weights.shape[1]

    def blocks(self) -> tuple[np.ndarray, ...]:
        return (self.score_weights, self.score_bias, self.unc_weights, self.unc_bias)

    @classmethod
    def zeros(cls, k: int, c: int) -> "HeadParams":
        return cls(np.zeros((k, c)), np.zeros(k), np.zeros((k, c)), np.zeros(k))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.blocks()])

    @classmethod
    def from_flat(cls, vec: np.ndarray, k: int, c: int) -> "HeadParams":
        kc = k * c
        return cls(vec[:kc].reshape(k, c), vec[kc:kc + k], vec[kc + k:2 * kc + k].reshape(k, c), vec[2 * kc + k:])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HeadParams):
            return NotImplemented
        return all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.blocks(), other.blocks()))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class HeadOutput:
    logits: np.ndarray
    probs: np.ndarray
    log_var: np.ndarray
    sigma2: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    log_var_init: float = 0.0
    weight_init_scale: float = 1.0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.weight_init_scale > 0:
            raise ConfigError("weight_init_scale must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be an unsigned integer")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return build_dataclass(cls, data)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Elementwise binary cross entropy, stable for any logit magnitude."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    return np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))


def forward(params: HeadParams, gap: np.ndarray) -> HeadOutput:
    """Evaluate the head on one GAP vector ``(C,)`` or a batch ``(N, C)``."""
    gap = np.asarray(gap, dtype=np.float64)
    if gap.shape[-1] != params.channels or gap.ndim not in (1, 2):
        raise ShapeMismatch(f"GAP vector has shape {gap.shape}, head expects {params.channels} channels")
    logits = gap @ params.score_weights.T + params.score_bias
    log_var = np.clip(gap @ params.unc_weights.T + params.unc_bias, LOG_VAR_MIN, LOG_VAR_MAX)
    return HeadOutput(logits, sigmoid(logits), log_var, np.exp(log_var))


def per_class_loss(output: HeadOutput, targets: np.ndarray) -> np.ndarray:
    bce = bce_with_logits(output.logits, targets)
    return 0.5 * np.exp(-output.log_var) * bce + 0.5 * output.log_var


def loss(output: HeadOutput, targets: np.ndarray) -> float:
    """Total loss, summed over classes (and over samples for a batch)."""
    return float(per_class_loss(output, targets).sum())


def gradients(params: HeadParams, gap: np.ndarray, targets: np.ndarray) -> HeadParams:
    """Exact gradient of ``loss(forward(params, gap), targets)``.

    Batched inputs give the gradient of the summed loss. Where the
    log-variance is clipped its layer receives no gradient.
    """
    gap = np.asarray(gap, dtype=np.float64)
    out = forward(params, gap)
    t = np.asarray(targets, dtype=np.float64)
    inv_var = np.exp(-out.log_var)
    d_logit = 0.5 * inv_var * (out.probs - t)
    d_logvar = 0.5 - 0.5 * inv_var * bce_with_logits(out.logits, t)
    unclipped = gap @ params.unc_weights.T + params.unc_bias
    d_logvar = np.where((unclipped > LOG_VAR_MIN) & (unclipped < LOG_VAR_MAX), d_logvar, 0.0)
    if gap.ndim == 1:
        return HeadParams(np.outer(d_logit, gap), d_logit, np.outer(d_logvar, gap), d_logvar)
    return HeadParams(d_logit.T @ gap, d_logit.sum(0), d_logvar.T @ gap, d_logvar.sum(0))


def init_params(k: int, c: int, config: TrainConfig, rng: np.random.Generator) -> HeadParams:
    a = config.weight_init_scale / np.sqrt(c)
    return HeadParams(
        rng.uniform(-a, a, size=(k, c)),
        np.zeros(k),
        rng.uniform(-a, a, size=(k, c)),
        np.full(k, config.log_var_init),
    )


def fit(gaps: np.ndarray, targets: np.ndarray, config: TrainConfig) -> tuple[HeadParams, list[float]]:
    """Mini-batch SGD on the mean per-sample loss.

    Returns the parameters and the per-epoch mean training loss.
    """
    gaps = np.asarray(gaps, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = gaps.shape[0]
    if n == 0:
        raise EmptyDataset("no training samples")
    rng = np.random.default_rng(config.seed)
    params = init_params(targets.shape[1], gaps.shape[1], config, rng)
    lr = config.learning_rate
    trace = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            g = gradients(params, gaps[idx], targets[idx])
            step = lr / len(idx)
            params = HeadParams(*(p - step * d for p, d in zip(params.blocks(), g.blocks())))
        trace.append(loss(forward(params, gaps), targets) / n)
    return params, trace


def targets_for(labels: Sequence[Sequence[int]], k: int) -> np.ndarray:
    t = np.zeros((len(labels), k))
    for i, labs in enumerate(labels):
        t[i, list(labs)] = 1.0
    return t


def pooled_features(manifest: DatasetManifest) -> np.ndarray:
    rows = []
    for s in manifest.samples:
        try:
            rows.append(global_average_pool(manifest.load_features(s)))
        except Exception as exc:
            raise SampleError(s.id, exc) from exc
    return np.stack(rows)


def train(manifest: DatasetManifest, config: TrainConfig, trace: list[float] | None = None) -> HeadParams:
    """Train on a curated manifest; class k is a positive target iff k is in the label set.

    Pass a list as ``trace`` to collect the per-epoch mean loss.
    """
    require_stage(manifest, Stage.CURATED)
    if not manifest.samples:
        raise EmptyDataset("curated manifest has no samples")
    gaps = pooled_features(manifest)
    t = targets_for([s.labels for s in manifest.samples], manifest.num_classes)
    params, epoch_losses = fit(gaps, t, config)
    if trace is not None:
        trace.extend(epoch_losses)
    return params


def predict(params: HeadParams, fmap: FeatureMap) -> HeadOutput:
    if fmap.channels != params.channels:
        raise ShapeMismatch(f"feature map has {fmap.channels} channels, head expects {params.channels}")
    return forward(params, global_average_pool(fmap))


def encode_head(params: HeadParams) -> bytes:
    k, c = params.score_weights.shape
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.blocks())
    return _VHP_HEADER.pack(VHP_MAGIC, k, c) + body


def decode_head(data: bytes) -> HeadParams:
    if len(data) < _VHP_HEADER.size:
        raise BadMagic("file too short for a VHP1 header")
    magic, k, c = _VHP_HEADER.unpack_from(data)
    if magic != VHP_MAGIC:
        raise BadMagic(f"expected magic {VHP_MAGIC!r}, found {magic!r}")
    n = 2 * k * c + 2 * k
    payload = data[_VHP_HEADER.size:]
    if len(payload) != 8 * n:
        raise DimensionMismatch(f"head payload has {len(payload)} bytes, expected {8 * n}")
    return HeadParams.from_flat(np.frombuffer(payload, dtype="<f8").astype(np.float64), k, c)


def save_head(params: HeadParams, path: str | os.PathLike) -> None:
    try:
        with atomic_write(path, "wb") as fh:
            fh.write(encode_head(params))
    except OSError as exc:
        raise IoFailure(f"cannot write head parameters {path}: {exc}") from exc


def load_head(path: str | os.PathLike) -> HeadParams:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read head parameters {path}: {exc}") from exc
    return decode_head(data)


def write_trace_csv(trace: Sequence[float], path: str | os.PathLike) -> None:
    with atomic_write(path, "w") as fh:
        fh.write("epoch,mean_loss\n")
        for i, v in enumerate(trace, start=1):
            fh.write(f"{i},{v!r}\n")
