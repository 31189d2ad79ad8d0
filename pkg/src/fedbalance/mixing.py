"""Dominant-weight k-way image mixing with additive isotropic Laplace noise.

A mixed pseudo-image targets one label: the anchor image (drawn from the
target class) always receives the largest weight, the label is never mixed,
and iid Laplace noise is added per pixel. Output pixels are not clamped
unless explicitly requested, so the noise distribution stays untouched.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datasets import ClientDataset, LabeledImage, Provenance

DOMINANT_LOW = 0.5
DOMINANT_HIGH = 0.75


class MixupError(ValueError):
    pass


class InsufficientLabel(MixupError):
    pass


class InsufficientPool(MixupError):
    pass


class WeightMode(enum.Enum):
    SIMPLEX_SORTED = "simplex_sorted"
    DOMINANT_UNIFORM = "dominant_uniform"


@dataclass(frozen=True)
class MixWeights:
    """Length-k convex weights, sorted non-increasing."""

    values: np.ndarray

    def validate(self, atol: float = 1e-9) -> None:
        w = self.values
        if w.ndim != 1 or w.size < 1:
            raise MixupError(f"weights must be a 1-D vector, got shape {w.shape}")
        if np.any(w < 0):
            raise MixupError("negative mix weight")
        if abs(float(w.sum()) - 1.0) > atol:
            raise MixupError(f"weights sum to {w.sum()}, expected 1")
        if np.any(np.diff(w) > 0):
            raise MixupError("weights must be sorted non-increasing")


@dataclass(frozen=True)
class DpMixConfig:
    k: int = 4
    sigma: float = 50.0
    weight_mode: WeightMode = WeightMode.DOMINANT_UNIFORM
    clamp_output: bool = False

    def validate(self) -> None:
        if self.k < 2:
            raise MixupError(f"mix width k must be >= 2, got {self.k}")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise MixupError(f"sigma must be finite and >= 0, got {self.sigma}")


def sample_weight_matrix(k: int, mode: WeightMode, rng: np.random.Generator,
                         n: int) -> np.ndarray:
    """Draw n weight vectors at once; rows satisfy the MixWeights invariants.

    SimplexSorted: uniform on the probability simplex (normalized exponentials),
    sorted descending. DominantUniform: first entry ~ U[0.5, 0.75], remainder a
    scaled uniform simplex draw sorted descending among itself.
    """
    if k < 1:
        raise MixupError(f"k must be >= 1, got {k}")
    if k == 1:
        return np.ones((n, 1), dtype=np.float64)
    if mode is WeightMode.SIMPLEX_SORTED:
        gaps = rng.standard_exponential((n, k))
        w = gaps / gaps.sum(axis=1, keepdims=True)
        return -np.sort(-w, axis=1)
    if mode is WeightMode.DOMINANT_UNIFORM:
        w0 = rng.uniform(DOMINANT_LOW, DOMINANT_HIGH, size=n)
        gaps = rng.standard_exponential((n, k - 1))
        rest = gaps / gaps.sum(axis=1, keepdims=True) * (1.0 - w0)[:, None]
        rest = -np.sort(-rest, axis=1)
        return np.concatenate([w0[:, None], rest], axis=1)
    raise MixupError(f"unknown weight mode {mode!r}")


def sample_mix_weights(k: int, mode: WeightMode, rng: np.random.Generator) -> MixWeights:
    """Draw one weight vector."""
    return MixWeights(sample_weight_matrix(k, mode, rng, 1)[0])


def sample_laplace(d: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """iid Laplace(0, sigma) coordinates via the inverse CDF.

    eta_i = -sigma * sign(u) * ln(1 - 2|u|) with u ~ U(-1/2, 1/2).
    """
    if sigma < 0:
        raise MixupError(f"sigma must be >= 0, got {sigma}")
    u = rng.random(d) - 0.5
    # u = -0.5 has probability 2^-53; the clamp keeps log finite without
    # disturbing the distribution.
    inner = np.maximum(1.0 - 2.0 * np.abs(u), np.finfo(np.float64).tiny)
    return -sigma * np.sign(u) * np.log(inner)


@dataclass(frozen=True)
class MixRecord:
    """Audit record of one mix: which source images, with which weights."""

    anchor_index: int
    filler_indices: tuple[int, ...]
    weights: np.ndarray


def dp_labelhide(source: ClientDataset, target_label: int, cfg: DpMixConfig,
                 rng: np.random.Generator, *, weights: Sequence[float] | None = None,
                 record: list[MixRecord] | None = None) -> LabeledImage:
    """Produce one k-way mixed pseudo-image carrying exactly `target_label`.

    The anchor is drawn uniformly from the target class and takes the largest
    weight; the other k-1 images are drawn without replacement from the rest
    of the source (any label). The label is never mixed. `weights` overrides
    sampling (tests and calibration); `record`, when given, receives an audit
    entry for the selection.
    """
    cfg.validate()
    k = cfg.k
    anchors = [i for i, ex in enumerate(source.examples) if ex.label == target_label]
    if not anchors:
        raise InsufficientLabel(
            f"client {source.client_id} holds no example with label {target_label}")
    if len(source.examples) < k:
        raise InsufficientPool(
            f"client {source.client_id} holds {len(source.examples)} examples, need {k}")

    anchor = anchors[int(rng.integers(len(anchors)))]
    pool = np.array([i for i in range(len(source.examples)) if i != anchor])
    fillers = rng.choice(pool, size=k - 1, replace=False)

    if weights is None:
        w = sample_mix_weights(k, cfg.weight_mode, rng).values
    else:
        w = np.asarray(weights, dtype=np.float64)
        MixWeights(w).validate()
        if w.size != k:
            raise MixupError(f"forced weights have length {w.size}, k is {k}")

    selected = [anchor] + [int(i) for i in fillers]
    # Accumulate in float32, term by term, so the sigma=0 output is bitwise
    # reproducible by a plain loop oracle.
    mixed = np.zeros_like(source.examples[anchor].pixels, dtype=np.float32)
    for wi, idx in zip(w, selected):
        mixed += np.float32(wi) * source.examples[idx].pixels
    if cfg.sigma > 0:
        eta = sample_laplace(mixed.size, cfg.sigma, rng).reshape(mixed.shape)
        mixed = mixed + eta.astype(np.float32)
    if cfg.clamp_output:
        mixed = np.clip(mixed, 0.0, 255.0)

    if record is not None:
        record.append(MixRecord(anchor, tuple(int(i) for i in fillers), w.copy()))
    return LabeledImage(mixed, target_label, Provenance.MIXUP)
