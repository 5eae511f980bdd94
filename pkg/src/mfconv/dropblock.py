"""DropBlock: structured dropout of contiguous ``b``-wide blocks.

Seeds are drawn Bernoulli(gamma) on the region where a full block fits
(``F - b + 1`` positions per axis), so no partial blocks appear at the
edges. Each seed zeroes the block anchored at it.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mfconv.tensor import DimensionError, Tensor


class DegenerateMaskError(RuntimeError):
    """Raised when a DropBlock mask drops every element twice in a row."""


@dataclass
class DropBlockSpec:
    p: float = 0.1
    block_size: int = 1
    shared_across_channels: bool = False
    ramp_epochs: int | None = None  # None: no scheduler; else linear ramp length
    rescale: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"drop probability must lie in [0, 1], got {self.p}")
        if self.block_size < 1:
            raise ValueError(f"block size must be >= 1, got {self.block_size}")
        if self.ramp_epochs is not None and self.ramp_epochs < 1:
            raise ValueError(f"ramp_epochs must be >= 1 or None, got {self.ramp_epochs}")


@dataclass
class MaskRealization:
    keep: np.ndarray  # bool, shape (N, C or 1, *S)
    kept_count: int
    total_count: int

    @property
    def dropped_count(self) -> int:
        return self.total_count - self.kept_count

    @property
    def drop_ratio(self) -> float:
        return self.dropped_count / self.total_count


def compute_gamma(p: float, F, b: int, d: int | None = None) -> float:
    """Bernoulli seed rate giving an expected drop probability ``p``.

    ``F`` is the feature extent (an int, replicated over ``d`` axes, or one
    extent per axis).
    """
    if isinstance(F, (int, np.integer)):
        if d not in (1, 2):
            raise ValueError(f"d must be 1 or 2, got {d}")
        extents = (int(F),) * d
    else:
        extents = tuple(int(f) for f in F)
    for f in extents:
        if not 1 <= b <= f:
            raise ValueError(f"block size {b} must satisfy 1 <= b <= F = {f}")
    # integer ratio first, so F == b returns p bit-exactly
    num = den = 1
    for f in extents:
        num *= f
        den *= b * (f - b + 1)
    return p * (num / den)


def scheduled_p(spec: DropBlockSpec, epoch: int) -> float:
    if spec.ramp_epochs is None:
        return spec.p
    return spec.p * min(1.0, epoch / spec.ramp_epochs)


def sample_mask(
    rng: np.random.Generator,
    feature_shape: Sequence[int],
    spec: DropBlockSpec,
    epoch_p: float,
) -> MaskRealization:
    feature_shape = tuple(int(s) for s in feature_shape)
    n, c = feature_shape[:2]
    spatial = feature_shape[2:]
    total = int(np.prod(feature_shape))
    mask_c = 1 if spec.shared_across_channels else c
    if epoch_p <= 0.0:
        keep = np.ones((n, mask_c) + spatial, dtype=bool)
        return MaskRealization(keep, total, total)
    b = spec.block_size
    for axis, f in enumerate(spatial):
        if b > f:
            raise DimensionError(f"block size {b} exceeds feature extent {f} on axis {axis + 2}")
    gamma = min(1.0, compute_gamma(epoch_p, spatial, b))
    seed_region = tuple(f - b + 1 for f in spatial)
    seeds = rng.random((n, mask_c) + seed_region) < gamma
    dropped = np.zeros((n, mask_c) + spatial, dtype=bool)
    for offset in itertools.product(range(b), repeat=len(spatial)):
        dst = (slice(None), slice(None)) + tuple(slice(o, o + r) for o, r in zip(offset, seed_region))
        dropped[dst] |= seeds
    keep = ~dropped
    kept = int(keep.sum()) * (c // mask_c)
    return MaskRealization(keep, kept, total)


def apply(x: Tensor, mask: MaskRealization, rescale: bool = True) -> Tensor:
    """Zero dropped entries and rescale survivors by total/kept."""
    if mask.kept_count == 0:
        raise DegenerateMaskError("every element was dropped")
    if x.shape[2:] != mask.keep.shape[2:] or x.shape[0] != mask.keep.shape[0]:
        raise DimensionError(f"mask shape {mask.keep.shape} does not match input {x.shape}")
    scale = mask.total_count / mask.kept_count if rescale else 1.0
    factor = mask.keep * scale

    def backward(g):
        return (g * factor,)

    return Tensor._from_op(x.data * factor, (x,), backward)


def empirical_drop_ratio(
    rng: np.random.Generator,
    feature_shape: Sequence[int],
    spec: DropBlockSpec,
    realizations: int = 1000,
) -> float:
    """Average fraction of dropped features over independent realizations."""
    ratios = [sample_mask(rng, feature_shape, spec, spec.p).drop_ratio for _ in range(realizations)]
    return float(np.mean(ratios))


# b, p, F, gamma, actual drop ratio (1D layer, 8 independent channels)
REFERENCE_DROP_ROWS = [
    (3, 0.2, 3, 0.2, 0.203), (3, 0.9, 3, 0.9, 0.901),
    (3, 0.2, 4, 0.133, 0.19), (3, 0.9, 4, 0.6, 0.718),
    (3, 0.2, 8, 0.089, 0.186), (3, 0.9, 8, 0.4, 0.652),
    (3, 0.2, 16, 0.076, 0.186), (3, 0.9, 16, 0.343, 0.652),
    (5, 0.2, 8, 0.08, 0.183), (5, 0.9, 8, 0.36, 0.631),
    (5, 0.2, 16, 0.053, 0.184), (5, 0.9, 16, 0.24, 0.609),
    (7, 0.2, 8, 0.114, 0.196), (7, 0.9, 8, 0.514, 0.701),
    (7, 0.2, 16, 0.046, 0.178), (7, 0.9, 16, 0.206, 0.589),
]


def drop_ratio_table(seed: int = 0, realizations: int = 1000, channels: int = 8) -> list[dict]:
    """Recompute gamma and the empirical drop ratio for every reference row."""
    rows = []
    for i, (b, p, F, gamma_ref, ratio_ref) in enumerate(REFERENCE_DROP_ROWS):
        spec = DropBlockSpec(p=p, block_size=b, shared_across_channels=False)
        rng = np.random.default_rng([seed, i])
        ratio = empirical_drop_ratio(rng, (1, channels, F), spec, realizations)
        rows.append({
            "b": b, "p": p, "F": F,
            "gamma": compute_gamma(p, F, b, 1), "gamma_ref": gamma_ref,
            "drop_ratio": ratio, "drop_ratio_ref": ratio_ref,
        })
    return rows
