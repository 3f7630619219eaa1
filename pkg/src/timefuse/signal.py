"""Time-series data model: normalization, patching, scale/shape split, baselines.

Everything in this module is a pure function over immutable inputs; values are
kept as float64 numpy arrays in the signal domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError

# Floor applied to sigma so constant series stay invertible.
SIGMA_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class Series:
    """A univariate real-valued sequence with optional metadata.

    Multivariate signals are represented as an ordered list of Series, one per
    channel; cross-channel structure is left to the sequence model.
    """

    values: np.ndarray
    frequency: Optional[str] = None
    channel_id: Optional[int] = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Series):
            return NotImplemented
        return (
            np.array_equal(self.values, other.values)
            and self.frequency == other.frequency
            and self.channel_id == other.channel_id
        )

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            values = values.reshape(-1)
        if values.size == 0:
            raise ValidationError("series must be non-empty")
        if not np.all(np.isfinite(values)):
            raise ValidationError("series contains NaN or Inf")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    def with_values(self, values: np.ndarray) -> "Series":
        return Series(values, frequency=self.frequency, channel_id=self.channel_id)


@dataclass(frozen=True)
class NormStats:
    """Normalization statistics (mu, sigma) of a source series.

    ``sigma`` is floored at SIGMA_FLOOR; ``constant`` records whether the
    floor was applied.
    """

    mu: float
    sigma: float
    constant: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise ValidationError("normalization stats must be finite")
        if self.sigma < SIGMA_FLOOR:
            raise ValidationError(f"sigma {self.sigma} below floor {SIGMA_FLOOR}")


@dataclass(frozen=True, eq=False)
class PatchSeq:
    """Fixed-length patch decomposition of a (normalized) series.

    ``patches`` has shape (n_patches, p); the final ``pad_len`` points are
    synthetic tail padding and are excluded from reconstruction and losses.
    """

    patches: np.ndarray
    p: int
    pad_len: int = 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatchSeq):
            return NotImplemented
        return (
            np.array_equal(self.patches, other.patches)
            and self.p == other.p
            and self.pad_len == other.pad_len
        )

    def __post_init__(self):
        patches = np.asarray(self.patches, dtype=np.float64)
        if patches.ndim != 2 or patches.shape[1] != self.p:
            raise ValidationError(f"patches must have shape (n, {self.p})")
        if patches.shape[0] == 0:
            raise ValidationError("patch sequence must contain at least one patch")
        if not (0 <= self.pad_len < self.p):
            raise ValidationError("pad_len must be in [0, p)")
        patches.setflags(write=False)
        object.__setattr__(self, "patches", patches)

    @property
    def n_patches(self) -> int:
        return int(self.patches.shape[0])

    def pad_mask(self) -> np.ndarray:
        """Boolean (n, p) mask that is True on real (non-padded) points."""
        mask = np.ones_like(self.patches, dtype=bool)
        if self.pad_len:
            flat = mask.reshape(-1)
            flat[flat.size - self.pad_len:] = False
        return mask


def normalize(series: Series) -> tuple[Series, NormStats]:
    """Z-score a series over its full length using the population std.

    Constant series get sigma = SIGMA_FLOOR and are flagged; the roundtrip
    through :func:`denormalize` is exact to float precision either way.
    """
    values = series.values
    mu = float(values.mean())
    sigma = float(values.std())
    constant = sigma < SIGMA_FLOOR
    if constant:
        sigma = SIGMA_FLOOR
    normed = (values - mu) / sigma
    return series.with_values(normed), NormStats(mu=mu, sigma=sigma, constant=constant)


def denormalize(series: Series, stats: NormStats) -> Series:
    return series.with_values(series.values * stats.sigma + stats.mu)


def patchify(series: Series, p: int) -> PatchSeq:
    """Split a series into ceil(len/p) patches of length p.

    A non-divisible tail is padded by repeating the final observed value;
    the pad length is recorded so reconstruction can drop it again.
    """
    if p < 1:
        raise ValidationError(f"patch length must be >= 1, got {p}")
    values = series.values
    n = int(math.ceil(len(values) / p))
    pad_len = n * p - len(values)
    if pad_len:
        values = np.concatenate([values, np.full(pad_len, values[-1])])
    return PatchSeq(patches=values.reshape(n, p), p=p, pad_len=pad_len)


def unpatchify(ps: PatchSeq, frequency: Optional[str] = None,
               channel_id: Optional[int] = None) -> Series:
    """Concatenate patches and drop the padded tail."""
    total = ps.patches.size
    if ps.pad_len >= total:
        raise ValidationError("pad_len covers the entire patch sequence")
    values = ps.patches.reshape(-1)
    if ps.pad_len:
        values = values[: total - ps.pad_len]
    return Series(values, frequency=frequency, channel_id=channel_id)


def scale_shape_decompose(series: Series) -> tuple[Series, NormStats]:
    """Split a series into its normalized pattern and its magnitude stats."""
    return normalize(series)


def recompose(shape: Series, scale: NormStats) -> Series:
    """Inverse of :func:`scale_shape_decompose`."""
    return denormalize(shape, scale)


def seasonal_naive(history: Series, season: int, horizon: int) -> Series:
    """Repeat the last observed seasonal cycle.

    forecast[t] = history[len - season + (t mod season)]
    """
    if season < 1:
        raise ValidationError(f"season must be >= 1, got {season}")
    if horizon < 1:
        raise ValidationError(f"horizon must be >= 1, got {horizon}")
    n = len(history)
    if season > n:
        raise ValidationError(f"season {season} exceeds history length {n}")
    idx = n - season + (np.arange(horizon) % season)
    return history.with_values(history.values[idx])
