"""Time-series data model: CSV ingestion, centering/standardization,
past/future window extraction, and lagged covariance estimation."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Series:
    """An (L, N) real-valued time series; immutable after construction."""

    data: np.ndarray
    channel_names: list[str] | None = None
    step_label: str | None = None

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"series data must be 2-D (time x channels), got ndim={arr.ndim}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"series data must be non-empty, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("series data contain NaN or Inf")
        if self.channel_names is not None and len(self.channel_names) != arr.shape[1]:
            raise ValueError("channel_names length does not match channel count")
        object.__setattr__(self, "data", arr)

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class WindowPairBatch:
    """Aligned past/future windows, each flattened time-major to length T*N."""

    past: np.ndarray       # (S, T*N)
    future: np.ndarray     # (S, T*N)
    anchors: np.ndarray    # (S,) int
    window: int
    n_channels: int


@dataclass(frozen=True)
class LaggedCovariance:
    """Cross-covariances C_0..C_K of a centered series."""

    covariances: list[np.ndarray] = field(default_factory=list)  # each (N, N)
    sample_count: int = 0
    mean: np.ndarray | None = None

    @property
    def max_lag(self) -> int:
        return len(self.covariances) - 1


def load_series(path, has_header: bool = False) -> Series:
    """Parse a CSV of rows = time steps, columns = channels.

    Rejects ragged rows and non-numeric cells (reporting 1-indexed file
    row and column), and requires at least 2 data rows.
    """
    names: list[str] | None = None
    rows: list[list[float]] = []
    n_cols: int | None = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for line_no, cells in enumerate(reader, start=1):
            if not cells:
                continue
            if has_header and names is None and line_no == 1:
                names = [c.strip() for c in cells]
                n_cols = len(names)
                continue
            if n_cols is None:
                n_cols = len(cells)
            elif len(cells) != n_cols:
                raise ValueError(
                    f"{path}: row {line_no}: expected {n_cols} columns, got {len(cells)}"
                )
            parsed = []
            for col_no, cell in enumerate(cells, start=1):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}: non-numeric value {cell.strip()!r} at row {line_no}, "
                        f"column {col_no}"
                    ) from None
            rows.append(parsed)
    if len(rows) < 2:
        raise ValueError(f"{path}: need at least 2 data rows, got {len(rows)}")
    return Series(np.array(rows, dtype=np.float64), channel_names=names)


def save_series(series: Series, path, include_header: bool = False) -> None:
    """Write a Series to CSV in the same convention load_series reads."""
    with open(path, "w", newline="") as fh:
        if include_header and series.channel_names is not None:
            fh.write(",".join(series.channel_names) + "\n")
        for row in series.data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def center(series: Series) -> tuple[Series, np.ndarray]:
    """Subtract per-channel means; returns the centered series and the means."""
    if series.length < 2:
        raise ValueError("centering needs at least 2 time steps")
    mean = series.data.mean(axis=0)
    return Series(series.data - mean, series.channel_names, series.step_label), mean


def standardize(series: Series) -> tuple[Series, np.ndarray, np.ndarray]:
    """Center and scale to unit variance (population denominator L).

    Zero-variance channels stay centered with scale 1 and a warning.
    """
    centered, mean = center(series)
    var = centered.data.var(axis=0)
    scale = np.sqrt(var)
    dead = scale == 0.0
    if dead.any():
        warnings.warn(
            f"{int(dead.sum())} zero-variance channel(s) left centered, not scaled",
            stacklevel=2,
        )
        scale = np.where(dead, 1.0, scale)
    return (
        Series(centered.data / scale, series.channel_names, series.step_label),
        mean,
        scale,
    )


def anchor_bounds(length: int, window: int) -> tuple[int, int]:
    """Inclusive [lo, hi] range of valid anchors for past/future windows."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    lo, hi = window - 1, length - window - 1
    if hi < lo:
        raise ValueError(
            f"series of length {length} is too short for window {window} "
            f"(needs length >= {2 * window + 1})"
        )
    return lo, hi


def window_pairs(series: Series, window: int, anchors) -> WindowPairBatch:
    """Extract flattened past windows x_{t-T+1..t} and future windows
    x_{t+1..t+T} at the given anchor indices (stride-1 overlap allowed)."""
    lo, hi = anchor_bounds(series.length, window)
    anchors = np.asarray(anchors, dtype=np.int64)
    if anchors.ndim != 1 or anchors.size == 0:
        raise ValueError("anchors must be a non-empty 1-D index list")
    bad = (anchors < lo) | (anchors > hi)
    if bad.any():
        offender = int(anchors[bad][0])
        raise ValueError(
            f"anchor {offender} out of range [{lo}, {hi}] for window {window}, "
            f"length {series.length}"
        )
    t, n = window, series.n_channels
    offsets_past = np.arange(-t + 1, 1)
    offsets_future = np.arange(1, t + 1)
    past = series.data[anchors[:, None] + offsets_past].reshape(len(anchors), t * n)
    future = series.data[anchors[:, None] + offsets_future].reshape(len(anchors), t * n)
    return WindowPairBatch(past=past, future=future, anchors=anchors,
                           window=t, n_channels=n)


def lagged_covariance(series: Series, max_lag: int) -> LaggedCovariance:
    """C_delta = (1/(L-delta)) sum_t (x_t - mu)(x_{t+delta} - mu)^T for
    delta = 0..max_lag, with mu the full-series mean."""
    length = series.length
    if max_lag < 0:
        raise ValueError(f"max_lag must be >= 0, got {max_lag}")
    if length <= max_lag + 1:
        raise ValueError(
            f"series length {length} too short for max lag {max_lag} "
            f"(needs length > max_lag + 1)"
        )
    mean = series.data.mean(axis=0)
    x = series.data - mean
    covs = []
    for delta in range(max_lag + 1):
        head = x[: length - delta]
        tail = x[delta:]
        c = head.T @ tail / (length - delta)
        if delta == 0:
            c = 0.5 * (c + c.T)
        covs.append(c)
    return LaggedCovariance(covariances=covs, sample_count=length, mean=mean)


def block_toeplitz(cov: LaggedCovariance, width: int) -> np.ndarray:
    """(width*N, width*N) matrix with block (i, j) = C_{j-i} (transpose for
    j < i); symmetric by construction."""
    if width < 1:
        raise ValueError(f"width must be >= 1, got {width}")
    if width > cov.max_lag + 1:
        raise ValueError(
            f"width {width} needs lags up to {width - 1}, have up to {cov.max_lag}"
        )
    n = cov.covariances[0].shape[0]
    out = np.empty((width * n, width * n))
    for i in range(width):
        for j in range(width):
            block = cov.covariances[j - i] if j >= i else cov.covariances[i - j].T
            out[i * n:(i + 1) * n, j * n:(j + 1) * n] = block
    return out
