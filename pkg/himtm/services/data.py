"""
Series ingestion, chronological splits, standardisation and windowing

Loads ETT-style CSV files (timestamp column followed by numeric channels) or
generates seeded synthetic series, standardises every channel with statistics
of the training split and cuts channel-independent windows that never cross
a split boundary.
"""
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dateutil import parser as date_parser

from ..exceptions import ConfigurationError, DataError

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')


@dataclass(frozen=True)
class SyntheticRecipe:
    """Sum of sinusoids (period, amplitude, phase) plus a linear trend and white noise"""
    length: int = 4000
    channels: int = 1
    sinusoids: Tuple[Tuple[float, float, float], ...] = ((24.0, 1.0, 0.0), (168.0, 0.5, 0.0))
    trend: float = 0.0
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.length < 1 or self.channels < 1:
            raise ConfigurationError(f"synthetic length and channels must be positive ({self.length}, {self.channels})")
        if not self.sinusoids and self.trend == 0.0 and self.noise <= 0.0:
            raise ConfigurationError("synthetic recipe needs at least one component (sinusoid, trend or noise)")
        for period, _, _ in self.sinusoids:
            if period <= 0:
                raise ConfigurationError(f"sinusoid period must be positive, got {period}")
        if self.noise < 0:
            raise ConfigurationError(f"synthetic noise must be non-negative, got {self.noise}")


@dataclass(frozen=True)
class DatasetSpec:
    """
    Where the series comes from and how it is cut. A CSV path takes precedence
    over the synthetic recipe.
    """
    csv_path: Optional[str] = None
    timestamp_column: Optional[str] = None
    columns: Tuple[str, ...] = ()
    splits: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    lookback: int = 512
    stride: int = 1
    synthetic: SyntheticRecipe = field(default_factory=SyntheticRecipe)

    def __post_init__(self):
        if len(self.splits) != 3 or min(self.splits) < 0 or self.splits[0] <= 0:
            raise ConfigurationError(f"data.splits needs three non-negative fractions with train > 0, got {list(self.splits)}")
        if abs(sum(self.splits) - 1.0) > 1e-9:
            raise ConfigurationError(f"data.splits must sum to 1, got {sum(self.splits)}")
        if self.lookback < 1 or self.stride < 1:
            raise ConfigurationError(f"data.lookback and data.stride must be positive ({self.lookback}, {self.stride})")

    @property
    def source(self) -> str:
        return self.csv_path if self.csv_path else 'synthetic'


@dataclass
class Series:
    """[time, channels] values in chronological order"""
    values: np.ndarray
    columns: List[str]
    timestamps: Optional[np.ndarray] = None
    timestamp_column: str = 'date'

    def __len__(self):
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray
    columns: List[str]


@dataclass
class WindowSet:
    """
    Channel-independent windows in evaluation order (window start, then channel)

    x: [n, lookback], y: [n, horizon], starts: global index of x[0], channels: channel id
    """
    x: np.ndarray
    y: np.ndarray
    starts: np.ndarray
    channels: np.ndarray

    def __len__(self):
        return len(self.x)


def load_csv(path, spec: Optional[DatasetSpec] = None) -> Series:
    """
    Read a header-first CSV: timestamp column (ISO-8601 or integer index) plus
    numeric channel columns

    Row numbers in diagnostics are file lines, the header being row 1.
    """
    spec = spec or DatasetSpec(csv_path=str(path))
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataError(f"cannot parse {path}: {str(e)}") from None
    if frame.shape[1] < 2:
        raise DataError(f"{path} needs a timestamp column and at least one value column")

    timestamp_column = spec.timestamp_column or frame.columns[0]
    if timestamp_column not in frame.columns:
        raise DataError(f"timestamp column '{timestamp_column}' not found in {path}")
    columns = list(spec.columns) or [c for c in frame.columns if c != timestamp_column]
    for column in columns:
        if column not in frame.columns:
            raise DataError(f"value column '{column}' not found in {path}")

    numeric = frame[columns].apply(pd.to_numeric, errors='coerce')
    bad = numeric.isna().any(axis=1) | ~np.isfinite(numeric.to_numpy(dtype=np.float64, na_value=np.nan)).all(axis=1)
    if bad.any():
        rows = [int(i) + 2 for i in np.flatnonzero(bad.to_numpy())]
        shown = ', '.join(f"row {r}" for r in rows[:5])
        more = f" and {len(rows) - 5} more" if len(rows) > 5 else ""
        raise DataError(f"non-numeric values in {path}: {shown}{more}")

    raw_stamps = frame[timestamp_column].to_numpy(dtype=object)
    keys = _timestamp_keys(raw_stamps, path)
    values = numeric.to_numpy(dtype=np.float64)
    if len(keys) > 1 and np.any(np.diff(keys) < 0):
        logger.warning(f"timestamps in {path} are not monotonic; rows sorted by timestamp")
        order = np.argsort(keys, kind='stable')
        values, raw_stamps = values[order], raw_stamps[order]

    logger.info(f"loaded {path}: {values.shape[0]} rows, channels {columns}")
    return Series(values, columns, raw_stamps, timestamp_column)


def _timestamp_keys(stamps: np.ndarray, path: Path) -> np.ndarray:
    as_int = pd.to_numeric(pd.Series(stamps), errors='coerce')
    if len(stamps) and not as_int.isna().any():
        return as_int.to_numpy(dtype=np.float64)
    keys = np.empty(len(stamps), dtype=np.float64)
    for index, stamp in enumerate(stamps):
        try:
            keys[index] = date_parser.isoparse(str(stamp)).timestamp()
        except (ValueError, OverflowError):
            raise DataError(f"unparseable timestamp '{stamp}' at row {index + 2} of {path}") from None
    return keys


def export_csv(series: Series, path) -> Path:
    """Write a series in the load_csv layout with 17 significant digits"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stamps = series.timestamps if series.timestamps is not None else np.arange(len(series))
    frame = pd.DataFrame(series.values, columns=series.columns)
    frame.insert(0, series.timestamp_column, stamps)
    frame.to_csv(path, index=False, float_format='%.17g')
    return path


def synth_generate(recipe: SyntheticRecipe) -> Series:
    t = np.arange(recipe.length, dtype=np.float64)
    base = recipe.trend * t
    for period, amplitude, phase in recipe.sinusoids:
        base = base + amplitude * np.sin(2.0 * np.pi * t / period + phase)
    values = np.repeat(base[:, None], recipe.channels, axis=1)
    if recipe.noise > 0:
        values = values + np.random.default_rng(recipe.seed).normal(0.0, recipe.noise, size=values.shape)
    columns = [f"ch{c}" for c in range(recipe.channels)]
    return Series(values, columns, t.astype(np.int64), 'index')


def split_bounds(length: int, fractions: Sequence[float]) -> Dict[str, Tuple[int, int]]:
    """Chronological [start, stop) ranges of the train, val and test splits"""
    train_end = int(np.floor(length * fractions[0]))
    val_end = train_end + int(np.floor(length * fractions[1]))
    return {'train': (0, train_end), 'val': (train_end, val_end), 'test': (val_end, length)}


def standardize(values: np.ndarray, train_bounds: Tuple[int, int], columns: Optional[List[str]] = None
                ) -> Tuple[np.ndarray, ChannelStats]:
    """
    Subtract the train-split mean and divide by the train-split std per channel

    Channels whose train std is zero are dropped with a warning.
    """
    values = np.asarray(values, dtype=np.float64)
    columns = columns if columns is not None else [f"ch{c}" for c in range(values.shape[1])]
    start, stop = train_bounds
    if stop <= start:
        raise DataError("train split is empty; cannot fit standardisation statistics")
    train = values[start:stop]
    mu = train.mean(axis=0)
    sigma = train.std(axis=0)
    keep = sigma > 0
    for column in np.asarray(columns)[~keep]:
        logger.warning(f"channel '{column}' has zero variance on the train split and is excluded")
    if not keep.any():
        raise DataError("every channel has zero variance on the train split")
    kept = [c for c, k in zip(columns, keep) if k]
    stats = ChannelStats(mu[keep], sigma[keep], kept)
    return (values[:, keep] - stats.mean) / stats.std, stats


def inverse_standardize(values: np.ndarray, stats: ChannelStats, channels: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Undo standardize(); with `channels`, row i of `values` belongs to channel channels[i]
    """
    values = np.asarray(values, dtype=np.float64)
    if channels is None:
        return values * stats.std + stats.mean
    channels = np.asarray(channels, dtype=np.int64)
    shape = (-1,) + (1,) * (values.ndim - 1)
    return values * stats.std[channels].reshape(shape) + stats.mean[channels].reshape(shape)


def window_starts(length: int, lookback: int, horizon: int, stride: int) -> np.ndarray:
    if stride < 1:
        raise ConfigurationError(f"window stride must be positive, got {stride}")
    last = length - lookback - horizon
    if last < 0:
        logger.warning(f"series of length {length} is too short for lookback {lookback} + horizon {horizon}; no windows")
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, last + 1, stride, dtype=np.int64)


def window_iter(series: np.ndarray, lookback: int, horizon: int, stride: int = 1) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Sliding (x, y) pairs along the first axis; y starts where x ends"""
    series = np.asarray(series, dtype=np.float64)
    for start in window_starts(len(series), lookback, horizon, stride):
        yield series[start:start + lookback], series[start + lookback:start + lookback + horizon]


def audit_windows(starts: np.ndarray, lookback: int, horizon: int, bounds: Tuple[int, int], split: str = 'train') -> None:
    """Fail when any window reaches outside its split's index range"""
    starts = np.asarray(starts, dtype=np.int64)
    if starts.size == 0:
        return
    low, high = bounds
    first, last_end = int(starts.min()), int(starts.max()) + lookback + horizon
    if first < low or last_end > high:
        raise DataError(
            f"window leakage in {split} split: windows cover [{first}, {last_end}) but the split is [{low}, {high})"
        )


@dataclass
class PreparedDataset:
    values: np.ndarray
    bounds: Dict[str, Tuple[int, int]]
    stats: ChannelStats
    spec: DatasetSpec

    @property
    def columns(self) -> List[str]:
        return self.stats.columns

    def split(self, name: str) -> np.ndarray:
        if name not in self.bounds:
            raise DataError(f"unknown split '{name}', expected one of {SPLITS}")
        start, stop = self.bounds[name]
        return self.values[start:stop]

    def sample_windows(self, split: str, lookback: int, horizon: int, stride: int = 1) -> WindowSet:
        """Every (window start, channel) pair of one split as a univariate sample"""
        block = self.split(split)
        offset = self.bounds[split][0]
        local = window_starts(len(block), lookback, horizon, stride)
        starts = local + offset
        audit_windows(starts, lookback, horizon, self.bounds[split], split)
        channels = block.shape[1]
        if local.size == 0:
            return WindowSet(np.zeros((0, lookback)), np.zeros((0, horizon)),
                             np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        span = np.lib.stride_tricks.sliding_window_view(block, lookback + horizon, axis=0)[local]
        # span: [windows, channels, lookback + horizon]
        flat = span.reshape(len(local) * channels, lookback + horizon)
        return WindowSet(
            x=np.ascontiguousarray(flat[:, :lookback]),
            y=np.ascontiguousarray(flat[:, lookback:]),
            starts=np.repeat(starts, channels),
            channels=np.tile(np.arange(channels, dtype=np.int64), len(local)),
        )


def prepare_dataset(spec: DatasetSpec, base_dir: Optional[str] = None) -> PreparedDataset:
    if spec.csv_path:
        path = Path(spec.csv_path)
        if not path.is_absolute() and base_dir:
            path = Path(base_dir) / path
        series = load_csv(path, spec)
    else:
        series = synth_generate(spec.synthetic)
    bounds = split_bounds(len(series), spec.splits)
    values, stats = standardize(series.values, bounds['train'], series.columns)
    logger.info(
        f"dataset {os.path.basename(spec.source)}: {len(series)} steps, {len(stats.columns)} channels, "
        f"splits {bounds}"
    )
    return PreparedDataset(values, bounds, stats, spec)
