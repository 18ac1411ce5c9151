"""Price ingestion, alignment, state features and the train/test split.

Input files are per-asset CSVs of bar close prices. Multiple assets are
aligned onto a common timestamp grid, and model states are built from two
lagged series per asset and lag: the return against the close l bars ago,
and the return against the trailing average close. An aligned panel can
be persisted to a small binary cache so repeated runs skip the CSV parse.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import (
    EmptyIntersection,
    InsufficientHistory,
    MissingColumn,
    NonPositivePrice,
    PanelTooShort,
    UnsortableTimestamps,
)

PANEL_MAGIC = b"CDGPANEL\x00\x00\x00\x00\x00\x00\x00\x00"  # 16 bytes
PANEL_VERSION = 1

# Bar-count lags applied to every asset, plus day-multiples resolved
# against the configured bars-per-day.
DEFAULT_MINUTE_LAGS = [1, 2, 20, 30, 45, 60, 90, 120, 180, 240, 360, 720]
DEFAULT_DAY_LAGS = [1.0, 1.5, 2.0, 3.0, 5.0, 7.0]
DEFAULT_BARS_PER_DAY = 1440


@dataclass(frozen=True)
class PriceSeries:
    asset_id: str
    timestamps: np.ndarray  # int64 epoch seconds, strictly increasing
    close: np.ndarray  # float64, all > 0

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass(frozen=True)
class AlignedPanel:
    assets: tuple[str, ...]
    grid: np.ndarray  # int64 epoch seconds, common clock
    closes: np.ndarray  # (time, asset) float64, no gaps

    def __len__(self) -> int:
        return len(self.grid)

    @property
    def n_assets(self) -> int:
        return len(self.assets)


@dataclass(frozen=True)
class LagSpec:
    lags: tuple[int, ...]

    def __post_init__(self):
        if not self.lags:
            raise ValueError("at least one lag required")
        if any(l < 1 for l in self.lags):
            raise ValueError("lags must be >= 1")
        if any(b <= a for a, b in zip(self.lags, self.lags[1:])):
            raise ValueError("lags must be strictly increasing")

    @property
    def max_lag(self) -> int:
        return self.lags[-1]

    def feature_dim(self, n_assets: int) -> int:
        return 2 * len(self.lags) * n_assets


def default_lags(bars_per_day: int = DEFAULT_BARS_PER_DAY) -> LagSpec:
    bars = set(DEFAULT_MINUTE_LAGS)
    bars.update(int(round(d * bars_per_day)) for d in DEFAULT_DAY_LAGS)
    return LagSpec(tuple(sorted(bars)))


@dataclass
class State:
    """Model input at one panel index plus per-task worth bookkeeping."""

    t: int
    features: np.ndarray
    worth_snapshot: np.ndarray  # per base task, current worth


def _parse_timestamp(raw: str, row: int) -> int:
    raw = raw.strip()
    try:
        return int(float(raw))
    except ValueError:
        pass
    try:
        text = raw.replace("Z", "+00:00")
        dt = datetime.fromisoformat(text)
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return int(dt.timestamp())
    except ValueError:
        raise UnsortableTimestamps(f"row {row}: cannot parse timestamp {raw!r}") from None


def load_csv(
    path: str | Path,
    timestamp_col: str = "timestamp",
    close_col: str = "close",
    asset_id: str | None = None,
) -> PriceSeries:
    """Read one asset's bar closes. Timestamps may be epoch seconds or ISO-8601."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or timestamp_col not in reader.fieldnames or close_col not in reader.fieldnames:
            raise MissingColumn(
                f"{path}: need columns {timestamp_col!r} and {close_col!r}, found {reader.fieldnames}"
            )
        ts: list[int] = []
        closes: list[float] = []
        for i, rec in enumerate(reader):
            ts.append(_parse_timestamp(rec[timestamp_col], i))
            try:
                c = float(rec[close_col])
            except (TypeError, ValueError):
                raise NonPositivePrice(f"{path}: row {i}: close {rec[close_col]!r} not a number", row=i) from None
            if not np.isfinite(c) or c <= 0:
                raise NonPositivePrice(f"{path}: row {i}: close {c} must be a positive real", row=i)
            closes.append(c)
    t_arr = np.asarray(ts, dtype=np.int64)
    c_arr = np.asarray(closes, dtype=np.float64)
    order = np.argsort(t_arr, kind="stable")
    t_arr, c_arr = t_arr[order], c_arr[order]
    if len(t_arr) > 1 and np.any(np.diff(t_arr) == 0):
        dup = int(t_arr[np.where(np.diff(t_arr) == 0)[0][0]])
        raise UnsortableTimestamps(f"{path}: duplicate timestamp {dup}")
    return PriceSeries(asset_id or path.stem, t_arr, c_arr)


def align(series: list[PriceSeries], mode: str = "forward_fill") -> AlignedPanel:
    """Put all assets on one clock.

    "intersect" keeps only timestamps present in every series.
    "forward_fill" uses the union grid, carrying each asset's last
    observed close; leading rows before an asset's first print are
    dropped from the grid.
    """
    if not series:
        raise EmptyIntersection("no series to align")
    for s in series:
        if len(s) == 0:
            raise EmptyIntersection(f"series {s.asset_id} is empty")
    if mode == "intersect":
        grid = series[0].timestamps
        for s in series[1:]:
            grid = np.intersect1d(grid, s.timestamps)
        if len(grid) == 0:
            raise EmptyIntersection("no common timestamps across assets")
        cols = []
        for s in series:
            idx = np.searchsorted(s.timestamps, grid)
            cols.append(s.close[idx])
        return AlignedPanel(tuple(s.asset_id for s in series), grid, np.column_stack(cols))
    if mode == "forward_fill":
        grid = series[0].timestamps
        for s in series[1:]:
            grid = np.union1d(grid, s.timestamps)
        start = max(s.timestamps[0] for s in series)
        grid = grid[grid >= start]
        if len(grid) == 0:
            raise EmptyIntersection("assets have no overlapping time range")
        cols = []
        for s in series:
            # index of the latest observation at or before each grid time
            idx = np.searchsorted(s.timestamps, grid, side="right") - 1
            cols.append(s.close[idx])
        return AlignedPanel(tuple(s.asset_id for s in series), grid, np.column_stack(cols))
    raise ValueError(f"unknown align mode {mode!r}")


def feature_row(
    panel: AlignedPanel,
    t: int,
    lags: LagSpec,
    paper_exact_m: bool = False,
) -> np.ndarray:
    """Features at panel index t: per asset and lag l, the pair
    (z_t/z_{t-l} - 1, z_t/m - 1) where m averages the closes over the
    trailing l+1 bars (divisor l when paper_exact_m is set)."""
    if t < lags.max_lag:
        raise InsufficientHistory(t, lags.max_lag)
    rows = _feature_rows(panel, np.array([t]), lags, paper_exact_m)
    return rows[0]


def _feature_rows(
    panel: AlignedPanel,
    ts: np.ndarray,
    lags: LagSpec,
    paper_exact_m: bool = False,
) -> np.ndarray:
    """Vectorized feature construction for many time indices at once."""
    closes = panel.closes
    cum = np.concatenate([np.zeros((1, panel.n_assets)), np.cumsum(closes, axis=0)])
    now = closes[ts]  # (B, A)
    feats = []
    for lag in lags.lags:
        past = closes[ts - lag]
        window_sum = cum[ts + 1] - cum[ts - lag]  # l+1 terms ending at t
        divisor = lag if paper_exact_m else lag + 1
        avg = window_sum / divisor
        feats.append(now / past - 1.0)
        feats.append(now / avg - 1.0)
    # layout: asset-major, lag pairs within each asset
    stacked = np.stack(feats, axis=-1)  # (B, A, 2*|lags|)
    return stacked.reshape(len(ts), -1)


def split(panel: AlignedPanel, test_bars: int, gap_bars: int, max_lag: int = 0) -> tuple[range, range]:
    """Return (train index range, test index range); the gap between them
    is discarded so test states never overlap training rewards."""
    n = len(panel)
    if n - test_bars - gap_bars - max_lag <= 0:
        raise PanelTooShort(
            f"panel has {n} bars; needs more than test={test_bars} + gap={gap_bars} + max_lag={max_lag}"
        )
    train_end = n - test_bars - gap_bars
    return range(0, train_end), range(n - test_bars, n)


def save_panel(panel: AlignedPanel, path: str | Path) -> None:
    """Binary cache: magic, version, dimensions, asset table, grid, closes."""
    meta = json.dumps({"assets": list(panel.assets)}).encode()
    with Path(path).open("wb") as fh:
        fh.write(PANEL_MAGIC)
        fh.write(struct.pack("<IQI", PANEL_VERSION, len(panel.grid), panel.n_assets))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(panel.grid.astype("<i8").tobytes())
        fh.write(panel.closes.astype("<f8").tobytes(order="C"))


def load_panel(path: str | Path) -> AlignedPanel:
    raw = Path(path).read_bytes()
    if raw[:16] != PANEL_MAGIC:
        raise PanelTooShort(f"{path}: not a panel cache (bad magic)")
    version, n_time, n_assets = struct.unpack_from("<IQI", raw, 16)
    if version != PANEL_VERSION:
        raise PanelTooShort(f"{path}: unsupported panel cache version {version}")
    off = 16 + struct.calcsize("<IQI")
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off : off + meta_len])
    off += meta_len
    grid = np.frombuffer(raw, dtype="<i8", count=n_time, offset=off).astype(np.int64)
    off += n_time * 8
    closes = np.frombuffer(raw, dtype="<f8", count=n_time * n_assets, offset=off)
    closes = closes.reshape(n_time, n_assets).astype(np.float64)
    return AlignedPanel(tuple(meta["assets"]), grid, closes)
