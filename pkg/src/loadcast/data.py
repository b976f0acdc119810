"""Yearly consumption CSV ingestion, scaling, splitting and windowing.

The input schema is a UTF-8 CSV with header exactly
``entity,year,consumption_twh``, one row per entity-year, rows in any order.
Values are terawatt-hours and must be positive; each entity's years must be
consecutive and inside 1990-2019.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CSV_HEADER = ["entity", "year", "consumption_twh"]

YEAR_MIN = 1990
YEAR_MAX = 2019

# 19 countries plus the European Union.
G20_ENTITIES = (
    "Argentina",
    "Australia",
    "Brazil",
    "Canada",
    "China",
    "France",
    "Germany",
    "India",
    "Indonesia",
    "Italy",
    "Japan",
    "South Korea",
    "Mexico",
    "Russia",
    "Saudi Arabia",
    "South Africa",
    "Turkey",
    "United Kingdom",
    "United States",
    "European Union",
)


class DataError(ValueError):
    """Base class for dataset problems."""


class FormatError(DataError):
    """Malformed file or rows."""


class ContinuityError(DataError):
    """A gap in an entity's year sequence."""


class RangeError(DataError):
    """A value or year outside its allowed range."""


class CoverageError(DataError):
    """A series does not cover the years an operation needs."""


class DegenerateScaleError(DataError):
    """An entity's training values are all identical."""


class InsufficientDataError(DataError):
    """Too few points to build even one window."""


@dataclass(frozen=True)
class ConsumptionSeries:
    """One entity's yearly consumption in TWh over consecutive years."""

    entity: str
    years: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        if len(self.years) != vals.shape[0]:
            raise FormatError(
                f"{self.entity}: {len(self.years)} years but {vals.shape[0]} values"
            )

    @property
    def first_year(self) -> int:
        return self.years[0]

    @property
    def last_year(self) -> int:
        return self.years[-1]

    def value_at(self, year: int) -> float:
        if year < self.first_year or year > self.last_year:
            raise CoverageError(f"{self.entity}: no value for year {year}")
        return float(self.values[year - self.first_year])


@dataclass(frozen=True)
class SplitSpec:
    """Train/test year split; the test block follows the train block."""

    train_years: tuple[int, int] = (1990, 2015)
    test_years: tuple[int, int] = (2016, 2019)

    def __post_init__(self):
        t0, t1 = self.train_years
        s0, s1 = self.test_years
        if not (t0 <= t1 < s0 <= s1):
            raise RangeError(f"split years out of order: train {self.train_years}, test {self.test_years}")
        if s0 != t1 + 1:
            raise RangeError(f"split is not exhaustive: gap between {t1} and {s0}")


def load_csv(path) -> list[ConsumptionSeries]:
    """Parse and validate a consumption CSV; one sorted series per entity."""
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if [h.strip() for h in header] != CSV_HEADER:
            raise FormatError(f"{path}: header {header!r} != {','.join(CSV_HEADER)!r}")
        rows: dict[str, dict[int, float]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            entity = row[0].strip()
            if not entity:
                raise FormatError(f"{path}:{lineno}: empty entity name")
            try:
                year = int(row[1])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad year {row[1]!r}") from None
            try:
                value = float(row[2])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad value {row[2]!r}") from None
            if year < YEAR_MIN or year > YEAR_MAX:
                raise RangeError(f"{path}:{lineno}: year {year} outside [{YEAR_MIN}, {YEAR_MAX}]")
            if not np.isfinite(value) or value <= 0.0:
                raise RangeError(f"{path}:{lineno}: consumption must be positive, got {row[2]}")
            per = rows.setdefault(entity, {})
            if year in per:
                raise FormatError(f"{path}:{lineno}: duplicate row for {entity} year {year}")
            per[year] = value

    series = []
    for entity in sorted(rows):
        per = rows[entity]
        years = sorted(per)
        for a, b in zip(years, years[1:]):
            if b != a + 1:
                raise ContinuityError(f"{entity}: missing year {a + 1}")
        series.append(
            ConsumptionSeries(entity=entity, years=tuple(years), values=[per[y] for y in years])
        )
    return series


def write_csv(path, series_list: list[ConsumptionSeries]) -> None:
    """Serialize series back to the input schema (entities in given order)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for s in series_list:
            for year, value in zip(s.years, s.values):
                writer.writerow([s.entity, year, repr(float(value))])


def filter_entities(series_list: list[ConsumptionSeries], roster) -> list[ConsumptionSeries]:
    """Keep roster entities, erroring on any roster name absent from the data."""
    have = {s.entity: s for s in series_list}
    missing = [name for name in roster if name not in have]
    if missing:
        raise CoverageError(f"entities missing from data: {', '.join(missing)}")
    return [have[name] for name in roster]


def split(series: ConsumptionSeries, spec: SplitSpec = SplitSpec()):
    """Train series (years up to the boundary) and (year, value) test pairs."""
    s0, s1 = spec.test_years
    if series.last_year < s1 or series.first_year > s0:
        raise CoverageError(
            f"{series.entity}: series {series.first_year}-{series.last_year} "
            f"does not cover test years {s0}-{s1}"
        )
    t1 = spec.train_years[1]
    n_train = t1 - series.first_year + 1
    train = ConsumptionSeries(
        entity=series.entity,
        years=series.years[:n_train],
        values=series.values[:n_train].copy(),
    )
    test_pairs = [(y, series.value_at(y)) for y in range(s0, s1 + 1)]
    return train, test_pairs


@dataclass(frozen=True)
class Scaler:
    """Per-entity min-max transform fitted on training years only."""

    bounds: dict[str, tuple[float, float]]
    fit_year_max: int

    def scale(self, v, entity: str):
        lo, hi = self._bounds(entity)
        return (np.asarray(v, dtype=np.float64) - lo) / (hi - lo)

    def unscale(self, v, entity: str):
        lo, hi = self._bounds(entity)
        return np.asarray(v, dtype=np.float64) * (hi - lo) + lo

    def _bounds(self, entity: str) -> tuple[float, float]:
        if entity not in self.bounds:
            raise KeyError(f"no scaling bounds for entity {entity!r}")
        return self.bounds[entity]

    def fingerprint(self) -> str:
        """Stable digest of the fitted bounds, stored with trained models."""
        h = hashlib.sha256()
        for entity in sorted(self.bounds):
            lo, hi = self.bounds[entity]
            h.update(f"{entity}:{float(lo).hex()}:{float(hi).hex()};".encode("utf-8"))
        return "minmax:" + h.hexdigest()[:16]


def fit_scaler(train_series: list[ConsumptionSeries]) -> Scaler:
    """Fit per-entity bounds; records the latest year it saw for auditing."""
    bounds = {}
    fit_year_max = YEAR_MIN
    for s in train_series:
        lo = float(np.min(s.values))
        hi = float(np.max(s.values))
        if hi <= lo:
            raise DegenerateScaleError(f"{s.entity}: constant series, min == max == {lo}")
        bounds[s.entity] = (lo, hi)
        fit_year_max = max(fit_year_max, s.last_year)
    return Scaler(bounds=bounds, fit_year_max=fit_year_max)


@dataclass(frozen=True)
class WindowSample:
    entity: str
    window: np.ndarray  # scaled, oldest first
    target: float  # scaled
    target_year: int

    def __post_init__(self):
        w = np.asarray(self.window, dtype=np.float64)
        w.flags.writeable = False
        object.__setattr__(self, "window", w)


@dataclass(frozen=True)
class WindowedDataset:
    window_size: int
    samples: tuple[WindowSample, ...]
    scaler_ref: str = ""

    def per_entity_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for s in self.samples:
            counts[s.entity] = counts.get(s.entity, 0) + 1
        return counts


def make_windows(
    train_series: list[ConsumptionSeries], window_size: int, scaler: Scaler
) -> WindowedDataset:
    """Slide a window one year at a time over each entity's scaled series.

    Each sample pairs window_size consecutive scaled values with the next
    year's scaled value; samples from all entities are pooled.
    """
    if window_size < 1:
        raise InsufficientDataError(f"window size must be >= 1, got {window_size}")
    samples: list[WindowSample] = []
    for s in train_series:
        if len(s.years) <= window_size:
            raise InsufficientDataError(
                f"{s.entity}: {len(s.years)} points cannot fill a window of {window_size} "
                "plus a target"
            )
        scaled = scaler.scale(s.values, s.entity)
        for start in range(len(s.years) - window_size):
            end = start + window_size
            samples.append(
                WindowSample(
                    entity=s.entity,
                    window=scaled[start:end].copy(),
                    target=float(scaled[end]),
                    target_year=s.years[end],
                )
            )
    return WindowedDataset(
        window_size=window_size, samples=tuple(samples), scaler_ref=scaler.fingerprint()
    )
