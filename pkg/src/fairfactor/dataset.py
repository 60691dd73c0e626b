"""HMD 1x1 life-table ingestion, centered log-mortality panels, synthetic panels.

A panel stores y[t, i] = ln(m[t, i]) - a[i] for one group, where the intercept
a is the per-age mean of the log rates over the panel's (training) years. An
optional per-age scale divides y after centering; it is stored so the original
rates can be recovered exactly.
"""

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .linalg import nearest_orthonormal

__all__ = [
    "DataError",
    "HmdFormatError",
    "MortalityTable",
    "Panel",
    "GroupedPanel",
    "SynthTruth",
    "parse_hmd_1x1",
    "build_panel",
    "split_train_test",
    "synthesize",
    "panels_to_csv",
    "panels_from_csv",
]

PANEL_CSV_HEADER = ["group", "year", "age", "log_rate_centered", "intercept"]

OPEN_AGE_CLASS = 110


class DataError(ValueError):
    """Raised for inconsistent or incomplete mortality data."""


class HmdFormatError(DataError):
    """Raised for malformed HMD 1x1 input; the message carries the line number."""


@dataclass(frozen=True)
class MortalityTable:
    """Period death rates by (year, age), one column per population group."""

    years: np.ndarray
    ages: np.ndarray
    rates: dict[str, np.ndarray]  # group -> rates aligned with years/ages; NaN = missing

    def __post_init__(self):
        n = len(self.years)
        if len(self.ages) != n or any(len(v) != n for v in self.rates.values()):
            raise DataError("year/age/rate columns have mismatched lengths")

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(self.rates)


def _parse_rate(token: str, lineno: int) -> float:
    if token == ".":
        return float("nan")
    try:
        value = float(token)
    except ValueError:
        raise HmdFormatError(f"line {lineno}: unreadable rate {token!r}") from None
    if not np.isfinite(value) or value < 0.0:
        raise HmdFormatError(f"line {lineno}: rate {token!r} is not a finite non-negative number")
    return value


def parse_hmd_1x1(text: str | Iterable[str]) -> MortalityTable:
    """Parse an HMD Mx 1x1 file (columns Year, Age, Female, Male, Total).

    The first two lines are headers. A column-name line starting with "Year"
    is tolerated wherever it appears. Age "110+" maps to 110, missing rates
    "." map to NaN. Years must be non-decreasing; duplicate (year, age) cells
    are rejected.
    """
    lines = text.splitlines() if isinstance(text, str) else list(text)
    years: list[int] = []
    ages: list[int] = []
    female: list[float] = []
    male: list[float] = []
    total: list[float] = []
    seen: set[tuple[int, int]] = set()
    prev_year = None
    for lineno, raw in enumerate(lines, start=1):
        if lineno <= 2:
            continue
        line = raw.strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0].lower() == "year":
            continue
        if len(tokens) != 5:
            raise HmdFormatError(f"line {lineno}: expected 5 columns, got {len(tokens)}")
        try:
            year = int(tokens[0])
        except ValueError:
            raise HmdFormatError(f"line {lineno}: unreadable year {tokens[0]!r}") from None
        age_token = tokens[1]
        if age_token.endswith("+"):
            age_token = age_token[:-1]
        try:
            age = int(age_token)
        except ValueError:
            raise HmdFormatError(f"line {lineno}: unreadable age {tokens[1]!r}") from None
        if prev_year is not None and year < prev_year:
            raise HmdFormatError(f"line {lineno}: year {year} breaks the non-decreasing year order")
        prev_year = year
        if (year, age) in seen:
            raise HmdFormatError(f"line {lineno}: duplicate cell for year {year}, age {age}")
        seen.add((year, age))
        years.append(year)
        ages.append(age)
        female.append(_parse_rate(tokens[2], lineno))
        male.append(_parse_rate(tokens[3], lineno))
        total.append(_parse_rate(tokens[4], lineno))
    return MortalityTable(
        years=np.array(years, dtype=int),
        ages=np.array(ages, dtype=int),
        rates={
            "female": np.array(female, dtype=float),
            "male": np.array(male, dtype=float),
            "total": np.array(total, dtype=float),
        },
    )


@dataclass(frozen=True)
class Panel:
    """Centered log-mortality panel for one group over a year/age window."""

    group: str
    years: np.ndarray
    ages: np.ndarray
    y: np.ndarray  # (T, N) centered log rates
    intercept: np.ndarray  # (N,)
    scale: np.ndarray | None = None  # (N,) optional per-age standardization

    def __post_init__(self):
        T, N = self.y.shape
        if len(self.years) != T or len(self.ages) != N or len(self.intercept) != N:
            raise DataError(f"panel {self.group!r}: inconsistent shapes")
        if self.scale is not None and len(self.scale) != N:
            raise DataError(f"panel {self.group!r}: scale length mismatch")
        if not np.all(np.isfinite(self.y)):
            raise DataError(f"panel {self.group!r}: non-finite entries")

    @property
    def n_years(self) -> int:
        return self.y.shape[0]

    @property
    def n_ages(self) -> int:
        return self.y.shape[1]

    def log_rates(self) -> np.ndarray:
        """Uncentered log rates ln(m)."""
        y = self.y if self.scale is None else self.y * self.scale
        return y + self.intercept

    def rates(self) -> np.ndarray:
        """Original death rates m, recovered exactly from y and the intercept."""
        return np.exp(self.log_rates())

    def take_rows(self, rows: np.ndarray) -> "Panel":
        """Row subset sharing this panel's intercept (no re-centering)."""
        return Panel(self.group, self.years[rows], self.ages, self.y[rows], self.intercept, self.scale)


@dataclass(frozen=True)
class GroupedPanel:
    """Age-aligned panels for K >= 2 groups."""

    panels: tuple[Panel, ...]

    def __post_init__(self):
        if len(self.panels) < 2:
            raise DataError("a grouped panel needs at least two groups")
        ages = self.panels[0].ages
        for p in self.panels[1:]:
            if p.n_ages != len(ages) or not np.array_equal(p.ages, ages):
                raise DataError(f"group {p.group!r} is not age-aligned with {self.panels[0].group!r}")
        labels = [p.group for p in self.panels]
        if len(set(labels)) != len(labels):
            raise DataError("duplicate group labels")

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(p.group for p in self.panels)

    @property
    def n_ages(self) -> int:
        return self.panels[0].n_ages

    @property
    def total_rows(self) -> int:
        return sum(p.n_years for p in self.panels)

    @property
    def group_rows(self) -> np.ndarray:
        return np.array([p.n_years for p in self.panels], dtype=int)

    def panel(self, group: str) -> Panel:
        for p in self.panels:
            if p.group == group:
                return p
        raise KeyError(group)

    def stacked(self) -> np.ndarray:
        return np.vstack([p.y for p in self.panels])


def build_panel(
    table: MortalityTable,
    group: str,
    ages: tuple[int, int],
    years: tuple[int, int],
    standardize: bool = False,
) -> Panel:
    """Build a centered log-mortality panel over inclusive age/year windows.

    Every cell in the window must be present with a strictly positive rate.
    The intercept is the per-age mean of ln(m) over the window's years; with
    standardize=True the centered values are also divided by the per-age
    standard deviation (stored in the panel for exact inversion).
    """
    if group not in table.rates:
        raise DataError(f"unknown group {group!r}; table has {sorted(table.rates)}")
    a_lo, a_hi = ages
    y_lo, y_hi = years
    age_axis = np.arange(a_lo, a_hi + 1)
    year_axis = np.arange(y_lo, y_hi + 1)
    values = table.rates[group]
    m = np.full((len(year_axis), len(age_axis)), np.nan)
    in_window = (
        (table.years >= y_lo) & (table.years <= y_hi) & (table.ages >= a_lo) & (table.ages <= a_hi)
    )
    rows = table.years[in_window] - y_lo
    cols = table.ages[in_window] - a_lo
    m[rows, cols] = values[in_window]
    missing = ~np.isfinite(m)
    if missing.any():
        t, i = np.argwhere(missing)[0]
        raise DataError(
            f"group {group!r}: missing rate at year {year_axis[t]}, age {age_axis[i]}"
        )
    if (m <= 0.0).any():
        t, i = np.argwhere(m <= 0.0)[0]
        raise DataError(
            f"group {group!r}: rate {m[t, i]!r} at year {year_axis[t]}, age {age_axis[i]}"
            " is not strictly positive"
        )
    log_m = np.log(m)
    intercept = log_m.mean(axis=0)
    y = log_m - intercept
    scale = None
    if standardize:
        scale = log_m.std(axis=0)
        scale = np.where(scale > 0.0, scale, 1.0)  # constant ages stay unscaled
        y = y / scale
    return Panel(group=group, years=year_axis, ages=age_axis, y=y, intercept=intercept, scale=scale)


def split_train_test(panel: Panel, cutoff: int) -> tuple[Panel, Panel]:
    """Split at a year strictly inside the panel's range.

    Train keeps years <= cutoff. Both halves are re-centered so that the
    intercept is the per-age mean of ln(m) over the TRAINING years only; the
    test panel reuses that training intercept.
    """
    years = panel.years
    if not (years[0] <= cutoff < years[-1]):
        raise DataError(
            f"cutoff {cutoff} must lie in [{years[0]}, {years[-1] - 1}] to leave both sides non-empty"
        )
    train_mask = years <= cutoff
    shift = panel.y[train_mask].mean(axis=0)
    # ln(m) = y*scale + a, so the train-mean intercept is a + scale*mean(y_train)
    step = shift if panel.scale is None else shift * panel.scale
    new_intercept = panel.intercept + step
    train = Panel(
        panel.group, years[train_mask], panel.ages, panel.y[train_mask] - shift, new_intercept, panel.scale
    )
    test = Panel(
        panel.group, years[~train_mask], panel.ages, panel.y[~train_mask] - shift, new_intercept, panel.scale
    )
    return train, test


@dataclass(frozen=True)
class SynthTruth:
    """Generating parameters behind a synthetic grouped panel."""

    loading: np.ndarray  # (N, r) with loading.T @ loading / N = I_r
    factors: dict[str, np.ndarray] = field(default_factory=dict)  # group -> (T_k, r)
    drifts: dict[str, np.ndarray] = field(default_factory=dict)


def synthesize(
    N: int,
    r: int,
    group_sizes: Iterable[int],
    noise_scales: Iterable[float],
    seed: int = 0,
) -> tuple[GroupedPanel, SynthTruth]:
    """Random-walk-with-drift factor panels under a shared orthonormal loading.

    Group k's panel is F_k @ loading.T + noise_scales[k] * gaussian noise, with
    zero intercepts. Deterministic for a fixed seed.
    """
    sizes = [int(s) for s in group_sizes]
    scales = [float(s) for s in noise_scales]
    if not 1 <= r <= N:
        raise DataError(f"need N >= r >= 1, got N={N}, r={r}")
    if len(sizes) != len(scales) or len(sizes) < 2:
        raise DataError("group_sizes and noise_scales must match and give K >= 2 groups")
    if any(t < 2 for t in sizes):
        raise DataError("every group needs at least two rows")
    rng = np.random.default_rng(seed)
    loading = np.sqrt(N) * nearest_orthonormal(rng.standard_normal((N, r)))
    panels = []
    factors: dict[str, np.ndarray] = {}
    drifts: dict[str, np.ndarray] = {}
    ages = np.arange(N)
    for k, (T_k, sigma) in enumerate(zip(sizes, scales)):
        group = f"g{k + 1}"
        drift = rng.normal(0.0, 0.2, size=r)
        steps = drift + rng.standard_normal((T_k, r))
        f = rng.standard_normal(r) + np.cumsum(steps, axis=0)
        noise = sigma * rng.standard_normal((T_k, N))
        y = f @ loading.T + noise
        panels.append(
            Panel(group=group, years=np.arange(1900, 1900 + T_k), ages=ages, y=y, intercept=np.zeros(N))
        )
        factors[group] = f
        drifts[group] = drift
    return GroupedPanel(tuple(panels)), SynthTruth(loading=loading, factors=factors, drifts=drifts)


def panels_to_csv(panels: Iterable[Panel], stream: io.TextIOBase) -> None:
    """Write panels in the documented long layout (one row per group/year/age).

    Standardized panels are written in the unscaled convention
    (log_rate_centered = ln(m) - intercept) so the file round-trips exactly.
    """
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(PANEL_CSV_HEADER)
    for p in panels:
        y = p.y if p.scale is None else p.y * p.scale
        for t, year in enumerate(p.years):
            for i, age in enumerate(p.ages):
                writer.writerow([p.group, int(year), int(age), repr(float(y[t, i])), repr(float(p.intercept[i]))])


def panels_from_csv(stream: io.TextIOBase) -> list[Panel]:
    reader = csv.reader(stream)
    header = next(reader, None)
    while header is not None and header and header[0].startswith("#"):
        header = next(reader, None)
    if header != PANEL_CSV_HEADER:
        raise DataError(f"unexpected panel CSV header {header!r}")
    cells: dict[str, dict[tuple[int, int], tuple[float, float]]] = {}
    for row in reader:
        if not row:
            continue
        group, year, age, value, intercept = row
        cells.setdefault(group, {})[(int(year), int(age))] = (float(value), float(intercept))
    panels = []
    for group, data in cells.items():
        years = np.array(sorted({yr for yr, _ in data}), dtype=int)
        ages = np.array(sorted({ag for _, ag in data}), dtype=int)
        y = np.empty((len(years), len(ages)))
        intercept = np.empty(len(ages))
        for t, yr in enumerate(years):
            for i, ag in enumerate(ages):
                try:
                    y[t, i], intercept[i] = data[(int(yr), int(ag))]
                except KeyError:
                    raise DataError(f"group {group!r}: missing cell year {yr}, age {ag}") from None
        panels.append(Panel(group=group, years=years, ages=ages, y=y, intercept=intercept))
    return panels
