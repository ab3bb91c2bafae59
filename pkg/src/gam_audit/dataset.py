"""Tabular datasets: CSV I/O, standardization, group splits, correlation ranking."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, DegenerateColumnError, ParseError, SplitError

log = logging.getLogger(__name__)

CONTINUOUS = "continuous"
BINARY = "binary"

# Upper bound on candidate features; 2^8 - 1 = 255 subset fits.
MAX_CANDIDATES = 8


@dataclass(frozen=True)
class ScalingParams:
    """Per-column (mean, sd) used to standardize continuous features."""

    params: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __contains__(self, name):
        return name in self.params

    def mean(self, name):
        return self.params[name][0]

    def sd(self, name):
        return self.params[name][1]

    def forward(self, name, values):
        values = np.asarray(values, dtype=float)
        if name not in self.params:
            return values
        mu, sd = self.params[name]
        return (values - mu) / sd

    def inverse(self, name, values):
        values = np.asarray(values, dtype=float)
        if name not in self.params:
            return values
        mu, sd = self.params[name]
        return values * sd + mu

    def to_dict(self):
        return {name: {"mean": mu, "sd": sd} for name, (mu, sd) in self.params.items()}

    @classmethod
    def from_dict(cls, payload):
        return cls({name: (float(v["mean"]), float(v["sd"])) for name, v in payload.items()})

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Dataset:
    """Named feature columns with a label vector and per-row group (patient) ids."""

    columns: dict[str, np.ndarray]
    kinds: dict[str, str]
    label: np.ndarray
    group_id: np.ndarray
    label_name: str = "label"
    group_name: str = "group"
    scaling: ScalingParams | None = None

    def __post_init__(self):
        n = len(self.label)
        if n < 1:
            raise DataError("dataset has no rows")
        if len(self.group_id) != n:
            raise DataError("group_id length does not match label length")
        for name, values in self.columns.items():
            if len(values) != n:
                raise DataError(f"column {name!r} has {len(values)} rows, expected {n}")
            if self.kinds.get(name) not in (CONTINUOUS, BINARY):
                raise DataError(f"column {name!r} has no valid kind")
            if self.kinds[name] == BINARY and not np.isin(values, (0.0, 1.0)).all():
                raise DataError(f"binary column {name!r} contains values outside {{0, 1}}")

    @property
    def n_rows(self) -> int:
        return len(self.label)

    @property
    def feature_names(self) -> list[str]:
        return list(self.columns)

    def column(self, name) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise ConfigError(f"unknown feature {name!r}") from None

    def select(self, names: Iterable[str]) -> "Dataset":
        names = list(names)
        for name in names:
            self.column(name)
        return replace(
            self,
            columns={n: self.columns[n] for n in names},
            kinds={n: self.kinds[n] for n in names},
        )

    def drop(self, names: Iterable[str]) -> "Dataset":
        names = set(names)
        return self.select([n for n in self.columns if n not in names])

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return replace(
            self,
            columns={n: v[rows] for n, v in self.columns.items()},
            label=self.label[rows],
            group_id=self.group_id[rows],
        )

    def with_label(self, values, name=None) -> "Dataset":
        values = np.asarray(values, dtype=float)
        if len(values) != self.n_rows:
            raise DataError("target length does not match number of rows")
        return replace(self, label=values, label_name=name or self.label_name)

    def with_column(self, name, values, kind=CONTINUOUS) -> "Dataset":
        columns = dict(self.columns)
        kinds = dict(self.kinds)
        columns[name] = np.asarray(values, dtype=float)
        kinds[name] = kind
        return replace(self, columns=columns, kinds=kinds)


def _parse_cell(text, row, column):
    text = text.strip()
    if text == "" or text.lower() in ("na", "nan"):
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ParseError(
            f"non-numeric value {text!r} at row {row}, column {column!r}", row=row, column=column
        ) from None


def load_csv(
    path,
    label_name: str | None,
    group_name: str | None = None,
    binary: Iterable[str] | None = None,
    continuous: Iterable[str] | None = None,
    ignore: Iterable[str] = (),
) -> Dataset:
    """Read a header-first CSV into a :class:`Dataset`.

    Column kind is inferred (binary iff every value is 0 or 1) unless forced
    through ``binary`` / ``continuous``. Rows with missing or non-finite values
    are dropped and counted in a warning. Columns named in ``ignore`` are not
    read at all. Without ``group_name`` every row is its own group; without
    ``label_name`` the label is all zeros (an inputs-only file).
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path} has a header but no data rows")
    if len(set(header)) != len(header):
        raise DataError(f"{path} has duplicate column names")
    ignore = list(ignore)
    for required in (label_name, group_name, *ignore):
        if required is not None and required not in header:
            raise ConfigError(f"column {required!r} not found in {path}")

    keep = [j for j, name in enumerate(header) if name not in ignore]
    table = np.empty((len(rows), len(keep)))
    for i, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(f"row {i} has {len(row)} cells, expected {len(header)}", row=i)
        for col, j in enumerate(keep):
            table[i - 1, col] = _parse_cell(row[j], i, header[j])

    finite = np.isfinite(table).all(axis=1)
    dropped = int((~finite).sum())
    if dropped:
        log.warning("dropped %d of %d rows with missing or non-finite values", dropped, len(rows))
    table = table[finite]
    if len(table) == 0:
        raise DataError(f"{path}: no complete rows")

    data = {header[j]: table[:, col] for col, j in enumerate(keep)}
    label = data.pop(label_name) if label_name is not None else np.zeros(len(table))
    if group_name is not None:
        groups = data.pop(group_name)
        if not np.all(groups == np.round(groups)):
            raise DataError(f"group column {group_name!r} must hold integers")
        group_id = groups.astype(np.int64)
    else:
        group_id = np.arange(len(label), dtype=np.int64)

    forced_binary = set(binary or ())
    forced_cont = set(continuous or ())
    kinds = {}
    for name, values in data.items():
        if name in forced_binary:
            kinds[name] = BINARY
        elif name in forced_cont:
            kinds[name] = CONTINUOUS
        else:
            kinds[name] = BINARY if np.isin(values, (0.0, 1.0)).all() else CONTINUOUS
    return Dataset(
        columns=data,
        kinds=kinds,
        label=label,
        group_id=group_id,
        label_name=label_name or "label",
        group_name=group_name or "group",
    )


def format_number(value) -> str:
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def write_csv(d: Dataset, path, extra: Mapping[str, np.ndarray] | None = None) -> None:
    """Write features, then label, then group id. Floats use shortest round-trip form."""
    extra = dict(extra or {})
    header = [*d.columns, d.label_name, d.group_name, *extra]
    cols = [*d.columns.values(), d.label, d.group_id, *extra.values()]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(d.n_rows):
            writer.writerow([format_number(c[i]) for c in cols])


def standardize(d: Dataset) -> tuple[Dataset, ScalingParams]:
    """Z-score every continuous column (sample sd, n - 1); binary columns pass through."""
    params = {}
    columns = {}
    for name, values in d.columns.items():
        if d.kinds[name] == BINARY:
            columns[name] = values
            continue
        mu = float(np.mean(values))
        sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        if not sd > 0:
            raise DegenerateColumnError(name)
        params[name] = (mu, sd)
        columns[name] = (values - mu) / sd
    scaling = ScalingParams(params)
    return replace(d, columns=columns, scaling=scaling), scaling


def apply_scaling(d: Dataset, scaling: ScalingParams) -> Dataset:
    """Standardize ``d`` with parameters estimated elsewhere (e.g. on a training split)."""
    columns = {name: scaling.forward(name, values) for name, values in d.columns.items()}
    return replace(d, columns=columns, scaling=scaling)


def split_by_group(d: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Partition rows so no group id appears on both sides.

    Groups are shuffled with ``seed`` and moved to the test side until the test
    row count is as close as possible to ``test_fraction * n_rows``.
    """
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must lie strictly between 0 and 1")
    groups, counts = np.unique(d.group_id, return_counts=True)
    if len(groups) < 2:
        raise SplitError("need at least two distinct groups to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(groups))
    target = test_fraction * d.n_rows
    test_groups = []
    taken = 0
    for idx in order:
        if taken >= target:
            break
        size = counts[idx]
        if taken > 0 and abs(taken + size - target) > abs(taken - target):
            continue
        test_groups.append(groups[idx])
        taken += size
    if len(test_groups) == len(groups):
        test_groups.pop()
    in_test = np.isin(d.group_id, test_groups)
    return d.take(np.flatnonzero(~in_test)), d.take(np.flatnonzero(in_test))


@dataclass(frozen=True)
class CandidateSet:
    names: tuple[str, ...]
    correlations: tuple[float, ...]

    def __post_init__(self):
        if len(self.names) > MAX_CANDIDATES:
            raise ConfigError(f"at most {MAX_CANDIDATES} candidate features are supported")
        if len(self.names) != len(self.correlations):
            raise ConfigError("one correlation per candidate is required")

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def to_dict(self):
        return {"features": list(self.names), "correlations": list(self.correlations)}


def pearson(x, y) -> float:
    """Product-moment correlation; 0.0 when either side has zero variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        return 0.0
    return float(np.clip((xc @ yc) / denom, -1.0, 1.0))


def pearson_rank(d: Dataset, target, m: int, exclude: Sequence[str] = ()) -> CandidateSet:
    """Top-``m`` features by absolute Pearson correlation with ``target``."""
    target = np.asarray(target, dtype=float)
    if len(target) != d.n_rows:
        raise DataError("target length does not match number of rows")
    if m < 1:
        raise ConfigError("m must be at least 1")
    if m > MAX_CANDIDATES:
        raise ConfigError(f"m={m} exceeds the limit of {MAX_CANDIDATES} candidates")
    if np.ptp(target) == 0:
        log.warning("target has zero variance; all correlations are 0")
    scored = []
    for name, values in d.columns.items():
        if name in exclude:
            continue
        if np.ptp(values) == 0:
            log.warning("feature %r has zero variance; correlation set to 0 and not ranked", name)
            continue
        scored.append((name, pearson(values, target)))
    scored.sort(key=lambda item: (-abs(item[1]), item[0]))
    top = scored[:m]
    return CandidateSet(tuple(n for n, _ in top), tuple(r for _, r in top))
