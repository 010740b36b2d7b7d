"""Paired long-format longitudinal data: containers, CSV I/O, scaling and
event realignment.

A view stores one row per measurement. Rows are grouped contiguously by
subject and sorted by time within a subject, so per-subject blocks can be
recovered with :meth:`LongView.blocks`.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class IngestError(ValueError):
    """Raised when a long-format file cannot be turned into a view."""


def _subject_key(ids: Sequence[str]):
    """Sort key putting numeric ids in numeric order, others lexically."""
    try:
        [float(s) for s in ids]
    except ValueError:
        return lambda s: (0, s)
    return lambda s: (float(s), s)


@dataclass(frozen=True, eq=False)
class LongView:
    """Stacked measurements of one data view.

    Attributes
    ----------
    values : (N, p) float array
    subject_ids : (N,) array of str
    times : (N,) float array
    feature_names : tuple of str, length p
    """

    values: np.ndarray
    subject_ids: np.ndarray
    times: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim == 1:
            values = values[:, None]
        sids = np.asarray([str(s) for s in np.asarray(self.subject_ids).ravel()], dtype=object)
        times = np.array(self.times, dtype=float, copy=True).ravel()
        names = tuple(str(f) for f in self.feature_names)
        n = values.shape[0]
        if sids.shape[0] != n or times.shape[0] != n:
            raise ValueError("values, subject_ids and times must have the same number of rows")
        if values.shape[1] != len(names):
            raise ValueError(f"{values.shape[1]} columns but {len(names)} feature names")
        if not np.all(np.isfinite(values)):
            raise ValueError("view contains non-finite values")
        if not np.all(np.isfinite(times)):
            raise ValueError("view contains non-finite times")
        seen = set()
        for k in range(n):
            if k == 0 or sids[k] != sids[k - 1]:
                if sids[k] in seen:
                    raise ValueError(f"rows of subject {sids[k]!r} are not contiguous")
                seen.add(sids[k])
            elif times[k] <= times[k - 1]:
                raise ValueError(
                    f"times of subject {sids[k]!r} are not strictly increasing at row {k}"
                )
        for arr in (values, times):
            arr.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "subject_ids", sids)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "feature_names", names)

    @classmethod
    def from_unsorted(cls, values, subject_ids, times, feature_names) -> "LongView":
        """Build a view from rows in arbitrary order (sorted by subject, time)."""
        sids = [str(s) for s in subject_ids]
        times = np.asarray(times, dtype=float)
        key = _subject_key(sids)
        order = sorted(range(len(sids)), key=lambda k: (key(sids[k]), times[k]))
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        return cls(values[order], np.asarray(sids, dtype=object)[order], times[order], feature_names)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def subjects(self) -> list[str]:
        """Subject labels in row order, each listed once."""
        if self.n_rows == 0:
            return []
        first = np.r_[True, self.subject_ids[1:] != self.subject_ids[:-1]]
        return list(self.subject_ids[first])

    def counts(self) -> dict[str, int]:
        """Measurements per subject (m_i)."""
        out: dict[str, int] = {}
        for s in self.subject_ids:
            out[s] = out.get(s, 0) + 1
        return out

    def blocks(self) -> dict[str, slice]:
        """Row slice of every subject."""
        out = {}
        start = 0
        for k in range(1, self.n_rows + 1):
            if k == self.n_rows or self.subject_ids[k] != self.subject_ids[start]:
                out[self.subject_ids[start]] = slice(start, k)
                start = k
        return out

    def with_values(self, values, feature_names=None) -> "LongView":
        return LongView(
            values,
            self.subject_ids,
            self.times,
            self.feature_names if feature_names is None else feature_names,
        )

    def select_subjects(self, subjects) -> "LongView":
        keep = set(str(s) for s in subjects)
        mask = np.array([s in keep for s in self.subject_ids], dtype=bool)
        return LongView(
            self.values[mask], self.subject_ids[mask], self.times[mask], self.feature_names
        )


@dataclass(frozen=True, eq=False)
class PairedStudy:
    """Two views measured on (partly) the same subjects on their own time grids."""

    x: LongView
    y: LongView
    shared_subjects: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        subs = list(self.x.subjects)
        seen = set(subs)
        subs += [s for s in self.y.subjects if s not in seen]
        key = _subject_key(subs)
        object.__setattr__(self, "shared_subjects", tuple(sorted(subs, key=key)))

    def union_times(self) -> dict[str, np.ndarray]:
        """Per-subject union of the two time grids."""
        out = {}
        bx, by = self.x.blocks(), self.y.blocks()
        for s in self.shared_subjects:
            parts = []
            if s in bx:
                parts.append(self.x.times[bx[s]])
            if s in by:
                parts.append(self.y.times[by[s]])
            out[s] = np.unique(np.concatenate(parts))
        return out

    def time_grid(self) -> np.ndarray:
        """All distinct measurement times over both views."""
        return np.unique(np.concatenate([self.x.times, self.y.times]))

    def select_subjects(self, subjects) -> "PairedStudy":
        return PairedStudy(self.x.select_subjects(subjects), self.y.select_subjects(subjects))


@dataclass(frozen=True)
class Schema:
    """Column mapping for a long-format CSV; ``features=None`` means all other columns."""

    id: str = "id"
    time: str = "time"
    features: tuple[str, ...] | None = None
    missing: str = "reject"  # or "drop"


def _parse_float(cell: str) -> float:
    return float(cell.strip())


def ingest_long_csv(path, schema: Schema | None = None) -> LongView:
    """Read a long-format CSV into a :class:`LongView`.

    Missing feature cells are rejected unless ``schema.missing == "drop"``,
    in which case the whole row is dropped.
    """
    schema = schema or Schema()
    if schema.missing not in ("reject", "drop"):
        raise ValueError(f"unknown missing-cell policy {schema.missing!r}")
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        rows = list(reader)

    for col in (schema.id, schema.time):
        if col not in header:
            raise IngestError(f"{path}: missing column {col!r}")
    if schema.features is None:
        features = [h for h in header if h not in (schema.id, schema.time)]
    else:
        features = list(schema.features)
        absent = [f for f in features if f not in header]
        if absent:
            raise IngestError(f"{path}: missing column(s) {absent}")
    if not features:
        raise IngestError(f"{path}: no feature columns")
    i_id, i_t = header.index(schema.id), header.index(schema.time)
    i_f = [header.index(f) for f in features]

    sids, times, values = [], [], []
    for r, row in enumerate(rows, start=2):  # line number in the file
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise IngestError(f"{path}: line {r} has {len(row)} cells, expected {len(header)}")
        try:
            t = _parse_float(row[i_t])
        except ValueError:
            raise IngestError(f"{path}: line {r}: non-numeric time {row[i_t]!r}") from None
        vals = []
        drop = False
        for j, name in zip(i_f, features):
            cell = row[j]
            if not cell.strip():
                if schema.missing == "drop":
                    drop = True
                    break
                raise IngestError(f"{path}: line {r}, column {name!r}: empty cell")
            try:
                v = _parse_float(cell)
            except ValueError:
                raise IngestError(
                    f"{path}: line {r}, column {name!r}: non-numeric value {cell!r}"
                ) from None
            if not math.isfinite(v):
                raise IngestError(f"{path}: line {r}, column {name!r}: non-finite value {cell!r}")
            vals.append(v)
        if drop:
            continue
        sids.append(row[i_id].strip())
        times.append(t)
        values.append(vals)

    seen = set()
    for s, t in zip(sids, times):
        if (s, t) in seen:
            raise IngestError(f"{path}: duplicate timestamp t={t!r} for id={s!r}")
        seen.add((s, t))
    values = np.asarray(values, dtype=float).reshape(len(sids), len(features))
    return LongView.from_unsorted(values, sids, times, features)


def export_long_csv(view: LongView, path, schema: Schema | None = None) -> None:
    """Write a view in the same layout :func:`ingest_long_csv` reads."""
    schema = schema or Schema()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema.id, schema.time, *view.feature_names])
        for s, t, row in zip(view.subject_ids, view.times, view.values):
            w.writerow([s, repr(float(t)), *(repr(float(v)) for v in row)])


@dataclass(frozen=True)
class Standardization:
    """Column means/sds of the retained features."""

    feature_names: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray

    def apply(self, view: LongView) -> LongView:
        """Scale ``view`` with these statistics (features matched by name)."""
        idx = [view.feature_names.index(f) for f in self.feature_names]
        vals = (view.values[:, idx] - self.mean) / self.sd
        return view.with_values(vals, self.feature_names)


def standardize(view: LongView) -> tuple[LongView, Standardization]:
    """Center and scale every column over all stacked rows (sd with ddof=1).

    Constant columns are dropped with a warning.
    """
    if view.n_rows < 2:
        raise ValueError("standardize needs at least two rows")
    mean = view.values.mean(axis=0)
    sd = view.values.std(axis=0, ddof=1)
    scale = np.maximum(np.abs(mean), 1.0)
    keep = sd > 1e-12 * scale
    if not keep.any():
        raise ValueError("all features are constant")
    if not keep.all():
        dropped = [f for f, k in zip(view.feature_names, keep) if not k]
        warnings.warn(f"dropping constant feature(s): {dropped}", stacklevel=2)
    names = tuple(f for f, k in zip(view.feature_names, keep) if k)
    stats = Standardization(names, mean[keep], sd[keep])
    return stats.apply(view), stats


# --------------------------------------------------------------------------
# event realignment


class EventTable(dict):
    """Mapping subject id -> time of the first event (or None)."""

    @classmethod
    def from_csv(cls, path) -> "EventTable":
        out = cls()
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"id", "event_time"} <= set(reader.fieldnames):
                raise IngestError(f"{path}: event table needs columns 'id' and 'event_time'")
            for row in reader:
                sid = row["id"].strip()
                if sid in out:
                    raise IngestError(f"{path}: more than one event for id={sid!r}")
                cell = (row["event_time"] or "").strip()
                out[sid] = float(cell) if cell and cell.lower() not in ("na", "nan") else None
        return out


def _bin(t: np.ndarray, width: float) -> np.ndarray:
    return np.floor(t / width + 0.5) * width


def align_to_event(
    view: LongView, events: Mapping[str, float | None], bin_width: float = 1.0,
    eventless_offset: int = 0,
) -> LongView:
    """Center each subject's times on its event and bin them.

    Subjects with an event get ``t - event`` rounded to the nearest multiple
    of ``bin_width``; rows sharing a bin are averaged. Subjects without an
    event are shifted so their last visit lands on bin ``eventless_offset``
    (0 by default, -1 puts it one bin before the event origin).
    """
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    if eventless_offset > 0:
        raise ValueError("eventless_offset must be <= 0")
    values, sids, times = [], [], []
    for s, sl in view.blocks().items():
        t = view.times[sl]
        ev = events.get(s)
        if ev is not None and not (t[0] <= ev <= t[-1]):
            warnings.warn(f"event of subject {s!r} at {ev} outside its span [{t[0]}, {t[-1]}]",
                          stacklevel=2)
        shifted = t - ev if ev is not None else t - t[-1] + eventless_offset * bin_width
        binned = _bin(shifted, bin_width)
        block = view.values[sl]
        for b in np.unique(binned):
            rows = binned == b
            values.append(block[rows].mean(axis=0))
            sids.append(s)
            times.append(float(b) + 0.0)
    values = np.asarray(values, dtype=float).reshape(len(sids), view.n_features)
    return LongView(values, sids, times, view.feature_names)


def subject_folds(study: PairedStudy, k_folds: int, seed: int) -> dict[str, int]:
    """Assign every subject to one of ``k_folds`` balanced folds."""
    subjects = list(study.shared_subjects)
    if k_folds < 2:
        raise ValueError("k_folds must be at least 2")
    if k_folds > len(subjects):
        raise ValueError(f"{len(subjects)} subjects cannot fill {k_folds} folds")
    perm = np.random.default_rng(seed).permutation(len(subjects))
    return {subjects[i]: int(rank % k_folds) for rank, i in enumerate(perm)}
