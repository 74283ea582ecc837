"""Incomplete longitudinal data: containers, missingness patterns and CSV I/O.

Data are held in long format as flat row arrays sorted by subject (in order
of first appearance) and by occasion within subject.  Missing cells are NaN.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import InfeasibleError, ParseError, ValidationError

logger = logging.getLogger(__name__)

TIME_INVARIANT = "time_invariant"
TIME_VARYING = "time_varying"
INTERCEPT = "(Intercept)"

SUBJECT_COLUMN = "subject"
TIME_COLUMN = "time"


@dataclass(frozen=True)
class CovariateSpec:
    """Names, kinds and missability of the p covariates.

    Time-invariant covariates must come first.  When the model has an
    intercept it is carried as an ordinary time-invariant, non-missable
    covariate named ``(Intercept)`` whose values are synthesized, never read.
    """

    names: tuple
    kinds: tuple
    missable: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "missable", tuple(bool(v) for v in self.missable))
        if not (len(self.names) == len(self.kinds) == len(self.missable)):
            raise ValidationError("names, kinds and missable must have equal length")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("covariate names must be unique")
        if not self.names:
            raise ValidationError("at least one covariate is required")
        for name, kind in zip(self.names, self.kinds):
            if kind not in (TIME_INVARIANT, TIME_VARYING):
                raise ValidationError(f"covariate {name!r}: unknown kind {kind!r}")
        seen_varying = False
        for name, kind in zip(self.names, self.kinds):
            if kind == TIME_VARYING:
                seen_varying = True
            elif seen_varying:
                raise ValidationError(
                    f"time-invariant covariate {name!r} listed after a time-varying one"
                )
        if INTERCEPT in self.names:
            k = self.names.index(INTERCEPT)
            if self.kinds[k] != TIME_INVARIANT or self.missable[k]:
                raise ValidationError("the intercept must be time-invariant and not missable")

    @classmethod
    def build(cls, time_invariant=(), time_varying=(), missable=(), intercept=True):
        """Assemble a spec from name lists; ``missable`` names the covariates that may be NA."""
        ti = list(time_invariant)
        tv = list(time_varying)
        names = ([INTERCEPT] if intercept else []) + ti + tv
        unknown = set(missable) - set(ti) - set(tv)
        if unknown:
            raise ValidationError(f"missable names not among covariates: {sorted(unknown)}")
        kinds = [TIME_INVARIANT] * (len(names) - len(tv)) + [TIME_VARYING] * len(tv)
        return cls(names, kinds, [n in set(missable) for n in names])

    @property
    def p(self) -> int:
        return len(self.names)

    @property
    def p1(self) -> int:
        """Number of time-invariant covariates (they occupy positions 0..p1-1)."""
        return sum(k == TIME_INVARIANT for k in self.kinds)

    @property
    def has_intercept(self) -> bool:
        return INTERCEPT in self.names

    @property
    def data_names(self) -> tuple:
        """Covariates that are read from / written to CSV files."""
        return tuple(n for n in self.names if n != INTERCEPT)

    def to_dict(self) -> dict:
        ti = [n for n, k in zip(self.names, self.kinds) if k == TIME_INVARIANT and n != INTERCEPT]
        tv = [n for n, k in zip(self.names, self.kinds) if k == TIME_VARYING]
        return {
            "intercept": self.has_intercept,
            "time_invariant": ti,
            "time_varying": tv,
            "missable": [n for n, m in zip(self.names, self.missable) if m],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateSpec":
        allowed = {"intercept", "time_invariant", "time_varying", "missable"}
        extra = set(d) - allowed
        if extra:
            raise ValidationError(f"unknown covariate spec keys: {sorted(extra)}")
        return cls.build(
            time_invariant=d.get("time_invariant", ()),
            time_varying=d.get("time_varying", ()),
            missable=d.get("missable", ()),
            intercept=bool(d.get("intercept", True)),
        )


@dataclass(frozen=True)
class SubjectRecord:
    """One subject's occasions; arrays are read-only views into the dataset."""

    subject_id: object
    times: np.ndarray
    response: np.ndarray
    covariates: np.ndarray

    @property
    def n(self) -> int:
        return len(self.times)

    @property
    def occasions(self) -> list:
        """``(t, response or None, [covariate or None, ...])`` per occasion."""
        out = []
        for t, y, x in zip(self.times, self.response, self.covariates):
            out.append((int(t), None if math.isnan(y) else float(y),
                        [None if math.isnan(v) else float(v) for v in x]))
        return out


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Incomplete long-format panel.

    Parameters
    ----------
    subject, time : (N,) arrays
        Subject identifier and integer occasion index per row.
    response : (N,) float array, NaN where missing
    covariates : (N, p) float array, NaN where missing
    covariate_spec : CovariateSpec
    response_name : str

    Rows are re-sorted on construction; use :meth:`from_rows` or
    :func:`load_csv` rather than building arrays by hand when possible.
    """

    subject: np.ndarray
    time: np.ndarray
    response: np.ndarray
    covariates: np.ndarray
    covariate_spec: CovariateSpec
    response_name: str = "y"
    dropped_rows: int = 0
    offsets: np.ndarray = field(init=False, repr=False)
    subject_ids: tuple = field(init=False)

    def __post_init__(self):
        spec = self.covariate_spec
        subject = np.asarray(self.subject)
        time = np.asarray(self.time)
        y = np.asarray(self.response, dtype=float).reshape(-1)
        X = np.asarray(self.covariates, dtype=float)
        n = len(subject)
        if X.ndim != 2 or X.shape != (n, spec.p) or time.shape != (n,) or y.shape != (n,):
            raise ValidationError(
                f"array shapes disagree: subject {subject.shape}, time {time.shape}, "
                f"response {y.shape}, covariates {X.shape} for p={spec.p}"
            )
        if n and not np.all(np.isfinite(time)):
            raise ValidationError("occasion indices must be finite integers")
        if n and np.any(time != np.round(time)):
            raise ValidationError("occasion indices must be integers")
        time = time.astype(np.int64)
        if np.any(np.isinf(y)) or np.any(np.isinf(X)):
            raise ValidationError("infinite values are not allowed")

        if n:
            _, first_idx, inverse = np.unique(subject, return_index=True, return_inverse=True)
            appearance = np.empty(len(first_idx), dtype=np.int64)
            appearance[np.argsort(first_idx, kind="stable")] = np.arange(len(first_idx))
            key = appearance[inverse.reshape(-1)]
            order = np.lexsort((time, key))
            subject, time, y, X, key = subject[order], time[order], y[order], X[order], key[order]
            dup = (key[1:] == key[:-1]) & (time[1:] == time[:-1])
            if np.any(dup):
                j = int(np.flatnonzero(dup)[0]) + 1
                raise ValidationError(
                    f"duplicate occasion (subject={subject[j]}, time={time[j]})"
                )
            starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
        else:
            key = np.zeros(0, dtype=np.int64)
            starts = np.zeros(0, dtype=np.int64)
        offsets = np.r_[starts, n].astype(np.int64)

        observed_any = ~np.isnan(y) | np.any(~np.isnan(X), axis=1)
        if not np.all(observed_any):
            raise ValidationError("every row needs at least one observed value")

        for k in range(spec.p1):
            v = X[:, k]
            first = v[starts[key]] if n else v
            ok = (v == first) | (np.isnan(v) & np.isnan(first))
            if not np.all(ok):
                j = int(np.flatnonzero(~ok)[0])
                raise ValidationError(
                    f"time-invariant covariate {spec.names[k]!r} varies within subject "
                    f"{subject[j]}"
                )
        fixed = [k for k in range(spec.p) if not spec.missable[k]]
        if fixed and np.any(np.isnan(X[:, fixed])):
            bad = [spec.names[k] for k in fixed if np.any(np.isnan(X[:, k]))]
            raise ValidationError(f"covariates known by design cannot be missing: {bad}")

        object.__setattr__(self, "subject", _readonly(subject))
        object.__setattr__(self, "time", _readonly(time))
        object.__setattr__(self, "response", _readonly(y))
        object.__setattr__(self, "covariates", _readonly(X))
        object.__setattr__(self, "offsets", _readonly(offsets))
        object.__setattr__(self, "subject_ids", tuple(subject[starts].tolist()))

    @classmethod
    def from_rows(cls, rows: Iterable[tuple], spec: CovariateSpec, response_name="y"):
        """Build from ``(subject, time, response, covariates)`` tuples.

        ``covariates`` is a ``{name: value}`` mapping or a sequence in the
        order of ``spec.names`` without the intercept, which is synthesized.
        ``None`` and NaN are missing.
        """
        named = [n for n in spec.names if n != INTERCEPT]
        subj, times, ys, xs = [], [], [], []
        for s, t, y, cov in rows:
            if not isinstance(cov, Mapping):
                cov = list(cov)
                if len(cov) != len(named):
                    raise ValidationError(f"expected {len(named)} covariate values, got {len(cov)}")
                cov = dict(zip(named, cov))
            subj.append(s)
            times.append(t)
            ys.append(np.nan if y is None else float(y))
            xs.append([1.0 if name == INTERCEPT else
                       (np.nan if cov.get(name) is None else float(cov[name]))
                       for name in spec.names])
        X = np.array(xs, dtype=float).reshape(len(xs), spec.p)
        return cls(np.array(subj), np.array(times), np.array(ys), X, spec, response_name)

    def replace(self, **changes) -> "LongitudinalDataset":
        kw = dict(subject=self.subject, time=self.time, response=self.response,
                  covariates=self.covariates, covariate_spec=self.covariate_spec,
                  response_name=self.response_name, dropped_rows=self.dropped_rows)
        kw.update(changes)
        return LongitudinalDataset(**kw)

    @property
    def n_rows(self) -> int:
        return len(self.time)

    @property
    def m(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_per_subject(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def subject_index(self) -> np.ndarray:
        """Row -> 0-based subject position."""
        return np.repeat(np.arange(self.m), self.n_per_subject)

    @property
    def subjects(self) -> list:
        out = []
        for i in range(self.m):
            a, b = self.offsets[i], self.offsets[i + 1]
            out.append(SubjectRecord(self.subject_ids[i], self.time[a:b],
                                     self.response[a:b], self.covariates[a:b]))
        return out

    def take_rows(self, mask: np.ndarray) -> "LongitudinalDataset":
        mask = np.asarray(mask, dtype=bool)
        return self.replace(subject=self.subject[mask], time=self.time[mask],
                            response=self.response[mask], covariates=self.covariates[mask])

    def equals(self, other: "LongitudinalDataset") -> bool:
        """Field-by-field equality with NaN treated as equal to NaN."""
        return (
            self.covariate_spec == other.covariate_spec
            and self.response_name == other.response_name
            and self.n_rows == other.n_rows
            and [str(s) for s in self.subject] == [str(s) for s in other.subject]
            and np.array_equal(self.time, other.time)
            and np.array_equal(self.response, other.response, equal_nan=True)
            and np.array_equal(self.covariates, other.covariates, equal_nan=True)
        )


@dataclass(frozen=True, eq=False)
class MissingPattern:
    """Which cells are absent.

    ``cov_missing[r, k]`` is k in M_it for row r; ``subject_missing[i, k]`` is
    k in M_i (time-invariant block only); ``varying_missing`` is M_it,2 with
    columns indexed from p1.
    """

    cov_missing: np.ndarray
    subject_missing: np.ndarray
    varying_missing: np.ndarray
    response_missing: np.ndarray
    p1: int
    names: tuple

    def row_set(self, row: int) -> frozenset:
        """M_it for one row, as covariate names."""
        return frozenset(n for n, miss in zip(self.names, self.cov_missing[row]) if miss)

    def subject_set(self, i: int) -> frozenset:
        return frozenset(n for n, miss in zip(self.names, self.subject_missing[i]) if miss)

    def varying_set(self, row: int) -> frozenset:
        return frozenset(self.names[self.p1 + k]
                         for k, miss in enumerate(self.varying_missing[row]) if miss)

    @property
    def any_subject(self) -> np.ndarray:
        """(m,) M_i != empty."""
        return self.subject_missing.any(axis=1)

    @property
    def any_varying(self) -> np.ndarray:
        """(N,) M_it,2 != empty."""
        return self.varying_missing.any(axis=1)

    @property
    def any_row(self) -> np.ndarray:
        """(N,) M_it != empty."""
        return self.cov_missing.any(axis=1)


def missing_pattern(data: LongitudinalDataset) -> MissingPattern:
    spec = data.covariate_spec
    miss = np.isnan(data.covariates)
    p1 = spec.p1
    if data.m:
        subject_missing = miss[data.offsets[:-1], :p1]
    else:
        subject_missing = np.zeros((0, p1), dtype=bool)
    return MissingPattern(
        cov_missing=_readonly(miss),
        subject_missing=_readonly(subject_missing),
        varying_missing=_readonly(miss[:, p1:]),
        response_missing=_readonly(np.isnan(data.response)),
        p1=p1,
        names=spec.names,
    )


def complete_records(data: LongitudinalDataset) -> LongitudinalDataset:
    """Keep only rows with every covariate and the response observed."""
    keep = ~np.isnan(data.response) & ~np.any(np.isnan(data.covariates), axis=1)
    if not np.any(keep):
        raise InfeasibleError("no complete records")
    if np.all(keep):
        return data
    return data.take_rows(keep)


def _parse_float(text: str, na_token: str, line: int, column: str) -> float:
    if text == na_token:
        return np.nan
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"column {column!r}: cannot parse {text!r} as a number", line) from None
    if math.isnan(value):
        raise ParseError(f"column {column!r}: NaN literal; use the NA token {na_token!r}", line)
    return value


def load_csv(path, spec: CovariateSpec, na_token: str = "NA",
             response_name: Optional[str] = None) -> LongitudinalDataset:
    """Read a long-format CSV (``subject,time,<response>,<covariates...>``).

    The response column is the third header field unless ``response_name``
    is given.  Extra columns are ignored.  Rows with every value missing are
    dropped and counted in ``dropped_rows``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", 1) from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != SUBJECT_COLUMN or header[1] != TIME_COLUMN:
            raise ParseError(f"header must start with '{SUBJECT_COLUMN},{TIME_COLUMN},<response>'", 1)
        if response_name is None:
            response_name = header[2]
        needed = [response_name, *spec.data_names]
        missing_cols = [c for c in needed if c not in header]
        if missing_cols:
            raise ParseError(f"header lacks columns {missing_cols}", 1)
        if len(set(header)) != len(header):
            raise ParseError("duplicate header names", 1)
        col = {name: header.index(name) for name in header}

        subj, times, ys, xs = [], [], [], []
        dropped = 0
        for raw in reader:
            line = reader.line_num
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(raw)}", line)
            raw = [c.strip() for c in raw]
            if raw[0] == "" or raw[0] == na_token:
                raise ParseError("missing subject identifier", line)
            try:
                t = int(raw[1])
            except ValueError:
                raise ParseError(f"time {raw[1]!r} is not an integer", line) from None
            y = _parse_float(raw[col[response_name]], na_token, line, response_name)
            x = [1.0 if name == INTERCEPT else
                 _parse_float(raw[col[name]], na_token, line, name) for name in spec.names]
            data_vals = [v for name, v in zip(spec.names, x) if name != INTERCEPT]
            if math.isnan(y) and all(math.isnan(v) for v in data_vals):
                dropped += 1
                continue
            subj.append(raw[0])
            times.append(t)
            ys.append(y)
            xs.append(x)
    if dropped:
        logger.warning("%s: dropped %d rows with no observed values", path, dropped)
    X = np.array(xs, dtype=float).reshape(len(xs), spec.p)
    return LongitudinalDataset(np.array(subj, dtype=object), np.array(times, dtype=np.int64),
                               np.array(ys, dtype=float), X, spec, response_name, dropped)


def _format_value(v: float, na_token: str) -> str:
    return na_token if math.isnan(v) else repr(float(v))


def write_csv(data: LongitudinalDataset, path, na_token: str = "NA") -> None:
    """Write the dataset in the layout :func:`load_csv` reads (lossless floats)."""
    spec = data.covariate_spec
    idx = [k for k, n in enumerate(spec.names) if n != INTERCEPT]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([SUBJECT_COLUMN, TIME_COLUMN, data.response_name, *spec.data_names])
        for r in range(data.n_rows):
            w.writerow([data.subject[r], int(data.time[r]),
                        _format_value(data.response[r], na_token),
                        *(_format_value(data.covariates[r, k], na_token) for k in idx)])
