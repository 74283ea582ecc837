"""Turn an LMM with missing covariates into an LMM without missing covariates.

Missing covariate cells are zero-filled in X1.  Their contribution to the
mean is absorbed by indicator fixed effects (one for "some time-invariant
covariate missing", one per occasion for "some time-varying covariate
missing"), an extra subject-level random effect gamma_i on rows with any
missing covariate, and an extra error delta_it on rows with a missing
time-varying covariate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .data import LongitudinalDataset, MissingPattern, missing_pattern
from .errors import RankDeficiencyError, ValidationError

MU_SUBJECT = "mu1"
MU_OCCASION = "mu2"


@dataclass(frozen=True)
class RandomEffectsSpec:
    """Rule producing z_it: an optional intercept plus named covariates.

    Slope covariates must be known by design (not missable), otherwise z_it
    would itself be incomplete.
    """

    intercept: bool = True
    slopes: tuple = ()

    @property
    def q(self) -> int:
        return int(self.intercept) + len(self.slopes)

    def names(self) -> list:
        return (["(Intercept)"] if self.intercept else []) + list(self.slopes)

    def build(self, data: LongitudinalDataset) -> np.ndarray:
        spec = data.covariate_spec
        cols = []
        if self.intercept:
            cols.append(np.ones(data.n_rows))
        for name in self.slopes:
            if name not in spec.names:
                raise ValidationError(f"random slope {name!r} is not a covariate")
            k = spec.names.index(name)
            if spec.missable[k]:
                raise ValidationError(f"random slope {name!r} must not be missable")
            cols.append(data.covariates[:, k])
        if not cols:
            return np.zeros((data.n_rows, 0))
        return np.column_stack(cols)


@dataclass(frozen=True, eq=False)
class CompletedDesign:
    """Completed model y = X1 beta + X2 mu + Z v + e, stacked over subjects.

    ``Z`` has q columns from the random-effects rule followed by the gamma
    indicator column.  ``D`` is the diagonal of the 0/1 matrix carrying the
    extra error variance.  ``column_map[j]`` names the source of the j-th
    retained indicator column: ``("mu1",)`` or ``("mu2", t)``.
    """

    X1: np.ndarray
    X2: np.ndarray
    Z: np.ndarray
    D: np.ndarray
    y: np.ndarray
    response_observed: np.ndarray
    offsets: np.ndarray
    time: np.ndarray
    subject_ids: tuple
    beta_names: tuple
    column_map: tuple
    q: int

    @property
    def p(self) -> int:
        return self.X1.shape[1]

    @property
    def d(self) -> int:
        return self.X2.shape[1]

    @property
    def m(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_rows(self) -> int:
        return self.X1.shape[0]

    @property
    def X(self) -> np.ndarray:
        return np.hstack([self.X1, self.X2])

    @property
    def term_names(self) -> tuple:
        mu = tuple(MU_SUBJECT if c[0] == MU_SUBJECT else f"{MU_OCCASION}[t={c[1]}]"
                   for c in self.column_map)
        return self.beta_names + mu

    @property
    def gamma_column(self) -> np.ndarray:
        return self.Z[:, self.q]

    def subject_block(self, i: int) -> dict:
        a, b = self.offsets[i], self.offsets[i + 1]
        return {"X1": self.X1[a:b], "X2": self.X2[a:b], "Z": self.Z[a:b],
                "D": np.diag(self.D[a:b]), "y": self.y[a:b],
                "response_observed": self.response_observed[a:b]}

    def with_response(self, y: np.ndarray) -> "CompletedDesign":
        """Same design, different response vector (all rows now observed)."""
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape or np.any(np.isnan(y)):
            raise ValidationError("replacement response must be complete and of length N")
        return CompletedDesign(self.X1, self.X2, self.Z, self.D, y,
                               np.ones(self.n_rows, dtype=bool), self.offsets, self.time,
                               self.subject_ids, self.beta_names, self.column_map, self.q)


def build_completed_design(data: LongitudinalDataset,
                           pattern: Optional[MissingPattern] = None,
                           z_spec: Optional[RandomEffectsSpec] = None) -> CompletedDesign:
    """Build the completed design; deterministic in (data, pattern)."""
    if pattern is None:
        pattern = missing_pattern(data)
    if z_spec is None:
        z_spec = RandomEffectsSpec()
    N = data.n_rows
    if pattern.cov_missing.shape != data.covariates.shape:
        raise ValidationError("missing pattern does not match the dataset")
    miss = pattern.cov_missing
    sub = data.subject_index

    X1 = np.where(miss, 0.0, data.covariates)
    subj_any = pattern.any_subject[sub] if data.m else np.zeros(N, dtype=bool)
    vary_any = pattern.any_varying

    occasions = np.unique(data.time)
    full_cols = [subj_any.astype(float)]
    full_map = [(MU_SUBJECT,)]
    for t in occasions:
        full_cols.append(((data.time == t) & vary_any).astype(float))
        full_map.append((MU_OCCASION, int(t)))
    keep = [j for j, c in enumerate(full_cols) if np.any(c != 0)]
    X2 = np.column_stack([full_cols[j] for j in keep]) if keep else np.zeros((N, 0))
    column_map = tuple(full_map[j] for j in keep)

    if not keep and np.any(miss):
        raise ValidationError("internal: missing covariates present but no indicator column retained")

    Zbase = z_spec.build(data)
    gamma = (subj_any | vary_any).astype(float)
    Z = np.column_stack([Zbase, gamma]) if Zbase.shape[1] else gamma[:, None]
    D = vary_any.astype(float)

    y = np.asarray(data.response, dtype=float)
    observed = ~np.isnan(y)
    k = X1.shape[1] + X2.shape[1]
    if k >= int(observed.sum()):
        raise RankDeficiencyError(
            f"rank-deficient fixed effects: {k} terms for {int(observed.sum())} observed responses")

    for a in (X1, X2, Z, D):
        a.setflags(write=False)
    return CompletedDesign(X1=X1, X2=X2, Z=Z, D=D, y=y, response_observed=observed,
                           offsets=data.offsets, time=data.time, subject_ids=data.subject_ids,
                           beta_names=tuple(data.covariate_spec.names),
                           column_map=column_map, q=z_spec.q)


class StackedDesign(NamedTuple):
    X: np.ndarray
    Z_blocks: list
    D: np.ndarray


def stack_design(design: CompletedDesign) -> StackedDesign:
    """Row-stacked X = [X1 X2], per-subject Z blocks and the diagonal of D."""
    Z_blocks = [design.Z[design.offsets[i]:design.offsets[i + 1]] for i in range(design.m)]
    return StackedDesign(design.X, Z_blocks, design.D.copy())


@dataclass(frozen=True, eq=False)
class RowPart:
    """Rows of the completed design selected by a mask, subject-aligned.

    ``offsets`` spans all m subjects; subjects without rows in this part
    get empty blocks so that observed and missing parts line up.
    """

    rows: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    D: np.ndarray
    y: np.ndarray
    offsets: np.ndarray

    @property
    def n(self) -> int:
        return len(self.rows)

    def block(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i + 1])


class ResponsePartition(NamedTuple):
    observed: RowPart
    missing: RowPart


def _row_part(design: CompletedDesign, mask: np.ndarray, X: np.ndarray) -> RowPart:
    rows = np.flatnonzero(mask)
    counts = np.add.reduceat(mask.astype(np.int64), design.offsets[:-1]) if design.m else np.zeros(0, int)
    counts = np.where(np.diff(design.offsets) == 0, 0, counts)
    offsets = np.r_[0, np.cumsum(counts)].astype(np.int64)
    return RowPart(rows=rows, X=X[rows], Z=design.Z[rows], D=design.D[rows],
                   y=design.y[rows], offsets=offsets)


def partition_by_response(design: CompletedDesign) -> ResponsePartition:
    """Split rows into observed-response and missing-response parts (order kept)."""
    obs = np.asarray(design.response_observed, dtype=bool)
    if not obs.any():
        raise ValidationError("no observed responses")
    X = design.X
    return ResponsePartition(_row_part(design, obs, X), _row_part(design, ~obs, X))
