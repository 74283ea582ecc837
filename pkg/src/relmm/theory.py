"""Numerical checks of the asymptotic efficiency argument.

For known variance components the REML estimator of the fixed effects has
asymptotic covariance (X' V^{-1} X)^{-1}.  We compare

    Sigma_o  from the complete records under the original model, and
    Sigma    the beta block of Omega^{-1} under the completed model,

where Omega = [[A, B], [B', C]] with A = sum X1' V^-1 X1, B = sum X1' V^-1 X2,
and C = sum X2' V^-1 X2.  The completed-covariates estimator is at least as
efficient when Sigma_o - Sigma is nonnegative definite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
import scipy.linalg

from .completion import CompletedDesign, ResponsePartition
from .engine import VarianceComponents, _v_block
from .errors import NumericalError, ValidationError
from .predictors import cross_covariance, predictor_matrix

EFFICIENCY_TOL = -1e-8
IDENTITY_RTOL = 1e-9
EXPANSION_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class EfficiencyReport:
    """Asymptotic covariances of the complete-record and completed-model estimators.

    ``block_error`` is the relative gap between Sigma from the block formula
    and from a direct inverse of Omega; ``schur_error`` the relative gap in
    Sigma^{-1} = A - B C^{-1} B'.  Both are 0 when d = 0.
    """

    Sigma_o: np.ndarray
    Sigma_cc: np.ndarray
    min_eig_diff: float
    abc_blocks: tuple
    inequality_holds: bool
    block_error: float = 0.0
    schur_error: float = 0.0

    def rows(self, names: Sequence[str]) -> list:
        """(term, sd_o, sd_cc) triples for reporting."""
        so = np.sqrt(np.clip(np.diag(self.Sigma_o), 0, None))
        sc = np.sqrt(np.clip(np.diag(self.Sigma_cc), 0, None))
        return [(n, float(a), float(b)) for n, a, b in zip(names, so, sc)]


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else 0.0


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def information_from_blocks(pairs: Iterable[tuple]) -> np.ndarray:
    """sum_i X_i' V_i^{-1} X_i over (X_i, V_i) pairs."""
    info = None
    for X_i, V_i in pairs:
        X_i = np.atleast_2d(np.asarray(X_i, dtype=float))
        V_i = np.atleast_2d(np.asarray(V_i, dtype=float))
        if X_i.shape[0] == 0:
            continue
        cf = scipy.linalg.cho_factor(V_i, lower=True)
        term = X_i.T @ scipy.linalg.cho_solve(cf, X_i)
        info = term if info is None else info + term
    if info is None:
        raise ValidationError("no rows to accumulate")
    return _sym(info)


def _inverse_or_raise(info: np.ndarray, message: str) -> np.ndarray:
    if info.size == 0:
        raise NumericalError(message)
    w = np.linalg.eigvalsh(info)
    if w.min() <= 1e-12 * max(w.max(), 1e-300):
        raise NumericalError(message)
    return _sym(np.linalg.inv(info))


def _subject_slices(offsets):
    for i in range(len(offsets) - 1):
        s = slice(offsets[i], offsets[i + 1])
        if s.stop > s.start:
            yield s


def complete_record_rows(design: CompletedDesign) -> np.ndarray:
    """Rows with an observed response and no missing covariate."""
    return design.response_observed & (design.gamma_column == 0)


def _complete_pairs(design: CompletedDesign, vc: VarianceComponents):
    rows = complete_record_rows(design)
    Zb = design.Z[:, :design.q]
    for s in _subject_slices(design.offsets):
        keep = rows[s]
        if not keep.any():
            continue
        Zi = Zb[s][keep]
        V = _v_block(vc.G, vc.sigma_eps2, 0.0, Zi, np.zeros(Zi.shape[0]))
        yield design.X1[s][keep], V


def sigma_cdoe(design: CompletedDesign, vc: VarianceComponents) -> np.ndarray:
    """Sigma_o = (sum_i X_io' V_io^{-1} X_io)^{-1} over complete records.

    V_io = sigma_eps2 I + Z_io G Z_io'.
    """
    if not complete_record_rows(design).any():
        raise ValidationError("no complete records")
    info = information_from_blocks(_complete_pairs(design, vc))
    return _inverse_or_raise(info, "CDOE asymptotics undefined: singular information")


def abc_blocks(design: CompletedDesign, vc: VarianceComponents):
    """(A, B, C) over the rows with an observed response.

    Indicator columns that vanish on those rows are dropped.
    """
    obs = np.asarray(design.response_observed, dtype=bool)
    p = design.p
    X2 = design.X2[:, np.any(design.X2[obs] != 0, axis=0)] if design.d else design.X2
    X = np.hstack([design.X1, X2])
    H = vc.H
    pairs = []
    for s in _subject_slices(design.offsets):
        keep = obs[s]
        if keep.any():
            V = _v_block(H, vc.sigma_eps2, vc.sigma_delta2, design.Z[s][keep], design.D[s][keep])
            pairs.append((X[s][keep], V))
    omega = information_from_blocks(pairs)
    return omega[:p, :p], omega[:p, p:], omega[p:, p:]


def sigma_cce(design: CompletedDesign, vc: VarianceComponents,
              Sigma_o: Optional[np.ndarray] = None) -> EfficiencyReport:
    """Sigma = A^-1 + A^-1 B (C - B' A^-1 B)^-1 B' A^-1 and the ordering check."""
    if Sigma_o is None:
        Sigma_o = sigma_cdoe(design, vc)
    A, B, C = abc_blocks(design, vc)
    Ainv = _inverse_or_raise(A, "singular information for the covariate block")
    block_err = schur_err = 0.0
    if C.shape[0] == 0:
        Sigma = Ainv
    else:
        S = _sym(C - B.T @ Ainv @ B)
        Sinv = _inverse_or_raise(S, "singular information for the indicator block")
        AB = Ainv @ B
        Sigma = _sym(Ainv + AB @ Sinv @ AB.T)
        omega = np.block([[A, B], [B.T, C]])
        direct = _sym(np.linalg.inv(omega))[:A.shape[0], :A.shape[0]]
        block_err = _rel(Sigma, direct)
        Cinv = _inverse_or_raise(C, "singular indicator information")
        schur_err = _rel(np.linalg.inv(Sigma), A - B @ Cinv @ B.T)
    diff = _sym(Sigma_o - Sigma)
    lam = float(np.linalg.eigvalsh(diff).min())
    return EfficiencyReport(Sigma_o=Sigma_o, Sigma_cc=Sigma, min_eig_diff=lam,
                            abc_blocks=(A, B, C), inequality_holds=lam >= EFFICIENCY_TOL,
                            block_error=block_err, schur_error=schur_err)


class ExpansionErrors(NamedTuple):
    complete: float
    completed: float
    asymmetry: float


def _double_sum(W: np.ndarray, Xr: np.ndarray, Xs: np.ndarray) -> np.ndarray:
    """sum_{t1,t2} w_{t1 t2} x_{r,t1} x_{s,t2}' as a sum of outer products."""
    out = np.zeros((Xr.shape[1], Xs.shape[1]))
    n = W.shape[0]
    for t1 in range(n):
        for t2 in range(n):
            out += W[t1, t2] * np.outer(Xr[t1], Xs[t2])
    return out


def _rel_abs(a, b):
    scale = max(1.0, np.abs(a).max(initial=0), np.abs(b).max(initial=0))
    return float(np.abs(a - b).max(initial=0) / scale)


def expansion_errors(design: CompletedDesign, vc: VarianceComponents) -> ExpansionErrors:
    """Largest gaps between quadratic forms and their elementwise expansions."""
    obs = np.asarray(design.response_observed, dtype=bool)
    H = vc.H
    err_o = err_c = asym = 0.0
    for Xo, Vo in _complete_pairs(design, vc):
        W = np.linalg.inv(Vo)
        asym = max(asym, float(np.abs(W - W.T).max()))
        err_o = max(err_o, _rel_abs(Xo.T @ W @ Xo, _double_sum(W, Xo, Xo)))
    for s in _subject_slices(design.offsets):
        keep = obs[s]
        if not keep.any():
            continue
        V = _v_block(H, vc.sigma_eps2, vc.sigma_delta2, design.Z[s][keep], design.D[s][keep])
        W = np.linalg.inv(V)
        asym = max(asym, float(np.abs(W - W.T).max()))
        parts = (design.X1[s][keep], design.X2[s][keep])
        for Xr in parts:
            for Xs in parts:
                if Xr.shape[1] and Xs.shape[1]:
                    err_c = max(err_c, _rel_abs(Xr.T @ W @ Xs, _double_sum(W, Xr, Xs)))
    return ExpansionErrors(err_o, err_c, asym)


def quadratic_form_expansion_check(design: CompletedDesign, vc: VarianceComponents,
                                   tol: float = EXPANSION_TOL) -> bool:
    """True when every expansion matches its matrix product and every W_i is symmetric."""
    e = expansion_errors(design, vc)
    return e.complete <= tol and e.completed <= tol and e.asymmetry <= tol


def ytilde_covariance(partition: ResponsePartition, vc: VarianceComponents) -> tuple:
    """Var(y_tilde) for the two linear predictors of y_m from y_o.

    Returns ``[[V_o, C'], [C, C V_o^-1 C']]`` (best predictor, b known) and
    ``[I; Q] V_o [I; Q]'`` (b estimated by GLS).  Both have rank N_o.
    """
    obs, mis = partition
    blocks = [_v_block(vc.H, vc.sigma_eps2, vc.sigma_delta2, obs.Z[obs.block(i)], obs.D[obs.block(i)])
              for i in range(len(obs.offsets) - 1)]
    Vo = scipy.linalg.block_diag(*blocks) if blocks else np.zeros((0, 0))
    C = cross_covariance(partition, vc)
    cf = scipy.linalg.cho_factor(Vo, lower=True)
    bp = np.block([[Vo, C.T], [C, C @ scipy.linalg.cho_solve(cf, C.T)]])
    if mis.n:
        Q = predictor_matrix(partition, vc)
        L = np.vstack([np.eye(obs.n), Q])
    else:
        L = np.eye(obs.n)
    return _sym(bp), _sym(L @ Vo @ L.T)


def _rank(M: np.ndarray) -> int:
    if M.size == 0:
        return 0
    w = np.linalg.eigvalsh(M)
    return int(np.sum(w > max(w.max(), 0.0) * M.shape[0] * 1e-12))


def ytilde_singularity_check(partition: ResponsePartition, vc: VarianceComponents,
                             b: Optional[np.ndarray] = None) -> tuple:
    """(rank, ok) for Var(y_tilde) with known variance components.

    The fixed effects do not enter the covariance; ``b`` is accepted for
    symmetry with the predictor and ignored.  The rank reported is the larger
    of the two constructions; ok means it does not exceed N_o.
    """
    bp, lin = ytilde_covariance(partition, vc)
    rank = max(_rank(bp), _rank(lin))
    return rank, rank <= partition.observed.n


def sim_components(beta: Sequence[float], sd_alpha: float, sd_eps: float) -> VarianceComponents:
    """Completed-model components implied by the simulation design.

    A missing x1 ~ U(0, 1) leaves beta1 (x1 - 1/2) in the subject effect and
    a missing x4 ~ N(1, 1) leaves beta4 (x4 - 1) in the occasion error.
    """
    return VarianceComponents(G=np.array([[sd_alpha ** 2]]), sigma_gamma2=beta[1] ** 2 / 12.0,
                              sigma_delta2=beta[4] ** 2, sigma_eps2=sd_eps ** 2)
