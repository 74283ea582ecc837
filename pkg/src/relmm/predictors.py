"""Best prediction of missing responses and the four estimator pipelines.

FULL  fit of the original model on data before any masking (simulation only)
CDOE  fit on complete records only
CCE   fit of the completed model on the rows with an observed response
CCPE  CCE, then refit the completed model on all rows with the missing
      responses replaced by their empirical best predictor
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .completion import (CompletedDesign, RandomEffectsSpec, ResponsePartition,
                         build_completed_design, partition_by_response)
from .data import LongitudinalDataset, complete_records
from .engine import (FitResult, LmmProblem, OptimizerOptions, VarianceComponents,
                     _v_block, assemble_v, fixed_psi_fit, reml_fit)
from .errors import InfeasibleError, NumericalError, ValidationError

FULL, CDOE, CCE, CCPE = "FULL", "CDOE", "CCE", "CCPE"
METHODS = (FULL, CDOE, CCE, CCPE)

FLAG_NAIVE_SE = "naive_se"
FLAG_UNESTIMABLE = "unestimable_terms"


@dataclass(frozen=True, eq=False)
class PredictionResult:
    """Predicted missing responses, in the row order of the missing part."""

    y_m_hat: np.ndarray
    rows: np.ndarray
    source_fit: Optional[FitResult]
    Q: Optional[np.ndarray] = None

    def completed_response(self, y: np.ndarray) -> np.ndarray:
        out = np.array(y, dtype=float)
        out[self.rows] = self.y_m_hat
        return out


@dataclass(frozen=True, eq=False)
class EstimatorReport:
    method: str
    fit: FitResult
    beta_hat: np.ndarray
    se_beta: np.ndarray
    flags: frozenset = frozenset()
    prediction: Optional[PredictionResult] = None

    @property
    def names(self) -> tuple:
        return self.fit.names


def best_predictor(b: np.ndarray, vc: VarianceComponents,
                   partition: ResponsePartition) -> PredictionResult:
    """y_m = X_m b + C_mo V_o^{-1} (y_o - X_o b), computed subject by subject.

    Subjects share no random effects, so C_mo and V_o are block diagonal.
    """
    obs, mis = partition
    b = np.asarray(b, dtype=float)
    pred = mis.X @ b if mis.n else np.zeros(0)
    H = vc.H
    # validates H once for all subjects
    assemble_v(vc, np.zeros((1, H.shape[0])), np.zeros(1))
    if mis.n and np.any(H != 0):
        m = len(obs.offsets) - 1
        for i in range(m):
            sm, so = mis.block(i), obs.block(i)
            if sm.stop == sm.start or so.stop == so.start:
                continue
            Vo = _v_block(H, vc.sigma_eps2, vc.sigma_delta2, obs.Z[so], obs.D[so])
            try:
                cf = scipy.linalg.cho_factor(Vo, lower=True)
            except np.linalg.LinAlgError:
                raise NumericalError("V_o is singular") from None
            resid = obs.y[so] - obs.X[so] @ b
            C = mis.Z[sm] @ H @ obs.Z[so].T
            pred[sm] += C @ scipy.linalg.cho_solve(cf, resid)
    return PredictionResult(y_m_hat=pred, rows=mis.rows, source_fit=None)


def _dense_blocks(part, vc):
    m = len(part.offsets) - 1
    blocks = [assemble_v(vc, part.Z[part.block(i)], part.D[part.block(i)]) for i in range(m)]
    return scipy.linalg.block_diag(*blocks) if blocks else np.zeros((0, 0))


def cross_covariance(partition: ResponsePartition, vc: VarianceComponents) -> np.ndarray:
    """Dense C_mo = Z_m (I_m kron H) Z_o'."""
    obs, mis = partition
    H = vc.H
    C = np.zeros((mis.n, obs.n))
    for i in range(len(obs.offsets) - 1):
        sm, so = mis.block(i), obs.block(i)
        if sm.stop > sm.start and so.stop > so.start:
            C[sm, so] = mis.Z[sm] @ H @ obs.Z[so].T
    return C


def predictor_matrix(partition: ResponsePartition, vc: VarianceComponents) -> np.ndarray:
    """Dense Q with y_m_tilde = Q y_o for known variance components.

    Q = {C + (X_m - C V_o^{-1} X_o)(X_o' V_o^{-1} X_o)^{-1} X_o'} V_o^{-1}.

    Columns that vanish on the observed rows are dropped, as in :func:`ebp`.
    """
    obs, mis = partition
    keep = np.any(obs.X != 0, axis=0)
    Xo, Xm = obs.X[:, keep], mis.X[:, keep]
    Vo = _dense_blocks(obs, vc)
    C = cross_covariance(partition, vc)
    cf = scipy.linalg.cho_factor(Vo, lower=True)
    VinvXo = scipy.linalg.cho_solve(cf, Xo)
    info = Xo.T @ VinvXo
    VinvCt = scipy.linalg.cho_solve(cf, C.T)
    inner = Xm - VinvCt.T @ Xo
    A = C + inner @ np.linalg.solve(info, Xo.T)
    return scipy.linalg.cho_solve(cf, A.T).T


def _observed_problem(design: CompletedDesign):
    """Sub-model on observed-response rows, dropping columns that vanish there."""
    obs = np.asarray(design.response_observed, dtype=bool)
    if not obs.any():
        raise InfeasibleError("no observed responses")
    prob = LmmProblem.from_design(design, rows=obs)
    nonzero = np.any(prob.X != 0, axis=0)
    if np.all(nonzero):
        return prob, np.arange(design.p + design.d)
    keep = np.flatnonzero(nonzero)
    if np.any(keep[:design.p] != np.arange(design.p)) or len(keep) < design.p:
        lost = [design.term_names[j] for j in np.flatnonzero(~nonzero)]
        raise InfeasibleError(f"covariates with no observed information: {lost}")
    sub = LmmProblem(prob.X[:, keep], prob.y, prob.Z, prob.D, prob.offsets, prob.q,
                     prob.gamma_column, tuple(prob.names[j] for j in keep))
    return sub, keep


def _expand(fit: FitResult, keep, k, names) -> FitResult:
    if len(keep) == k:
        return fit
    b = np.full(k, np.nan)
    b[keep] = fit.b_hat
    cov = np.full((k, k), np.nan)
    cov[np.ix_(keep, keep)] = fit.cov_b
    return FitResult(b_hat=b, psi_hat=fit.psi_hat, cov_b=cov, se_b=np.sqrt(np.diag(cov)),
                     loglik=fit.loglik, criterion=fit.criterion, converged=fit.converged,
                     iterations=fit.iterations, flags=fit.flags | {FLAG_UNESTIMABLE},
                     names=tuple(names), n_obs=fit.n_obs)


def fit_observed(design: CompletedDesign, opts: Optional[OptimizerOptions] = None,
                 psi: Optional[VarianceComponents] = None) -> FitResult:
    """Fit the completed model on the observed-response rows (the CCE fit).

    With ``psi`` given, only b is estimated (GLS at known variance
    components).  Terms with no observed rows come back as NaN.
    """
    prob, keep = _observed_problem(design)
    if psi is None:
        fit = reml_fit(prob, opts)
    else:
        fit = fixed_psi_fit(prob, psi)
    return _expand(fit, keep, design.p + design.d, design.term_names)


def ebp(design: CompletedDesign, opts: Optional[OptimizerOptions] = None,
        psi: Optional[VarianceComponents] = None, fit: Optional[FitResult] = None,
        materialize_q: bool = False) -> PredictionResult:
    """Empirical best predictor of the missing responses.

    Parameters are estimated from the observed-response sub-model unless a
    precomputed ``fit`` of that sub-model is passed.  Unestimable indicator
    coefficients enter the predictor as zero.
    """
    if fit is None:
        fit = fit_observed(design, opts, psi)
    part = partition_by_response(design)
    if part.missing.n == 0:
        return PredictionResult(np.zeros(0), part.missing.rows, fit,
                                np.zeros((0, part.observed.n)) if materialize_q else None)
    b = np.nan_to_num(fit.b_hat, nan=0.0)
    pred = best_predictor(b, fit.psi_hat, part)
    Q = predictor_matrix(part, fit.psi_hat) if materialize_q else None
    return PredictionResult(pred.y_m_hat, pred.rows, fit, Q)


def _report(method, fit, p, flags=(), prediction=None) -> EstimatorReport:
    return EstimatorReport(method=method, fit=fit, beta_hat=fit.b_hat[:p].copy(),
                           se_beta=fit.se_b[:p].copy(), flags=frozenset(flags) | fit.flags,
                           prediction=prediction)


def run_pipelines(methods, data: LongitudinalDataset, opts: Optional[OptimizerOptions] = None,
                  unmasked: Optional[LongitudinalDataset] = None,
                  z_spec: Optional[RandomEffectsSpec] = None,
                  psi: Optional[VarianceComponents] = None) -> dict:
    """Run several pipelines on one dataset, sharing the CCE fit with CCPE.

    Returns ``{method: EstimatorReport or Exception}``; a failing method does
    not stop the others.
    """
    out = {}
    p = data.covariate_spec.p
    cce_fit = None
    design = None
    for method in methods:
        try:
            if method == FULL:
                if unmasked is None:
                    raise InfeasibleError("FULL needs the unmasked data (simulation mode only)")
                full = build_completed_design(unmasked, z_spec=z_spec)
                if full.d or not full.response_observed.all():
                    raise InfeasibleError("FULL needs fully observed data")
                fit = _fit(LmmProblem.from_design(full), opts, psi)
                out[method] = _report(method, fit, p)
            elif method == CDOE:
                cc = build_completed_design(complete_records(data), z_spec=z_spec)
                fit = _fit(LmmProblem.from_design(cc), opts, psi)
                out[method] = _report(method, fit, p)
            elif method in (CCE, CCPE):
                if design is None:
                    design = build_completed_design(data, z_spec=z_spec)
                if cce_fit is None:
                    cce_fit = fit_observed(design, opts, psi)
                if method == CCE:
                    out[method] = _report(method, cce_fit, p)
                else:
                    pred = ebp(design, fit=cce_fit)
                    ytil = pred.completed_response(design.y)
                    fit = _fit(LmmProblem.from_design(design, y=ytil), opts, psi)
                    out[method] = _report(method, fit, p, {FLAG_NAIVE_SE}, pred)
            else:
                raise ValidationError(f"unknown method {method!r}")
        except (InfeasibleError, NumericalError, ValidationError) as exc:
            out[method] = exc
    return out


def _fit(prob, opts, psi):
    return reml_fit(prob, opts) if psi is None else fixed_psi_fit(prob, psi)


def run_pipeline(method: str, data: LongitudinalDataset, opts: Optional[OptimizerOptions] = None,
                 unmasked: Optional[LongitudinalDataset] = None,
                 z_spec: Optional[RandomEffectsSpec] = None,
                 psi: Optional[VarianceComponents] = None) -> EstimatorReport:
    """Run one pipeline; errors propagate."""
    res = run_pipelines([method], data, opts, unmasked, z_spec, psi)[method]
    if isinstance(res, Exception):
        raise res
    return res
