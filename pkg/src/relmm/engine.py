"""Block-diagonal LMM fitting: covariance assembly, GLS and REML/ML.

The marginal covariance of subject i is

    V_i = sigma_eps2 * I + sigma_delta2 * D_i + Z_i H Z_i',
    H   = blockdiag(G, sigma_gamma2).

Variance parameters are optimized on an unconstrained scale: log-Cholesky
for G and log for the scalar variances.  Fixed effects are profiled out by
GLS.  All per-subject work is done on zero-padded (m, n_max, .) arrays with
batched Cholesky factors; the padding rows carry unit variance and zero
design so they drop out of every sum.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy import optimize

from .errors import ConfigError, NumericalError, RankDeficiencyError, ValidationError

logger = logging.getLogger(__name__)

REML = "REML"
ML = "ML"

FLAG_BOUNDARY = "boundary"
FLAG_MERGED = "merged_error_variances"
FLAG_NOT_CONVERGED = "not_converged"

_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class VarianceComponents:
    """(G, sigma_gamma2, sigma_delta2, sigma_eps2)."""

    G: np.ndarray
    sigma_gamma2: float = 0.0
    sigma_delta2: float = 0.0
    sigma_eps2: float = 1.0

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        if G.size == 0:
            G = np.zeros((0, 0))
        object.__setattr__(self, "G", G)
        if G.shape[0] != G.shape[1]:
            raise ValidationError("G must be square")
        if not np.allclose(G, G.T, rtol=0, atol=1e-12 * max(1.0, np.abs(G).max(initial=0))):
            raise ValidationError("G must be symmetric")
        if G.size and np.linalg.eigvalsh(G).min() < -1e-10 * max(1.0, np.abs(G).max()):
            raise ValidationError("G must be positive semidefinite")
        if self.sigma_gamma2 < 0 or self.sigma_delta2 < 0:
            raise ValidationError("variance components must be nonnegative")
        if not self.sigma_eps2 > 0:
            raise ValidationError("sigma_eps2 must be strictly positive")

    @property
    def q(self) -> int:
        return self.G.shape[0]

    @property
    def H(self) -> np.ndarray:
        return scipy.linalg.block_diag(self.G, np.array([[self.sigma_gamma2]]))

    def as_dict(self) -> dict:
        return {"G": self.G.tolist(), "sigma_gamma2": float(self.sigma_gamma2),
                "sigma_delta2": float(self.sigma_delta2), "sigma_eps2": float(self.sigma_eps2)}


@dataclass(frozen=True)
class OptimizerOptions:
    """Settings for :func:`reml_fit`.

    ``method`` is ``"simplex"`` (Nelder-Mead, optionally refined by
    quasi-Newton when ``refine``) or ``"quasi-newton"`` (L-BFGS-B with the
    analytic gradient).  Both finish with a short Newton polish when
    ``refine`` is set.  ``variance_floor`` is relative to the sample
    variance of y.
    """

    criterion: str = REML
    method: str = "simplex"
    refine: bool = True
    tol: float = 1e-8
    max_iter: int = 500
    variance_floor: float = 1e-10

    def __post_init__(self):
        if self.criterion not in (REML, ML):
            raise ConfigError(f"criterion must be REML or ML, not {self.criterion!r}")
        if self.method not in ("simplex", "quasi-newton"):
            raise ConfigError(f"unknown optimizer method {self.method!r}")
        if not (self.tol > 0 and self.max_iter >= 1 and self.variance_floor > 0):
            raise ConfigError("tol, max_iter and variance_floor must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerOptions":
        allowed = {"criterion", "method", "refine", "tol", "max_iter", "variance_floor"}
        extra = set(d) - allowed
        if extra:
            raise ConfigError(f"unknown optimizer keys: {sorted(extra)}")
        return cls(**d)

    def as_dict(self) -> dict:
        return {"criterion": self.criterion, "method": self.method, "refine": self.refine,
                "tol": self.tol, "max_iter": self.max_iter, "variance_floor": self.variance_floor}


@dataclass(frozen=True, eq=False)
class LmmProblem:
    """Rows of an LMM grouped by subject.

    ``Z`` has ``q`` columns loading on G, followed by one gamma column when
    ``gamma_column`` is set.  ``D`` is the 0/1 diagonal carrying
    sigma_delta2.  ``offsets`` delimit subjects; empty subjects are allowed.
    """

    X: np.ndarray
    y: np.ndarray
    Z: np.ndarray
    D: np.ndarray
    offsets: np.ndarray
    q: int
    gamma_column: bool = True
    names: tuple = ()

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        N = len(np.asarray(self.y))
        if X.shape[0] != N:
            X = X.reshape(N, -1)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).reshape(N))
        Z = np.asarray(self.Z, dtype=float).reshape(N, -1)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "D", np.asarray(self.D, dtype=float).reshape(N))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.int64))
        if Z.shape[1] != self.q + int(self.gamma_column):
            raise ValidationError("Z columns must equal q plus the gamma column")
        if self.offsets[0] != 0 or self.offsets[-1] != N or np.any(np.diff(self.offsets) < 0):
            raise ValidationError("offsets must be nondecreasing from 0 to N")
        if np.any(np.isnan(self.y)):
            raise ValidationError("response contains missing values; fit the observed rows only")
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{j}" for j in range(X.shape[1])))

    @classmethod
    def from_design(cls, design, rows: Optional[np.ndarray] = None, y=None) -> "LmmProblem":
        """Problem for the given rows (boolean mask) of a completed design."""
        X, Z, D = design.X, design.Z, design.D
        yy = design.y if y is None else np.asarray(y, dtype=float)
        if rows is None:
            mask = np.ones(design.n_rows, dtype=bool)
        else:
            mask = np.asarray(rows, dtype=bool)
        counts = np.array([mask[design.offsets[i]:design.offsets[i + 1]].sum()
                           for i in range(design.m)], dtype=np.int64)
        offsets = np.r_[0, np.cumsum(counts)]
        return cls(X[mask], yy[mask], Z[mask], D[mask], offsets, design.q, True,
                   design.term_names)

    @property
    def N(self) -> int:
        return len(self.y)

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return len(self.offsets) - 1

    def blocks(self):
        for i in range(self.m):
            s = slice(self.offsets[i], self.offsets[i + 1])
            if s.stop > s.start:
                yield s

    def with_y(self, y) -> "LmmProblem":
        return replace(self, y=np.asarray(y, dtype=float))


@dataclass(frozen=True, eq=False)
class FitResult:
    b_hat: np.ndarray
    psi_hat: VarianceComponents
    cov_b: np.ndarray
    se_b: np.ndarray
    loglik: float
    criterion: str
    converged: bool
    iterations: int
    flags: frozenset
    names: tuple
    n_obs: int

    def coef(self, name: str) -> float:
        return float(self.b_hat[self.names.index(name)])


def assemble_v(vc: VarianceComponents, Z_i: np.ndarray, D_i: np.ndarray) -> np.ndarray:
    """V_i = sigma_eps2 I + sigma_delta2 D_i + Z_i H Z_i'.

    ``D_i`` may be the diagonal vector or the full diagonal matrix.  ``Z_i``
    may have q columns (no gamma column) or q + 1.
    """
    Z_i = np.atleast_2d(np.asarray(Z_i, dtype=float))
    D_i = np.asarray(D_i, dtype=float)
    if D_i.ndim == 2:
        D_i = np.diag(D_i)
    n = Z_i.shape[0]
    H = vc.H
    if Z_i.shape[1] == vc.q:
        H = vc.G
    elif Z_i.shape[1] != vc.q + 1:
        raise ValidationError(f"Z_i has {Z_i.shape[1]} columns; expected {vc.q} or {vc.q + 1}")
    if D_i.shape != (n,):
        raise ValidationError("D_i does not match Z_i rows")
    if H.size and np.linalg.eigvalsh(H).min() < -1e-10 * max(1.0, np.abs(H).max()):
        raise ValidationError("H is not positive semidefinite")
    return _v_block(H, vc.sigma_eps2, vc.sigma_delta2, Z_i, D_i)


def _v_block(H, se, sd, Z_i, D_i):
    V = Z_i @ H @ Z_i.T
    V[np.diag_indices(Z_i.shape[0])] += se + sd * D_i
    return V


def _rank_check(X: np.ndarray, names: Sequence = ()) -> None:
    if X.shape[1] == 0:
        return
    if X.shape[0] < X.shape[1]:
        raise RankDeficiencyError(f"{X.shape[1]} fixed effects for only {X.shape[0]} rows")
    scale = np.sqrt((X ** 2).sum(axis=0))
    zero = scale == 0
    if np.any(zero):
        bad = [names[j] if names else j for j in np.flatnonzero(zero)]
        raise RankDeficiencyError("fixed-effects design is rank deficient", bad)
    _, R, piv = scipy.linalg.qr(X / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(X.shape) * np.finfo(float).eps * 10
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        bad = [names[j] if names else int(j) for j in piv[rank:]]
        raise RankDeficiencyError("fixed-effects design is rank deficient", bad)


def gls(X: np.ndarray, V_blocks: Sequence[np.ndarray], y: np.ndarray, names: Sequence = ()):
    """Generalized least squares with block-diagonal V.

    Accumulates X_i' V_i^{-1} X_i and X_i' V_i^{-1} y_i from per-block
    Cholesky solves.  Returns ``(b_hat, cov)`` with cov = (X' V^{-1} X)^{-1}.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] != y.shape[0]:
        X = X.reshape(y.shape[0], -1)
    _rank_check(X, names)
    k = X.shape[1]
    info = np.zeros((k, k))
    score = np.zeros(k)
    start = 0
    for V in V_blocks:
        V = np.atleast_2d(V)
        n = V.shape[0]
        sl = slice(start, start + n)
        start += n
        try:
            cf = scipy.linalg.cho_factor(V, lower=True)
        except np.linalg.LinAlgError:
            raise NumericalError("covariance block is not positive definite") from None
        WX = scipy.linalg.cho_solve(cf, X[sl])
        info += X[sl].T @ WX
        score += WX.T @ y[sl]
    if start != X.shape[0]:
        raise ValidationError("V blocks do not cover the rows of X")
    try:
        cf = scipy.linalg.cho_factor(info, lower=True)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError("information matrix is singular") from None
    b = scipy.linalg.cho_solve(cf, score)
    cov = scipy.linalg.cho_solve(cf, np.eye(k))
    return b, 0.5 * (cov + cov.T)


# --------------------------------------------------------------------------
# Batched evaluation
# --------------------------------------------------------------------------


def _forward(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve L X = B for stacks of small lower-triangular L."""
    n = L.shape[1]
    Xs = np.empty_like(B)
    for j in range(n):
        r = B[:, j, :]
        if j:
            r = r - np.matmul(L[:, j:j + 1, :j], Xs[:, :j, :])[:, 0, :]
        Xs[:, j, :] = r / L[:, j, j, None]
    return Xs


def _backward(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve L' X = B for stacks of small lower-triangular L."""
    n = L.shape[1]
    Xs = np.empty_like(B)
    for j in range(n - 1, -1, -1):
        r = B[:, j, :]
        if j < n - 1:
            r = r - np.matmul(L[:, j + 1:, j][:, None, :], Xs[:, j + 1:, :])[:, 0, :]
        Xs[:, j, :] = r / L[:, j, j, None]
    return Xs


class _Padded:
    """Zero-padded (m, n_max, .) views of an LmmProblem (nonempty subjects only)."""

    def __init__(self, prob: LmmProblem):
        sizes = np.diff(prob.offsets)
        keep = np.flatnonzero(sizes > 0)
        m, n = len(keep), int(sizes.max(initial=0))
        self.m, self.n, self.k, self.r = m, n, prob.k, prob.Z.shape[1]
        self.N = prob.N
        mask = np.zeros((m, n), dtype=bool)
        row = np.zeros(prob.N, dtype=np.int64)
        col = np.zeros(prob.N, dtype=np.int64)
        for a, i in enumerate(keep):
            s, e = prob.offsets[i], prob.offsets[i + 1]
            row[s:e] = a
            col[s:e] = np.arange(e - s)
        mask[row, col] = True
        self.mask = mask
        self.X = np.zeros((m, n, self.k))
        self.X[row, col] = prob.X
        self.y = np.zeros((m, n))
        self.y[row, col] = prob.y
        self.Z = np.zeros((m, n, self.r))
        self.Z[row, col] = prob.Z
        self.D = np.zeros((m, n))
        self.D[row, col] = prob.D
        self.pad_diag = (~mask).astype(float)
        self.maskf = mask.astype(float)
        eye = np.broadcast_to(np.eye(n), (m, n, n))
        self.rhs = np.concatenate([self.X, self.y[:, :, None], self.Z, eye], axis=2)


@dataclass
class _Layout:
    """Which variance components are free, and how theta maps to them."""

    q: int
    gamma: bool      # gamma column present and identifiable
    delta: bool      # sigma_delta2 estimated separately
    pinned: frozenset = frozenset()   # components fixed at zero: "G", "gamma", "delta"

    @property
    def g_free(self) -> bool:
        return self.q > 0 and "G" not in self.pinned

    @property
    def gamma_free(self) -> bool:
        return self.gamma and "gamma" not in self.pinned

    @property
    def delta_free(self) -> bool:
        return self.delta and "delta" not in self.pinned

    @property
    def n_g(self) -> int:
        return self.q * (self.q + 1) // 2 if self.g_free else 0

    @property
    def size(self) -> int:
        return self.n_g + int(self.gamma_free) + int(self.delta_free) + 1

    def labels(self) -> list:
        out = []
        if self.g_free:
            out += [f"G[{i},{j}]" for i in range(self.q) for j in range(i + 1)]
        if self.gamma_free:
            out.append("gamma")
        if self.delta_free:
            out.append("delta")
        out.append("eps")
        return out

    def unpack(self, theta: np.ndarray):
        """theta -> (L, G, sigma_gamma2, sigma_delta2, sigma_eps2)."""
        theta = np.asarray(theta, dtype=float)
        q = self.q
        L = np.zeros((q, q))
        pos = 0
        if self.g_free:
            idx = np.tril_indices(q)
            L[idx] = theta[:self.n_g]
            L[np.diag_indices(q)] = np.exp(np.diag(L))
            pos = self.n_g
        sg = sd = 0.0
        if self.gamma_free:
            sg = math.exp(theta[pos])
            pos += 1
        if self.delta_free:
            sd = math.exp(theta[pos])
            pos += 1
        se = math.exp(theta[pos])
        return L, L @ L.T, sg, sd, se

    def pack(self, G, sg, sd, se, floor) -> np.ndarray:
        out = []
        if self.g_free:
            Gj = np.asarray(G, dtype=float) + floor * np.eye(self.q)
            L = np.linalg.cholesky(Gj)
            Lt = L.copy()
            Lt[np.diag_indices(self.q)] = np.log(np.diag(L))
            out += list(Lt[np.tril_indices(self.q)])
        if self.gamma_free:
            out.append(math.log(max(sg, floor)))
        if self.delta_free:
            out.append(math.log(max(sd, floor)))
        out.append(math.log(max(se, floor)))
        return np.array(out)


class _Objective:
    """Profiled (restricted) log-likelihood and its gradient in theta."""

    def __init__(self, prob: LmmProblem, layout: _Layout, criterion: str):
        self.prob = prob
        self.pad = _Padded(prob)
        self.layout = layout
        self.criterion = criterion
        self.nevals = 0
        self._cache_key = None
        self._cache = None

    def _H(self, G, sg):
        r = self.pad.r
        H = np.zeros((r, r))
        q = self.layout.q
        H[:q, :q] = G
        if self.prob.gamma_column:
            H[q, q] = sg
        return H

    def evaluate(self, theta, want_grad=True):
        key = (tuple(np.asarray(theta, dtype=float)), want_grad)
        if self._cache_key == key:
            return self._cache
        self.nevals += 1
        lay, pad = self.layout, self.pad
        Lg, G, sg, sd, se = lay.unpack(theta)
        H = self._H(G, sg)
        n, k, r = pad.n, pad.k, pad.r
        V = np.matmul(np.matmul(pad.Z, H), pad.Z.transpose(0, 2, 1))
        diag = se * pad.maskf + sd * pad.D + pad.pad_diag
        V[:, np.arange(n), np.arange(n)] += diag
        try:
            L = np.linalg.cholesky(V)
        except np.linalg.LinAlgError:
            return self._fail(want_grad)
        logdet_v = 2.0 * np.log(L[:, np.arange(n), np.arange(n)]).sum()
        W = _forward(L, pad.rhs if want_grad else pad.rhs[:, :, :k + 1 + r])
        Xt, yt = W[:, :, :k], W[:, :, k]
        Xt2 = Xt.reshape(-1, k)
        omega = Xt2.T @ Xt2
        c = Xt2.T @ yt.reshape(-1)
        try:
            cf = scipy.linalg.cho_factor(omega, lower=True, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            return self._fail(want_grad)
        b = scipy.linalg.cho_solve(cf, c, check_finite=False)
        rt = yt - np.matmul(Xt, b)
        quad = float((rt ** 2).sum())
        N = pad.N
        if self.criterion == REML:
            logdet_o = 2.0 * np.log(np.diag(cf[0])).sum()
            ll = -0.5 * (logdet_v + logdet_o + quad + (N - k) * _LOG2PI)
        else:
            ll = -0.5 * (logdet_v + quad + N * _LOG2PI)
        if not np.isfinite(ll):
            return self._fail(want_grad)
        out = {"ll": ll, "b": b, "chol_omega": cf, "G": G, "sg": sg, "sd": sd, "se": se}
        if want_grad:
            out["grad"] = self._gradient(L, W, rt, cf, Lg, sg, sd, se)
        self._cache_key, self._cache = key, out
        return out

    def _fail(self, want_grad):
        out = {"ll": -np.inf}
        if want_grad:
            out["grad"] = np.zeros(self.layout.size)
        return out

    def _gradient(self, L, W, rt, cf, Lg, sg, sd, se):
        lay, pad = self.layout, self.pad
        k, r = pad.k, pad.r
        reml = self.criterion == REML
        Xt = W[:, :, :k]
        Zt = W[:, :, k + 1:k + 1 + r]
        Linv = W[:, :, k + 1 + r:]                    # L^{-1}; R = Linv' Linv
        rtil = _backward(L, rt[:, :, None])[:, :, 0]  # R (y - X b)
        RX = _backward(L, Xt)                         # R X
        Rdiag = (Linv ** 2).sum(axis=1)               # diag(R) per subject
        grad = []

        def proj(M):
            return scipy.linalg.cho_solve(cf, M, check_finite=False)

        if lay.g_free or lay.gamma_free:
            ZRZ = np.matmul(Zt.transpose(0, 2, 1), Zt).sum(axis=0)
            F = np.matmul(Zt.transpose(0, 2, 1), Xt)             # Z' R X, (m, r, k)
            Zr = np.einsum("mnr,mn->mr", pad.Z, rtil)
            gamma = ZRZ - np.einsum("mrk,mik->ri", F, np.einsum("mik,kl->mil", F, proj(np.eye(k)))) \
                if reml else ZRZ.copy()
            gamma = gamma - Zr.T @ Zr
            gamma = -0.5 * (gamma + gamma.T) / 2.0
            if lay.g_free:
                q = lay.q
                dL = 2.0 * gamma[:q, :q] @ Lg
                dL[np.diag_indices(q)] *= np.diag(Lg)
                grad += list(dL[np.tril_indices(q)])
            if lay.gamma_free:
                grad.append(gamma[lay.q, lay.q] * sg)
        if lay.delta_free:
            t1 = float((Rdiag * pad.D).sum())
            t3 = float((rtil ** 2 * pad.D).sum())
            t2 = 0.0
            if reml:
                RXd = RX * pad.D[:, :, None]
                M = np.einsum("mnk,mnl->kl", RXd, RX)
                t2 = float(np.trace(proj(M)))
            grad.append(-0.5 * (t1 - t2 - t3) * sd)
        t1 = float((Rdiag * pad.maskf).sum())
        t3 = float((rtil ** 2).sum())
        t2 = 0.0
        if reml:
            RX2 = RX.reshape(-1, k)
            t2 = float(np.trace(proj(RX2.T @ RX2)))
        grad.append(-0.5 * (t1 - t2 - t3) * se)
        return np.array(grad)

    def loglik(self, theta) -> float:
        return self.evaluate(theta, want_grad=False)["ll"]

    def gradient(self, theta) -> np.ndarray:
        return self.evaluate(theta, want_grad=True)["grad"]


def profile_loglik(theta, context) -> float:
    """(Restricted) log-likelihood with beta profiled out, at unconstrained theta.

    ``context`` is the objective object returned by :func:`make_objective`.
    Returns ``-inf`` where a Cholesky factorization fails.
    """
    return context.loglik(theta)


def _identifiable_layout(prob: LmmProblem):
    flags = set()
    gamma = bool(prob.gamma_column and np.any(prob.Z[:, prob.q] != 0))
    Dnz = prob.D != 0
    delta = bool(np.any(Dnz))
    if delta and np.all(Dnz):
        delta = False
        flags.add(FLAG_MERGED)
    return _Layout(q=prob.q, gamma=gamma, delta=delta), flags


def make_objective(prob: LmmProblem, criterion: str = REML, pinned=()) -> _Objective:
    layout, _ = _identifiable_layout(prob)
    layout.pinned = frozenset(pinned)
    return _Objective(prob, layout, criterion)


def _start_values(prob: LmmProblem, floor: float):
    """Moment-based starting point from OLS residuals."""
    X, y = prob.X, prob.y
    if prob.k:
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        res = y - X @ beta
    else:
        res = y.copy()
    tot = max(float(res.var()), floor)
    sizes = np.diff(prob.offsets)
    nz = sizes > 0
    sums = np.add.reduceat(res, prob.offsets[:-1][nz]) if prob.N else np.zeros(0)
    means = sums / sizes[nz]
    within = res - np.repeat(means, sizes[nz])
    dfw = prob.N - int(nz.sum())
    sw = float((within ** 2).sum() / dfw) if dfw > 0 else tot / 2
    sw = min(max(sw, 1e-3 * tot), tot)
    sb = float(means.var()) - sw / max(float(sizes[nz].mean()), 1.0) if means.size > 1 else 0.0
    sb = max(sb, 0.1 * tot)
    q = prob.q
    if q:
        zsq = (prob.Z[:, :q] ** 2).mean(axis=0)
        zsq = np.where(zsq > 0, zsq, 1.0)
        G = np.diag(sb / zsq / q)
    else:
        G = np.zeros((0, 0))
    return G, 0.5 * sb, 0.5 * sw, sw


def _newton_polish(obj: _Objective, theta, lower, max_steps=6):
    """A few Newton steps with a finite-difference Hessian of the analytic gradient."""
    theta = np.array(theta, dtype=float)
    cur = obj.evaluate(theta)
    steps = 0
    for _ in range(max_steps):
        g = cur["grad"]
        if not np.all(np.isfinite(g)):
            break
        free = theta > lower + 1e-8
        if not np.any(free):
            break
        idx = np.flatnonzero(free)
        h = 1e-5
        Hm = np.empty((len(idx), len(idx)))
        for a, j in enumerate(idx):
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            Hm[:, a] = (obj.gradient(tp)[idx] - obj.gradient(tm)[idx]) / (2 * h)
        Hm = 0.5 * (Hm + Hm.T)
        try:
            w = np.linalg.eigvalsh(Hm)
        except np.linalg.LinAlgError:
            break
        if w.max() >= 0:        # not locally concave: leave it to the quasi-Newton result
            break
        step = np.zeros_like(theta)
        step[idx] = -np.linalg.solve(Hm, g[idx])
        t = 1.0
        accepted = False
        while t > 1e-4:
            cand = np.maximum(theta + t * step, lower)
            new = obj.evaluate(cand)
            if new["ll"] >= cur["ll"] - 1e-12 * abs(cur["ll"]):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        done = np.max(np.abs(cand - theta)) < 1e-10
        theta, cur = cand, new
        steps += 1
        if done:
            break
    return theta, steps


def _optimize(obj: _Objective, theta0, opts: OptimizerOptions, lower: float):
    """Maximize obj over theta; returns (theta, iterations, converged)."""
    iters = 0
    theta = np.asarray(theta0, dtype=float)
    lb = np.full(theta.size, -np.inf)
    # Only log-variance coordinates are bounded; off-diagonal Cholesky entries are free.
    log_idx = _log_coordinates(obj.layout)
    lb[log_idx] = lower
    bounds = [(None if not np.isfinite(v) else v, None) for v in lb]

    def f(t):
        v = obj.loglik(np.maximum(t, lb))
        return 1e300 if not np.isfinite(v) else -v

    def fg(t):
        t = np.maximum(t, lb)
        res = obj.evaluate(t)
        if not np.isfinite(res["ll"]):
            return 1e300, np.zeros_like(t)
        return -res["ll"], -res["grad"]

    if opts.method == "simplex":
        res = optimize.minimize(
            f, theta, method="Nelder-Mead",
            options={"maxiter": opts.max_iter, "xatol": 1e-8, "fatol": opts.tol * max(1.0, abs(f(theta))),
                     "adaptive": theta.size > 3})
        theta = np.maximum(res.x, lb)
        iters += int(res.nit)
        converged = bool(res.success)
        if opts.refine:
            res = optimize.minimize(fg, theta, jac=True, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": opts.max_iter, "ftol": opts.tol * 1e-4,
                                             "gtol": 1e-9})
            if -res.fun >= obj.loglik(theta):
                theta = res.x
            iters += int(res.nit)
            converged = converged or bool(res.success)
    else:
        res = optimize.minimize(fg, theta, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": opts.max_iter, "ftol": opts.tol * 1e-4,
                                         "gtol": 1e-9})
        theta = res.x
        iters += int(res.nit)
        converged = bool(res.success) or _small_gradient(obj, theta, lb)
    if opts.refine:
        theta, steps = _newton_polish(obj, theta, lb)
        iters += steps
    converged = converged or _small_gradient(obj, theta, lb)
    return theta, iters, converged


def _small_gradient(obj, theta, lb) -> bool:
    g = obj.gradient(theta)
    free = theta > lb + 1e-8
    # At an active lower bound only an inward-pointing gradient would matter.
    g = np.where(free, g, np.maximum(g, 0.0))
    return bool(np.all(np.abs(g) <= 1e-3))


def _log_coordinates(layout: _Layout) -> list:
    idx = []
    pos = 0
    if layout.g_free:
        q = layout.q
        tri = list(zip(*np.tril_indices(q)))
        idx += [pos + a for a, (i, j) in enumerate(tri) if i == j]
        pos += layout.n_g
    if layout.gamma_free:
        idx.append(pos)
        pos += 1
    if layout.delta_free:
        idx.append(pos)
        pos += 1
    idx.append(pos)
    return idx


def _at_boundary(layout: _Layout, G, sg, sd, se, thresh: float) -> list:
    """Components that collapsed to (numerically) zero."""
    out = []
    if layout.g_free and np.all(np.diag(G) <= thresh):
        out.append("G")
    if layout.gamma_free and sg <= thresh:
        out.append("gamma")
    if layout.delta_free and sd <= thresh:
        out.append("delta")
    return out


def fixed_psi_fit(prob: LmmProblem, vc: VarianceComponents, criterion: str = REML) -> FitResult:
    """GLS for b with the variance components held at ``vc``."""
    Vb = [assemble_v(vc, prob.Z[s], prob.D[s]) for s in prob.blocks()]
    b, cov = gls(prob.X, Vb, prob.y, prob.names)
    return FitResult(b_hat=b, psi_hat=vc, cov_b=cov, se_b=np.sqrt(np.diag(cov)),
                     loglik=float("nan"), criterion=criterion, converged=True, iterations=0,
                     flags=frozenset({"known_psi"}), names=tuple(prob.names), n_obs=prob.N)


def reml_fit(prob: LmmProblem, opts: Optional[OptimizerOptions] = None) -> FitResult:
    """Estimate b and the variance components by REML (or ML).

    Components that are identically absent from the design (no gamma
    column, no D entries) are fixed at zero.  If D is the identity on every
    row, sigma_delta2 cannot be separated from sigma_eps2; it is merged and
    the fit is flagged.  Components that collapse to zero are pinned there
    and the remaining ones re-estimated.
    """
    opts = opts or OptimizerOptions()
    if prob.N == 0:
        raise ValidationError("no rows to fit")
    _rank_check(prob.X, prob.names)
    if opts.criterion == REML and prob.N <= prob.k:
        raise RankDeficiencyError(f"REML needs more than {prob.k} observations")
    layout, flags = _identifiable_layout(prob)
    yscale = float(np.var(prob.y)) if prob.N > 1 else 1.0
    scale = yscale if yscale > 0 else 1.0
    floor = opts.variance_floor * scale
    lower = math.log(floor)
    G0, sg0, sd0, se0 = _start_values(prob, floor)

    base = _Objective(prob, layout, opts.criterion)
    theta, iters, converged = _optimize(base, layout.pack(G0, sg0, sd0, se0, floor), opts, lower)
    obj = base
    ev = obj.evaluate(theta)
    total_evals = base.nevals

    thresh = max(10.0 * floor, 1e-10)
    for _ in range(3):
        L, G, sg, sd, se = obj.layout.unpack(theta)
        hit = _at_boundary(obj.layout, G, sg, sd, se, thresh)
        if not hit:
            break
        flags.add(FLAG_BOUNDARY)
        new_layout = _Layout(layout.q, layout.gamma, layout.delta, obj.layout.pinned | set(hit))
        cand = _Objective(prob, new_layout, opts.criterion)
        start = new_layout.pack(G, sg, sd, se, floor)
        t2, it2, conv2 = _optimize(cand, start, opts, lower)
        ev2 = cand.evaluate(t2)
        total_evals += cand.nevals
        if ev2["ll"] >= ev["ll"] - 1e-8 * max(1.0, abs(ev["ll"])):
            obj, theta, ev, converged = cand, t2, ev2, conv2
            iters += it2
        else:
            break

    L, G, sg, sd, se = obj.layout.unpack(theta)
    if se <= 1.0001 * floor:
        flags.add(FLAG_BOUNDARY)
    if not np.isfinite(ev["ll"]):
        raise NumericalError("likelihood is not finite at the optimum")
    if not converged:
        flags.add(FLAG_NOT_CONVERGED)
    vc = VarianceComponents(0.5 * (G + G.T), sg, sd, se)
    cov = scipy.linalg.cho_solve(ev["chol_omega"], np.eye(prob.k), check_finite=False)
    cov = 0.5 * (cov + cov.T)
    logger.debug("fit: %d evaluations, %d iterations, ll=%.6g", total_evals, iters, ev["ll"])
    return FitResult(b_hat=ev["b"], psi_hat=vc, cov_b=cov, se_b=np.sqrt(np.diag(cov)),
                     loglik=float(ev["ll"]), criterion=opts.criterion, converged=converged,
                     iterations=iters, flags=frozenset(flags), names=tuple(prob.names),
                     n_obs=prob.N)


def information_matrix(prob: LmmProblem, vc: VarianceComponents) -> np.ndarray:
    """X' V^{-1} X accumulated over subject blocks."""
    k = prob.k
    info = np.zeros((k, k))
    for s in prob.blocks():
        V = assemble_v(vc, prob.Z[s], prob.D[s])
        cf = scipy.linalg.cho_factor(V, lower=True)
        info += prob.X[s].T @ scipy.linalg.cho_solve(cf, prob.X[s])
    return info
