"""Monte Carlo study of FULL / CDOE / CCE / CCPE under a random-intercept LMM.

Complete data follow

    y_it = b0 + b1 x1_i + b2 x2_i + b3 t + b4 x4_it + alpha_i + eps_it,  t = 1..T,

with x1 ~ U[0,1], x2 ~ Bernoulli(1/2), x4 ~ N(1,1).  x1 is masked for the
whole subject with probability expit(a x2 + c), x4 at occasion t with
probability q t, and optionally y_it with probability
expit(a x2 + b x4 + c) (using the true x4).

Every random draw comes from a counter-based Philox stream keyed by
(seed, replication, stream id), so replications can run in any order or
process and still reproduce bit for bit.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import expit

from .data import CovariateSpec, LongitudinalDataset
from .engine import OptimizerOptions
from .errors import ConfigError
from .predictors import CCE, CCPE, CDOE, FULL, METHODS, run_pipelines

logger = logging.getLogger(__name__)

STREAM_COVARIATES = 0
STREAM_NOISE = 1
STREAM_MASK_X1 = 2
STREAM_MASK_X4 = 3
STREAM_MASK_Y = 4

PARAMETERS = ("beta0", "beta1", "beta2", "beta3", "beta4")

SIM_SPEC = CovariateSpec.build(time_invariant=["x1", "x2"], time_varying=["t", "x4"],
                               missable=["x1", "x4"])

# Simulation fits use the gradient-based optimizer; the simplex baseline is
# an order of magnitude slower and reaches the same optimum.
SIM_OPTIMIZER = OptimizerOptions(method="quasi-newton", refine=False)


def rng_for(seed: int, rep: int, stream: int) -> np.random.Generator:
    """Independent Philox generator for one (seed, replication, stream)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(rep), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SimConfig:
    m: int = 100
    T: int = 5
    beta: tuple = (1.0, 0.5, 0.2, 0.2, 0.2)
    sd_alpha: float = 0.3
    sd_eps: float = 0.1
    q_mdm: float = 0.15
    cov_mdm: tuple = (3.0, -2.0)
    resp_mdm: Optional[tuple] = None
    n_sim: int = 1000
    seed: int = 20240101
    methods: tuple = (FULL, CDOE, CCE)
    optimizer: OptimizerOptions = SIM_OPTIMIZER

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "cov_mdm", tuple(float(c) for c in self.cov_mdm))
        if self.resp_mdm is not None:
            object.__setattr__(self, "resp_mdm", tuple(float(c) for c in self.resp_mdm))
        object.__setattr__(self, "methods", tuple(self.methods))
        if isinstance(self.optimizer, dict):
            object.__setattr__(self, "optimizer", OptimizerOptions.from_dict(self.optimizer))
        self.validate()

    def validate(self):
        if not (isinstance(self.m, int) and self.m >= 1):
            raise ConfigError("m must be a positive integer")
        if not (isinstance(self.T, int) and self.T >= 1):
            raise ConfigError("T must be a positive integer")
        if not (isinstance(self.n_sim, int) and self.n_sim >= 1):
            raise ConfigError("n_sim must be a positive integer")
        if len(self.beta) != 5:
            raise ConfigError("beta must have five entries (beta0..beta4)")
        if self.sd_alpha < 0 or self.sd_eps < 0:
            raise ConfigError("standard deviations must be nonnegative")
        if self.q_mdm < 0 or self.q_mdm * self.T > 1:
            raise ConfigError(f"q*T must lie in [0, 1]; got q={self.q_mdm}, T={self.T}")
        if len(self.cov_mdm) != 2:
            raise ConfigError("cov_mdm is (slope on x2, intercept)")
        if self.resp_mdm is not None and len(self.resp_mdm) != 3:
            raise ConfigError("resp_mdm is (slope on x2, slope on x4, intercept)")
        if any(math.isnan(c) for c in self.cov_mdm + (self.resp_mdm or ())):
            raise ConfigError("mechanism coefficients must not be NaN")
        unknown = set(self.methods) - set(METHODS)
        if unknown or not self.methods:
            raise ConfigError(f"methods must be a nonempty subset of {METHODS}")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ConfigError("seed must fit in 64 bits")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.as_dict()
        d["beta"] = list(self.beta)
        d["cov_mdm"] = list(self.cov_mdm)
        d["resp_mdm"] = None if self.resp_mdm is None else list(self.resp_mdm)
        d["methods"] = list(self.methods)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        allowed = set(cls.__dataclass_fields__)
        extra = set(d) - allowed
        if extra:
            raise ConfigError(f"unknown simulation keys: {sorted(extra)}")
        d = dict(d)
        if "optimizer" in d and isinstance(d["optimizer"], dict):
            d["optimizer"] = OptimizerOptions.from_dict(d["optimizer"])
        for key in ("beta", "cov_mdm", "methods"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("resp_mdm") is not None:
            d["resp_mdm"] = tuple(d["resp_mdm"])
        return cls(**d)


def preset(name: str, m: int, **overrides) -> SimConfig:
    """``table1``: missing covariates only.  ``table2``: responses missing too."""
    if name == "table1":
        base = dict(m=m, methods=(FULL, CDOE, CCE))
    elif name == "table2":
        base = dict(m=m, resp_mdm=(3.0, 2.0, -3.0), methods=(FULL, CDOE, CCE, CCPE))
    else:
        raise ConfigError(f"unknown preset {name!r}")
    base.update(overrides)
    return SimConfig(**base)


PRESET_M = {"table1": (40, 100, 400), "table2": (100, 400)}


class Truth(NamedTuple):
    x1: np.ndarray
    x2: np.ndarray
    x4: np.ndarray
    alpha: np.ndarray
    eps: np.ndarray


class MaskRecord(NamedTuple):
    x1_missing: np.ndarray   # (m,)
    x4_missing: np.ndarray   # (m, T)
    y_missing: np.ndarray    # (m, T)


def generate_complete(cfg: SimConfig, rep: int):
    """Fully observed dataset for replication ``rep`` plus the latent draws."""
    m, T = cfg.m, cfg.T
    rc = rng_for(cfg.seed, rep, STREAM_COVARIATES)
    x1 = rc.uniform(0.0, 1.0, size=m)
    x2 = rc.binomial(1, 0.5, size=m).astype(float)
    x4 = rc.normal(1.0, 1.0, size=(m, T))
    rn = rng_for(cfg.seed, rep, STREAM_NOISE)
    alpha = rn.normal(0.0, 1.0, size=m) * cfg.sd_alpha
    eps = rn.normal(0.0, 1.0, size=(m, T)) * cfg.sd_eps
    t = np.broadcast_to(np.arange(1, T + 1, dtype=float), (m, T))
    b0, b1, b2, b3, b4 = cfg.beta
    y = (b0 + b1 * x1[:, None] + b2 * x2[:, None] + b3 * t + b4 * x4
         + alpha[:, None] + eps)
    cov = np.stack([np.ones((m, T)), np.repeat(x1[:, None], T, 1),
                    np.repeat(x2[:, None], T, 1), t, x4], axis=2).reshape(m * T, 5)
    subject = np.repeat(np.arange(1, m + 1), T)
    data = LongitudinalDataset(subject, t.reshape(-1).astype(np.int64), y.reshape(-1),
                               cov, SIM_SPEC, "y")
    return data, Truth(x1, x2, x4, alpha, eps)


def _bernoulli(rng: np.random.Generator, prob: np.ndarray) -> np.ndarray:
    return rng.uniform(size=prob.shape) < prob


def apply_mdm(data: LongitudinalDataset, cfg: SimConfig, rep: int):
    """Mask x1 (per subject), x4 (per occasion) and optionally y."""
    m, T = cfg.m, cfg.T
    if data.n_rows != m * T:
        raise ConfigError("dataset does not match the configuration")
    X = data.covariates.reshape(m, T, 5)
    x2 = X[:, 0, 2]
    x4 = X[:, :, 4]
    a, c = cfg.cov_mdm
    I1 = _bernoulli(rng_for(cfg.seed, rep, STREAM_MASK_X1), expit(a * x2 + c))
    qt = cfg.q_mdm * np.arange(1, T + 1, dtype=float)
    I4 = _bernoulli(rng_for(cfg.seed, rep, STREAM_MASK_X4), np.broadcast_to(qt, (m, T)))
    if cfg.resp_mdm is not None:
        ry, rx, rc = cfg.resp_mdm
        Iy = _bernoulli(rng_for(cfg.seed, rep, STREAM_MASK_Y), expit(ry * x2[:, None] + rx * x4 + rc))
    else:
        Iy = np.zeros((m, T), dtype=bool)
    cov = data.covariates.copy().reshape(m, T, 5)
    cov[I1, :, 1] = np.nan
    cov[:, :, 4][I4] = np.nan
    y = data.response.copy().reshape(m, T)
    y[Iy] = np.nan
    masked = data.replace(covariates=cov.reshape(m * T, 5), response=y.reshape(-1))
    return masked, MaskRecord(I1, I4, Iy)


def replicate(cfg: SimConfig, rep: int) -> dict:
    """Beta estimates per method for one replication (``None`` on failure)."""
    full, _ = generate_complete(cfg, rep)
    masked, _ = apply_mdm(full, cfg, rep)
    res = run_pipelines(cfg.methods, masked, cfg.optimizer, unmasked=full)
    out = {}
    for method, r in res.items():
        if isinstance(r, Exception) or not np.all(np.isfinite(r.beta_hat)):
            out[method] = None
        else:
            out[method] = r.beta_hat
    return out


def _run_chunk(args):
    cfg, reps = args
    return [(rep, replicate(cfg, rep)) for rep in reps]


@dataclass(frozen=True, eq=False)
class McReport:
    """Per-replication estimates and their moments, per method."""

    config: SimConfig
    estimates: dict           # method -> (n_ok, 5) array, ordered by replication
    failures: dict            # method -> count

    def n_ok(self, method: str) -> int:
        return int(self.estimates[method].shape[0])

    def feasible(self, method: str) -> bool:
        return self.n_ok(method) > 0

    def mean(self, method: str) -> np.ndarray:
        return self.estimates[method].mean(axis=0)

    def sd(self, method: str) -> np.ndarray:
        est = self.estimates[method]
        if est.shape[0] < 2:
            return np.full(5, np.nan)
        return est.std(axis=0, ddof=1)

    def mse(self, method: str) -> np.ndarray:
        est = self.estimates[method]
        return ((est - np.asarray(self.config.beta)) ** 2).mean(axis=0)

    def rows(self) -> list:
        out = []
        for k, name in enumerate(PARAMETERS):
            for method in self.config.methods:
                if self.feasible(method):
                    out.append({"parameter": name, "method": method,
                                "mean": float(self.mean(method)[k]),
                                "sd": float(self.sd(method)[k]),
                                "mse": float(self.mse(method)[k]),
                                "n_ok": self.n_ok(method)})
                else:
                    out.append({"parameter": name, "method": method, "mean": float("nan"),
                                "sd": float("nan"), "mse": float("nan"), "n_ok": 0})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parameter", "method", "mean", "sd", "mse", "n_ok"])
        for r in self.rows():
            w.writerow([r["parameter"], r["method"], fmt6(r["mean"]), fmt6(r["sd"]),
                        fmt6(r["mse"]), r["n_ok"]])
        return buf.getvalue()


def fmt6(x: float) -> str:
    """Six significant digits; ``NA`` for NaN."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    return f"{x:.6g}"


def run_monte_carlo(cfg: SimConfig, jobs: int = 1, reps: Optional[Sequence[int]] = None) -> McReport:
    """Run replications ``reps`` (default 0..n_sim-1) and aggregate.

    Failed replications are dropped from a method's moments and counted.
    The result does not depend on ``jobs``.
    """
    reps = list(range(cfg.n_sim)) if reps is None else [int(r) for r in reps]
    if jobs is None or jobs < 1:
        raise ConfigError("jobs must be >= 1")
    if jobs == 1 or len(reps) < 2:
        results = _run_chunk((cfg, reps))
    else:
        size = max(1, math.ceil(len(reps) / (jobs * 4)))
        chunks = [(cfg, reps[i:i + size]) for i in range(0, len(reps), size)]
        results = []
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for part in pool.map(_run_chunk, chunks):
                results.extend(part)
    results.sort(key=lambda t: t[0])
    estimates, failures = {}, {}
    for method in cfg.methods:
        ok = [r[method] for _, r in results if r[method] is not None]
        failures[method] = len(results) - len(ok)
        estimates[method] = np.array(ok).reshape(len(ok), 5)
        if not ok:
            logger.warning("method %s failed in every replication", method)
    return McReport(cfg, estimates, failures)


def format_table(reports: Sequence[McReport], title: str = "") -> str:
    """Text table in the layout of the published tables (MSE scaled by 1e3)."""
    blocks = [f"m={r.config.m}" for r in reports]
    head1 = f"{'':10s} {'':6s} " + " ".join(f"{b:^27s}" for b in blocks)
    head2 = f"{'Parameter':10s} {'Method':6s} " + " ".join(
        f"{'MSE(1e-3)':>10s} {'Mean':>7s} {'SD':>7s} " for _ in reports)
    lines = ([title] if title else []) + [head1, head2, "-" * len(head2)]
    methods = reports[0].config.methods
    for k, name in enumerate(PARAMETERS):
        for j, method in enumerate(methods):
            label = name if j == 0 else ""
            cells = []
            for r in reports:
                if r.feasible(method):
                    cells.append(f"{1e3 * r.mse(method)[k]:10.3f} {r.mean(method)[k]:7.3f} "
                                 f"{r.sd(method)[k]:7.3f} ")
                else:
                    cells.append(f"{'infeasible':>26s} ")
            lines.append(f"{label:10s} {method:6s} " + " ".join(cells))
    fails = []
    for r in reports:
        for method in methods:
            if r.failures[method]:
                fails.append(f"m={r.config.m} {method}: {r.failures[method]} failed")
    if fails:
        lines.append("Failed replications: " + "; ".join(fails))
    return "\n".join(lines) + "\n"
