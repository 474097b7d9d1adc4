"""Online IPW debiasing and studentized inference for linear forms of the arm matrices."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import norm

from . import _kernels
from .learner import LearnerState, StepRecord
from .lowrank import FactorPair, ThinSvd, rank_r_project, tangent_project
from .schedule import BanditConfig

REPORT_SCHEMA = "mcbandit.inference_report/1"
ILL_POSED_RTOL = 1e-10


class IllPosedFormError(ArithmeticError):
    """The linear form has (numerically) zero estimated standard error.

    ``report`` carries the point estimate and variance components.
    """

    def __init__(self, message: str, report: "InferenceReport"):
        super().__init__(message)
        self.report = report


@dataclass
class DebiasState:
    """Streaming sums for the phase-two IPW estimator of every arm.

    The running sum of past estimates is kept lazily: ``cache`` holds the
    current product, ``stamp`` the step index since which each cached entry
    has been unchanged, and ``mean_sum`` everything credited before that.
    """

    k_arms: int
    d1: int
    d2: int
    t0: int
    mean_sum: np.ndarray = None
    cache: np.ndarray = None
    stamp: np.ndarray = None
    ipw_sum: np.ndarray = None
    sigma_sq_sum: np.ndarray = None
    n_phase2: int = 0
    t_final: int = 0
    pending: Optional[tuple[int, int, int]] = None
    pulls: np.ndarray = None
    _pending_pair: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        shape = (self.k_arms, self.d1, self.d2)
        if self.mean_sum is None:
            self.mean_sum = np.zeros(shape)
            self.cache = np.zeros(shape)
            self.stamp = np.zeros(shape, dtype=np.int64)
            self.ipw_sum = np.zeros(shape)
            self.sigma_sq_sum = np.zeros(self.k_arms)
            self.pulls = np.zeros(self.k_arms, dtype=np.int64)
        if self.t_final == 0:
            self.t_final = self.t0

    @classmethod
    def for_config(cls, config: BanditConfig) -> "DebiasState":
        return cls(config.k_arms, config.d1, config.d2, config.phase1_len_T0)


def debias_accumulate(db: DebiasState, state_before: LearnerState, rec: StepRecord) -> DebiasState:
    """Fold one phase-two step into ``db`` (in place; ``db`` is returned).

    ``state_before`` must be the learner state at step ``rec.t - 1``.
    """
    if rec.t <= db.t0:
        raise ValueError(f"step {rec.t} is in phase one (T0={db.t0})")
    if rec.t != db.t_final + 1:
        raise ValueError(f"expected step {db.t_final + 1}, got {rec.t}")
    if state_before.t != rec.t - 1:
        raise ValueError("state_before must be the estimate from the previous step")
    now = rec.t - 1
    if db.n_phase2 == 0:
        for a, pair in enumerate(state_before.arms):
            db.cache[a] = pair.product()
        db.stamp[:] = now
    elif db.pending is not None:
        arm, j1, j2 = db.pending
        pair = state_before.arms[arm]
        # an untouched factor object means the cached product is still current
        if pair is not db._pending_pair:
            _kernels.patch_running_sum(db.mean_sum[arm], db.cache[arm], db.stamp[arm],
                                       pair.u, pair.v, j1, j2, now)
    j1, j2 = rec.x
    a = rec.action
    pi = rec.propensity
    residual = rec.reward - state_before.arms[a].entry(j1, j2)
    config = state_before.config
    db.ipw_sum[a, j1, j2] += residual / (pi * config.request_prob(j1, j2))
    db.sigma_sq_sum[a] += residual * residual / pi
    db.pulls[a] += 1
    db.pending = (a, j1, j2)
    db._pending_pair = state_before.arms[a]
    db.n_phase2 += 1
    db.t_final = rec.t
    return db


def mean_estimates(db: DebiasState) -> np.ndarray:
    """Average of the estimates ``M_{t-1}`` over the accumulated steps, shape (K, d1, d2)."""
    if db.n_phase2 == 0:
        raise ValueError("no phase-two steps accumulated")
    total = db.mean_sum + db.cache * (db.t_final - db.stamp)
    return total / db.n_phase2


def finalize_ipw(db: DebiasState) -> list[np.ndarray]:
    mean = mean_estimates(db)
    return [mean[a] + db.ipw_sum[a] / db.n_phase2 for a in range(db.k_arms)]


def estimate_sigma_sq(db: DebiasState, arm: int) -> float:
    if db.n_phase2 == 0:
        raise ValueError("no phase-two steps accumulated")
    return float(db.sigma_sq_sum[arm] / db.n_phase2)


@dataclass(frozen=True)
class LinearForm:
    """Sparse matrix ``Q`` given as ``((j1, j2), coefficient)`` entries."""

    entries: tuple
    d1: int
    d2: int

    def __post_init__(self):
        clean = []
        for (j1, j2), c in self.entries:
            if not (0 <= j1 < self.d1 and 0 <= j2 < self.d2):
                raise IndexError(f"entry ({j1}, {j2}) outside {self.d1}x{self.d2}")
            if not math.isfinite(c):
                raise ValueError(f"non-finite coefficient at ({j1}, {j2})")
            clean.append(((int(j1), int(j2)), float(c)))
        object.__setattr__(self, "entries", tuple(clean))

    @classmethod
    def cell(cls, j1: int, j2: int, d1: int, d2: int) -> "LinearForm":
        return cls((((j1, j2), 1.0),), d1, d2)

    @property
    def l1_norm(self) -> float:
        return float(np.abs(self.dense()).sum())

    def dense(self) -> np.ndarray:
        q = np.zeros((self.d1, self.d2))
        for (j1, j2), c in self.entries:
            q[j1, j2] += c
        return q

    def apply(self, m: np.ndarray) -> float:
        return float(sum(c * m[j1, j2] for (j1, j2), c in self.entries))


def omega_hat(final_estimates: Sequence[FactorPair]) -> np.ndarray:
    """Label matrix assigning each cell to its argmax arm (ties to the lowest index)."""
    stacked = np.stack([p.product() for p in final_estimates])
    return np.argmax(stacked, axis=0)


def c_gamma(k_arms: int, c2: float, gamma: float) -> float:
    if not c2 > 0:
        raise ValueError(f"c2 must be positive, got {c2}")
    return k_arms / (c2 * (1.0 + gamma))


def estimate_S_sq(q: LinearForm, svds: Sequence[ThinSvd], labels: np.ndarray,
                  config: BanditConfig, horizon: int, t0: int) -> np.ndarray:
    """Per-arm variance factor of ``<M_hat_a, Q>`` from the projected estimates."""
    k = len(svds)
    cg = c_gamma(k, config.c2, config.gamma)
    b_t = horizon / (horizon - t0)
    qd = q.dense()
    if config.sampling_weights is not None:
        cell_weight = 1.0 / (config.sampling_weights * config.d1 * config.d2)
    else:
        cell_weight = None
    out = np.empty(k)
    for a, svd in enumerate(svds):
        pq2 = tangent_project(qd, svd) ** 2
        if cell_weight is not None:
            pq2 = pq2 * cell_weight
        mass = np.bincount(labels.ravel(), weights=pq2.ravel(), minlength=k)
        out[a] = (horizon ** -config.gamma * mass[a] + cg * (mass.sum() - mass[a])) * b_t
    return out


Mode = Union[int, tuple[int, int]]


@dataclass
class InferenceReport:
    form: str
    mode: str
    estimate: float
    std_error: float
    ci_low: float
    ci_high: float
    z_stat: float
    p_value: float
    p_value_greater: float
    p_value_less: float
    alpha: float
    components: dict = field(default_factory=dict)
    schema: str = REPORT_SCHEMA

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj))


class InferenceContext:
    """Debiased, rank-projected estimates plus everything needed to studentize a form."""

    def __init__(self, db: DebiasState, final_estimates: Sequence[FactorPair], config: BanditConfig):
        if db.n_phase2 == 0:
            raise ValueError("no phase-two steps accumulated")
        self.config = config
        self.horizon = db.t_final
        self.t0 = db.t0
        ipw = finalize_ipw(db)
        projected = [rank_r_project(m, config.r) for m in ipw]
        self.estimates = [p[0] for p in projected]
        self.svds = [p[1] for p in projected]
        self.sigma_sq = np.array([estimate_sigma_sq(db, a) for a in range(db.k_arms)])
        self.labels = omega_hat(final_estimates)
        self.omega_sizes = np.bincount(self.labels.ravel(), minlength=db.k_arms)
        self.b_t = self.horizon / (self.horizon - self.t0)

    def scale(self) -> float:
        """``d1 * d2 / T**(1 - gamma)``; non-uniform request weights live in S^2."""
        c = self.config
        return c.d1 * c.d2 / self.horizon ** (1.0 - c.gamma)

    def infer(self, q: LinearForm, mode: Mode, alpha: float = 0.05, name: str = "") -> InferenceReport:
        arms = (mode,) if isinstance(mode, (int, np.integer)) else tuple(mode)
        if len(arms) not in (1, 2) or any(not 0 <= a < self.config.k_arms for a in arms):
            raise ValueError(f"bad mode {mode!r}")
        s_sq = estimate_S_sq(q, self.svds, self.labels, self.config, self.horizon, self.t0)
        var_terms = {a: float(self.sigma_sq[a] * s_sq[a]) for a in arms}
        if len(arms) == 1:
            estimate = q.apply(self.estimates[arms[0]])
            variance = var_terms[arms[0]] * self.scale()
            mode_str = f"arm:{arms[0]}"
        else:
            g, h = arms
            estimate = q.apply(self.estimates[g]) - q.apply(self.estimates[h])
            # the two IPW sums share no step, so variances add
            variance = (var_terms[g] + var_terms[h]) * self.scale()
            mode_str = f"diff:{g}-{h}"
        se = math.sqrt(variance)
        components = {
            "sigma_sq": {str(a): float(self.sigma_sq[a]) for a in arms},
            "S_sq": {str(a): float(s_sq[a]) for a in arms},
            "variance_terms": {str(a): var_terms[a] for a in arms},
            "omega_sizes": [int(n) for n in self.omega_sizes],
            "b_T": self.b_t,
            "T": self.horizon,
            "T0": self.t0,
            "l1_norm_Q": q.l1_norm,
        }
        zq = norm.ppf(1 - alpha / 2)
        # below this the standard error is rounding noise from exact residuals
        entry_scale = max(float(np.max(np.abs(self.estimates[a]))) for a in arms)
        se_floor = ILL_POSED_RTOL * max(1.0, entry_scale) * q.l1_norm
        components["se_floor"] = se_floor
        components["raw_std_error"] = se
        if se <= se_floor:
            nan = float("nan")
            report = InferenceReport(name, mode_str, estimate, 0.0, estimate, estimate,
                                     nan, nan, nan, nan, alpha, components)
            raise IllPosedFormError(f"zero standard error for form {name or q.entries!r}", report)
        z = estimate / se
        return InferenceReport(
            form=name,
            mode=mode_str,
            estimate=estimate,
            std_error=se,
            ci_low=estimate - zq * se,
            ci_high=estimate + zq * se,
            z_stat=z,
            p_value=float(2 * norm.sf(abs(z))),
            p_value_greater=float(norm.sf(z)),
            p_value_less=float(norm.cdf(z)),
            alpha=alpha,
            components=components,
        )


def infer_linear_form(db: DebiasState, final_estimates: Sequence[FactorPair], q: LinearForm,
                      config: BanditConfig, mode: Mode, alpha: float = 0.05) -> InferenceReport:
    return InferenceContext(db, final_estimates, config).infer(q, mode, alpha)
