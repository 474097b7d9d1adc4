"""Online epsilon-greedy learner with IPW-weighted gradient steps on balanced factors."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import _kernels
from .lowrank import FactorPair, balanced_factorize, truncated_svd
from .schedule import (
    BanditConfig,
    PropensityVector,
    epsilon_at,
    eta_at,
    propensities,
    sample_action,
    sample_request,
)

RewardSource = Callable[[tuple, int, np.random.Generator], float]


@dataclass(frozen=True)
class LearnerDiagnostics:
    max_incoherence: float = 0.0
    degenerate_rebalances: int = 0


@dataclass(frozen=True)
class StepRecord:
    t: int
    x: tuple[int, int]
    propensities: PropensityVector
    action: int
    reward: float
    phase: int

    @property
    def propensity(self) -> float:
        """Probability of the action actually taken."""
        return float(self.propensities.probs[self.action])


@dataclass(frozen=True)
class LearnerState:
    arms: tuple[FactorPair, ...]
    t: int
    config: BanditConfig
    diagnostics: LearnerDiagnostics = field(default_factory=LearnerDiagnostics)

    def estimates(self) -> list[np.ndarray]:
        return [p.product() for p in self.arms]

    def predictions(self, j1: int, j2: int) -> list[float]:
        return [p.entry(j1, j2) for p in self.arms]


def _check_matrices(mats: Sequence[np.ndarray], config: BanditConfig) -> None:
    if len(mats) != config.k_arms:
        raise ValueError(f"expected {config.k_arms} matrices, got {len(mats)}")
    for m in mats:
        if np.shape(m) != (config.d1, config.d2):
            raise ValueError(f"matrix shape {np.shape(m)} does not match ({config.d1}, {config.d2})")


def init_from_matrices(init_estimates: Sequence[np.ndarray], r: int,
                       config: BanditConfig) -> LearnerState:
    _check_matrices(init_estimates, config)
    arms = tuple(balanced_factorize(m, r) for m in init_estimates)
    for a, pair in enumerate(arms):
        if not np.any(pair.u) or not np.any(pair.v):
            warnings.warn(f"arm {a} starts from zero factors; its gradient is identically zero",
                          RuntimeWarning, stacklevel=2)
    mu = max(_pair_incoherence(p) for p in arms)
    return LearnerState(arms, 0, config, LearnerDiagnostics(max_incoherence=mu))


def _pair_incoherence(pair: FactorPair) -> float:
    d = np.einsum("ij,ij->j", pair.u, pair.u)
    return float(_kernels.factor_incoherence(pair.u, pair.v, d))


def step_weight(config: BanditConfig, x: tuple[int, int], propensity: float) -> float:
    """Loss weight ``1 / (pi * p_X * d1 * d2)``; equals ``1 / pi`` under uniform requests."""
    if config.sampling_weights is None:
        return 1.0 / propensity
    return 1.0 / (propensity * config.request_prob(*x) * config.d1 * config.d2)


def sgd_step(state: LearnerState, rec: StepRecord) -> LearnerState:
    """Apply one gradient step to the acting arm; other arms are passed through untouched."""
    if rec.t != state.t + 1:
        raise ValueError(f"record for step {rec.t} applied to state at step {state.t}")
    if rec.t > state.config.horizon_T:
        raise ValueError(f"step {rec.t} beyond horizon {state.config.horizon_T}")
    if not math.isfinite(rec.reward):
        raise ValueError(f"non-finite reward {rec.reward!r} at step {rec.t}")
    pi = rec.propensity
    if not pi > 0:
        raise ValueError(f"zero propensity for the taken action at step {rec.t}")
    eta = eta_at(state.config, rec.t)
    if eta == 0.0:
        return LearnerState(state.arms, rec.t, state.config, state.diagnostics)
    j1, j2 = rec.x
    pair = state.arms[rec.action]
    residual = pair.entry(j1, j2) - rec.reward
    scale = eta * step_weight(state.config, rec.x, pi) * residual
    if scale == 0.0:
        return LearnerState(state.arms, rec.t, state.config, state.diagnostics)
    u, v, mu, clamped = _kernels.sgd_rebalance(pair.u, pair.v, j1, j2, scale, _kernels.GRAM_FLOOR)
    arms = list(state.arms)
    arms[rec.action] = FactorPair(u, v)
    diag = state.diagnostics
    if mu > diag.max_incoherence or clamped:
        diag = LearnerDiagnostics(max(diag.max_incoherence, mu), diag.degenerate_rebalances + (clamped > 0))
    return LearnerState(tuple(arms), rec.t, state.config, diag)


def phase_of(config: BanditConfig, t: int) -> int:
    return 1 if t <= config.phase1_len_T0 else 2


def make_record(state: LearnerState, x: tuple[int, int], rng: np.random.Generator,
                source: RewardSource) -> StepRecord:
    """Policy decision at the next step for request ``x``, with the reward drawn from ``source``."""
    t = state.t + 1
    eps = epsilon_at(state.config, t)
    pv = propensities(state.arms, x, eps)
    action = sample_action(pv, rng)
    reward = float(source(x, action, rng))
    return StepRecord(t, x, pv, action, reward, phase_of(state.config, t))


def run_round(state: LearnerState, rng: np.random.Generator,
              source: RewardSource) -> tuple[LearnerState, StepRecord]:
    x = sample_request(state.config, rng)
    rec = make_record(state, x, rng, source)
    return sgd_step(state, rec), rec


def estimation_errors(state: LearnerState, truth: Sequence[np.ndarray]) -> list[tuple[float, float]]:
    """Per-arm ``(||M_hat - M||_F^2, ||M_hat - M||_max^2)``."""
    out = []
    for pair, m in zip(state.arms, truth, strict=True):
        diff = pair.product() - m
        out.append((float(np.sum(diff * diff)), float(np.max(np.abs(diff))) ** 2))
    return out


# --- initialisation from forced-sampling data -------------------------------------------

def soft_impute(values: np.ndarray, mask: np.ndarray, lambdas: Optional[Sequence[float]] = None,
                max_iters: int = 100, tol: float = 1e-5, max_rank: Optional[int] = None) -> np.ndarray:
    """Soft-Impute completion (iterated singular-value soft-thresholding).

    ``values`` holds observed entries where ``mask`` is True.  Shrinkage levels
    are visited in decreasing order with warm starts.
    """
    mask = np.asarray(mask, dtype=bool)
    observed = np.where(mask, values, 0.0)
    if lambdas is None:
        top = np.linalg.norm(observed, 2)
        lambdas = np.geomspace(top / 2, top / 50, 6)
    z = np.zeros_like(observed)
    for lam in sorted(lambdas, reverse=True):
        for _ in range(max_iters):
            filled = np.where(mask, observed, z)
            left, s, right_t = np.linalg.svd(filled, full_matrices=False)
            s = np.maximum(s - lam, 0.0)
            if max_rank is not None:
                s[max_rank:] = 0.0
            keep = s > 0
            z_new = (left[:, keep] * s[keep]) @ right_t[keep]
            denom = max(np.sum(z * z), 1e-300)
            change = np.sum((z_new - z) ** 2) / denom
            z = z_new
            if change < tol:
                break
    return z


def soft_impute_init(observations: Iterable, d1: int, d2: int, k_arms: int, r: int,
                     lambdas: Optional[Sequence[float]] = None, max_iters: int = 100,
                     tol: float = 1e-5) -> list[np.ndarray]:
    """Per-arm Soft-Impute estimates from ``((j1, j2), arm, reward)`` observations.

    Duplicate observations of a cell are averaged before completion.
    """
    sums = np.zeros((k_arms, d1, d2))
    counts = np.zeros((k_arms, d1, d2))
    for (j1, j2), arm, reward in observations:
        sums[arm, j1, j2] += reward
        counts[arm, j1, j2] += 1
    out = []
    for a in range(k_arms):
        if not counts[a].any():
            raise ValueError(f"arm {a} has no observations; forced sampling was insufficient")
        mask = counts[a] > 0
        means = np.divide(sums[a], counts[a], out=np.zeros((d1, d2)), where=mask)
        out.append(soft_impute(means, mask, lambdas, max_iters, tol, max_rank=r))
    return out


def estimate_lambda_max(init_estimates: Sequence[np.ndarray]) -> float:
    """Largest top singular value across the initial estimates."""
    return max(truncated_svd(np.asarray(m, dtype=float), 1).lambda_max for m in init_estimates)
