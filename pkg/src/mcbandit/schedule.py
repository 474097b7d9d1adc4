"""Two-phase exploration / step-size schedules and the epsilon-greedy policy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from functools import cached_property
from typing import Optional, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid or inconsistent bandit configuration."""


@dataclass
class BanditConfig:
    """Dimensions and schedule constants of one bandit run.

    Phase one (``t <= phase1_len_T0``) uses the constant exploration
    probability ``epsilon_phase1`` and step ``eta_phase1``.  Phase two uses
    ``eps_t = min(epsilon_phase1, c2 * t**-gamma)`` and ``eta_t = eps_t * eta_phase1``.
    ``eta_phase1`` already carries the ``d1 * d2`` factor of the loss.
    """

    d1: int
    d2: int
    r: int
    k_arms: int
    horizon_T: int
    phase1_len_T0: int
    gamma: float
    epsilon_phase1: float
    c2: float
    eta_phase1: float
    seed: int = 0
    sampling_weights: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if min(self.d1, self.d2) < 1 or not 1 <= self.r <= min(self.d1, self.d2):
            raise ConfigError(f"bad dimensions d1={self.d1}, d2={self.d2}, r={self.r}")
        if self.k_arms < 2:
            raise ConfigError("k_arms must be at least 2")
        if self.horizon_T < 1 or not 0 <= self.phase1_len_T0 < self.horizon_T:
            raise ConfigError(
                f"need 0 <= T0 < T, got T0={self.phase1_len_T0}, T={self.horizon_T}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 < self.epsilon_phase1 <= 1.0:
            raise ConfigError(f"epsilon_phase1 must lie in (0, 1], got {self.epsilon_phase1}")
        if not self.c2 > 0:
            raise ConfigError(f"c2 must be positive, got {self.c2}")
        if not self.eta_phase1 >= 0:
            raise ConfigError(f"eta_phase1 must be nonnegative, got {self.eta_phase1}")
        if self.sampling_weights is not None:
            w = np.asarray(self.sampling_weights, dtype=float)
            if w.shape != (self.d1, self.d2):
                raise ConfigError(f"sampling_weights has shape {w.shape}")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError("sampling_weights must be nonnegative and sum to 1")
            self.sampling_weights = w

    @cached_property
    def _request_cdf(self) -> np.ndarray:
        cdf = np.cumsum(self.sampling_weights.ravel())
        return cdf / cdf[-1]

    def request_prob(self, j1: int, j2: int) -> float:
        if self.sampling_weights is None:
            return 1.0 / (self.d1 * self.d2)
        return float(self.sampling_weights[j1, j2])

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "sampling_weights"}
        if self.sampling_weights is not None:
            out["sampling_weights"] = self.sampling_weights.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "BanditConfig":
        data = dict(data)
        if data.get("sampling_weights") is not None:
            data["sampling_weights"] = np.asarray(data["sampling_weights"], dtype=float)
        return cls(**data)


@dataclass(frozen=True)
class PropensityVector:
    probs: np.ndarray
    greedy_arm: int

    def __getitem__(self, arm: int) -> float:
        return float(self.probs[arm])


def epsilon_at(config: BanditConfig, t: int) -> float:
    if not 1 <= t <= config.horizon_T:
        raise ValueError(f"time step {t} outside [1, {config.horizon_T}]")
    if t <= config.phase1_len_T0:
        return config.epsilon_phase1
    return min(config.epsilon_phase1, config.c2 * t ** (-config.gamma))


def eta_at(config: BanditConfig, t: int) -> float:
    if t <= config.phase1_len_T0:
        if t < 1:
            raise ValueError(f"time step {t} outside [1, {config.horizon_T}]")
        return config.eta_phase1
    return epsilon_at(config, t) * config.eta_phase1


def default_step_size(d1: int, d2: int, horizon: int, gamma: float, lambda_max: float,
                      c1: float = 0.025) -> float:
    """Phase-one step ``c1 * d1 * d2 * log(d1) / (T**(1 - gamma) * lambda_max)``."""
    return c1 * d1 * d2 * math.log(d1) / (horizon ** (1.0 - gamma) * lambda_max)


def greedy_arm(predictions: Sequence[float]) -> int:
    """Index of the largest prediction; ties go to the lowest index."""
    best = 0
    for a in range(1, len(predictions)):
        if predictions[a] > predictions[best]:
            best = a
    return best


def propensities_from_predictions(predictions: Sequence[float], eps: float) -> PropensityVector:
    k = len(predictions)
    best = greedy_arm(predictions)
    probs = [eps / k] * k
    probs[best] = (1.0 - eps) + eps / k
    return PropensityVector(np.array(probs), best)


def propensities(estimates, x: tuple[int, int], eps: float) -> PropensityVector:
    """Epsilon-greedy action probabilities at request ``x`` given K FactorPairs."""
    if not 0.0 < eps <= 1.0:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    j1, j2 = x
    return propensities_from_predictions([p.entry(j1, j2) for p in estimates], eps)


def sample_action(pv: PropensityVector, rng: np.random.Generator) -> int:
    u = rng.random()
    probs = pv.probs
    arm = 0
    acc = probs[0]
    last = len(probs) - 1
    while u >= acc and arm < last:
        arm += 1
        acc += probs[arm]
    return arm


def sample_request(config: BanditConfig, rng: np.random.Generator) -> tuple[int, int]:
    if config.sampling_weights is None:
        flat = int(rng.integers(config.d1 * config.d2))
    else:
        cdf = config._request_cdf
        flat = min(int(np.searchsorted(cdf, rng.random(), side="right")), cdf.size - 1)
    return divmod(flat, config.d2)
