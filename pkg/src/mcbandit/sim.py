"""Synthetic matrix-completion bandit environments and Monte Carlo studies."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .inference import DebiasState, IllPosedFormError, InferenceContext, LinearForm, debias_accumulate
from .learner import (
    LearnerState,
    estimation_errors,
    init_from_matrices,
    make_record,
    sgd_step,
    soft_impute_init,
)
from .lowrank import ThinSvd, rank_r_project
from .schedule import BanditConfig, ConfigError, default_step_size, sample_request


@dataclass(frozen=True)
class GroundTruth:
    matrices: np.ndarray  # (K, d1, d2)
    sigmas: np.ndarray
    svds: tuple[ThinSvd, ...]
    noise: str = "gaussian"

    @property
    def k_arms(self) -> int:
        return self.matrices.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrices.shape[1], self.matrices.shape[2]

    @property
    def lambda_max(self) -> float:
        return max(s.lambda_max for s in self.svds)

    @property
    def lambda_min(self) -> float:
        return min(s.lambda_min for s in self.svds)

    def best_arm(self) -> np.ndarray:
        return np.argmax(self.matrices, axis=0)


def make_truth(matrices: Sequence[np.ndarray], r: int, sigmas=1.0, noise: str = "gaussian") -> GroundTruth:
    mats = np.stack([np.asarray(m, dtype=float) for m in matrices])
    sig = np.broadcast_to(np.asarray(sigmas, dtype=float), (mats.shape[0],)).copy()
    if noise not in ("gaussian", "uniform"):
        raise ValueError(f"unknown noise family {noise!r}")
    svds = tuple(rank_r_project(m, r)[1] for m in mats)
    return GroundTruth(mats, sig, svds, noise)


def generate_truth(d1: int, d2: int, r: int, k_arms: int, perturbation_scale: float,
                   rng: np.random.Generator, sigmas=1.0, entry_scale: float = 100.0,
                   noise: str = "gaussian") -> GroundTruth:
    """Rank-``r`` arm matrices from a uniform random generator matrix.

    The last arm is the rank-``r`` truncation of a ``U(-entry_scale, entry_scale)``
    matrix; every other arm truncates the generator plus an independent
    ``U(-perturbation_scale, perturbation_scale)`` perturbation.
    """
    base = rng.uniform(-entry_scale, entry_scale, size=(d1, d2))
    mats = []
    for _ in range(k_arms - 1):
        noise_mat = rng.uniform(-perturbation_scale, perturbation_scale, size=(d1, d2))
        mats.append(rank_r_project(base + noise_mat, r)[0])
    mats.append(rank_r_project(base, r)[0])
    return make_truth(mats, r, sigmas, noise)


def reward(truth: GroundTruth, x: tuple[int, int], arm: int, rng: np.random.Generator) -> float:
    mean = truth.matrices[arm, x[0], x[1]]
    sigma = truth.sigmas[arm]
    if truth.noise == "gaussian":
        return float(mean + sigma * rng.standard_normal())
    half = math.sqrt(3.0) * sigma
    return float(mean + rng.uniform(-half, half))


def omega_empty_mass(truth: GroundTruth, delta: float) -> float:
    """Fraction of cells whose best arm beats the runner-up by no more than ``delta``."""
    top2 = np.sort(truth.matrices, axis=0)[-2:]
    return float(np.mean(top2[1] - top2[0] <= delta))


# --- single episode ----------------------------------------------------------------------

@dataclass(frozen=True)
class InitSettings:
    """How the learner is initialised before the online loop.

    ``method`` is ``"soft_impute"`` (forced sampling then Soft-Impute),
    ``"truth"`` or ``"truth_noise"`` (truth plus i.i.d. Gaussian noise of SD
    ``noise_sd``).  ``n_init`` is the total forced-sampling budget, split
    evenly over arms; ``None`` means ``10 r (d1 + d2) log d1``.
    """

    method: str = "soft_impute"
    n_init: Optional[int] = None
    noise_sd: float = 0.0
    lambdas: Optional[tuple] = None

    def budget(self, config: BanditConfig) -> int:
        if self.n_init is not None:
            return self.n_init
        return int(round(10 * config.r * (config.d1 + config.d2) * math.log(config.d1)))


def initial_estimates(truth: GroundTruth, config: BanditConfig, init: InitSettings,
                      rng: np.random.Generator) -> list[np.ndarray]:
    if init.method == "truth":
        return [m.copy() for m in truth.matrices]
    if init.method == "truth_noise":
        return [m + init.noise_sd * rng.standard_normal(m.shape) for m in truth.matrices]
    if init.method != "soft_impute":
        raise ConfigError(f"unknown init method {init.method!r}")
    per_arm = init.budget(config) // config.k_arms
    obs = []
    for arm in range(config.k_arms):
        cells = rng.integers(config.d1 * config.d2, size=per_arm)
        for flat in cells:
            x = divmod(int(flat), config.d2)
            obs.append((x, arm, reward(truth, x, arm, rng)))
    return soft_impute_init(obs, config.d1, config.d2, config.k_arms, config.r, init.lambdas)


@dataclass
class RegretLedger:
    instantaneous: np.ndarray
    pulls: np.ndarray  # pulls[a, k]: arm a pulled on a cell whose true best arm is k

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.instantaneous)

    @property
    def total(self) -> float:
        return float(self.instantaneous.sum())


@dataclass
class ExperimentResult:
    state: LearnerState
    debias: Optional[DebiasState]
    ledger: RegretLedger
    init_errors: list
    final_errors: list
    phase_counts: tuple[int, int]
    records: Optional[list] = None


def run_experiment(truth: GroundTruth, config: BanditConfig, rng: np.random.Generator,
                   debias: bool = True, init: InitSettings = InitSettings(),
                   keep_records: bool = False) -> ExperimentResult:
    """One seeded episode: initialisation, the two-phase online loop, exact regret accounting."""
    if truth.k_arms != config.k_arms or truth.shape != (config.d1, config.d2):
        raise ConfigError("ground truth does not match the config dimensions")
    init_mats = initial_estimates(truth, config, init, rng)
    state = init_from_matrices(init_mats, config.r, config)
    init_errors = estimation_errors(state, truth.matrices)
    db = DebiasState.for_config(config) if debias else None

    means = truth.matrices
    best = means.max(axis=0)
    best_arm = truth.best_arm()
    inst = np.empty(config.horizon_T)
    pulls = np.zeros((config.k_arms, config.k_arms), dtype=np.int64)
    records = [] if keep_records else None
    t0 = config.phase1_len_T0
    source = lambda x, a, g: reward(truth, x, a, g)  # noqa: E731

    for t in range(1, config.horizon_T + 1):
        x = sample_request(config, rng)
        rec = make_record(state, x, rng, source)
        j1, j2 = x
        inst[t - 1] = best[j1, j2] - means[rec.action, j1, j2]
        pulls[rec.action, best_arm[j1, j2]] += 1
        if db is not None and t > t0:
            debias_accumulate(db, state, rec)
        state = sgd_step(state, rec)
        if records is not None:
            records.append(rec)

    return ExperimentResult(
        state=state,
        debias=db,
        ledger=RegretLedger(inst, pulls),
        init_errors=init_errors,
        final_errors=estimation_errors(state, truth.matrices),
        phase_counts=(t0, config.horizon_T - t0),
        records=records,
    )


# --- schedule recipes --------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleRecipe:
    """Horizon-dependent schedule: ``T0 = t0_scale * T**(1-gamma)`` and the default step size."""

    gamma: float
    epsilon: float
    c1: float
    c2: float
    t0_scale: float
    r: int = 2

    def config(self, truth: GroundTruth, horizon: int, seed: int = 0) -> BanditConfig:
        d1, d2 = truth.shape
        t0 = int(round(self.t0_scale * horizon ** (1.0 - self.gamma)))
        eta = default_step_size(d1, d2, horizon, self.gamma, truth.lambda_max, self.c1)
        return BanditConfig(d1=d1, d2=d2, r=self.r, k_arms=truth.k_arms, horizon_T=horizon,
                            phase1_len_T0=t0, gamma=self.gamma, epsilon_phase1=self.epsilon,
                            c2=self.c2, eta_phase1=eta, seed=seed)


# desk-scale instance: d1 = d2 = 60, r = 2, two arms, T0 = 6000 at T = 20000
DESK_HORIZON = 20000
DESK_RECIPE = ScheduleRecipe(gamma=1.0 / 3.0, epsilon=0.6, c1=0.025, c2=10.0,
                             t0_scale=6000 / DESK_HORIZON ** (2.0 / 3.0))


def desk_truth(seed: int = 1, d: int = 60, sigma: float = 1.0) -> GroundTruth:
    return generate_truth(d, d, 2, 2, 2.0, np.random.default_rng(seed), sigmas=sigma)


def trial_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _map(fn: Callable, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


# --- normality / coverage study ----------------------------------------------------------

@dataclass(frozen=True)
class FormSpec:
    name: str
    q: LinearForm
    mode: object  # arm index or (g, h)

    def truth_value(self, truth: GroundTruth) -> float:
        if isinstance(self.mode, (int, np.integer)):
            return self.q.apply(truth.matrices[self.mode])
        g, h = self.mode
        return self.q.apply(truth.matrices[g]) - self.q.apply(truth.matrices[h])


def benchmark_forms(d1: int, d2: int) -> list[FormSpec]:
    """The four linear forms of the two-arm normality experiment (0-based indices)."""
    e15 = LinearForm.cell(0, 4, d1, d2)
    mixed = LinearForm((((0, 4), 1.0), ((1, 1), -1.0)), d1, d2)
    return [
        FormSpec("M1[e1e5]", e15, 1),
        FormSpec("M0[e1e5]", e15, 0),
        FormSpec("M0-M1[e1e5]", e15, (0, 1)),
        FormSpec("M0[e1e5-e2e2]", mixed, 0),
    ]


def _normality_trial(job) -> dict:
    truth, config, forms, init, seed, trial, alpha = job
    res = run_experiment(truth, config, trial_rng(seed, trial), debias=True, init=init)
    ctx = InferenceContext(res.debias, res.state.arms, config)
    row = {
        "trial": trial,
        "sigma_sq": [float(s) for s in ctx.sigma_sq],
        "regret": res.ledger.total,
        "final_fro_sq": [e[0] for e in res.final_errors],
        "forms": [],
    }
    for spec in forms:
        target = spec.truth_value(truth)
        try:
            rep = ctx.infer(spec.q, spec.mode, alpha, spec.name)
            z = (rep.estimate - target) / rep.std_error
            row["forms"].append({
                "form": spec.name, "truth": target, "estimate": rep.estimate,
                "std_error": rep.std_error, "studentized": z,
                "covered": bool(rep.ci_low <= target <= rep.ci_high), "ill_posed": False,
            })
        except IllPosedFormError as err:
            row["forms"].append({
                "form": spec.name, "truth": target, "estimate": err.report.estimate,
                "std_error": 0.0, "studentized": float("nan"), "covered": False, "ill_posed": True,
            })
    return row


@dataclass
class NormalityResult:
    rows: list  # one dict per (trial, form)
    summary: dict  # form name -> statistics
    sigma_sq: np.ndarray  # (trials, K)


def normality_study(truth: GroundTruth, config: BanditConfig, forms: Sequence[FormSpec],
                    trials: int, seed: int, workers: int = 1, init: InitSettings = InitSettings(),
                    alpha: float = 0.05) -> NormalityResult:
    """Repeat full episodes and studentize each linear form against the known truth."""
    jobs = [(truth, config, list(forms), init, seed, i, alpha) for i in range(trials)]
    per_trial = _map(_normality_trial, jobs, workers)
    rows = []
    for tr in per_trial:
        for f in tr["forms"]:
            rows.append({"trial": tr["trial"], **f})
    summary = {}
    for spec in forms:
        sel = [r for r in rows if r["form"] == spec.name]
        z = np.array([r["studentized"] for r in sel if not r["ill_posed"]])
        entry = {
            "trials": len(sel),
            "ill_posed": sum(r["ill_posed"] for r in sel),
            "coverage": float(np.mean([r["covered"] for r in sel])) if sel else float("nan"),
        }
        if z.size:
            ks = stats.kstest(z, "norm")
            entry.update(ks_statistic=float(ks.statistic), ks_pvalue=float(ks.pvalue),
                         mean=float(z.mean()), sd=float(z.std(ddof=1)) if z.size > 1 else float("nan"))
        else:
            entry.update(ks_statistic=float("nan"), ks_pvalue=float("nan"),
                         mean=float("nan"), sd=float("nan"))
        summary[spec.name] = entry
    sigma_sq = np.array([tr["sigma_sq"] for tr in per_trial])
    return NormalityResult(rows, summary, sigma_sq)


# --- regret scaling ----------------------------------------------------------------------

def _regret_trial(job) -> float:
    truth, recipe, horizon, init, seed, trial = job
    config = recipe.config(truth, horizon, seed)
    res = run_experiment(truth, config, trial_rng(seed, horizon, trial), debias=False, init=init)
    return res.ledger.total


@dataclass
class RegretStudyResult:
    rows: list  # (T, trial, cumulative regret)
    table: list  # per-T summary dicts
    fit: dict


def regret_scaling_study(truth: GroundTruth, recipe: ScheduleRecipe, horizons: Sequence[int],
                         trials: int, seed: int, workers: int = 1,
                         init: InitSettings = InitSettings()) -> RegretStudyResult:
    """Mean cumulative regret per horizon, regressed on ``T**(1 - gamma)``."""
    jobs = [(truth, recipe, int(h), init, seed, i) for h in horizons for i in range(trials)]
    totals = _map(_regret_trial, jobs, workers)
    rows = [(job[2], job[5], tot) for job, tot in zip(jobs, totals)]
    exponent = 1.0 - recipe.gamma
    table = []
    for h in horizons:
        vals = np.array([tot for (hh, _, tot) in rows if hh == h])
        table.append({
            "T": int(h),
            "T_pow": float(h ** exponent),
            "mean_regret": float(vals.mean()),
            "se_regret": float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0,
        })
    x = np.array([row["T_pow"] for row in table])
    y = np.array([row["mean_regret"] for row in table])
    fit = {"exponent": exponent}
    if len(x) >= 2:
        lr = stats.linregress(x, y)
        fit.update(slope=float(lr.slope), intercept=float(lr.intercept), r_squared=float(lr.rvalue ** 2))
    fit["ratio_last_first"] = float(y[-1] / y[0]) if y[0] != 0 else float("nan")
    fit["ratio_reference"] = float((horizons[-1] / horizons[0]) ** exponent)
    return RegretStudyResult(rows, table, fit)


# --- error decay --------------------------------------------------------------------------

def _decay_trial(job) -> tuple:
    truth, recipe, horizons, init, seed, trial = job
    out = []
    for h in horizons:
        config = recipe.config(truth, h, seed)
        res = run_experiment(truth, config, trial_rng(seed, trial), debias=False, init=init)
        out.append(sum(e[0] for e in res.final_errors))
    return tuple(out)


def error_decay_study(truth: GroundTruth, recipe: ScheduleRecipe, horizon: int, factor: int,
                      trials: int, seed: int, workers: int = 1,
                      init: InitSettings = InitSettings()) -> dict:
    """Paired runs at ``T`` and ``factor * T`` sharing seed and initialisation."""
    horizons = (horizon, factor * horizon)
    jobs = [(truth, recipe, horizons, init, seed, i) for i in range(trials)]
    pairs = np.array(_map(_decay_trial, jobs, workers))
    ratios = pairs[:, 1] / pairs[:, 0]
    return {
        "horizons": list(horizons),
        "errors": pairs.tolist(),
        "ratios": ratios.tolist(),
        "median_ratio": float(np.median(ratios)),
        "reference": float(factor ** -(1.0 - recipe.gamma)),
    }
