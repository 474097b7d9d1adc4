"""Replay evaluation of the bandit policy on logged ``(request, action, reward)`` data.

A logged record is used only when the policy's own draw agrees with the
logged action; otherwise it is skipped.  Step counts (and hence the phase
boundary ``T0``) are measured in matched records.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .inference import DebiasState, debias_accumulate
from .learner import LearnerState, StepRecord, phase_of, sgd_step
from .schedule import epsilon_at, propensities, sample_action

STATS_SCHEMA = "mcbandit.replay_stats/1"


class LogFormatError(ValueError):
    """Malformed replay log; the message names the offending line."""


@dataclass(frozen=True)
class LogColumns:
    j1: str = "j1"
    j2: str = "j2"
    action: str = "action"
    reward: str = "reward"
    order: Optional[str] = "order"


@dataclass(frozen=True)
class LogRecord:
    j1: int
    j2: int
    logged_action: int
    reward: float
    order: float
    line: int


def ingest_log(path, d1: int, d2: int, k_arms: int, columns: LogColumns = LogColumns(),
               index_base: int = 0) -> list[LogRecord]:
    """Read and validate a CSV log, returned sorted (stably) by the order column."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = [columns.j1, columns.j2, columns.action, columns.reward]
        if columns.order is not None:
            wanted.append(columns.order)
        missing = [c for c in wanted if c not in header]
        if missing:
            raise LogFormatError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            try:
                j1 = int(row[columns.j1]) - index_base
                j2 = int(row[columns.j2]) - index_base
                action = int(row[columns.action])
            except (TypeError, ValueError):
                raise LogFormatError(f"{path}:{line}: non-integer index or action") from None
            try:
                rew = float(row[columns.reward])
                order = float(row[columns.order]) if columns.order is not None else float(len(records))
            except (TypeError, ValueError):
                raise LogFormatError(f"{path}:{line}: non-numeric reward or order key") from None
            if not math.isfinite(rew):
                raise LogFormatError(f"{path}:{line}: non-finite reward")
            if not (0 <= j1 < d1 and 0 <= j2 < d2):
                raise LogFormatError(
                    f"{path}:{line}: index ({j1 + index_base}, {j2 + index_base}) out of range "
                    f"for a {d1}x{d2} grid (index base {index_base})")
            if not 0 <= action < k_arms:
                raise LogFormatError(f"{path}:{line}: action {action} outside [0, {k_arms})")
            records.append(LogRecord(j1, j2, action, rew, order, line))
    records.sort(key=lambda rec: rec.order)
    return records


@dataclass
class ReplayStats:
    total_records: int
    matched: int
    skipped: int
    past_horizon: int
    logged_per_arm: np.ndarray
    matched_per_arm: np.ndarray
    skipped_per_arm: np.ndarray
    matched_lines: list = field(repr=False)
    state: LearnerState = field(repr=False)
    debias: Optional[DebiasState] = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "schema": STATS_SCHEMA,
            "total_records": self.total_records,
            "matched": self.matched,
            "skipped": self.skipped,
            "past_horizon": self.past_horizon,
            "logged_per_arm": self.logged_per_arm.tolist(),
            "matched_per_arm": self.matched_per_arm.tolist(),
            "skipped_per_arm": self.skipped_per_arm.tolist(),
            "final_step": self.state.t,
            "phase2_steps": self.debias.n_phase2 if self.debias is not None else 0,
        }


def replay_run(records: Sequence[LogRecord], state: LearnerState, rng: np.random.Generator,
               debias: bool = True) -> ReplayStats:
    """Strict match-or-skip replay starting from ``state``.

    Records left over once the config horizon is reached are counted as
    skipped (and separately as ``past_horizon``).
    """
    config = state.config
    k = config.k_arms
    db = DebiasState.for_config(config) if debias else None
    logged = np.zeros(k, dtype=np.int64)
    matched = np.zeros(k, dtype=np.int64)
    past_horizon = 0
    lines = []
    for lr in records:
        logged[lr.logged_action] += 1
        if state.t >= config.horizon_T:
            past_horizon += 1
            continue
        t = state.t + 1
        x = (lr.j1, lr.j2)
        pv = propensities(state.arms, x, epsilon_at(config, t))
        if sample_action(pv, rng) != lr.logged_action:
            continue
        rec = StepRecord(t, x, pv, lr.logged_action, lr.reward, phase_of(config, t))
        if db is not None and t > config.phase1_len_T0:
            debias_accumulate(db, state, rec)
        state = sgd_step(state, rec)
        matched[lr.logged_action] += 1
        lines.append(lr.line)
    n_matched = int(matched.sum())
    return ReplayStats(
        total_records=len(records),
        matched=n_matched,
        skipped=len(records) - n_matched,
        past_horizon=past_horizon,
        logged_per_arm=logged,
        matched_per_arm=matched,
        skipped_per_arm=logged - matched,
        matched_lines=lines,
        state=state,
        debias=db,
    )


def target_band_metric(outcomes: Iterable, band: tuple[float, float] = (0.6, 0.8)) -> float:
    """Fraction of outcomes inside the closed interval ``band``.

    Items may be numbers or objects with a ``reward`` attribute.
    """
    lo, hi = band
    if lo > hi:
        raise ValueError(f"empty band {band}")
    vals = np.array([getattr(o, "reward", o) for o in outcomes], dtype=float)
    if vals.size == 0:
        raise ValueError("no outcomes")
    return float(np.count_nonzero((vals >= lo) & (vals <= hi)) / vals.size)
