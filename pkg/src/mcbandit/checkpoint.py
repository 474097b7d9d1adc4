"""Checkpoint container for a learner state and, optionally, its debiasing sums.

The file is a NumPy ``.npz`` archive.  Arrays are stored C-contiguous
(row-major):

``schema``        "mcbandit.checkpoint/1"
``config``        JSON echo of the BanditConfig
``t``             step counter
``u``, ``v``      stacked factors, shapes (K, d1, r) and (K, d2, r)
``diagnostics``   JSON of LearnerDiagnostics
``debias_*``      DebiasState fields, present only when debiasing was saved
"""
from __future__ import annotations

import json
from dataclasses import asdict
from typing import Optional

import numpy as np

from .inference import DebiasState
from .learner import LearnerDiagnostics, LearnerState
from .lowrank import FactorPair
from .schedule import BanditConfig

CHECKPOINT_SCHEMA = "mcbandit.checkpoint/1"
_DEBIAS_ARRAYS = ("mean_sum", "cache", "stamp", "ipw_sum", "sigma_sq_sum", "pulls")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: LearnerState, debias: Optional[DebiasState] = None) -> None:
    payload = {
        "schema": np.array(CHECKPOINT_SCHEMA),
        "config": np.array(json.dumps(state.config.to_dict(), sort_keys=True)),
        "t": np.array(state.t),
        "u": np.ascontiguousarray(np.stack([p.u for p in state.arms])),
        "v": np.ascontiguousarray(np.stack([p.v for p in state.arms])),
        "diagnostics": np.array(json.dumps(asdict(state.diagnostics), sort_keys=True)),
    }
    if debias is not None:
        for name in _DEBIAS_ARRAYS:
            payload[f"debias_{name}"] = np.ascontiguousarray(getattr(debias, name))
        payload["debias_meta"] = np.array(json.dumps({
            "k_arms": debias.k_arms, "d1": debias.d1, "d2": debias.d2, "t0": debias.t0,
            "n_phase2": debias.n_phase2, "t_final": debias.t_final,
            "pending": list(debias.pending) if debias.pending is not None else None,
        }, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[LearnerState, Optional[DebiasState]]:
    with np.load(path, allow_pickle=False) as data:
        schema = str(data["schema"]) if "schema" in data else None
        if schema != CHECKPOINT_SCHEMA:
            raise CheckpointError(f"unsupported checkpoint schema {schema!r}")
        config = BanditConfig.from_dict(json.loads(str(data["config"])))
        arms = tuple(FactorPair(u.copy(), v.copy()) for u, v in zip(data["u"], data["v"]))
        diag = LearnerDiagnostics(**json.loads(str(data["diagnostics"])))
        state = LearnerState(arms, int(data["t"]), config, diag)
        debias = None
        if "debias_meta" in data:
            meta = json.loads(str(data["debias_meta"]))
            pending = meta.pop("pending")
            arrays = {name: data[f"debias_{name}"].copy() for name in _DEBIAS_ARRAYS}
            debias = DebiasState(**meta, **arrays,
                                 pending=tuple(pending) if pending is not None else None)
    return state, debias
