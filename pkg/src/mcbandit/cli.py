"""Command-line front end.

    mcbandit {simulate,normality,regret-scaling,replay,infer} --config FILE [--out DIR]
             [--seed N] [--workers N]

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical degeneracy.
Every CSV starts with a ``# schema=...`` comment line; every JSON carries a
``schema`` key.  ``manifest.json`` lists each output with its SHA-256.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import subprocess
import sys
import time
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .inference import IllPosedFormError, InferenceContext, LinearForm
from .learner import estimate_lambda_max, init_from_matrices, soft_impute_init
from .lowrank import DegenerateFactorError
from .replay import LogColumns, LogFormatError, ingest_log, replay_run, target_band_metric
from .schedule import BanditConfig, ConfigError, default_step_size
from .sim import (
    FormSpec,
    InitSettings,
    ScheduleRecipe,
    benchmark_forms,
    generate_truth,
    normality_study,
    regret_scaling_study,
    run_experiment,
    trial_rng,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DEGENERATE = 0, 2, 3, 4
MANIFEST_SCHEMA = "mcbandit.run_manifest/1"


class DataError(RuntimeError):
    pass


# --- config helpers ----------------------------------------------------------------------

def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name)
    if not isinstance(sec, dict):
        raise ConfigError(f"missing required section '{name}'")
    return sec


def _req(sec: dict, key: str, where: str, kind=float):
    if sec.get(key) is None:
        raise ConfigError(f"missing required field '{where}.{key}'")
    try:
        return kind(sec[key])
    except (TypeError, ValueError):
        raise ConfigError(f"field '{where}.{key}' must be {kind.__name__}, got {sec[key]!r}") from None


def _int_field(sec: dict, key: str, where: str) -> int:
    val = _req(sec, key, where, float)
    if val != int(val):
        raise ConfigError(f"field '{where}.{key}' must be an integer, got {sec[key]!r}")
    return int(val)


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from None
    except yaml.YAMLError as err:
        raise ConfigError(f"malformed config: {err}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    return cfg


def _truth(cfg: dict, seed: int):
    sec = _section(cfg, "truth")
    d1 = _int_field(sec, "d1", "truth")
    d2 = _int_field(sec, "d2", "truth")
    r = _int_field(sec, "rank", "truth")
    k = _int_field(sec, "arms", "truth")
    pert = _req(sec, "perturbation", "truth")
    sigma = sec.get("sigma", 1.0)
    truth_seed = int(sec.get("seed", seed))
    try:
        return generate_truth(d1, d2, r, k, pert, np.random.default_rng(truth_seed),
                              sigmas=sigma, entry_scale=float(sec.get("entry_scale", 100.0)),
                              noise=str(sec.get("noise", "gaussian"))), r
    except ValueError as err:
        raise ConfigError(f"truth: {err}") from None


def _bandit_config(sec: dict, d1: int, d2: int, r: int, k: int, seed: int,
                   lambda_max: Optional[float]) -> BanditConfig:
    horizon = _int_field(sec, "horizon", "bandit")
    gamma = _req(sec, "gamma", "bandit")
    if sec.get("eta") is not None:
        eta = _req(sec, "eta", "bandit")
    elif sec.get("c1") is not None:
        if lambda_max is None or not lambda_max > 0:
            raise ConfigError("bandit.c1 needs a positive lambda_max; give bandit.eta instead")
        eta = default_step_size(d1, d2, horizon, gamma, lambda_max, _req(sec, "c1", "bandit"))
    else:
        raise ConfigError("missing required field 'bandit.eta' (or 'bandit.c1')")
    return BanditConfig(d1=d1, d2=d2, r=r, k_arms=k, horizon_T=horizon,
                        phase1_len_T0=_int_field(sec, "t0", "bandit"), gamma=gamma,
                        epsilon_phase1=_req(sec, "epsilon", "bandit"),
                        c2=_req(sec, "c2", "bandit"), eta_phase1=eta, seed=seed)


def _init_settings(cfg: dict) -> InitSettings:
    sec = cfg.get("init") or {}
    method = str(sec.get("method", "soft_impute"))
    if method not in ("soft_impute", "truth", "truth_noise"):
        raise ConfigError(f"unknown init.method {method!r}")
    n_init = sec.get("n_init")
    return InitSettings(method=method, n_init=None if n_init is None else int(n_init),
                        noise_sd=float(sec.get("noise_sd", 0.0)))


def parse_forms(spec, d1: int, d2: int, k_arms: int) -> list[FormSpec]:
    """Forms from config: the string ``benchmark`` or a list of mappings.

    Each mapping has ``entries: [[j1, j2, coef], ...]`` and either ``arm: a``
    or ``diff: [g, h]``; ``name`` is optional.  The string ``benchmark`` may also
    appear as a list item.
    """
    if spec is None:
        raise ConfigError("missing required field 'forms'")
    items = [spec] if isinstance(spec, (str, dict)) else list(spec)
    out = []
    for i, item in enumerate(items):
        if item == "benchmark":
            out.extend(benchmark_forms(d1, d2))
            continue
        if not isinstance(item, dict) or "entries" not in item:
            raise ConfigError(f"form #{i}: expected a mapping with 'entries'")
        try:
            entries = tuple(((int(e[0]), int(e[1])), float(e[2])) for e in item["entries"])
        except (TypeError, ValueError, IndexError):
            raise ConfigError(f"form #{i}: entries must be [j1, j2, coef] triples") from None
        try:
            q = LinearForm(entries, d1, d2)
        except IndexError as err:
            raise ConfigError(f"form #{i}: {err}") from None
        if "arm" in item:
            mode = int(item["arm"])
            arms = (mode,)
        elif "diff" in item:
            mode = tuple(int(a) for a in item["diff"])
            arms = mode
            if len(mode) != 2:
                raise ConfigError(f"form #{i}: diff needs two arms")
        else:
            raise ConfigError(f"form #{i}: give 'arm' or 'diff'")
        if any(not 0 <= a < k_arms for a in arms):
            raise ConfigError(f"form #{i}: arm index outside [0, {k_arms})")
        out.append(FormSpec(str(item.get("name", f"form{i}")), q, mode))
    return out


# --- output helpers ----------------------------------------------------------------------

class Outputs:
    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def _track(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def csv(self, name: str, schema: str, header: list, rows) -> None:
        with open(self._track(name), "w", newline="") as fh:
            fh.write(f"# schema={schema}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)

    def json(self, name: str, schema: str, payload: Any) -> None:
        if isinstance(payload, dict):
            payload = {"schema": schema, **payload}
        else:
            payload = {"schema": schema, "items": payload}
        with open(self._track(name), "w") as fh:
            fh.write(_dumps(payload) + "\n")

    def path(self, name: str) -> Path:
        return self._track(name)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def _clean(obj):
    """Replace non-finite floats with None so the JSON stays standard."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _dumps(payload) -> str:
    return json.dumps(_clean(json.loads(json.dumps(payload, default=_json_default))),
                      sort_keys=True, indent=2)


def _git_stamp() -> str:
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        return res.stdout.strip() if res.returncode == 0 else "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_manifest(out: Outputs, command: str, cfg: dict, seed: int, timings: dict) -> None:
    digests = {}
    for name in out.files:
        digests[name] = hashlib.sha256((out.dir / name).read_bytes()).hexdigest()
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "version": __version__,
        "git": _git_stamp(),
        "seed": seed,
        "config": cfg,
        "outputs": [{"path": n, "sha256": digests[n]} for n in out.files],
    }
    with open(out.dir / "manifest.json", "w") as fh:
        fh.write(_dumps(manifest) + "\n")
    # wall-clock timings would break byte-identical reruns, so they go in a plain log
    with open(out.dir / "timings.log", "w") as fh:
        for key, val in timings.items():
            fh.write(f"{key}\t{val:.3f}s\n")


# --- subcommands -------------------------------------------------------------------------

def cmd_simulate(cfg: dict, out: Outputs, seed: int, workers: int) -> None:
    truth, r = _truth(cfg, seed)
    d1, d2 = truth.shape
    config = _bandit_config(_section(cfg, "bandit"), d1, d2, r, truth.k_arms, seed, truth.lambda_max)
    res = run_experiment(truth, config, trial_rng(seed), debias=True, init=_init_settings(cfg))
    cum = res.ledger.cumulative
    out.csv("regret.csv", "mcbandit.regret_ledger/1", ["t", "instantaneous", "cumulative"],
            ((t + 1, float(res.ledger.instantaneous[t]), float(cum[t])) for t in range(len(cum))))
    out.json("errors.json", "mcbandit.errors/1", {
        "init_errors": [{"fro_sq": f, "max_sq": m} for f, m in res.init_errors],
        "final_errors": [{"fro_sq": f, "max_sq": m} for f, m in res.final_errors],
        "total_regret": res.ledger.total,
        "pulls_by_best_arm": res.ledger.pulls.tolist(),
        "phase_counts": list(res.phase_counts),
        "lambda_max": truth.lambda_max,
        "lambda_min": truth.lambda_min,
        "diagnostics": {"max_incoherence": res.state.diagnostics.max_incoherence,
                        "degenerate_rebalances": res.state.diagnostics.degenerate_rebalances},
    })
    if cfg.get("checkpoint", True):
        save_checkpoint(out.path("checkpoint.npz"), res.state, res.debias)


def cmd_normality(cfg: dict, out: Outputs, seed: int, workers: int) -> None:
    truth, r = _truth(cfg, seed)
    d1, d2 = truth.shape
    config = _bandit_config(_section(cfg, "bandit"), d1, d2, r, truth.k_arms, seed, truth.lambda_max)
    study = _section(cfg, "study")
    trials = _int_field(study, "trials", "study")
    alpha = float(study.get("alpha", 0.05))
    forms = parse_forms(study.get("forms", "benchmark"), d1, d2, truth.k_arms)
    res = normality_study(truth, config, forms, trials, seed, workers, _init_settings(cfg), alpha)
    keys = ["trial", "form", "truth", "estimate", "std_error", "studentized", "covered", "ill_posed"]
    out.csv("normality_trials.csv", "mcbandit.normality_trials/1", keys,
            ([row[k] for k in keys] for row in res.rows))
    out.csv("sigma_sq.csv", "mcbandit.sigma_sq/1",
            ["trial"] + [f"arm{a}" for a in range(truth.k_arms)],
            ([i] + [float(s) for s in row] for i, row in enumerate(res.sigma_sq)))
    in_band = np.mean((res.sigma_sq >= 0.85) & (res.sigma_sq <= 1.15), axis=0)
    out.json("normality_summary.json", "mcbandit.normality_summary/1", {
        "forms": res.summary,
        "sigma_sq_mean": res.sigma_sq.mean(axis=0).tolist(),
        "sigma_sq_share_in_0.85_1.15": in_band.tolist(),
        "trials": trials,
        "alpha": alpha,
    })


def cmd_regret_scaling(cfg: dict, out: Outputs, seed: int, workers: int) -> None:
    truth, r = _truth(cfg, seed)
    sec = _section(cfg, "recipe")
    recipe = ScheduleRecipe(gamma=_req(sec, "gamma", "recipe"), epsilon=_req(sec, "epsilon", "recipe"),
                            c1=_req(sec, "c1", "recipe"), c2=_req(sec, "c2", "recipe"),
                            t0_scale=_req(sec, "t0_scale", "recipe"), r=r)
    study = _section(cfg, "study")
    horizons = study.get("horizons")
    if not horizons:
        raise ConfigError("missing required field 'study.horizons'")
    horizons = [int(h) for h in horizons]
    trials = _int_field(study, "trials", "study")
    res = regret_scaling_study(truth, recipe, horizons, trials, seed, workers, _init_settings(cfg))
    out.csv("regret_trials.csv", "mcbandit.regret_trials/1", ["T", "trial", "regret"], res.rows)
    out.csv("regret_table.csv", "mcbandit.regret_table/1",
            ["T", "T_pow", "mean_regret", "se_regret"],
            ([row["T"], row["T_pow"], row["mean_regret"], row["se_regret"]] for row in res.table))
    out.json("regret_fit.json", "mcbandit.regret_fit/1", res.fit)


def _forms_report(ctx: InferenceContext, forms: list[FormSpec], alpha: float) -> list[dict]:
    reports = []
    for spec in forms:
        try:
            reports.append(ctx.infer(spec.q, spec.mode, alpha, spec.name).to_dict())
        except IllPosedFormError as err:
            rep = err.report.to_dict()
            rep["ill_posed"] = True
            reports.append(rep)
    return reports


def cmd_replay(cfg: dict, out: Outputs, seed: int, workers: int) -> None:
    log = _section(cfg, "log")
    d1 = _int_field(log, "d1", "log")
    d2 = _int_field(log, "d2", "log")
    k = _int_field(log, "arms", "log")
    r = _int_field(log, "rank", "log")
    path = log.get("path")
    if path is None:
        raise ConfigError("missing required field 'log.path'")
    try:
        cols = LogColumns(**(log.get("columns") or {}))
    except TypeError as err:
        raise ConfigError(f"log.columns: {err}") from None
    records = ingest_log(path, d1, d2, k, cols, int(log.get("index_base", 0)))

    init = cfg.get("init") or {}
    n_init = int(init.get("n_init", 0))
    if n_init <= 0:
        raise ConfigError("missing required field 'init.n_init' (log prefix used for initialisation)")
    prefix, stream = records[:n_init], records[n_init:]
    try:
        mats = soft_impute_init((((rec.j1, rec.j2), rec.logged_action, rec.reward) for rec in prefix),
                                d1, d2, k, r)
    except ValueError as err:
        raise DataError(f"initialisation prefix: {err}") from None
    config = _bandit_config(_section(cfg, "bandit"), d1, d2, r, k, seed, estimate_lambda_max(mats))
    state = init_from_matrices(mats, r, config)
    stats = replay_run(stream, state, trial_rng(seed), debias=True)

    payload = stats.to_dict()
    payload["init_records"] = len(prefix)
    band = cfg.get("band")
    if band is not None and stats.matched:
        by_line = {rec.line: rec for rec in stream}
        payload["target_band"] = {
            "band": [float(band[0]), float(band[1])],
            "matched_share": target_band_metric([by_line[ln] for ln in stats.matched_lines],
                                                (float(band[0]), float(band[1]))),
        }
    out.json("replay_stats.json", "mcbandit.replay_stats/1", payload)
    forms = cfg.get("forms")
    if forms is not None:
        if stats.debias is None or stats.debias.n_phase2 == 0:
            raise DataError("no matched phase-two steps; cannot run inference")
        ctx = InferenceContext(stats.debias, stats.state.arms, stats.state.config)
        out.json("inference_reports.json", "mcbandit.inference_reports/1",
                 _forms_report(ctx, parse_forms(forms, d1, d2, k), float(cfg.get("alpha", 0.05))))
    if cfg.get("checkpoint", False):
        save_checkpoint(out.path("checkpoint.npz"), stats.state, stats.debias)


def cmd_infer(cfg: dict, out: Outputs, seed: int, workers: int) -> None:
    path = cfg.get("checkpoint")
    if path is None:
        raise ConfigError("missing required field 'checkpoint'")
    try:
        state, db = load_checkpoint(path)
    except (OSError, KeyError, ValueError) as err:
        raise DataError(f"cannot load checkpoint {path}: {err}") from None
    if db is None or db.n_phase2 == 0:
        raise DataError("checkpoint has no phase-two debiasing sums")
    c = state.config
    forms = parse_forms(cfg.get("forms"), c.d1, c.d2, c.k_arms)
    ctx = InferenceContext(db, state.arms, c)
    out.json("inference_reports.json", "mcbandit.inference_reports/1",
             _forms_report(ctx, forms, float(cfg.get("alpha", 0.05))))


COMMANDS = {
    "simulate": cmd_simulate,
    "normality": cmd_normality,
    "regret-scaling": cmd_regret_scaling,
    "replay": cmd_replay,
    "infer": cmd_infer,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcbandit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--workers", type=int, default=1, help="worker processes for studies")
        if name == "infer":
            p.add_argument("--checkpoint", default=None, help="overrides the config checkpoint path")
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if getattr(args, "checkpoint", None) is not None:
            cfg["checkpoint"] = args.checkpoint
        seed = int(cfg.get("seed", 0))
        cfg["seed"] = seed
        out = Outputs(Path(args.out))
        start = time.perf_counter()
        COMMANDS[args.command](cfg, out, seed, max(1, args.workers))
        _write_manifest(out, args.command, cfg, seed, {args.command: time.perf_counter() - start})
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, LogFormatError, CheckpointError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (DegenerateFactorError, IllPosedFormError, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"numerical degeneracy: {err}", file=sys.stderr)
        return EXIT_DEGENERATE
    print(f"{args.command}: wrote {len(out.files) + 1} file(s) to {out.dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
