"""Run-configuration loading and validation for the command-line tool.

Each subcommand reads a JSON object.  Sections are checked against a fixed
schema before any work starts: unknown keys, wrong types and out-of-range
values raise :class:`ConfigError`.
"""

from __future__ import annotations

import json
from pathlib import Path

from .augment import COARSE_2D, COARSE_E2, FINE, FINE_2D, PerturbRange
from .env import MdpConfig
from .phantoms import KINDS, PhantomSpec
from .policy import TrainConfig


class ConfigError(ValueError):
    pass


NUMBER = (int, float)


def _check(d, schema: dict, where: str, required=()) -> dict:
    """Validate ``d`` against ``{key: type or tuple of types}``; returns ``d``."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(schema))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    for k in required:
        if k not in d:
            raise ConfigError(f"{where}: missing required key {k!r}")
    for k, v in d.items():
        types = schema[k]
        if types is None:
            continue
        if isinstance(v, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
            raise ConfigError(f"{where}.{k}: expected {types}, got bool")
        if not isinstance(v, types):
            raise ConfigError(f"{where}.{k}: wrong type {type(v).__name__}")
    return d


def _numbers(v, n, where):
    if not isinstance(v, list) or len(v) != n or not all(isinstance(x, NUMBER) and not isinstance(x, bool)
                                                          for x in v):
        raise ConfigError(f"{where}: expected a list of {n} numbers")
    return tuple(float(x) for x in v)


def _wrap(fn, where, *args, **kw):
    try:
        return fn(*args, **kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def load_json(path) -> dict:
    """Read a JSON config; syntax errors become :class:`ConfigError`, missing files ``OSError``."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


# -- sections ----------------------------------------------------------------

def phantom_spec(d, where="phantom") -> PhantomSpec:
    _check(d, {"kind": str, "dims": list, "spacing": list, "period_mm": NUMBER, "fov_periods": NUMBER},
           where, required=("kind",))
    if d["kind"] not in KINDS:
        raise ConfigError(f"{where}.kind: must be one of {', '.join(KINDS)}")
    dims = tuple(int(x) for x in _numbers(d.get("dims", [64, 64, 1]), 3, f"{where}.dims"))
    spacing = _numbers(d.get("spacing", [2.0, 2.0, 2.0]), 3, f"{where}.spacing")
    return _wrap(PhantomSpec, where, d["kind"], dims, spacing, float(d.get("period_mm", 24.0)),
                 float(d.get("fov_periods", 3.0)))


def phantom_list(v, where="phantoms") -> list:
    if not isinstance(v, list):
        raise ConfigError(f"{where}: expected a list")
    if not v:
        raise ConfigError(f"{where}: must not be empty")
    specs = [phantom_spec(p, f"{where}[{i}]") for i, p in enumerate(v)]
    if len({s.dims[2] == 1 for s in specs}) != 1:
        raise ConfigError(f"{where}: cannot mix 2-D and 3-D phantoms")
    return specs


def mdp_config(d, dimensionality: int, where="mdp") -> MdpConfig:
    d = {} if d is None else d
    _check(d, {"gamma": NUMBER, "epsilon": NUMBER, "bonus": NUMBER, "bounds": list, "weights": (list, type(None))},
           where)
    kw = {k: float(d[k]) for k in ("gamma", "epsilon", "bonus") if k in d}
    if "bounds" in d:
        kw["bounds"] = _numbers(d["bounds"], 6, f"{where}.bounds")
    elif dimensionality == 2:
        kw["bounds"] = COARSE_2D.bounds
    if d.get("weights") is not None:
        kw["weights"] = _numbers(d["weights"], 6, f"{where}.weights")
    return _wrap(MdpConfig, where, dimensionality=dimensionality, **kw)


def perturb_range(v, default: PerturbRange, where) -> PerturbRange:
    if v is None:
        return default
    return _wrap(PerturbRange, where, _numbers(v, 6, where))


def default_ranges(dimensionality: int):
    return (COARSE_2D, FINE_2D) if dimensionality == 2 else (COARSE_E2, FINE)


TRAIN_KEYS = {"learning_rate": NUMBER, "decay": NUMBER, "decay_every": int, "batch_size": int,
              "total_steps": int, "seed": int, "rho": NUMBER, "log_every": int}


def train_config(d, where="train", seed=None) -> TrainConfig:
    d = {} if d is None else dict(_check(d, TRAIN_KEYS, where))
    if seed is not None:
        d["seed"] = seed
    for k in ("decay_every", "log_every"):
        if k in d and d[k] < 1:
            raise ConfigError(f"{where}.{k}: must be >= 1")
    return _wrap(TrainConfig, where, **d)


NETWORK_KEYS = {"architecture": str, "channels": list, "hidden": list, "batch_norm": bool, "seed": int,
                "pool_after": int}


def network_options(d, where="network") -> dict:
    d = {} if d is None else _check(d, NETWORK_KEYS, where)
    arch = d.get("architecture", "desk")
    if arch not in ("desk", "full"):
        raise ConfigError(f"{where}.architecture: must be 'desk' or 'full'")
    for k in ("channels", "hidden"):
        if k in d and (not d[k] or not all(isinstance(x, int) and x > 0 for x in d[k])):
            raise ConfigError(f"{where}.{k}: expected a non-empty list of positive integers")
    return {"architecture": arch, "channels": tuple(d.get("channels", (4, 8, 16))),
            "hidden": tuple(d.get("hidden", (64,))), "batch_norm": d.get("batch_norm", False),
            "seed": d.get("seed", 0), "pool_after": d.get("pool_after", 2)}


# -- per-subcommand top levels --------------------------------------------------

GEN_KEYS = {"phantoms": list, "counts": (int, list), "coarse": list, "fine": list, "near_truth_fraction": NUMBER,
            "seed": int, "shear_range": NUMBER, "mdp": dict}
TRAIN_TOP = {"dataset": str, "mode": str, "train": dict, "network": dict, "drl": dict}
DRL_KEYS = {"replay_capacity": int, "target_sync": int, "episode_steps": int, "epsilon_start": NUMBER,
            "epsilon_end": NUMBER, "epsilon_steps": int, "learning_starts": int}
METHOD_KEYS = {"name": str, "kind": str, "params": str, "fine_params": str, "steps": int, "n1": int, "n2": int,
               "factor": int, "roi_size": list, "randomize_top3": bool}
METHOD_KINDS = ("policy", "hierarchical", "oracle", "identity", "mi")
EVAL_KEYS = {"cases": dict, "n_perturb": int, "range": list, "methods": list, "mdp": dict, "seed": int,
             "record_timing": bool}
CASES_KEYS = {"phantoms": list, "seed": int, "shear_range": NUMBER}
TASK_KEYS = {"kind": str, "size": int, "spacing": NUMBER, "n_phantoms": int, "n_per_phantom": int,
             "translation": NUMBER, "rotation": NUMBER, "near_truth_fraction": NUMBER, "seed": int,
             "channels": list, "hidden": list, "batch_norm": bool}
COMPARE_KEYS = {"task": dict, "checkpoints": list, "seeds": list, "train": dict, "n_eval": int, "eval_steps": int,
                "threshold": NUMBER, "drl": dict}


def check_gen(d):
    _check(d, GEN_KEYS, "config", required=("phantoms",))
    specs = phantom_list(d["phantoms"])
    dim = 2 if specs[0].dims[2] == 1 else 3
    coarse0, fine0 = default_ranges(dim)
    counts = d.get("counts", 100)
    if isinstance(counts, list) and not all(isinstance(c, int) and not isinstance(c, bool) for c in counts):
        raise ConfigError("config.counts: expected integers")
    if (counts if isinstance(counts, list) else [counts]) and min(counts if isinstance(counts, list)
                                                                  else [counts]) < 1:
        raise ConfigError("config.counts: must be >= 1")
    if isinstance(counts, list) and len(counts) != len(specs):
        raise ConfigError("config.counts: one count per phantom required")
    f = float(d.get("near_truth_fraction", 0.5))
    if not 0 <= f <= 1:
        raise ConfigError("config.near_truth_fraction: must lie in [0, 1]")
    shear = float(d.get("shear_range", 0.0))
    if shear < 0:
        raise ConfigError("config.shear_range: must be >= 0")
    return {"phantoms": specs, "counts": counts, "coarse": perturb_range(d.get("coarse"), coarse0, "config.coarse"),
            "fine": perturb_range(d.get("fine"), fine0, "config.fine"), "near_truth_fraction": f,
            "seed": d.get("seed", 0), "shear_range": shear, "mdp": mdp_config(d.get("mdp"), dim)}


def check_train(d):
    _check(d, TRAIN_TOP, "config", required=("dataset",))
    mode = d.get("mode", "dsl")
    if mode not in ("dsl", "drl"):
        raise ConfigError("config.mode: must be 'dsl' or 'drl'")
    drl = _check(d.get("drl", {}), DRL_KEYS, "config.drl")
    return {"dataset": d["dataset"], "mode": mode, "train": d.get("train"), "network": network_options(d.get("network")),
            "drl": drl}


def check_method(m, where):
    _check(m, METHOD_KEYS, where, required=("kind",))
    if m["kind"] not in METHOD_KINDS:
        raise ConfigError(f"{where}.kind: must be one of {', '.join(METHOD_KINDS)}")
    if m["kind"] == "policy" and "params" not in m:
        raise ConfigError(f"{where}: policy method needs 'params'")
    if m["kind"] == "hierarchical" and ("params" not in m or "fine_params" not in m):
        raise ConfigError(f"{where}: hierarchical method needs 'params' and 'fine_params'")
    for k in ("steps", "n1", "factor"):
        if k in m and m[k] < 1:
            raise ConfigError(f"{where}.{k}: must be >= 1")
    if "n2" in m and m["n2"] < 0:
        raise ConfigError(f"{where}.n2: must be >= 0")
    return m


def check_evaluate(d):
    _check(d, EVAL_KEYS, "config", required=("cases", "methods"))
    cases = _check(d["cases"], CASES_KEYS, "config.cases", required=("phantoms",))
    specs = phantom_list(cases["phantoms"], "config.cases.phantoms")
    dim = 2 if specs[0].dims[2] == 1 else 3
    if not isinstance(d["methods"], list) or not d["methods"]:
        raise ConfigError("config.methods: must be a non-empty list")
    methods = [check_method(m, f"config.methods[{i}]") for i, m in enumerate(d["methods"])]
    names = [m.get("name", m["kind"]) for m in methods]
    if len(set(names)) != len(names):
        raise ConfigError("config.methods: method names must be unique")
    n = d.get("n_perturb", 10)
    if n < 1:
        raise ConfigError("config.n_perturb: must be >= 1")
    return {"phantoms": specs, "case_seed": cases.get("seed", 1000), "shear_range": float(cases.get("shear_range", 0)),
            "n_perturb": n, "range": perturb_range(d.get("range"), default_ranges(dim)[0], "config.range"),
            "methods": methods, "mdp": mdp_config(d.get("mdp"), dim), "seed": d.get("seed", 0),
            "record_timing": d.get("record_timing", False)}


def check_compare(d):
    _check(d, COMPARE_KEYS, "config")
    task = _check(d.get("task", {}), TASK_KEYS, "config.task")
    if "kind" in task and task["kind"] not in KINDS:
        raise ConfigError(f"config.task.kind: must be one of {', '.join(KINDS)}")
    cps = d.get("checkpoints", [500, 1000, 2000, 4000])
    if not cps or not all(isinstance(c, int) and c > 0 for c in cps):
        raise ConfigError("config.checkpoints: expected a non-empty list of positive integers")
    seeds = d.get("seeds", [0, 1, 2])
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("config.seeds: expected a non-empty list of integers")
    drl = _check(d.get("drl", {}), {"episode_steps": int, "target_sync": int}, "config.drl")
    return {"task": task, "checkpoints": cps, "seeds": seeds, "train": d.get("train"),
            "n_eval": d.get("n_eval", 50), "eval_steps": d.get("eval_steps", 120),
            "threshold": float(d.get("threshold", 3.0)), "drl": drl}
