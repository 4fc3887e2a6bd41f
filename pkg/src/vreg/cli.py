"""Command-line entry point: ``vreg gen-data | train | register | evaluate | compare``.

Exit codes: 0 success, 2 configuration error, 3 input/output error,
4 numerical failure.  ``VREG_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("vreg")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vreg", description="Rigid registration by a learned action-value agent.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON run configuration")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the configured seed")
        sp.add_argument("--threads", type=int, default=None, help="cap numeric worker threads")

    common(sub.add_parser("gen-data", help="synthesize a training dataset"))
    tr = sub.add_parser("train", help="train an action-value network")
    common(tr)
    tr.add_argument("--mode", choices=("dsl", "drl"), default=None,
                    help="supervised on analytic targets (dsl) or exploration-based (drl)")

    rg = sub.add_parser("register", help="register a floating volume to a reference")
    common(rg, config_required=False)
    rg.add_argument("--ref", required=True, help="reference volume (.vol)")
    rg.add_argument("--float", dest="floating", required=True, help="floating volume (.vol)")
    rg.add_argument("--params", required=True, help="policy file, or 'oracle'")
    rg.add_argument("--fine-params", default=None, help="fine-stage policy file, or 'oracle'")
    rg.add_argument("--init", type=float, nargs=6, default=None, metavar=("TX", "TY", "TZ", "RX", "RY", "RZ"),
                    help="initial pose parameters (mm, degrees)")
    rg.add_argument("--ground-truth", default=None,
                    help="transform JSON of the true pose (enables D reporting; required by 'oracle')")
    rg.add_argument("--steps", type=int, default=100, help="number of actions (single-stage mode)")
    rg.add_argument("--hierarchical", action="store_true", help="coarse-to-fine two-stage registration")
    rg.add_argument("--n1", type=int, default=200, help="coarse-stage steps")
    rg.add_argument("--n2", type=int, default=100, help="fine-stage steps")
    rg.add_argument("--factor", type=int, default=2, help="coarse down-sampling factor")
    rg.add_argument("--roi-size", type=int, nargs="+", default=None, help="fine ROI size in voxels (x y [z])")
    rg.add_argument("--randomize-top3", action="store_true",
                    help="sample among the three best actions instead of taking the argmax")

    common(sub.add_parser("evaluate", help="benchmark registration methods on phantom cases"))
    common(sub.add_parser("compare", help="success rate vs training steps, supervised vs exploration"))
    return p


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise _ConfigFail("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


class _ConfigFail(Exception):
    pass


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("VREG_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _set_threads(args.threads)
    except _ConfigFail as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from .config import ConfigError
    from .policy import NonFiniteLoss
    from .volume import FileFormatError

    handler = {"gen-data": cmd_gen_data, "train": cmd_train, "register": cmd_register,
               "evaluate": cmd_evaluate, "compare": cmd_compare}[args.command]
    try:
        return handler(args)
    except (ConfigError, _ConfigFail) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"numeric error: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FileFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- gen-data ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .augment import build_dataset
    from .config import check_gen, load_json

    cfg = check_gen(load_json(args.config))
    seed = cfg["seed"] if args.seed is None else args.seed
    out = _out_dir(args)
    manifest = build_dataset(out, cfg["phantoms"], cfg["counts"], cfg["coarse"], seed, cfg["near_truth_fraction"],
                             cfg["fine"], cfg["mdp"], cfg["shear_range"])
    print(f"{manifest['n_samples']} samples, checksum {manifest['checksum']}")
    return EXIT_OK


# -- train -------------------------------------------------------------------

def _make_network(opts, input_shape, arity):
    from .nn import Network, desk_architecture, paper_architecture

    if opts["architecture"] == "full":
        arch = paper_architecture(input_shape, arity)
    else:
        arch = desk_architecture(input_shape, arity, opts["channels"], opts["hidden"], opts["batch_norm"],
                                 opts["pool_after"])
    return Network(arch, opts["seed"])


def cmd_train(args) -> int:
    import numpy as np

    from .augment import PerturbRange, build_pairs, load_dataset, phantom_from_json
    from .config import check_train, load_json, mdp_config, train_config
    from .policy import ImageEnv, linear_schedule, train_drl, train_dsl

    cfg = check_train(load_json(args.config))
    mode = args.mode or cfg["mode"]
    tcfg = train_config(cfg["train"], "config.train", args.seed)
    ds = Path(cfg["dataset"])
    if not (ds / "manifest.json").exists():
        raise FileNotFoundError(f"dataset manifest not found: {ds / 'manifest.json'}")
    out = _out_dir(args)
    if mode == "dsl":
        X, Y, manifest = load_dataset(ds)
        net = _make_network(cfg["network"], X.shape[1:], Y.shape[1])
        net, curve = train_dsl(X, Y, tcfg, net)
        stats = {"n_samples": int(len(X))}
    else:
        manifest = json.loads((ds / "manifest.json").read_text())
        specs = [phantom_from_json(p) for p in manifest["phantoms"]]
        dim = manifest["mdp"]["dimensionality"]
        mdp = mdp_config({k: manifest["mdp"][k] for k in ("gamma", "epsilon", "bonus", "bounds")}, dim)
        pairs = build_pairs(specs, manifest["seed"], manifest.get("shear_range", 0.0))
        bounds = np.asarray(PerturbRange(tuple(manifest["ranges"]["coarse"])).bounds)
        d = cfg["drl"]
        episode = d.get("episode_steps", 100)

        def sample_start(rng):
            return rng.uniform(-1, 1, 6) * bounds

        envs = [ImageEnv(p.reference, p.floating, mdp, sample_start, episode) for p in pairs]

        class _Multi:
            current = envs[0]

            def reset(self, rng):
                self.current = envs[int(rng.integers(len(envs)))]
                return self.current.reset(rng)

            def step(self, k):
                return self.current.step(k)

        ref = pairs[0].reference
        shape = (1,) + ((ref.data.shape[1:]) if ref.ndim == 2 else ref.data.shape)
        net = _make_network(cfg["network"], shape, len(mdp.actions))
        eps = linear_schedule(d.get("epsilon_start", 1.0), d.get("epsilon_end", 0.1),
                              d.get("epsilon_steps", max(1, tcfg.total_steps // 2)))
        net, curve, st = train_drl(lambda rng: _Multi(), tcfg, net, mdp, d.get("replay_capacity", 50000), eps,
                                   d.get("target_sync", 1000), d.get("learning_starts"))
        stats = {"action_counts": [int(c) for c in st["action_counts"]], "max_replay": int(st["max_replay"])}
    net.save(out / "params.vpol")
    curve.write_csv(out / "loss.csv")
    _write_json(out / "train.json", {"mode": mode, "dataset_checksum": manifest.get("checksum"),
                                     "train": tcfg.__dict__, "network": net.arch, **stats})
    print(f"trained {mode} for {tcfg.total_steps} steps -> {out / 'params.vpol'}")
    return EXIT_OK


# -- register ----------------------------------------------------------------

def _load_policy(spec, Tg, mdp):
    from .nn import Network
    from .policy import ImageOracle

    if spec == "oracle":
        return ImageOracle(Tg, mdp)
    return Network.load(spec)


def cmd_register(args) -> int:
    import numpy as np

    from .config import ConfigError, load_json, mdp_config
    from .geometry import identity, invert, transform_from_dict, transform_from_params, transform_to_dict
    from .hierarchy import HierarchyConfig, hierarchical_register
    from .policy import greedy_register
    from .volume import read_volume

    if args.steps < 1 or args.n1 < 1 or args.n2 < 0 or args.factor < 1:
        raise ConfigError("--steps and --n1 must be >= 1, --n2 >= 0, --factor >= 1")
    if args.config is not None:
        extra = load_json(args.config)
        if set(extra) - {"mdp"}:
            raise ConfigError(f"config: unknown key(s) {', '.join(sorted(set(extra) - {'mdp'}))}")
    else:
        extra = {}
    Ir, If = read_volume(args.ref), read_volume(args.floating)
    mdp = mdp_config(extra.get("mdp"), Ir.ndim)
    Tg = None
    if args.ground_truth is not None:
        Tg = transform_from_dict(json.loads(Path(args.ground_truth).read_text()))
    if "oracle" in (args.params, args.fine_params) and Tg is None:
        Tg = identity()
    T0 = transform_from_params(args.init) if args.init is not None else identity()
    rng = np.random.default_rng(0 if args.seed is None else args.seed) if args.randomize_top3 else None
    out = _out_dir(args)
    coarse = _load_policy(args.params, Tg, mdp)
    if args.hierarchical:
        fine = _load_policy(args.fine_params or args.params, Tg, mdp)
        roi = tuple(args.roi_size) if args.roi_size else None
        hcfg = HierarchyConfig(args.n1, args.n2, args.factor, roi, mdp=mdp, randomize=args.randomize_top3)
        T, report = hierarchical_register(Ir, If, T0, coarse, fine, hcfg, Tg, rng)
    else:
        T, traj = greedy_register(Ir, If, T0, coarse, args.steps, args.randomize_top3, rng, Tg, mdp)
        report = {"steps": args.steps, "trajectory": traj.to_rows(), "final": transform_to_dict(T)}
        if Tg is not None:
            from .geometry import distance

            report["D_before"], report["D_after"] = distance(Tg, T0), distance(Tg, T)
    if Tg is not None:
        # residual the registration left, in the agent's parameterization
        from .geometry import compose, params_from_transform

        report["residual"] = [float(x) for x in params_from_transform(compose(Tg, invert(T)))]
    _write_json(out / "transform.json", transform_to_dict(T))
    _write_json(out / "report.json", report)
    print(" ".join(f"{x:.6f}" for x in transform_to_dict(T)["params"]))
    return EXIT_OK


# -- evaluate ----------------------------------------------------------------

def _method(m, mdp):
    import numpy as np

    from .baseline import optimize_registration
    from .hierarchy import HierarchyConfig, hierarchical_register
    from .nn import Network
    from .policy import ImageOracle, greedy_register

    kind = m["kind"]
    steps = m.get("steps", 120)
    if kind == "identity":
        return lambda Ir, If, T0: (T0, 0)
    if kind == "mi":
        return lambda Ir, If, T0: (optimize_registration(Ir, If, T0)[0], 0)
    if kind == "oracle":
        def oracle(Ir, If, T0, Tg):
            return greedy_register(Ir, If, T0, ImageOracle(Tg, mdp), steps, cfg=mdp)[0], steps
        oracle.uses_ground_truth = True
        return oracle
    net = Network.load(m["params"])
    if kind == "policy":
        def policy(Ir, If, T0):
            rng = np.random.default_rng(0) if m.get("randomize_top3") else None
            return greedy_register(Ir, If, T0, net, steps, m.get("randomize_top3", False), rng, cfg=mdp)[0], steps
        return policy
    fine = Network.load(m["fine_params"])
    hcfg = HierarchyConfig(m.get("n1", 200), m.get("n2", 100), m.get("factor", 2),
                           tuple(m["roi_size"]) if "roi_size" in m else None, mdp=mdp)

    def hier(Ir, If, T0):
        return hierarchical_register(Ir, If, T0, net, fine, hcfg)[0], hcfg.n1 + hcfg.n2
    return hier


def cmd_evaluate(args) -> int:
    import numpy as np

    from .augment import build_pairs
    from .config import check_evaluate, load_json
    from .evaluation import (CASE_COLUMNS, SUMMARY_COLUMNS, Case, benchmark, summary_svg, write_rows)

    cfg = check_evaluate(load_json(args.config))
    seed = cfg["seed"] if args.seed is None else args.seed
    methods = {m.get("name", m["kind"]): _method(m, cfg["mdp"]) for m in cfg["methods"]}
    pairs = build_pairs(cfg["phantoms"], cfg["case_seed"], cfg["shear_range"])
    cases = [Case(f"{p.kind}-{i}", p.reference, p.floating, p.ground_truth, p.landmarks, p.mesh, p.mesh)
             for i, p in enumerate(pairs)]
    bounds = np.asarray(cfg["range"].bounds)
    rows, summary = benchmark(methods, cases, cfg["n_perturb"], lambda rng: rng.uniform(-1, 1, 6) * bounds, seed)
    out = _out_dir(args)
    write_rows(out / "cases.csv", rows, CASE_COLUMNS, timing=cfg["record_timing"])
    write_rows(out / "summary.csv", summary, SUMMARY_COLUMNS)
    summary_svg(summary, out / "summary.svg")
    for s in summary:
        print(f"{s['method']}: success {s['success_rate']:.3f}  p10/p50/p90 {s['p10']:.2f}/{s['p50']:.2f}/"
              f"{s['p90']:.2f}")
    return EXIT_OK


# -- compare -----------------------------------------------------------------

def cmd_compare(args) -> int:
    import csv

    from .config import check_compare, load_json, train_config
    from .evaluation import curves_svg
    from .study import DEFAULT_TRAIN, CompareResult, ToyTask, compare

    cfg = check_compare(load_json(args.config))
    task_kw = dict(cfg["task"])
    for k in ("channels", "hidden"):
        if k in task_kw:
            task_kw[k] = tuple(task_kw[k])
    from .config import ConfigError

    try:
        task = ToyTask(**task_kw)
        task.spec  # noqa: B018 - validates dims/spacing eagerly
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config.task: {exc}") from exc
    train = DEFAULT_TRAIN if cfg["train"] is None else train_config(cfg["train"], "config.train")
    seeds = cfg["seeds"] if args.seed is None else [args.seed]
    res = compare(task, cfg["checkpoints"], seeds, train, cfg["n_eval"], cfg["eval_steps"], cfg["threshold"],
                  cfg["drl"].get("episode_steps", 100), cfg["drl"].get("target_sync", 1000),
                  log=log.info)
    out = _out_dir(args)
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "step", "success_rate"])
        for name in ("dsl", "drl"):
            for s, rates in getattr(res, name).items():
                for step, r in zip(res.checkpoints, rates):
                    w.writerow([name, s, step, repr(float(r))])
    curves = {"DSL": res.mean_curve("dsl"), "DRL": res.mean_curve("drl")}
    curves_svg(curves, out / "curves.svg")
    summary = {
        "checkpoints": res.checkpoints,
        "dsl_mean": [r for _, r in curves["DSL"]],
        "drl_mean": [r for _, r in curves["DRL"]],
        "dsl_steps_to_80": CompareResult.steps_to(curves["DSL"], 0.8),
        "drl_steps_to_80": CompareResult.steps_to(curves["DRL"], 0.8),
        "dsl_ge_drl_every_checkpoint": all(a >= b for (_, a), (_, b) in zip(curves["DSL"], curves["DRL"])),
    }
    _write_json(out / "compare.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
