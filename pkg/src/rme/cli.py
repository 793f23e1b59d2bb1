"""Command-line front end.

Every command writes its artifacts plus ``manifest.json`` into ``--out``
(default ``$RME_OUT`` or ``./rme_out``).  ``rme replay <manifest>`` reruns a
command and checks that the artifacts come out bit-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

import rme
from rme.errors import DomainError, SimulationFault, TrainingDiverged, WeightsFormatError

MANIFEST_VERSION = 1
MANIFEST = "manifest.json"
# Keys holding wall-clock measurements; ignored when hashing JSON artifacts.
TIMING_KEYS = frozenset({"wall_ms", "total_wall_ms", "wall_latency_s", "wall_s",
                         "mean_fit_wall_ms", "median_fit_wall_ms"})


class Context:
    """Collects artifacts written by a command for the manifest."""

    def __init__(self, out: Path, verbose: int):
        self.out = out
        self.verbose = verbose
        self.artifacts: list[Path] = []
        self.config_hash: str | None = None
        self.seed: int | None = None
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise DomainError(f"output directory {out} is not writable")

    def add(self, *paths: Path) -> None:
        self.artifacts.extend(Path(p) for p in paths)

    def log(self, msg: str) -> None:
        if self.verbose:
            print(msg, file=sys.stderr, flush=True)

    def write_json(self, name: str, obj) -> Path:
        path = self.out / name
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        self.add(path)
        return path


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def artifact_digest(path: Path) -> str | None:
    """sha256 of the replayable content; ``None`` for pure timing files."""
    if path.name.endswith(".timing.json") or path.name == "timing.json":
        return None
    if path.suffix == ".npz":
        # zip members carry write times; hash the arrays instead
        digest = hashlib.sha256()
        with np.load(path, allow_pickle=False) as f:
            for name in sorted(f.files):
                arr = f[name]
                digest.update(name.encode() + str(arr.dtype).encode() + str(arr.shape).encode())
                digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()
    blob = path.read_bytes()
    if path.suffix == ".json":
        blob = json.dumps(_strip_timing(json.loads(blob)), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def versions() -> dict:
    import scipy
    import yaml

    return {"rme": rme.__version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pyyaml": yaml.__version__}


def write_manifest(ctx: Context, argv: list[str]) -> Path:
    digests = {}
    for p in ctx.artifacts:
        rel = str(p.relative_to(ctx.out))
        digests[rel] = artifact_digest(p)
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "argv": argv,
        "config_hash": ctx.config_hash,
        "seed": ctx.seed,
        "versions": versions(),
        "artifacts": digests,
    }
    path = ctx.out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- commands -----------------------------------------------------------------


def cmd_simulate(args, ctx: Context) -> int:
    from rme.sim.engine import run
    from rme.sim.scenario import load_scenario

    scen = load_scenario(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    est = {}
    if args.prior:
        est["prior"] = args.prior
    if args.weights:
        est["weights"] = str(args.weights)
    if args.mode:
        est["mode"] = args.mode
    if args.no_estimation:
        est["enabled"] = False
    if args.noise is not None:
        over["noise"] = {"tau_std": args.noise}
    if est:
        over["estimation"] = est
    if over:
        scen = scen.with_overrides(**over)
    ctx.config_hash, ctx.seed = scen.config_hash(), scen.seed
    ctx.log(f"simulating {scen.name} for {scen.duration} s (seed {scen.seed})")
    log = run(scen)
    csv_path, json_path = log.write(ctx.out / "runlog")
    ctx.add(csv_path, json_path)
    for i, window in enumerate(log.windows):
        ctx.add(window.save(ctx.out / "windows" / f"window_{i:04d}.npz"))
    if log.meta["fault"] is not None:
        raise SimulationFault(f"{log.meta['fault']['message']} at tick {log.meta['fault']['tick']}")
    for est_rec in log.meta["estimates"]:
        ctx.log(f"estimate at tick {est_rec['detect_tick']}: total {est_rec['total']}")
    return 0


def cmd_audit(args, ctx: Context) -> int:
    from rme.controller.passivity import passivity_audit
    from rme.sim.engine import run
    from rme.sim.scenario import bundled_scenarios, load_scenario

    names = args.config or bundled_scenarios()
    rows, ok = [], True
    for name in names:
        scen = load_scenario(name)
        if args.seed is not None:
            scen = scen.with_overrides(seed=args.seed)
        log = run(scen, log_meta=False)
        rep = passivity_audit(log["t"], log["S"], log["supply"], log["flagged"].astype(bool), args.tolerance)
        rows.append({
            "scenario": scen.name,
            "config_hash": scen.config_hash(),
            "ticks": len(log),
            "max_unflagged_residual_w": rep.max_unflagged,
            "violations": int(rep.violations.size),
            "flagged_ticks": int(rep.flagged.sum()),
            "positive_flagged_ticks": int(rep.positive_flagged.size),
            "passed": rep.passed and log.meta["fault"] is None,
        })
        ok &= rows[-1]["passed"]
        ctx.log(f"{scen.name}: max residual {rep.max_unflagged:.3e} W, {rep.violations.size} violations")
    ctx.write_json("audit.json", {"tolerance_w": args.tolerance, "scenarios": rows})
    if not ok:
        raise DomainError("passivity audit failed: " + ",".join(r["scenario"] for r in rows if not r["passed"]))
    return 0


def cmd_train_prior(args, ctx: Context) -> int:
    from rme.prior.datagen import DataConfig, generate_training_data
    from rme.prior.training import TrainingConfig, train
    from rme.sim.harness import write_csv

    data_cfg = DataConfig(n_sims=args.n_sims, seed=args.seed)
    train_cfg = TrainingConfig(iterations=args.iterations, seed=args.seed)
    ctx.seed = args.seed
    ctx.config_hash = hashlib.sha256(json.dumps(
        {"data": data_cfg.digest(), "train": train_cfg.__dict__}, sort_keys=True).encode()).hexdigest()
    ctx.log(f"generating {data_cfg.n_sims} simulations")
    data = generate_training_data(data_cfg, cache=args.data_cache,
                                  progress=lambda i, n: ctx.log(f"  sim {i}/{n}") if i % 25 == 0 else None)
    res = train(data.X, data.Y, train_cfg, groups=data.groups,
                progress=lambda it, tr, va: ctx.log(f"  iter {it}: train {tr:.4f} val {va:.4f}")
                if it % 2500 == 0 else None)
    ctx.add(res.model.save(ctx.out / "prior_weights.bin"))
    if res.best_model is not None:
        ctx.add(res.best_model.save(ctx.out / "prior_weights_best_val.bin"))
    rows = [dict(zip(res.history, vals)) for vals in zip(*(v.tolist() for v in res.history.values()))]
    ctx.add(write_csv(rows, ctx.out / "training_history.csv"))
    ctx.write_json("training_summary.json", {
        "examples": len(data), "train": len(res.train_idx), "validation": len(res.val_idx),
        "final_train_mse": res.final_train_mse, "final_val_mse": res.final_val_mse,
        "final_ratio": res.final_ratio, "best_iteration": res.best_iteration,
        "best_val_mse": float(np.min(res.history["val_mse"])), "wall_s": res.wall_s,
    })
    return 0


def cmd_estimate(args, ctx: Context) -> int:
    from rme.dataset import WindowDataset
    from rme.pipeline import Estimator
    from rme.prior.model import load_prior
    from rme.robot.chain import load_chain
    from rme.vi import VIConfig

    window = WindowDataset.load(args.window)
    chain = load_chain(args.chain)
    if window.q.shape[1] != chain.n:
        raise DomainError(f"window has {window.q.shape[1]} joints, chain {args.chain} has {chain.n}")
    if args.prior == "zero":
        est = Estimator(chain, "zero", vi_config=VIConfig())
    else:
        model = load_prior(None if args.prior in ("nn", "bundled") else args.prior)
        est = Estimator(chain, "nn", model, VIConfig())
    ctx.seed = args.seed or 0
    theta, report = est(window, seed=ctx.seed)
    ctx.write_json("posterior.json", {
        "mu": report["mu"], "sigma": report["sigma"], "iterations": report["iterations"],
        "status": report["status"], "wall_ms": report["total_wall_ms"], "prior": report["prior"],
        "prior_mu": report["prior_mu"], "likelihood_sigma": report["likelihood_sigma"],
        "samples": len(window),
    })
    ctx.log(f"theta = {theta.as_vector().round(4).tolist()} after {report['iterations']} iterations")
    return 0


def _arms(args, chain):
    from rme.pipeline import Estimator
    from rme.prior.model import load_prior

    model = load_prior(args.weights)
    return {"nn": Estimator(chain, "nn", model), "zero": Estimator(chain, "zero")}


def cmd_ablate_prior(args, ctx: Context) -> int:
    from rme.robot.chain import load_chain
    from rme.sim.harness import ABLATION_SEED, ablate_prior, regenerate, write_csv

    ctx.seed = ABLATION_SEED if args.seed is None else args.seed
    chain = load_chain("panda")
    samples = regenerate(args.n, ctx.seed, progress=lambda i, n: ctx.log(f"  dataset {i}/{n}"))
    table, fits, timing = ablate_prior(samples, _arms(args, chain), args.window_ms)
    ctx.add(write_csv(table, ctx.out / "ablation_prior.csv"), write_csv(fits, ctx.out / "ablation_prior_fits.csv"))
    (ctx.out / "timing.json").write_text(json.dumps(timing, indent=1) + "\n")
    for row in table:
        ctx.log(str(row))
    return 0


def cmd_ablate_window(args, ctx: Context) -> int:
    from rme.robot.chain import load_chain
    from rme.sim.harness import ABLATION_SEED, ablate_window, regenerate, write_csv

    ctx.seed = ABLATION_SEED if args.seed is None else args.seed
    chain = load_chain("panda")
    samples = regenerate(args.n, ctx.seed, progress=lambda i, n: ctx.log(f"  dataset {i}/{n}"))
    table, timing = ablate_window(samples, _arms(args, chain)[args.prior], args.intervals)
    ctx.add(write_csv(table, ctx.out / "ablation_window.csv"))
    (ctx.out / "timing.json").write_text(json.dumps(timing, indent=1) + "\n")
    for row in table:
        ctx.log(str(row))
    return 0


def cmd_static_suite(args, ctx: Context) -> int:
    from rme.sim.harness import static_suite, write_csv

    est = {"weights": str(args.weights)} if args.weights else {}
    summary, parity = static_suite(args.seeds, args.noise, est,
                                   progress=lambda i, n: ctx.log(f"  run {i}/{n}"))
    ctx.add(write_csv(summary, ctx.out / "static_suite.csv"), write_csv(parity, ctx.out / "parity.csv"))
    return 0


def cmd_replay(args, ctx: Context) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    if manifest.get("schema_version") != MANIFEST_VERSION:
        raise DomainError("unsupported manifest version")
    argv = list(manifest["argv"])
    if "--out" in argv:
        i = argv.index("--out")
        del argv[i:i + 2]
    code = main(argv + ["--out", str(ctx.out)], _replay=True)
    if code != 0:
        return code
    mismatched = [name for name, digest in manifest["artifacts"].items()
                  if digest is not None and artifact_digest(ctx.out / name) != digest]
    ctx.write_json("replay.json", {"source": str(args.manifest), "mismatched": mismatched,
                                   "identical": not mismatched})
    if mismatched:
        raise DomainError("replay differs in " + ",".join(mismatched))
    return 0


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rme", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rme {rme.__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=Path(os.environ.get("RME_OUT", "rme_out")),
                        help="output directory (default: $RME_OUT or ./rme_out)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run a scenario and write its RunLog")
    p.add_argument("--config", required=True, help="scenario YAML path or bundled scenario name")
    p.add_argument("--seed", type=int)
    p.add_argument("--prior", choices=("nn", "zero"))
    p.add_argument("--weights", type=Path)
    p.add_argument("--mode", choices=("inline", "async", "oracle"))
    p.add_argument("--noise", type=float, help="per-joint torque noise std (N m)")
    p.add_argument("--no-estimation", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("audit", parents=[common], help="passivity audit over scenarios")
    p.add_argument("--config", action="append", help="scenario (repeatable; default: all bundled)")
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("train-prior", parents=[common], help="simulate training data and train the prior")
    p.add_argument("--n-sims", type=int, default=350)
    p.add_argument("--iterations", type=int, default=50_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-cache", type=Path)
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("estimate", parents=[common], help="fit a posterior to a logged window")
    p.add_argument("--window", required=True, type=Path)
    p.add_argument("--prior", default="nn", help="nn (bundled weights), zero, or a weights file")
    p.add_argument("--chain", default="panda")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("ablate-prior", parents=[common], help="NN prior vs zero prior")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.add_argument("--weights", type=Path)
    p.add_argument("--window-ms", type=float, default=200.0)
    p.set_defaults(func=cmd_ablate_prior)

    p = sub.add_parser("ablate-window", parents=[common], help="sweep the collection window")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int)
    p.add_argument("--weights", type=Path)
    p.add_argument("--prior", choices=("nn", "zero"), default="nn")
    p.add_argument("--intervals", type=int, nargs="+", default=[50, 100, 200, 300])
    p.set_defaults(func=cmd_ablate_window)

    p = sub.add_parser("static-suite", parents=[common], help="6 payloads x N seeds, closed loop")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--weights", type=Path)
    p.set_defaults(func=cmd_static_suite)

    p = sub.add_parser("replay", parents=[common], help="rerun a manifest and compare artifacts")
    p.add_argument("manifest", type=Path)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv: list[str] | None = None, _replay: bool = False) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 2 on usage errors, 0 for --help
        return int(exc.code or 0)
    try:
        ctx = Context(args.out, args.verbose)
        code = args.func(args, ctx)
        if args.command != "replay":
            write_manifest(ctx, argv)
        return code
    except (DomainError, SimulationFault, TrainingDiverged, WeightsFormatError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
