"""Command line interface for the full pipeline.

Subcommands: gen-data, train, eval, gradcheck, bound, compare. Every
command that writes artifacts also writes a manifest (config echo, input
and output hashes, seeds, timestamps) so each artifact is reachable from
exactly one manifest. Exit codes: 0 success, 1 runtime failure, 2 usage or
config error. TRA_LOG_LEVEL in {error, warn, info, debug} controls
verbosity.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__, envs, evaluate, losses, nn, theory
from .data import DatasetFormatError, load_dataset, save_dataset, export_jsonl
from .envs import ExpertFailure, InvalidSpecError
from .train import ConfigError, TrainConfig, read_log, resume, train

log = logging.getLogger("tra")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    """Maps to exit code 2."""


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(command: str, args: dict, inputs: dict, outputs: dict,
                   path) -> None:
    args = {k: v for k, v in args.items() if not callable(v)}
    manifest = {
        "command": command,
        "args": args,
        "version": __version__,
        "timestamp": time.time(),
        "inputs": {k: {"path": str(v), "sha256": file_sha256(v)}
                   for k, v in inputs.items()},
        "outputs": {k: {"path": str(v), "sha256": file_sha256(v)}
                    for k, v in outputs.items()},
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _resolve_env_arg(name: str) -> envs.EnvSpec:
    if name.endswith(".json") or name.strip().startswith("{"):
        blob = name
        if name.endswith(".json"):
            with open(name) as f:
                blob = f.read()
        return envs.EnvSpec.from_dict(json.loads(blob))
    return envs.resolve_spec(name)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    spec = _resolve_env_arg(args.env)
    env = envs.make_env(spec, args.env_seed)
    ds = envs.generate_demos(env, args.n, args.seed, args.noise)
    save_dataset(ds, args.out)
    if args.jsonl:
        export_jsonl(ds, args.jsonl)
    write_manifest("gen-data", vars(args).copy(), {},
                   {"dataset": args.out}, str(args.out) + ".manifest.json")
    log.info("wrote %d trajectories to %s", len(ds.trajectories), args.out)
    print(f"{args.out}: {len(ds.trajectories)} trajectories "
          f"(d_s={ds.d_s}, d_a={ds.d_a})")
    return EXIT_OK


def load_train_config(path) -> TrainConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config is not valid JSON: {e}")
    for field in ("method", "dataset"):
        if field not in raw:
            raise UsageError(f"config is missing required field {field!r}")
    try:
        return TrainConfig.from_dict(raw)
    except (ConfigError, TypeError) as e:
        raise UsageError(str(e))


def cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    try:
        cfg.validate()
    except ConfigError as e:
        raise UsageError(str(e))
    ds = load_dataset(cfg.dataset)
    if cfg.out_dir is None:
        cfg.out_dir = args.out_dir or os.path.dirname(args.config) or "."
    t0 = time.time()
    if args.resume:
        theta, rows = resume(args.resume, cfg, ds)
    else:
        theta, rows = train(cfg, ds)
    final = os.path.join(cfg.out_dir, "ckpt_final.trackpt")
    write_manifest("train", {"config": cfg.to_dict(), "resume": args.resume},
                   {"dataset": cfg.dataset},
                   {"checkpoint": final,
                    "log": os.path.join(cfg.out_dir, "log.csv")},
                   os.path.join(cfg.out_dir, "manifest.json"))
    if rows:
        log.info("trained %s for %d steps in %.1fs (final total %.5f)",
                 cfg.method, len(rows), time.time() - t0, rows[-1].total)
    print(f"{final}: method={cfg.method} steps={cfg.total_steps}")
    return EXIT_OK


def _tasks_for(env, which: str):
    tasks = []
    if which in ("indist", "all"):
        tasks += env.depth1_tasks()
    if which in ("comp2", "all"):
        tasks += env.compositional_tasks(2)
    if which in ("comp3", "all") and env.max_depth() >= 3:
        tasks += env.compositional_tasks(3)
        if which == "comp3" and not tasks:
            raise UsageError("environment has no depth-3 tasks")
    return tasks


def cmd_eval(args) -> int:
    spec = _resolve_env_arg(args.env)
    env = envs.make_env(spec, args.env_seed)
    theta = None
    method = "expert-oracle"
    if not args.expert_oracle:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --expert-oracle")
        theta, _, meta = nn.load_checkpoint(args.checkpoint)
        method = meta.get("method", "?")
        if theta.dims.d_s != env.d_s or theta.dims.d_a != env.d_a:
            raise UsageError(
                f"checkpoint dims (d_s={theta.dims.d_s}, d_a="
                f"{theta.dims.d_a}) do not match env ({env.d_s}, {env.d_a})")
    tasks = _tasks_for(env, args.tasks)
    if args.modality != "both":
        tasks = [t for t in tasks if t.modality == args.modality]
    if not tasks:
        raise UsageError(f"no tasks selected for {args.tasks!r} with "
                         f"modality {args.modality!r}")
    report = evaluate.success_table(env, theta, tasks, args.trials,
                                    seed=args.seed, oracle=args.expert_oracle,
                                    method=method)
    if args.mse_dataset:
        heldout = load_dataset(args.mse_dataset)
        mse = {}
        for modality in ("goal", "lang"):
            if args.expert_oracle:
                break
            try:
                mean, stderr = evaluate.action_mse(theta, heldout, modality)
                mse[modality] = {"mean": mean, "stderr": stderr}
            except ValueError:
                mse[modality] = None
        report.action_mse = mse
    payload = report.to_dict()
    with open(args.out, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    csv_path = str(args.out).rsplit(".", 1)[0] + ".csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task_id", "depth", "modality", "successes", "trials",
                    "rate", "stderr"])
        for r in report.results:
            w.writerow([r.task_id, r.depth, r.modality, r.successes,
                        r.trials, repr(r.rate), repr(r.stderr)])
    inputs = {}
    if args.checkpoint:
        inputs["checkpoint"] = args.checkpoint
    write_manifest("eval", vars(args).copy(), inputs,
                   {"report": args.out, "table": csv_path},
                   str(args.out) + ".manifest.json")
    for agg in report.aggregates():
        print(f"depth={agg['depth']} {agg['modality']}: "
              f"{agg['rate']:.2f} +- {agg['stderr']:.2f} "
              f"({agg['successes']}/{agg['trials']})")
    return EXIT_OK


def run_gradcheck(seed: int, loss_overrides=None, tol: float = 1e-6,
                  draws: int = 4, ks=(2, 4, 8)):
    """Finite-difference audit of every loss; returns (rows, all_pass).

    loss_overrides lets tests inject a broken implementation (negative
    control)."""
    rng = np.random.default_rng(seed)
    impl = {
        "info_nce": losses.info_nce,
        "bc_term": losses.bc_term,
        "tra_loss": losses.tra_loss,
        "awr_weighted_bc": losses.awr_weighted_bc,
    }
    impl.update(loss_overrides or {})
    from .data import Batch
    rows = []

    def check(name, analytic_fn, fd_loss_fn, theta):
        analytic = analytic_fn()
        fd = nn.finite_diff_grad(fd_loss_fn, theta)
        err = nn.grad_rel_error(analytic, fd)
        rows.append((name, err, err < tol))

    for draw in range(draws):
        for k in ks:
            d_s, d_a = 3, 2
            dims = nn.EncoderDims(d_s=d_s, d_a=d_a, vocab=envs.VOCAB_SIZE,
                                  emb=4, hidden=(6, 5), latent=5,
                                  policy_hidden=(7,))
            dims_enc = nn.EncoderDims(d_s=d_s, d_a=d_a, vocab=envs.VOCAB_SIZE,
                                      emb=4, hidden=(6, 5), latent=5,
                                      policy_hidden=(7,), encode_state=True)
            theta = nn.init_theta(int(rng.integers(2**31)), dims)
            theta = nn.unflatten_theta(
                nn.flatten_theta(theta) + rng.normal(0, 0.4, nn.n_params(theta)),
                theta)
            theta_enc = nn.init_theta(int(rng.integers(2**31)), dims_enc)
            theta_enc = nn.unflatten_theta(
                nn.flatten_theta(theta_enc)
                + rng.normal(0, 0.4, nn.n_params(theta_enc)), theta_enc)
            lengths = rng.integers(1, 6, size=k)
            tokens = np.zeros((k, 5), dtype=np.int64)
            for i in range(k):
                tokens[i, :lengths[i]] = rng.integers(0, envs.VOCAB_SIZE,
                                                      lengths[i])
            batch = Batch(
                s=rng.normal(size=(k, d_s)),
                a=rng.uniform(0.05, 0.95, size=(k, d_a)),
                s_plus=rng.normal(size=(k, d_s)),
                s_next=rng.normal(size=(k, d_s)),
                g=rng.normal(size=(k, d_s)),
                tokens=tokens, lengths=lengths)
            tag = f"[draw {draw} K={k}]"

            # info_nce: gradients w.r.t. u flow through psi(g)
            def nce_loss(th):
                u, _ = nn.mlp_forward(th.psi, batch.g)
                v, _ = nn.mlp_forward(th.phi, batch.s)
                return impl["info_nce"](u, v)[0]

            def nce_analytic():
                u, uc = nn.mlp_forward(theta.psi, batch.g)
                v, vc = nn.mlp_forward(theta.phi, batch.s)
                _, du, dv = impl["info_nce"](u, v)
                g = nn.theta_zeros_like(theta)
                gu, _ = nn.mlp_backward(theta.psi, uc, du)
                gv, _ = nn.mlp_backward(theta.phi, vc, dv)
                losses._accumulate_mlp(g.psi, gu)
                losses._accumulate_mlp(g.phi, gv)
                return g

            check(f"info_nce {tag}", nce_analytic, nce_loss, theta)

            cond = rng.normal(size=(k, dims.latent))

            def bc_loss(th):
                return impl["bc_term"](th, batch.s, cond, batch.a)[0]

            def bc_analytic():
                _, pol, _, _ = impl["bc_term"](theta, batch.s, cond, batch.a)
                g = nn.theta_zeros_like(theta)
                losses._accumulate_mlp(g.policy, pol)
                return g

            check(f"bc_term {tag}", bc_analytic, bc_loss, theta)

            # one mode per draw, cycling so every mode is exercised
            mode = losses.MODES[(draw * len(ks) + ks.index(k))
                                % len(losses.MODES)]
            for mode in (mode,):
                th = theta_enc if mode in ("gcbc_phi", "tra_goal") else theta
                if mode in ("awr_tra", "awr_grif"):
                    base = "tra" if mode == "awr_tra" else "grif"
                    w = {m: losses.awr_weights(
                        losses.awr_advantage(batch, th, m), 1.0)
                        for m in ("goal", "lang")}

                    def awr_full_loss(t2, base=base, w=w):
                        rep = impl["tra_loss"](batch, t2, 0.9, base)
                        lg = impl["awr_weighted_bc"](batch, t2, 1.0, "goal",
                                                     w["goal"])[0]
                        ll = impl["awr_weighted_bc"](batch, t2, 1.0, "lang",
                                                     w["lang"])[0]
                        return rep.total - rep.bc_goal - rep.bc_lang + lg + ll

                    def awr_analytic(th=th, base=base, w=w):
                        rep = impl["tra_loss"](batch, th, 0.9, base)
                        flat = nn.flatten_theta(rep.grads)
                        ones = np.ones(k)
                        for m, wm in (("goal", w["goal"]), ("lang", w["lang"])):
                            flat -= nn.flatten_theta(
                                impl["awr_weighted_bc"](batch, th, 1.0, m,
                                                        ones)[1])
                            flat += nn.flatten_theta(
                                impl["awr_weighted_bc"](batch, th, 1.0, m,
                                                        wm)[1])
                        return nn.unflatten_theta(flat, th)

                    check(f"tra_loss[{mode}] {tag}", awr_analytic,
                          awr_full_loss, th)
                else:
                    def mode_loss(t2, mode=mode):
                        return impl["tra_loss"](batch, t2, 0.9, mode).total

                    def mode_analytic(th=th, mode=mode):
                        return impl["tra_loss"](batch, th, 0.9, mode).grads

                    check(f"tra_loss[{mode}] {tag}", mode_analytic,
                          mode_loss, th)

            w_goal = losses.awr_weights(
                losses.awr_advantage(batch, theta, "goal"), 1.0)

            def awr_loss(th):
                return impl["awr_weighted_bc"](batch, th, 1.0, "goal",
                                               w_goal)[0]

            def awr_analytic2():
                return impl["awr_weighted_bc"](batch, theta, 1.0, "goal",
                                               w_goal)[1]

            check(f"awr_weighted_bc {tag}", awr_analytic2, awr_loss, theta)

    return rows, all(ok for _, _, ok in rows)


def cmd_gradcheck(args) -> int:
    t0 = time.time()
    rows, all_pass = run_gradcheck(args.seed)
    width = max(len(name) for name, _, _ in rows)
    for name, err, ok in rows:
        print(f"{name:<{width}}  rel_err={err:.3e}  "
              f"{'PASS' if ok else 'FAIL'}")
    print(f"{'ALL PASS' if all_pass else 'FAILURES PRESENT'} "
          f"({len(rows)} checks, {time.time() - t0:.1f}s)")
    return EXIT_OK if all_pass else EXIT_RUNTIME


def cmd_bound(args) -> int:
    try:
        n = theory.emit_bound_curve(args.min, args.max, args.step, args.out)
    except ValueError as e:
        raise UsageError(str(e))
    write_manifest("bound", vars(args).copy(), {}, {"curve": args.out},
                   str(args.out) + ".manifest.json")
    print(f"{args.out}: {n} rows")
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        with open(path) as f:
            reports.append((path, json.load(f)))
    if len(reports) < 2:
        raise UsageError("compare needs at least 2 eval reports")
    hashes = {r.get("env_hash") for _, r in reports}
    if len(hashes) != 1:
        raise UsageError(f"refusing to aggregate reports from different "
                         f"environments (hashes {sorted(hashes)})")
    rows = []
    for path, rep in reports:
        for agg in rep["aggregates"]:
            rows.append({
                "method": rep.get("method", "?"),
                "report": os.path.basename(path),
                "depth": agg["depth"],
                "modality": agg["modality"],
                "rate": agg["rate"],
                "stderr": agg["stderr"],
                "successes": agg["successes"],
                "trials": agg["trials"],
            })
    rows.sort(key=lambda r: (r["depth"], r["modality"], r["method"]))
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow(r)
    header = f"{'method':<12} {'depth':>5} {'modality':>8} " \
             f"{'rate':>6} {'stderr':>7} {'n':>5}"
    print(header)
    print("-" * len(header))
    for r in rows:
        print(f"{r['method']:<12} {r['depth']:>5} {r['modality']:>8} "
              f"{r['rate']:>6.2f} {r['stderr']:>7.3f} {r['trials']:>5}")
    write_manifest("compare", {"reports": list(args.reports)},
                   {f"report{i}": p for i, (p, _) in enumerate(reports)},
                   {"table": args.out}, str(args.out) + ".manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tra",
        description="Temporal representation alignment: data generation, "
                    "training, evaluation, and analysis.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate expert demonstrations")
    g.add_argument("--env", required=True,
                   help="preset name, spec JSON file, or inline JSON")
    g.add_argument("--n", type=int, required=True,
                   help="episodes per depth-1 subtask")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--env-seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.01,
                   help="expert action noise scale")
    g.add_argument("--out", required=True)
    g.add_argument("--jsonl", default=None,
                   help="also write a human-readable JSONL export")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a policy from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--out-dir", default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="closed-loop evaluation")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--env", required=True)
    e.add_argument("--env-seed", type=int, default=0)
    e.add_argument("--tasks", choices=["indist", "comp2", "comp3", "all"],
                   default="all")
    e.add_argument("--modality", choices=["goal", "lang", "both"],
                   default="both")
    e.add_argument("--trials", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--expert-oracle", action="store_true",
                   help="evaluate the scripted expert instead of a policy")
    e.add_argument("--mse-dataset", default=None,
                   help="held-out dataset for action MSE")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck",
                       help="finite-difference audit of all losses")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    b = sub.add_parser("bound", help="emit the compositional bound curve")
    b.add_argument("--min", type=float, default=1.0)
    b.add_argument("--max", type=float, default=2.4)
    b.add_argument("--step", type=float, default=0.01)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bound)

    m = sub.add_parser("compare",
                       help="aggregate eval reports into one table")
    m.add_argument("--reports", nargs="+", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_compare)
    return p


def _configure_logging() -> None:
    level = os.environ.get("TRA_LOG_LEVEL", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (UsageError, ConfigError, InvalidSpecError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, ExpertFailure, nn.CheckpointError,
            nn.NonFiniteError, OSError, ValueError, RuntimeError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
