"""Command-line entry point: ``v2xalloc <verb> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import metrics, runner
from .config import ConfigError, load_config
from .env import V2XEnv
from .graph import MultiplyCounter, build_graph, count_aggregation_ops, message_passing_layer
from .nn import NumericalError, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4
CHECKPOINT = "checkpoint.npz"
log = logging.getLogger("v2xalloc")


class MissingArtifact(FileNotFoundError):
    pass


def _int_list(text):
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file; V2X_<SECTION>_<FIELD> variables override it")
    common.add_argument("--seed", type=int, help="master seed (default: run.seed)")
    common.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")
    common.add_argument("--iterations", type=int, help="training iterations (default: run.iterations)")
    common.add_argument("--vehicles", type=_int_list, help="vehicle count(s), comma separated")
    common.add_argument("--mode", help="method or graph mode, depending on the verb")
    common.add_argument("--checkpoint", type=Path, help="training output directory or checkpoint file")
    common.add_argument("--timing", action="store_true", help="record wall-clock decision latency")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="v2xalloc", description=__doc__)
    verbs = parser.add_subparsers(dest="verb", required=True, metavar="verb")
    verbs.add_parser("train", parents=[common], help="train gnn (default) or dqn; writes checkpoint and trace")
    verbs.add_parser("test", parents=[common], help="greedy static test of a checkpoint over vehicle counts")
    verbs.add_parser("dynamic", parents=[common], help="dynamic-arrival run of a checkpoint against random")
    verbs.add_parser("baseline", parents=[common], help="static test of a baseline: --mode random|dqn")
    verbs.add_parser("inspect-graph", parents=[common], help="dump the link graph of one placement")
    p = verbs.add_parser("count-ops", parents=[common], help="aggregation multiply counts, both graph modes")
    p.add_argument("--s", type=_int_list, default=(10, 20, 50, 100), help="vehicle counts")
    p = verbs.add_parser("strategy", parents=[common], help="power share per remaining-time bin")
    p.add_argument("--actions", type=Path, help="actions.csv from test (default: <out>/actions.csv)")
    return parser


# ------------------------------------------------------------------ helpers
def _setup(args, verb):
    cfg = load_config(args.config)
    seed = cfg.run.seed if args.seed is None else args.seed
    if args.iterations is not None:
        if args.iterations <= 0:
            raise ConfigError("--iterations must be positive")
        cfg = cfg.replace("run", iterations=args.iterations)
    extra = {"mode": args.mode, "vehicles": list(args.vehicles) if args.vehicles else None}
    body = metrics.manifest(cfg, seed, verb, extra)
    digest = metrics.write_manifest(args.out, body)
    return cfg, seed, digest


def _load(cfg, path):
    if path is None:
        raise MissingArtifact("this verb needs --checkpoint")
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT
    if not path.exists():
        raise MissingArtifact(f"checkpoint not found: {path}")
    return runner.restore(cfg, load_checkpoint(path))


def _counts(args, cfg):
    return args.vehicles or cfg.run.vehicle_counts


def _static(args, cfg, seed, digest, policies, prefix=""):
    results = runner.test_static(cfg, policies, seed=seed, vehicle_counts=_counts(args, cfg),
                                 log_actions=True, timing=args.timing)
    rows, summary, actions = [], [], []
    for (name, n), res in results.items():
        flat = [s for chunk in res["per_reset"] for s in chunk]
        rows += metrics.sample_rows(name, seed, flat)
        summary.append({"mode": name, "vehicle_count": n, **res["summary"]})
        actions += [(name, n, a.iteration, a.link, a.remaining_time_s, a.subchannel, a.power_level, a.reward)
                    for a in res["actions"]]
    out = args.out
    metrics.write_csv(out / f"{prefix}test.csv", metrics.RUN_COLUMNS, rows, digest)
    metrics.write_csv(out / f"{prefix}summary.csv",
                      ("mode", "vehicle_count", "v2i_sum_rate_bps", "v2i_se", "v2v_success_rate", "v2v_se"),
                      summary, digest)
    metrics.write_csv(out / f"{prefix}actions.csv", ACTION_COLUMNS, actions, digest)
    for row in summary:
        print(f"{row['mode']:>8} s={row['vehicle_count']:<3} v2i={row['v2i_sum_rate_bps'] / 1e6:8.2f} Mbps "
              f"success={row['v2v_success_rate']:.4f} (se {row['v2v_se']:.4f})")
    return results


ACTION_COLUMNS = ("mode", "vehicle_count", "iteration", "link", "remaining_time_s", "subchannel", "power_level",
                  "reward")


def _train(args, cfg, seed, digest, method):
    n = _counts(args, cfg)[0] if args.vehicles else None
    try:
        res = runner.train(cfg, method, seed=seed, n_vehicles=n, progress=500 if args.verbose else None)
    except runner.TrainingHalted as exc:
        save_checkpoint(args.out / CHECKPOINT, exc.last_good)
        raise
    save_checkpoint(args.out / CHECKPOINT, runner.checkpoint_arrays(res.agent, res.sage))
    metrics.write_csv(args.out / "train.csv", metrics.RUN_COLUMNS,
                      metrics.sample_rows(f"train-{method}", seed, res.samples), digest)
    if res.sage_losses:
        metrics.write_csv(args.out / "sage_loss.csv", ("iteration", "loss"), res.sage_losses, digest)
    tail = [s.v2v_success_rate for s in res.samples[-50:]]
    print(f"trained {method} for {cfg.run.iterations} iterations; final success {np.mean(tail):.4f}")
    return res


# ------------------------------------------------------------------ verbs
def cmd_train(args):
    cfg, seed, digest = _setup(args, "train")
    method = args.mode or ("gnn" if cfg.agent.use_gnn else "dqn")
    if method not in ("gnn", "dqn"):
        raise ConfigError(f"train --mode must be gnn or dqn, got {method!r}")
    _train(args, cfg, seed, digest, method)


def cmd_test(args):
    cfg, seed, digest = _setup(args, "test")
    method, agent, sage = _load(cfg, args.checkpoint)
    policies = {method: (method, agent, sage)}
    if args.mode == "with-random":
        policies["random"] = ("random", None, None)
    _static(args, cfg, seed, digest, policies)


def cmd_baseline(args):
    cfg, seed, digest = _setup(args, "baseline")
    mode = args.mode or "random"
    if mode == "random":
        _static(args, cfg, seed, digest, {"random": ("random", None, None)})
    elif mode == "dqn":
        if args.checkpoint is not None:
            method, agent, sage = _load(cfg, args.checkpoint)
            if method != "dqn":
                raise ConfigError("baseline --mode dqn needs a checkpoint trained with --mode dqn")
        else:
            res = _train(args, cfg, seed, digest, "dqn")
            agent = res.agent
        _static(args, cfg, seed, digest, {"dqn": ("dqn", agent, None)})
    else:
        raise ConfigError(f"baseline --mode must be random or dqn, got {mode!r}")


def cmd_dynamic(args):
    cfg, seed, digest = _setup(args, "dynamic")
    n = _counts(args, cfg)[0] if args.vehicles else None
    if args.mode == "random":
        policies = {"random": ("random", None, None)}
    else:
        method, agent, sage = _load(cfg, args.checkpoint)
        policies = {method: (method, agent, sage), "random": ("random", None, None)}
    rows, seg_rows = [], []
    for name, (method, agent, sage) in policies.items():
        samples, _ = runner.test_dynamic(cfg, method, agent, sage, seed=seed, n_vehicles=n, timing=args.timing)
        rows += metrics.sample_rows(f"dynamic-{name}", seed, samples)
        for r in runner.segment_summary(samples, cfg.run.dynamic_segments):
            seg_rows.append({"mode": name, **r})
        last = [r for r in seg_rows if r["mode"] == name and r["observable"] == "v2v_success_rate"][-1]
        print(f"{name:>8} final-segment success mean {last['mean']:.4f}")
    metrics.write_csv(args.out / "dynamic.csv", metrics.RUN_COLUMNS, rows, digest)
    cols = ("mode", "segment", "observable", "n", "min", "q1", "median", "q3", "max", "mean")
    metrics.write_csv(args.out / "segments.csv", cols, seg_rows, digest)


def cmd_inspect_graph(args):
    cfg, seed, digest = _setup(args, "inspect-graph")
    n = _counts(args, cfg)[0] if args.vehicles else cfg.env.n_vehicles
    env = V2XEnv(cfg.env, np.random.default_rng(seed)).reset(n)
    graph = env.graph if args.mode != "complete" else build_graph(env.vehicles, min(cfg.env.n_destinations, n - 1),
                                                                 complete=True)
    text = graph.dump()
    (args.out / "graph.txt").write_text(f"# manifest_sha256={digest}\n" + text)
    deg = graph.degree()
    print(f"nodes={len(graph)} vehicles={n} mean_neighbors={deg.mean():.3f} min={deg.min()} max={deg.max()}")


def cmd_count_ops(args):
    cfg, seed, digest = _setup(args, "count-ops")
    d_in, d_out = cfg.env.feature_dim, cfg.sage.out_dim
    rng = np.random.default_rng(seed)
    rows = []
    for s in args.s:
        env = V2XEnv(cfg.env, np.random.default_rng(runner.stream_seed(seed, s))).reset(s)
        k = min(cfg.env.n_destinations, s - 1)
        for mode in ("complete", "implicit"):
            graph = env.graph if mode == "implicit" else build_graph(env.vehicles, k, complete=True)
            counter = MultiplyCounter()
            feats = rng.normal(size=(len(graph), d_in))
            message_passing_layer(graph, feats, rng.normal(size=(d_out, d_in)), counter)
            rows.append({"s": s, "mode": mode, "formula": count_aggregation_ops(s, d_in, d_out, mode),
                         "measured": counter.count, "mean_neighbors": float(graph.degree().mean())})
    metrics.write_csv(args.out / "count_ops.csv", ("s", "mode", "formula", "measured", "mean_neighbors"), rows,
                      digest)
    print(f"{'s':>4} {'complete':>12} {'implicit':>12} {'ratio':>8}   (d_in={d_in}, d_out={d_out}, N_nei=12)")
    for s in args.s:
        c = count_aggregation_ops(s, d_in, d_out, "complete")
        i = count_aggregation_ops(s, d_in, d_out, "implicit")
        print(f"{s:>4} {c:>12,} {i:>12,} {i / c:>8.4f}")
    if args.timing:
        # wall-clock numbers are not reproducible, so they live apart from count_ops.csv
        lat = {mode: runner.decision_latency(cfg, args.s, mode, repeats=100 if mode == "implicit" else 20, seed=seed)
               for mode in ("implicit", "complete")}
        rows = [{"s": s, "mode": mode, "decision_latency_us": lat[mode][s]} for mode in lat for s in args.s]
        metrics.write_csv(args.out / "latency.csv", ("s", "mode", "decision_latency_us"), rows, digest)
        print(f"{'s':>4} {'implicit_us':>12} {'complete_us':>12}")
        for s in args.s:
            print(f"{s:>4} {lat['implicit'][s]:>12.0f} {lat['complete'][s]:>12.0f}")


def cmd_strategy(args):
    cfg, seed, digest = _setup(args, "strategy")
    path = args.actions or args.out / "actions.csv"
    if not Path(path).exists():
        raise MissingArtifact(f"action log not found: {path}")
    _, rows = metrics.read_csv(path)
    if args.mode:
        rows = [r for r in rows if r["mode"] == args.mode]
    records = [runner.ActionRecord(int(r["iteration"]), r["link"], float(r["remaining_time_s"]),
                                   int(r["subchannel"]), int(r["power_level"]), float(r["reward"])) for r in rows]
    table = runner.strategy_histogram(records, cfg.env.deadline_s, 0.01, cfg.env.n_power_levels)
    cols = ("bin_lo_s", "bin_hi_s", "decisions") + tuple(f"share_p{p}" for p in range(cfg.env.n_power_levels))
    metrics.write_csv(args.out / "strategy.csv", cols, table, digest)
    levels = "  ".join(f"{p:>5.0f}dBm" for p in cfg.env.power_levels_dbm)
    print(f"{'U bin (s)':>13} {'n':>6}  {levels}")
    for row in table:
        shares = "  ".join(f"{row[f'share_p{p}']:>8.3f}" for p in range(cfg.env.n_power_levels))
        print(f"({row['bin_lo_s']:.2f},{row['bin_hi_s']:.2f}] {row['decisions']:>6}  {shares}")


COMMANDS = {
    "train": cmd_train, "test": cmd_test, "baseline": cmd_baseline, "dynamic": cmd_dynamic,
    "inspect-graph": cmd_inspect_graph, "count-ops": cmd_count_ops, "strategy": cmd_strategy,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
