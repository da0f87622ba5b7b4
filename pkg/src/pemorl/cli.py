"""``pemorl`` command line.

Every subcommand reads one TOML config (``--config``), lets flags override
``seed`` and ``out``, writes the resolved config next to its outputs and
records which config hash produced each file in ``manifest.json``.

Exit codes: 0 success, 1 user error (bad flags, bad config, missing or
malformed inputs), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import config as config_mod
from . import persistence, reporting
from . import trainer as tr
from .config import ConfigError, RunConfig
from .dataset import SchemaError, read_jsonl, write_jsonl
from .persistence import CheckpointError

log = logging.getLogger("pemorl")

COMMANDS = ("gen-data", "train-model", "train-policy", "eval", "ablate", "compare-models", "report")
WASSERSTEIN_FEATURES = "representative local state (time_left, budget_left, spend_speed, last_reward, last_cost, value_forecast)"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _lambdas(text: str) -> list:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from exc
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("need one or more non-negative lambda values")
    return vals


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration (defaults for every missing key)")
    common.add_argument("--out", help="output directory (overrides the config's 'out')")
    common.add_argument("--seed", type=_seed, help="global seed (overrides config and PEMORL_SEED)")
    common.add_argument("--jobs", type=_positive, default=1, help="worker processes for seed-parallel commands")
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")

    p = _Parser(prog="pemorl", description="Permutation-equivariant model-based offline RL for auto-bidding.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="collect the logged dataset and a broad-behavior test set")
    sub.add_parser("train-model", parents=[common], help="fit the environment-model ensemble")
    sub.add_parser("train-policy", parents=[common], help="train the robust actor-critic policy")
    ev = sub.add_parser("eval", parents=[common], help="evaluate the trained policy on the simulator")
    ev.add_argument("--episodes", type=_positive, help="evaluation episodes (default: trainer.eval_episodes)")
    ab = sub.add_parser("ablate", parents=[common], help="lambda ablation over seeds")
    ab.add_argument("--lambdas", type=_lambdas, default=[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], help="comma-separated lambda values")
    ab.add_argument("--seeds", type=_positive, default=5, help="number of seeds, starting at the global seed")
    ab.add_argument("--no-imaginary", action="store_true", help="also train with mixing ratio 0 at the configured lambda")
    ab.add_argument("--lower-bound", action="store_true", help="also write the lower-bound report for the configured lambda")
    cm = sub.add_parser("compare-models", parents=[common], help="PE model against the fc_non_pe and gsp_proxy baselines")
    cm.add_argument("--seeds", type=_positive, default=5, help="number of seeds, starting at the global seed")
    sub.add_parser("report", parents=[common], help="curves.csv and a gnuplot script from existing outputs")
    return p


def resolve_config(args, env=None) -> RunConfig:
    cfg = config_mod.load(args.config, env)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    return cfg.replace(**over) if over else cfg


def _manifest(out: str, cfg: RunConfig, files) -> None:
    path = os.path.join(out, "manifest.json")
    data = {}
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    for f in files:
        data[os.path.basename(f)] = cfg.hash()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _real_data(cfg: RunConfig):
    path = os.path.join(cfg.out, "real.jsonl")
    if os.path.exists(path):
        log.info("reading %s", path)
        return read_jsonl(path)
    real = tr.make_real_data(cfg)
    write_jsonl(real, path)
    log.info("wrote %s", path)
    return real


def _ensemble(cfg: RunConfig, real):
    path = os.path.join(cfg.out, "model.ckpt")
    if os.path.exists(path):
        log.info("loading %s", path)
        return persistence.load_ensemble(path, cfg), []
    log.info("fitting %d-member ensemble on %d transitions", cfg.model.n_members, len(real))
    ens = tr.fit_ensemble(real, cfg.model, cfg.seed)
    return ens, [persistence.save_ensemble(ens, path)]


def cmd_gen_data(cfg: RunConfig, args) -> list:
    real, test = tr.make_benchmark(cfg, cfg.seed)
    paths = [os.path.join(cfg.out, "real.jsonl"), os.path.join(cfg.out, "test.jsonl")]
    write_jsonl(real, paths[0])
    write_jsonl(test, paths[1])
    return paths


def cmd_train_model(cfg: RunConfig, args) -> list:
    real = _real_data(cfg)
    ens = tr.fit_ensemble(real, cfg.model, cfg.seed)
    for k, m in enumerate(ens.members_):
        log.info("member %d: best validation NLL %.4f", k, m.best_val_loss_)
    return [persistence.save_ensemble(ens, os.path.join(cfg.out, "model.ckpt"))]


def cmd_train_policy(cfg: RunConfig, args) -> list:
    real = _real_data(cfg)
    ens, written = _ensemble(cfg, real)
    res = tr.pemorl_train(cfg, real, ens)
    log.info("%d iterations, converged=%s", len(res.log), res.converged)
    rows = [{"seed": cfg.seed, "variant": "pemorl", "lam": float(cfg.learner.lam), **e} for e in res.log]
    written.append(reporting.write_csv(os.path.join(cfg.out, "metrics.csv"), "metrics.csv", rows, cfg.hash()))
    written.append(persistence.save_policy(res.policy, os.path.join(cfg.out, "policy.ckpt")))
    return written


def cmd_eval(cfg: RunConfig, args) -> list:
    policy = persistence.load_policy(os.path.join(cfg.out, "policy.ckpt"), cfg)
    real_path = os.path.join(cfg.out, "real.jsonl")
    real = read_jsonl(real_path) if os.path.exists(real_path) else None
    episodes = args.episodes or cfg.trainer.eval_episodes
    bg = cfg.data.background_params(cfg.sim.n_advertisers)
    rep = tr.evaluate_policy(policy.as_env_policy("mean"), cfg.sim, bg, episodes, cfg.seed, real=real,
                             n_projections=cfg.trainer.n_projections)
    log.info("GMV %.2f  Cost %.2f  ROI %.3f  R/R* %.3f  online %.3f", rep.gmv, rep.cost, rep.roi, rep.r_over_rstar, rep.online_rate)
    payload = {"seed": cfg.seed, "lam": float(cfg.learner.lam), "wasserstein_features": WASSERSTEIN_FEATURES, **rep.to_dict()}
    return [reporting.write_json(os.path.join(cfg.out, "eval_report.json"), "eval_report.json", payload, cfg.hash())]


def cmd_ablate(cfg: RunConfig, args) -> list:
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    res = tr.run_ablation(cfg, args.lambdas, seeds, args.jobs, args.no_imaginary, args.lower_bound)
    h = cfg.hash()
    out = [
        reporting.write_csv(os.path.join(cfg.out, "ablation_runs.csv"), "ablation_runs.csv", res.runs, h),
        reporting.write_csv(os.path.join(cfg.out, "ablation.csv"), "ablation.csv", tr.aggregate_ablation(res.runs), h),
        reporting.write_csv(os.path.join(cfg.out, "metrics.csv"), "metrics.csv", res.metrics, h),
    ]
    if args.lower_bound:
        out.append(reporting.write_csv(os.path.join(cfg.out, "lower_bound.csv"), "lower_bound.csv", res.lower_bound, h))
    for row in tr.aggregate_ablation(res.runs):
        log.info("lambda %g: R/R* %.4f (sd %.4f) online %.3f GMV %.2f", row["lam"], row["R_over_Rstar"],
                 row["R_over_Rstar_std"], row["online_rate"], row["GMV"])
    return out


def cmd_compare_models(cfg: RunConfig, args) -> list:
    rows = tr.run_model_comparison(cfg, range(cfg.seed, cfg.seed + args.seeds), args.jobs)
    for r in rows:
        log.info("seed %d %-10s test MAE %.4f  MSE %.4f", r["seed"], r["model"], r["test_MAE"], r["test_MSE"])
    return [reporting.write_csv(os.path.join(cfg.out, "model_compare.csv"), "model_compare.csv", rows, cfg.hash())]


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-model": cmd_train_model,
    "train-policy": cmd_train_policy,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "compare-models": cmd_compare_models,
    "report": lambda cfg, args: reporting.write_report(cfg.out, cfg.hash()),
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "pemorl: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        os.makedirs(cfg.out, exist_ok=True)
        written = [config_mod.write_resolved(cfg, cfg.out)]
        written += HANDLERS[args.command](cfg, args)
        _manifest(cfg.out, cfg, written)
    except (ConfigError, SchemaError, CheckpointError, FileNotFoundError, UsageError) as exc:
        print(f"pemorl: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a bug or a numerical failure
        log.debug("internal error", exc_info=True)
        print(f"pemorl: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
