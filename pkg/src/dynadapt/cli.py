"""Command-line entry point: ``dynadapt <subcommand> --config exp.toml ...``.

Exit status is 0 only when the whole command succeeded; configuration problems exit with 2,
any other failure with 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, sysid
from .core import ConfigError, DynamicsVector, read_episodes, write_episodes

log = logging.getLogger("dynadapt")


def _cfg(args) -> harness.ExperimentConfig:
    return harness.load_config(args.config, seed=args.seed)


def _progress(msg) -> None:
    log.info("%s", msg)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _read_data(path) -> list:
    """Episodes from one JSONL file or from every ``*.jsonl`` file of a directory (sorted by name)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.jsonl"))
        if not files:
            raise FileNotFoundError(f"no .jsonl files in {path}")
        return [ep for f in files for ep in read_episodes(f)]
    return read_episodes(path)


def cmd_train_policy(args) -> None:
    cfg = _cfg(args)
    every = max(1, cfg.ppo.iterations // 20)

    def progress(row):
        if row["iter"] % every == 0:
            log.info("iter %d mean reward %.3f", row["iter"], row["mean_reward"])

    harness.train_policy(cfg, Path(args.out), progress=progress)
    log.info("policy written to %s", Path(args.out) / "policy")


def cmd_collect_offpolicy(args) -> None:
    cfg = _cfg(args)
    if args.train_set:
        episodes = harness.sysid_training_episodes(cfg)
    else:
        env = harness.base_env(cfg)
        if args.dynamics:
            env = env.with_dynamics(DynamicsVector(np.asarray(_floats(args.dynamics)), env.dynamics.base,
                                                   cfg.env.range_frac))
        n = args.episodes if args.episodes is not None else cfg.eval.offpolicy_episodes
        policy, cond = None, None
        if args.policy:
            policy = harness.load_policy(args.policy)
            cond = harness._conditioning(policy, env, env.dynamics.base, cfg.env.range_frac,
                                         env.dynamics.values, None, 0.0)
        rng = harness.SeededRng(cfg.seed, 9)
        episodes = harness.collect_offpolicy(env, n, rng, policy=policy, cond=cond, env_id=args.env_id)
    write_episodes(args.out, episodes)
    log.info("%d episodes written to %s", len(episodes), args.out)


def cmd_train_sysid(args) -> None:
    cfg = _cfg(args)
    episodes = _read_data(args.data) if args.data else None
    harness.train_sysid(cfg, episodes, out_dir=Path(args.out))
    log.info("estimator written to %s", Path(args.out) / "sysid")


def cmd_estimate(args) -> None:
    est = harness.load_estimator(args.sysid)
    post = sysid.estimate(est, _read_data(args.data), est.cfg.T)
    harness.write_posterior(args.out, post)
    print(json.dumps(post.to_dict()))


def cmd_evaluate_zero_shot(args) -> None:
    cfg = _cfg(args)
    rep = harness.evaluate_zero_shot(harness.load_policy(args.policy), harness.load_estimator(args.sysid), cfg)
    rep.write(args.out)
    print(json.dumps(rep.summary()))
    if rep.skipped:
        raise RuntimeError(f"{len(rep.skipped)} test environment(s) were skipped; see summary.json")


def cmd_finetune(args) -> None:
    cfg = _cfg(args)
    env = harness.held_out_envs(cfg)[args.env_index]
    n = args.episodes if args.episodes is not None else cfg.eval.finetune_episodes
    res = harness.finetune(harness.load_policy(args.policy), harness.load_estimator(args.sysid), env, n, cfg,
                           index=args.env_index)
    out = Path(args.out)
    harness.write_csv(out / "finetune.csv", [{"episode": i, "reward": r} for i, r in enumerate(res.curve)],
                      ["episode", "reward"])
    res.policy.save(out / "policy")
    if res.posterior is not None:
        harness.write_posterior(out / "posterior.json", res.posterior)


def cmd_ablate(args) -> None:
    cfg = _cfg(args)
    rows = harness.run_ablation_suite(cfg, args.seeds, args.variants or tuple(harness.ABLATION_VARIANTS), _progress)
    harness.write_csv(Path(args.out) / "ablation.csv", rows, list(rows[0]))


def cmd_sweep_ranges(args) -> None:
    cfg = _cfg(args)
    rows = harness.run_range_sweep(cfg, args.ranges, args.seeds, _progress)
    harness.write_csv(Path(args.out) / "range_sweep.csv", rows, list(rows[0]))


def cmd_noise_eval(args) -> None:
    cfg = _cfg(args)
    rows = harness.run_noise_eval(cfg, args.K, args.seeds, _progress)
    harness.write_csv(Path(args.out) / "noise_eval.csv", rows, list(rows[0]))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynadapt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, needs_config=True, help=None):
        sp = sub.add_parser(name, help=help)
        if needs_config:
            sp.add_argument("--config", required=True, help="experiment TOML")
            sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.set_defaults(func=fn)
        return sp

    sp = add("train-policy", cmd_train_policy, help="train the dynamics-conditioned policy")
    sp.add_argument("--out", required=True, help="output directory (checkpoint + metrics.csv)")

    sp = add("collect-offpolicy", cmd_collect_offpolicy, help="write rollout JSONL")
    sp.add_argument("--out", required=True, help="JSONL file")
    sp.add_argument("--episodes", type=int, default=None)
    sp.add_argument("--dynamics", default=None, help="comma-separated dynamics values (default: base)")
    sp.add_argument("--policy", default=None, help="checkpoint directory; default is the uniform random policy")
    sp.add_argument("--env-id", type=int, default=1)
    sp.add_argument("--train-set", action="store_true", help="collect the estimator's randomized training set")

    sp = add("train-sysid", cmd_train_sysid, help="train the elemental dynamics estimator")
    sp.add_argument("--data", default=None, help="training JSONL file or directory (default: collect per config)")
    sp.add_argument("--out", required=True)

    sp = add("estimate", cmd_estimate, needs_config=False, help="posterior over dynamics from rollout JSONL")
    sp.add_argument("--model", "--sysid", dest="sysid", required=True, help="estimator checkpoint directory")
    sp.add_argument("--data", required=True, help="rollout JSONL file or directory")
    sp.add_argument("--out", required=True, help="posterior.json path")

    sp = add("evaluate-zero-shot", cmd_evaluate_zero_shot, help="zero-shot transfer to held-out dynamics")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--sysid", required=True)
    sp.add_argument("--out", required=True)

    sp = add("finetune", cmd_finetune, help="fine-tune in one held-out environment")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--sysid", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--episodes", type=int, default=None)
    sp.add_argument("--env-index", type=int, default=0)

    sp = add("ablate", cmd_ablate, help="regularizer / conditioning ablation table")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--variants", nargs="+", default=None, choices=list(harness.ABLATION_VARIANTS))

    sp = add("sweep-ranges", cmd_sweep_ranges, help="matched train/test randomization-range sweep")
    sp.add_argument("--out", required=True)
    sp.add_argument("--ranges", type=float, nargs="+", default=list(harness.SWEEP_RANGES))
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])

    sp = add("noise-eval", cmd_noise_eval, help="motor-noise evaluation, known and unknown noise network")
    sp.add_argument("--out", required=True)
    sp.add_argument("--K", type=float, nargs="+", default=[0.0, 0.5, 1.0])
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        log.error("configuration error: %s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure must surface as a non-zero exit
        log.exception("failed: %s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
