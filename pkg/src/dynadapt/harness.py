"""Experiment orchestration: config loading, training/evaluation pipelines and the study protocols.

Everything is driven by an :class:`ExperimentConfig` plus an integer seed.  Random streams are
separated by purpose (policy training, sysid data, test environments, evaluation) so the test
dynamics never overlap with anything seen in training.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from . import envs, ppo, sysid
from .core import ConfigError, DynamicsVector, Episode, SeededRng, sample_dynamics, write_episodes
from .dcp import Policy

log = logging.getLogger(__name__)

# stream ids for the top-level random streams
_STREAM_SYSID_DATA = 4
_STREAM_TEST_ENVS = 5
_STREAM_EVAL = 6
_STREAM_FINETUNE = 7

UNKNOWN_TAU_OFFSET = 1_000_003


# --- configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class MotorBlock:
    tau_seed: int = 7
    d_phi: int = 4
    K: float = 0.0
    omega_scale: float = 1.0


@dataclass(frozen=True)
class EnvBlock:
    family: str = "point_mass_1d"
    base: Optional[tuple[float, ...]] = None  # None: the family's default base values
    range_frac: float = 0.2
    v: float = 0.01
    dt: float = 0.05
    horizon: int = 200
    init_width: Optional[float] = None
    motor: Optional[MotorBlock] = None


@dataclass(frozen=True)
class SysidDataBlock:
    """How much off-policy data the estimator is trained on."""

    train_envs: int = 50
    episodes_per_env: int = 16


@dataclass(frozen=True)
class EvalBlock:
    n_test_envs: int = 50
    episodes_per_env: int = 20
    offpolicy_episodes: int = 200
    finetune_episodes: int = 100
    finetune_batch: int = 4
    test_range_frac: Optional[float] = None  # None: same as env.range_frac
    conditioning: str = "mean"  # "mean" | "sample" (posterior draw, for study)
    deterministic: bool = True  # evaluate the policy mean action

    def __post_init__(self):
        if self.offpolicy_episodes < 1:
            raise ConfigError("eval.offpolicy_episodes must be >= 1")
        if self.n_test_envs < 1 or self.episodes_per_env < 1:
            raise ConfigError("eval.n_test_envs and eval.episodes_per_env must be >= 1")
        if self.finetune_batch < 1:
            raise ConfigError("eval.finetune_batch must be >= 1")
        if self.conditioning not in ("mean", "sample"):
            raise ConfigError(f"eval.conditioning must be 'mean' or 'sample', got {self.conditioning!r}")


@dataclass(frozen=True)
class AblationFlags:
    use_eta_encoding: bool = True
    w_inv: float = 0.1
    w_rec: float = 0.1
    noise_mode: bool = False

    def __post_init__(self):
        if self.w_inv < 0 or self.w_rec < 0:
            raise ConfigError("ablation weights must be non-negative")


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvBlock
    ppo: ppo.PpoConfig
    sysid: sysid.SysidConfig
    sysid_data: SysidDataBlock
    eval: EvalBlock
    flags: AblationFlags = AblationFlags()
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0

    def with_flags(self, **kw) -> "ExperimentConfig":
        return replace(self, flags=replace(self.flags, **kw))

    def with_range(self, range_frac: float) -> "ExperimentConfig":
        return replace(self, env=replace(self.env, range_frac=range_frac),
                       eval=replace(self.eval, test_range_frac=None))

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "env": _strip_none(asdict(self.env)),
            "ppo": {**{k: v for k, v in self.ppo.to_dict().items() if k not in _PPO_FROM_OTHER_BLOCKS},
                    "hidden": list(self.hidden)},
            "sysid": {**{k: v for k, v in self.sysid.to_dict().items() if k not in ("family", "noise_mode")},
                      **asdict(self.sysid_data)},
            "eval": _strip_none(asdict(self.eval)),
            "ablation": asdict(self.flags),
        }
        return d


# PPO/sysid fields that are owned by other blocks of the experiment config
_PPO_FROM_OTHER_BLOCKS = ("range_frac", "w_inv", "w_rec", "noise_mode", "omega_scale")


def _strip_none(d: dict) -> dict:
    return {k: (_strip_none(v) if isinstance(v, dict) else v) for k, v in d.items() if v is not None}


def _take(block: dict, cls, where: str, exclude: Sequence[str] = ()) -> dict:
    names = {f.name for f in fields(cls)} - set(exclude)
    unknown = set(block) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return dict(block)


def config_from_dict(d: dict, seed: Optional[int] = None) -> ExperimentConfig:
    missing = [b for b in ("env", "ppo", "sysid", "eval") if b not in d]
    if missing:
        raise ConfigError(f"config is missing block(s): {missing}")
    extra = set(d) - {"env", "ppo", "sysid", "eval", "ablation", "seed"}
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")

    env_d = dict(d["env"])
    motor = env_d.pop("motor", None)
    env_d = _take(env_d, EnvBlock, "env", exclude=("motor",))
    if "base" in env_d:
        env_d["base"] = tuple(float(x) for x in env_d["base"])
    env_block = EnvBlock(**env_d, motor=MotorBlock(**_take(motor, MotorBlock, "env.motor")) if motor else None)
    envs.get_family(env_block.family)  # validates the family name

    flags = AblationFlags(**_take(d.get("ablation", {}), AblationFlags, "ablation"))

    ppo_d = dict(d["ppo"])
    hidden = tuple(int(h) for h in ppo_d.pop("hidden", (64, 64)))
    ppo_d = _take(ppo_d, ppo.PpoConfig, "ppo", exclude=_PPO_FROM_OTHER_BLOCKS)
    omega_scale = env_block.motor.omega_scale if env_block.motor else 1.0
    ppo_cfg = ppo.PpoConfig(**ppo_d, range_frac=env_block.range_frac, w_inv=flags.w_inv, w_rec=flags.w_rec,
                            noise_mode=flags.noise_mode, omega_scale=omega_scale)

    sy_d = dict(d["sysid"])
    data_d = {k: sy_d.pop(k) for k in ("train_envs", "episodes_per_env") if k in sy_d}
    sy_d = _take(sy_d, sysid.SysidConfig, "sysid", exclude=("family", "noise_mode"))
    sy_d["family"] = env_block.family
    sy_d["noise_mode"] = flags.noise_mode
    sysid_cfg = sysid.SysidConfig.from_dict(sy_d)

    eval_block = EvalBlock(**_take(d["eval"], EvalBlock, "eval"))
    s = int(d.get("seed", 0)) if seed is None else int(seed)
    return ExperimentConfig(env_block, ppo_cfg, sysid_cfg, SysidDataBlock(**data_d), eval_block, flags, hidden, s)


def load_config(path, seed: Optional[int] = None) -> ExperimentConfig:
    with open(path, "rb") as fh:
        return config_from_dict(tomllib.load(fh), seed)


def sync_blocks(cfg: ExperimentConfig) -> ExperimentConfig:
    """Propagate env range and ablation flags into the PPO and sysid blocks."""
    omega_scale = cfg.env.motor.omega_scale if cfg.env.motor else 1.0
    p = replace(cfg.ppo, range_frac=cfg.env.range_frac, w_inv=cfg.flags.w_inv, w_rec=cfg.flags.w_rec,
                noise_mode=cfg.flags.noise_mode, omega_scale=omega_scale)
    s = replace(cfg.sysid, family=cfg.env.family, noise_mode=cfg.flags.noise_mode)
    return replace(cfg, ppo=p, sysid=s)


# --- environments ----------------------------------------------------------------

def base_env(cfg: ExperimentConfig, tau_seed: Optional[int] = None, K: Optional[float] = None) -> envs.EnvSpec:
    fam = envs.get_family(cfg.env.family)
    base = fam.base if cfg.env.base is None else np.asarray(cfg.env.base, dtype=np.float64)
    motor = None
    if cfg.env.motor is not None:
        m = cfg.env.motor
        motor = envs.MotorNoiseSpec(m.tau_seed if tau_seed is None else int(tau_seed), m.d_phi,
                                    np.zeros(fam.act_dim * m.d_phi), m.K if K is None else float(K))
    return envs.EnvSpec(cfg.env.family, DynamicsVector.at_base(base, cfg.env.range_frac), cfg.env.v, motor,
                        cfg.env.dt, cfg.env.horizon, cfg.seed, cfg.env.init_width)


def _with_truth(env: envs.EnvSpec, dyn: DynamicsVector, omega: Optional[np.ndarray]) -> envs.EnvSpec:
    motor = env.motor
    if motor is not None:
        motor = replace(motor, omega=np.asarray(omega, dtype=np.float64))
    return replace(env, dynamics=dyn, motor=motor)


def sample_envs(env: envs.EnvSpec, n: int, range_frac: float, omega_scale: float,
                rng: SeededRng) -> list[envs.EnvSpec]:
    """``n`` environments with dynamics drawn around ``env.dynamics`` and fresh motor weights."""
    od = ppo.omega_dim(env)
    out = []
    for i in range(n):
        r = rng.spawn("env", i)
        dyn = sample_dynamics(env.dynamics, range_frac, r)
        om = r.uniform(-omega_scale, omega_scale, od) if od else np.zeros(0)
        out.append(_with_truth(env, dyn, om))
    return out


def held_out_envs(cfg: ExperimentConfig, env: Optional[envs.EnvSpec] = None) -> list[envs.EnvSpec]:
    """Held-out environments from a stream disjoint from every training stream."""
    env = base_env(cfg) if env is None else env
    rf = cfg.env.range_frac if cfg.eval.test_range_frac is None else cfg.eval.test_range_frac
    om = cfg.env.motor.omega_scale if cfg.env.motor else 1.0
    return sample_envs(env, cfg.eval.n_test_envs, rf, om, SeededRng(cfg.seed, _STREAM_TEST_ENVS))


# --- data collection -------------------------------------------------------------

def collect_offpolicy(env: envs.EnvSpec, episodes: int, rng: SeededRng, policy: Optional[Policy] = None,
                      env_id: int = 1, cond: Optional[np.ndarray] = None) -> list[Episode]:
    """Complete episodes from a uniform-random policy (``policy=None``) or a checkpointed policy.

    Motor noise, when configured, acts during collection as it does at execution time.
    """
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    fam = env.fam
    n, H = episodes, env.horizon
    s = envs.reset(env, rng.spawn("reset"), n)
    act_rng, noise_rng = rng.spawn("act"), rng.spawn("noise")
    omega = env.motor.omega if env.motor is not None else None
    if policy is not None and cond is None:
        raise ConfigError("a checkpoint policy needs a conditioning vector")
    O = np.zeros((n, H, fam.obs_dim))
    A = np.zeros((n, H, fam.act_dim))
    O2 = np.zeros_like(O)
    R = np.zeros((n, H))
    for t in range(H):
        if policy is None:
            a = act_rng.uniform(-fam.action_bound, fam.action_bound, (n, fam.act_dim))
        else:
            a = np.clip(policy.act(s, np.broadcast_to(cond, (n, len(cond))), act_rng),
                        -fam.action_bound, fam.action_bound)
        s2 = envs.act_and_step(env, s, a, noise_rng, omega=omega)
        O[:, t], A[:, t], O2[:, t], R[:, t] = s, a, s2, envs.reward(env, s, a)
        s = s2
    extra = omega if omega is not None else None
    return [Episode.from_arrays(env_id, O[i], A[i], O2[i], R[i], env.dynamics, extra) for i in range(n)]


def sysid_training_episodes(cfg: ExperimentConfig, env: Optional[envs.EnvSpec] = None) -> list[Episode]:
    env = base_env(cfg) if env is None else env
    rng = SeededRng(cfg.seed, _STREAM_SYSID_DATA)
    om = cfg.env.motor.omega_scale if cfg.env.motor else 1.0
    train = sample_envs(env, cfg.sysid_data.train_envs, cfg.env.range_frac, om, rng.spawn("envs"))
    out: list[Episode] = []
    for i, e in enumerate(train):
        out.extend(collect_offpolicy(e, cfg.sysid_data.episodes_per_env, rng.spawn("collect", i), env_id=i + 1))
    return out


# --- training --------------------------------------------------------------------

def train_policy(cfg: ExperimentConfig, out_dir: Optional[Path] = None, env: Optional[envs.EnvSpec] = None,
                 progress: Optional[Callable[[dict], None]] = None) -> tuple[Policy, list[dict]]:
    cfg = sync_blocks(cfg)
    env = base_env(cfg) if env is None else env
    policy, curve = ppo.train(env, cfg.ppo, cfg.seed, hidden=cfg.hidden,
                              use_eta_encoding=cfg.flags.use_eta_encoding, out_dir=out_dir, progress=progress)
    policy.meta.update({"range_frac": cfg.env.range_frac, "noise_mode": cfg.flags.noise_mode,
                        "base": env.dynamics.base.tolist(), "seed": cfg.seed})
    if out_dir is not None:
        out_dir = Path(out_dir)
        policy.save(out_dir / "policy")
        write_csv(out_dir / "metrics.csv", curve, ppo.CURVE_FIELDS)
    return policy, curve


def train_sysid(cfg: ExperimentConfig, episodes: Optional[Sequence[Episode]] = None,
                env: Optional[envs.EnvSpec] = None, out_dir: Optional[Path] = None) -> sysid.ElementalEstimator:
    cfg = sync_blocks(cfg)
    env = base_env(cfg) if env is None else env
    if episodes is None:
        episodes = sysid_training_episodes(cfg, env)
    data = sysid.datasets_from_episodes(episodes, env, cfg.sysid.T, cfg.flags.noise_mode)
    om = cfg.env.motor.omega_scale if cfg.env.motor else 1.0
    res = sysid.train_sysid(data, env, cfg.sysid, cfg.env.range_frac, seed=cfg.seed, omega_scale=om)
    if out_dir is not None:
        out_dir = Path(out_dir)
        res.estimator.save(out_dir / "sysid")
        if res.curve:
            write_csv(out_dir / "sysid_metrics.csv", res.curve, list(res.curve[0]))
    return res.estimator


# --- evaluation ------------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list[dict]
    skipped: list[dict]
    n_test_envs: int
    episodes_per_env: int
    runtime_s: float = 0.0
    policy_checksum: str = ""

    def mean(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.rows])) if self.rows else float("nan")

    def episode_rewards(self, which: str) -> np.ndarray:
        return np.concatenate([r[f"{which}_episodes"] for r in self.rows]) if self.rows else np.zeros(0)

    def summary(self) -> dict:
        out = {"n_envs": len(self.rows), "n_skipped": len(self.skipped), "episodes_per_env": self.episodes_per_env,
               "runtime_s": self.runtime_s}
        for k in ("zero_shot", "oracle", "base"):
            out[f"{k}_mean"] = self.mean(f"{k}_mean")
        if self.rows:
            out["abs_err_mean"] = np.mean([r["abs_err"] for r in self.rows], axis=0).tolist()
        return out

    def table_rows(self) -> list[dict]:
        flat = []
        for r in self.rows:
            flat.append({k: (json.dumps(np.asarray(v).tolist()) if isinstance(v, (list, np.ndarray)) else v)
                         for k, v in r.items() if not k.endswith("_episodes")})
        return flat

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = self.table_rows()
        if rows:
            write_csv(out_dir / "zero_shot.csv", rows, list(rows[0]))
        with open(out_dir / "summary.json", "w") as fh:
            json.dump({**self.summary(), "skipped": self.skipped}, fh, indent=2, sort_keys=True)


def _conditioning(policy: Policy, env: envs.EnvSpec, base: np.ndarray, range_frac: float, eta: np.ndarray,
                  omega: Optional[np.ndarray], K: float) -> np.ndarray:
    noise_mode = bool(policy.meta.get("noise_mode", False))
    om = np.zeros(ppo.omega_dim(env)) if omega is None else omega
    if noise_mode and om.size == 0 and policy.cfg.cond_dim > len(base):
        raise ConfigError("noise-mode policy needs motor weights but the environment has no motor noise")
    return ppo.make_cond(eta, base, om, K, noise_mode, range_frac)


def _estimated_eta(est: sysid.PosteriorEstimate, mode: str, d: int, rng: SeededRng):
    post = est.posterior
    val = post.mean if mode == "mean" else post.mean + post.std * rng.normal(post.mean.shape)
    return val[:d], (val[d:] if val.size > d else None)


def evaluate_env(policy: Policy, estimator, env: envs.EnvSpec, cfg: ExperimentConfig, index: int,
                 rng: SeededRng) -> dict:
    """Zero-shot protocol on one test environment.

    Off-policy data -> posterior -> policy conditioned on it; oracle and base conditionings
    are run on identical initial states and process-noise draws.
    """
    d = env.fam.d
    base = np.asarray(policy.meta.get("base", env.dynamics.base))
    rf = float(policy.meta.get("range_frac", cfg.env.range_frac))
    offp = collect_offpolicy(env, cfg.eval.offpolicy_episodes, rng.spawn("offpolicy"), env_id=index + 1)
    post = sysid.estimate(estimator, offp, estimator.cfg.T)
    eta_hat, om_hat = _estimated_eta(post, cfg.eval.conditioning, d, rng.spawn("posterior-sample"))
    K_env = env.motor.K if env.motor is not None else 0.0
    K_est = estimator.env.motor.K if (om_hat is not None and estimator.env.motor is not None) else K_env
    om_true = env.motor.omega if env.motor is not None else None
    conds = {
        "zero_shot": _conditioning(policy, env, base, rf, eta_hat, om_hat, K_est),
        "oracle": _conditioning(policy, env, base, rf, env.dynamics.values, om_true, K_env),
        "base": _conditioning(policy, env, base, rf, base, None, 0.0),
    }
    n = cfg.eval.episodes_per_env
    dyns = [env.dynamics] * n
    oms = np.tile(om_true, (n, 1)) if om_true is not None else np.zeros((n, 0))
    row = {"env_index": index, "eta_true": env.dynamics.values.tolist(), "eta_hat": eta_hat.tolist(),
           "posterior_std": post.posterior.std.tolist(), "k_used": post.k_used,
           "abs_err": np.abs(post.posterior.mean[:d] - env.dynamics.values).tolist()}
    if om_true is not None:
        row["omega_true"] = om_true.tolist()
    ev_rng = rng.spawn("rollouts")
    for name, c in conds.items():
        batch = ppo.rollout(policy, env, dyns, oms, np.tile(c, (n, 1)), ev_rng, deterministic=cfg.eval.deterministic,
                            with_values=False)
        rets = batch.episode_returns()
        if rets.size < n:
            raise FloatingPointError(f"{n - rets.size} evaluation episodes diverged")
        row[f"{name}_mean"] = float(rets.mean())
        row[f"{name}_std"] = float(rets.std())
        row[f"{name}_episodes"] = rets
    return row


def evaluate_zero_shot(policy: Policy, estimator, cfg: ExperimentConfig,
                       env: Optional[envs.EnvSpec] = None) -> EvalReport:
    """Run :func:`evaluate_env` on ``n_test_envs`` held-out environments; never updates parameters."""
    t0 = time.perf_counter()
    before = policy.params.checksum(), estimator.params.checksum()
    rows, skipped = [], []
    rng = SeededRng(cfg.seed, _STREAM_EVAL)
    for i, e in enumerate(held_out_envs(cfg, env)):
        try:
            rows.append(evaluate_env(policy, estimator, e, cfg, i, rng.spawn("env", i)))
        except (ConfigError, FloatingPointError) as exc:
            log.warning("test env %d skipped: %s", i, exc)
            skipped.append({"env_index": i, "eta_true": e.dynamics.values.tolist(), "reason": str(exc)})
    after = policy.params.checksum(), estimator.params.checksum()
    if before != after:
        raise RuntimeError("zero-shot evaluation modified model parameters")
    return EvalReport(rows, skipped, cfg.eval.n_test_envs, cfg.eval.episodes_per_env,
                      time.perf_counter() - t0, before[0])


@dataclass
class FinetuneResult:
    curve: list[float]
    posterior: Optional[sysid.PosteriorEstimate]
    policy: Policy


def finetune(policy: Policy, estimator, env: envs.EnvSpec, episodes: int, cfg: ExperimentConfig,
             index: int = 0) -> FinetuneResult:
    """Continue PPO in one test environment, conditioned on the estimated dynamics.

    ``curve[i]`` is the zero-shot-protocol reward of the policy after ``i`` fine-tuning episodes,
    so ``curve[0]`` is exactly the zero-shot reward of :func:`evaluate_env` for the same
    ``(seed, index)``.  The input policy is not modified.
    """
    if episodes < 0:
        raise ConfigError("episodes must be >= 0")
    work = Policy(policy.cfg, policy.params.copy(), dict(policy.meta))
    if episodes == 0:
        return FinetuneResult([], None, work)
    cfg = sync_blocks(cfg)
    rng = SeededRng(cfg.seed, _STREAM_EVAL).spawn("env", index)
    first = evaluate_env(work, estimator, env, cfg, index, rng)
    d = env.fam.d
    base = np.asarray(work.meta.get("base", env.dynamics.base))
    rf = float(work.meta.get("range_frac", cfg.env.range_frac))
    post = sysid.estimate(estimator, collect_offpolicy(env, cfg.eval.offpolicy_episodes, rng.spawn("offpolicy"),
                                                       env_id=index + 1), estimator.cfg.T)
    eta_hat, om_hat = _estimated_eta(post, cfg.eval.conditioning, d, rng.spawn("posterior-sample"))
    K_env = env.motor.K if env.motor is not None else 0.0
    K_est = estimator.env.motor.K if (om_hat is not None and estimator.env.motor is not None) else K_env
    cond = _conditioning(work, env, base, rf, eta_hat, om_hat, K_est)
    om_true = env.motor.omega if env.motor is not None else None

    def measure() -> float:
        n = cfg.eval.episodes_per_env
        oms = np.tile(om_true, (n, 1)) if om_true is not None else np.zeros((n, 0))
        b = ppo.rollout(work, env, [env.dynamics] * n, oms, np.tile(cond, (n, 1)), rng.spawn("rollouts"),
                        deterministic=cfg.eval.deterministic, with_values=False)
        return float(b.episode_returns().mean())

    current = first["zero_shot_mean"]
    curve = [current]
    ft_rng = SeededRng(cfg.seed, _STREAM_FINETUNE).spawn("env", index)
    done, step = 0, 0
    while len(curve) < episodes:
        B = min(cfg.eval.finetune_batch, episodes - done)
        oms = np.tile(om_true, (B, 1)) if om_true is not None else np.zeros((B, 0))
        batch = ppo.rollout(work, env, [env.dynamics] * B, oms, np.tile(cond, (B, 1)), ft_rng.spawn("collect", step))
        ppo.update(work, batch, cfg.ppo, ft_rng.spawn("update", step))
        done += B
        step += 1
        value = measure()
        # the policy only changes once the whole batch has been used
        for count in range(done - B + 1, min(done, episodes - 1) + 1):
            curve.append(value if count == done else current)
        current = value
    return FinetuneResult(curve, post, work)


# --- study protocols -------------------------------------------------------------

ABLATION_VARIANTS: dict[str, dict] = {
    "full": {},
    "NoReg": {"w_inv": 0.0, "w_rec": 0.0},
    "OnlyI": {"w_rec": 0.0},
    "OnlyS": {"w_inv": 0.0},
    "FF": {"use_eta_encoding": False, "w_inv": 0.0, "w_rec": 0.0},
}


def variant_config(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    """The base config with the variant's ablation flags applied (and nothing else)."""
    try:
        over = ABLATION_VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown ablation variant {name!r}") from None
    base_flags = {"w_inv": cfg.flags.w_inv, "w_rec": cfg.flags.w_rec, "use_eta_encoding": True}
    return cfg.with_flags(**{**base_flags, **over})


def _seed_stats(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def run_ablation_suite(cfg: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2),
                       variants: Sequence[str] = tuple(ABLATION_VARIANTS),
                       progress: Optional[Callable[[str], None]] = None) -> list[dict]:
    per: dict[str, dict[str, list[float]]] = {v: {"zero_shot": [], "oracle": [], "base": []} for v in variants}
    for s in seeds:
        scfg = replace(cfg, seed=int(s))
        est = train_sysid(scfg)
        for v in variants:
            vcfg = variant_config(scfg, v)
            pol, _ = train_policy(vcfg)
            rep = evaluate_zero_shot(pol, est, vcfg)
            for k in per[v]:
                per[v][k].append(rep.mean(f"{k}_mean"))
            if progress:
                progress(f"seed {s} {v}: zero-shot {per[v]['zero_shot'][-1]:.3f}")
    rows = []
    for v in variants:
        m, sd = _seed_stats(per[v]["zero_shot"])
        f = variant_config(cfg, v).flags
        rows.append({"variant": v, "use_eta_encoding": f.use_eta_encoding, "w_inv": f.w_inv, "w_rec": f.w_rec,
                     "n_seeds": len(seeds), "zero_shot_mean": m, "zero_shot_std": sd,
                     "oracle_mean": _seed_stats(per[v]["oracle"])[0], "base_mean": _seed_stats(per[v]["base"])[0],
                     "per_seed": json.dumps(per[v]["zero_shot"])})
    return rows


SWEEP_RANGES = (0.05, 0.10, 0.20, 0.30)


def run_range_sweep(cfg: ExperimentConfig, ranges: Sequence[float] = SWEEP_RANGES, seeds: Sequence[int] = (0, 1, 2),
                    progress: Optional[Callable[[str], None]] = None) -> list[dict]:
    """Train and test on matched ranges; compare the full model with the FF baseline."""
    rows = []
    for r in ranges:
        full, ff = [], []
        for s in seeds:
            rcfg = replace(cfg.with_range(r), seed=int(s))
            est = train_sysid(rcfg)
            for name, acc in (("full", full), ("FF", ff)):
                vcfg = variant_config(rcfg, name)
                pol, _ = train_policy(vcfg)
                acc.append(evaluate_zero_shot(pol, est, vcfg).mean("zero_shot_mean"))
            if progress:
                progress(f"range {r} seed {s}: full {full[-1]:.3f} FF {ff[-1]:.3f}")
        fm, fs = _seed_stats(full)
        bm, bs = _seed_stats(ff)
        gaps = np.asarray(full) - np.asarray(ff)
        rows.append({"range_frac": r, "n_seeds": len(seeds), "full_mean": fm, "full_std": fs, "ff_mean": bm,
                     "ff_std": bs, "gap_mean": float(gaps.mean()),
                     "gap_std": float(gaps.std(ddof=1)) if gaps.size > 1 else 0.0})
    return rows


def run_noise_eval(cfg: ExperimentConfig, K_values: Sequence[float], seeds: Sequence[int] = (0, 1, 2),
                   progress: Optional[Callable[[str], None]] = None) -> list[dict]:
    """Noise-aware vs noise-unaware models across noise multipliers, known and unknown noise network.

    Both models are trained with motor noise at the configured ``K``; only the noise-aware one
    conditions on (and identifies) the motor weights.  ``unknown`` swaps in a different
    noise-network seed at test time.
    """
    if cfg.env.motor is None or cfg.env.motor.K <= 0:
        raise ConfigError("noise evaluation needs [env.motor] with K > 0 for training")
    tau = cfg.env.motor.tau_seed
    res: dict[tuple, dict[str, list[float]]] = {}
    for s in seeds:
        scfg = replace(cfg, seed=int(s))
        models = {}
        for name, mode in (("noise", True), ("nonoise", False)):
            mcfg = scfg.with_flags(noise_mode=mode)
            models[name] = (train_policy(mcfg)[0], train_sysid(mcfg), mcfg)
        for setting, t in (("known", tau), ("unknown", tau + UNKNOWN_TAU_OFFSET)):
            for K in K_values:
                key = (setting, float(K))
                acc = res.setdefault(key, {"noise": [], "nonoise": []})
                for name, (pol, est, mcfg) in models.items():
                    rep = evaluate_zero_shot(pol, est, mcfg, env=base_env(mcfg, tau_seed=t, K=K))
                    acc[name].append(rep.mean("zero_shot_mean"))
                if progress:
                    progress(f"seed {s} {setting} K={K}: noise {acc['noise'][-1]:.3f} "
                             f"nonoise {acc['nonoise'][-1]:.3f}")
    rows = []
    for (setting, K), acc in res.items():
        nm, ns = _seed_stats(acc["noise"])
        om, os_ = _seed_stats(acc["nonoise"])
        n = len(acc["noise"])
        pooled_se = float(np.sqrt((ns ** 2 + os_ ** 2) / 2.0) * np.sqrt(2.0 / n)) if n > 1 else float("nan")
        rows.append({"setting": setting, "K": K, "n_seeds": n, "noise_mean": nm, "noise_std": ns,
                     "nonoise_mean": om, "nonoise_std": os_, "diff": nm - om, "pooled_se": pooled_se})
    return rows


# --- persistence -----------------------------------------------------------------

def write_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def write_posterior(path, post: sysid.PosteriorEstimate) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(post.to_dict(), fh, indent=2)


def save_offpolicy(path, episodes: Sequence[Episode]) -> None:
    write_episodes(path, episodes)


def load_policy(path) -> Policy:
    return Policy.load(path)


def load_estimator(path) -> sysid.ElementalEstimator:
    return sysid.ElementalEstimator.load(path)


def config_snapshot(cfg: ExperimentConfig) -> dict:
    return copy.deepcopy(cfg.to_dict())
