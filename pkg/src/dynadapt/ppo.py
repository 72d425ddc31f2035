"""Dynamics-randomized PPO: episode collection, GAE, clipped-surrogate updates."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import diffnum as dn
from . import envs
from .core import ConfigError, DynamicsVector, SeededRng, normalize_dynamics, sample_dynamics
from .dcp import (AuxBatch, DcpConfig, Policy, aux_loss, encode, encode_dynamics, gaussian_entropy,
                  gaussian_log_prob, init_params, policy_forward, sample_action, value_forward)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs_per_batch: int = 4
    lr: float = 0.003
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    episodes_per_iter: int = 16
    n_envs: int = 0  # 0: fresh dynamics every episode; >0: pick from a fixed pool of that size
    range_frac: float = 0.05
    iterations: int = 200
    minibatch_size: int = 400
    max_grad_norm: float = 1.0
    reward_scale: float = 0.1
    w_inv: float = 0.1
    w_rec: float = 0.1
    omega_scale: float = 1.0
    noise_mode: bool = False
    checkpoint_every: int = 0
    init_log_std_bias: float = 0.0
    # quadratic penalty on the part of the action mean outside the action box; without it the
    # mean drifts far past the clip bound and the policy can no longer reverse its action
    bound_penalty: float = 1.0
    # linear step-size decay to lr * lr_final_frac over the run; late-run SGD at the full step
    # size tends to undo earlier progress once the action std has shrunk
    lr_final_frac: float = 0.1

    def __post_init__(self):
        if not 0 < self.gamma <= 1 or not 0 <= self.lam <= 1 or self.clip_eps <= 0:
            raise ConfigError("need 0<gamma<=1, 0<=lam<=1, clip_eps>0")
        if self.w_inv < 0 or self.w_rec < 0:
            raise ConfigError("auxiliary loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def omega_dim(spec: envs.EnvSpec) -> int:
    return 0 if spec.motor is None else spec.fam.act_dim * spec.motor.phi_dim


def cond_dim(spec: envs.EnvSpec, noise_mode: bool) -> int:
    return spec.fam.d + (omega_dim(spec) if noise_mode else 0)


def make_cond(dyn_values: np.ndarray, base: np.ndarray, omega: np.ndarray | None, K: float,
              noise_mode: bool, range_frac: float = 0.0) -> np.ndarray:
    """Conditioning input: fractional dynamics deviation, plus ``K * omega`` in noise mode.

    With ``range_frac > 0`` the deviation is divided by it, so in-range dynamics map into [-1, 1].
    """
    dev = np.asarray(dyn_values) / np.asarray(base) - 1.0
    if range_frac > 0:
        dev = dev / range_frac
    parts = [dev]
    if noise_mode:
        parts.append(K * np.asarray(omega))
    return np.concatenate(parts, axis=-1)


def make_policy(spec: envs.EnvSpec, cfg: PpoConfig, rng: SeededRng, hidden=(64, 64),
                use_eta_encoding: bool = True, latent_obs: int = 32, latent_dyn: int = 16) -> Policy:
    fam = spec.fam
    dcfg = DcpConfig(fam.obs_dim, fam.act_dim, cond_dim(spec, cfg.noise_mode), tuple(hidden),
                     latent_obs, latent_dyn, use_eta_encoding=use_eta_encoding)
    params = init_params(dcfg, rng)
    if cfg.init_log_std_bias:
        last = len(dcfg.hidden)
        params[f"g_theta.b{last}"][fam.act_dim:] = cfg.init_log_std_bias
    return Policy(dcfg, params, {"family": spec.family, "action_bound": float(fam.action_bound)})


@dataclass
class RolloutBatch:
    """Per-step arrays shaped ``(episodes, horizon, ...)``; one dynamics draw per episode row."""

    obs: np.ndarray
    next_obs: np.ndarray
    actions_raw: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    bootstrap: np.ndarray
    cond: np.ndarray  # (episodes, cond_dim)
    dynamics: list[DynamicsVector]
    omegas: np.ndarray
    episode_ids: np.ndarray
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    @property
    def n_episodes(self) -> int:
        return self.obs.shape[0]

    def episode_returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)


def sample_episode_dynamics(spec: envs.EnvSpec, cfg: PpoConfig, rng: SeededRng, n: int):
    """Per-episode dynamics and motor weights; drawn fresh or from a fixed pool of ``n_envs``."""
    od = omega_dim(spec)
    if cfg.n_envs > 0:
        pool_rng = rng.spawn("pool")  # caller passes a stream whose "pool" child is run-constant
        pool = [sample_dynamics(spec.dynamics, cfg.range_frac, pool_rng) for _ in range(cfg.n_envs)]
        pool_om = pool_rng.uniform(-cfg.omega_scale, cfg.omega_scale, (cfg.n_envs, od))
        pick = rng.integers(0, cfg.n_envs, n)
        return [pool[i] for i in pick], pool_om[pick]
    dyn_rng = rng.spawn("dynamics")
    dyns = [sample_dynamics(spec.dynamics, cfg.range_frac, dyn_rng) for _ in range(n)]
    oms = dyn_rng.uniform(-cfg.omega_scale, cfg.omega_scale, (n, od))
    return dyns, oms


def rollout(policy: Policy, spec: envs.EnvSpec, dyns: list[DynamicsVector], omegas: np.ndarray,
            cond: np.ndarray, rng: SeededRng, deterministic: bool = False, s0=None,
            with_values: bool = True) -> RolloutBatch:
    """Run one episode per row in lock-step. ``cond`` is what the policy sees; ``dyns`` is the truth."""
    cfg = policy.cfg
    fam = spec.fam
    n, H = len(dyns), spec.horizon
    eta = np.stack([d.values for d in dyns])
    z_dyn = encode_dynamics(cfg, policy.params, cond)  # once per episode
    s = envs.reset(spec, rng.spawn("reset"), n) if s0 is None else np.array(s0, dtype=np.float64)
    act_rng, noise_rng = rng.spawn("act"), rng.spawn("noise")
    obs = np.zeros((n, H, fam.obs_dim))
    nxt = np.zeros_like(obs)
    a_raw = np.zeros((n, H, fam.act_dim))
    a_exe = np.zeros_like(a_raw)
    logp = np.zeros((n, H))
    rew = np.zeros((n, H))
    val = np.zeros((n, H))
    alive = np.ones(n, dtype=bool)
    om = omegas if omegas.size else None
    for t in range(H):
        lat = encode(cfg, policy.params, s, None, z_dyn=z_dyn)
        mean, std = policy_forward(cfg, policy.params, lat.z)
        if deterministic:
            a, lp = mean, np.zeros(n)
        else:
            a, lp = sample_action(mean, std, act_rng)
        if with_values:
            val[:, t] = value_forward(cfg, policy.params, lat.z)
        ae = np.clip(a, -fam.action_bound, fam.action_bound)
        with np.errstate(all="ignore"):
            s2 = envs.act_and_step(spec, s, ae, noise_rng, eta=eta, omega=om, strict=False)
        bad = ~np.all(np.isfinite(s2), axis=1)
        if bad.any():
            for i in np.flatnonzero(bad & alive):
                log.warning("episode %d aborted: non-finite state at step %d", i, t + 1)
            alive &= ~bad
            s2[bad] = 0.0
        obs[:, t], nxt[:, t], a_raw[:, t], a_exe[:, t], logp[:, t] = s, s2, a, ae, lp
        rew[:, t] = envs.reward(spec, s, ae)
        s = s2
    boot = np.zeros(n)
    if with_values:
        boot = value_forward(cfg, policy.params, encode(cfg, policy.params, s, None, z_dyn=z_dyn).z)
    keep = np.flatnonzero(alive)
    if keep.size == 0:
        raise FloatingPointError("every episode in the batch hit a non-finite state")
    return RolloutBatch(obs[keep], nxt[keep], a_raw[keep], a_exe[keep], logp[keep], rew[keep], val[keep],
                        boot[keep], np.asarray(cond)[keep], [dyns[i] for i in keep],
                        omegas[keep], keep)


def collect(policy: Policy, env_base: envs.EnvSpec, cfg: PpoConfig, rng: SeededRng,
            conditioning: str = "true") -> RolloutBatch:
    """One batch of ``episodes_per_iter`` episodes, dynamics resampled at each episode start.

    The policy sees the true dynamics during training (``conditioning="true"``).
    """
    n = cfg.episodes_per_iter
    dyns, oms = sample_episode_dynamics(env_base, cfg, rng, n)
    K = env_base.motor.K if env_base.motor is not None else 0.0
    eta = np.stack([d.values for d in dyns])
    if conditioning == "true":
        cond = make_cond(eta, env_base.dynamics.base, oms, K, cfg.noise_mode, cfg.range_frac)
    elif conditioning == "base":
        cond = make_cond(np.broadcast_to(env_base.dynamics.base, eta.shape), env_base.dynamics.base,
                         np.zeros_like(oms), K, cfg.noise_mode, cfg.range_frac)
    else:
        raise ConfigError(f"unknown conditioning {conditioning!r}")
    return rollout(policy, env_base, dyns, oms, cond, rng)


def gae(rewards: np.ndarray, values: np.ndarray, bootstrap: float, gamma: float, lam: float):
    """Generalized advantage estimates for one episode; returns ``(advantages, returns)``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    T = rewards.shape[0]
    adv = np.zeros(T)
    nxt_v, acc = float(bootstrap), 0.0
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * nxt_v - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        nxt_v = values[t]
    return adv, adv + values


def gae_batch(rewards: np.ndarray, values: np.ndarray, bootstrap: np.ndarray, gamma: float, lam: float):
    """Vectorized over episode rows; same recursion as :func:`gae`."""
    n, T = rewards.shape
    adv = np.zeros((n, T))
    nxt_v, acc = np.asarray(bootstrap, dtype=np.float64), np.zeros(n)
    for t in range(T - 1, -1, -1):
        delta = rewards[:, t] + gamma * nxt_v - values[:, t]
        acc = delta + gamma * lam * acc
        adv[:, t] = acc
        nxt_v = values[:, t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = adv - adv.mean()
    sd = adv.std()
    return adv / sd if sd > 1e-12 else adv


@dataclass
class Minibatch:
    obs: np.ndarray
    next_obs: np.ndarray
    actions_raw: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    cond: np.ndarray


def flatten(batch: RolloutBatch) -> Minibatch:
    n, H = batch.rewards.shape
    r = lambda x: x.reshape(n * H, *x.shape[2:])  # noqa: E731
    return Minibatch(r(batch.obs), r(batch.next_obs), r(batch.actions_raw), r(batch.actions),
                     r(batch.log_probs), r(batch.advantages), r(batch.returns),
                     np.repeat(batch.cond, H, axis=0))


def ppo_loss(cfg: DcpConfig, params, mb: Minibatch, pcfg: PpoConfig, action_bound: Optional[float] = None):
    """Total loss and its parts; ``params`` may hold tape variables."""
    lat = encode(cfg, params, mb.obs, mb.cond)
    mean, std = policy_forward(cfg, params, lat.z)
    logp = gaussian_log_prob(mean, std, mb.actions_raw)
    ratio = dn.exp(logp - mb.old_log_probs)
    surr = -dn.mean(dn.minimum(ratio * mb.advantages,
                               dn.clip(ratio, 1 - pcfg.clip_eps, 1 + pcfg.clip_eps) * mb.advantages))
    v = value_forward(cfg, params, lat.z)
    vloss = dn.mean(dn.square(v - mb.returns))
    ent = dn.mean(gaussian_entropy(std))
    aux_b = AuxBatch(mb.obs, mb.next_obs, mb.actions, mb.cond)
    inv = aux_loss(cfg, params, aux_b, pcfg.w_inv, 0.0, latents=lat) if pcfg.w_inv > 0 else 0.0
    rec = aux_loss(cfg, params, aux_b, 0.0, pcfg.w_rec, latents=lat) if pcfg.w_rec > 0 else 0.0
    total = surr + pcfg.value_coef * vloss - pcfg.entropy_coef * ent + inv + rec
    pen = 0.0
    if action_bound is not None and pcfg.bound_penalty > 0:
        pen = dn.mean(dn.sum(dn.square(dn.relu(mean - action_bound)) + dn.square(dn.relu(-mean - action_bound)),
                             axis=-1))
        total = total + pcfg.bound_penalty * pen
    parts = {k: float(dn.value_of(x)) for k, x in
             (("surrogate", surr), ("value_loss", vloss), ("entropy", ent), ("inv_loss", inv), ("rec_loss", rec),
              ("bound_penalty", pen))}
    return total, parts


def prepare(batch: RolloutBatch, cfg: PpoConfig) -> Minibatch:
    adv, ret = gae_batch(batch.rewards * cfg.reward_scale, batch.values, batch.bootstrap, cfg.gamma, cfg.lam)
    batch.advantages = normalize_advantages(adv)
    batch.returns = ret
    return flatten(batch)


def update(policy: Policy, batch: RolloutBatch, cfg: PpoConfig, rng: SeededRng,
           trainable: Optional[Callable[[str], bool]] = None, lr: Optional[float] = None) -> dict:
    """Several epochs of minibatch SGD on the clipped surrogate plus value, entropy and aux terms.

    A non-finite loss or gradient aborts the update and leaves the parameters untouched.
    """
    lr = cfg.lr if lr is None else lr
    data = prepare(batch, cfg)
    N = data.obs.shape[0]
    mbs = max(1, min(cfg.minibatch_size, N))
    params = policy.params
    reports = []
    for _ in range(cfg.epochs_per_batch):
        perm = rng.permutation(N)
        for start in range(0, N, mbs):
            idx = perm[start:start + mbs]
            mb = Minibatch(*(getattr(data, f)[idx] for f in Minibatch.__dataclass_fields__))
            tape = dn.Tape()
            P = tape.watch(params)
            total, parts = ppo_loss(policy.cfg, P, mb, cfg, policy.meta.get("action_bound"))
            if not np.isfinite(dn.value_of(total)):
                log.error("non-finite PPO loss; update aborted")
                return {"aborted": True}
            grads = tape.backward(total)
            if trainable is not None:
                grads = {k: g for k, g in grads.items() if trainable(k)}
            grads, gnorm = dn.clip_grad_norm(grads, cfg.max_grad_norm)
            try:
                params = dn.sgd_step(params, grads, lr)
            except dn.NonFiniteGradient as exc:
                log.error("update aborted: %s", exc)
                return {"aborted": True}
            parts["grad_norm"] = gnorm
            reports.append(parts)
    policy.params = params
    out = {k: float(np.mean([r[k] for r in reports])) for k in reports[0]}
    out["aborted"] = False
    return out


def lr_at(cfg: PpoConfig, it: int) -> float:
    frac = it / max(cfg.iterations - 1, 1)
    return cfg.lr * (1.0 - frac * (1.0 - cfg.lr_final_frac))


CURVE_FIELDS = ("iter", "mean_reward", "std_reward", "surrogate", "value_loss", "inv_loss", "rec_loss")


def train(env_base: envs.EnvSpec, cfg: PpoConfig, seed: int, policy: Optional[Policy] = None,
          hidden=(64, 64), use_eta_encoding: bool = True, out_dir: Optional[Path] = None,
          progress: Optional[Callable[[dict], None]] = None) -> tuple[Policy, list[dict]]:
    """Alternate collect/update for ``cfg.iterations`` iterations; returns the policy and curve."""
    root = SeededRng(seed, 1)
    if policy is None:
        policy = make_policy(env_base, cfg, root.spawn("init"), hidden, use_eta_encoding)
    curve: list[dict] = []
    pool_root = root.spawn("envs")
    for it in range(cfg.iterations):
        it_rng = root.spawn("iter", it)
        if cfg.n_envs > 0:
            # keep the environment pool fixed across iterations, vary only the pick
            it_rng = _PoolRng(pool_root, it_rng)
        batch = collect(policy, env_base, cfg, it_rng)
        rets = batch.episode_returns()
        rep = update(policy, batch, cfg, root.spawn("update", it), lr=lr_at(cfg, it))
        row = {"iter": it + 1, "mean_reward": float(rets.mean()), "std_reward": float(rets.std()),
               **{k: rep.get(k, float("nan")) for k in CURVE_FIELDS[3:]}}
        curve.append(row)
        if progress is not None:
            progress(row)
        if out_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            policy.save(Path(out_dir) / f"policy_iter{it + 1:05d}")
    return policy, curve


class _PoolRng(SeededRng):
    """Stream whose ``spawn("pool")`` child is shared across iterations."""

    def __init__(self, pool_root: SeededRng, inner: SeededRng):
        super().__init__(inner.seed, inner.stream_id)
        self._pool_root = pool_root

    def spawn(self, *keys):
        if keys == ("pool",):
            return self._pool_root.spawn("pool")
        return super().spawn(*keys)
