"""Bayesian identification of dynamics parameters from off-policy chunks.

Each fixed-length chunk yields an elemental Gaussian posterior; the elementals are
combined in precision space with ``k - 1`` copies of the prior divided out.  The
elemental network and prior are fit by minimizing the negative evidence lower
bound, with the transition likelihood differentiated through the simulator's
exact Jacobian.

Estimators work in *internal* coordinates ``u`` where ``raw = center + scale * u``;
for dynamics components ``center = base`` and ``scale = base * range``, so the
randomization interval maps to ``[-1, 1]``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diffnum as dn
from . import envs
from .core import Chunk, ConfigError, DiagGaussian, Episode, SeededRng, chunk_episode

log = logging.getLogger(__name__)

PRECISION_FLOOR = 1e-6


@dataclass(frozen=True)
class PriorParams:
    f0: np.ndarray
    g0: np.ndarray

    def __post_init__(self):
        f0 = np.asarray(self.f0, dtype=np.float64).reshape(-1)
        g0 = np.asarray(self.g0, dtype=np.float64).reshape(-1)
        if f0.shape != g0.shape:
            raise ConfigError("prior mean/std shapes differ")
        if np.any(g0 <= 0):
            raise ConfigError("prior std must be strictly positive")
        object.__setattr__(self, "f0", f0)
        object.__setattr__(self, "g0", g0)

    @property
    def gaussian(self) -> DiagGaussian:
        return DiagGaussian(self.f0, self.g0)


@dataclass(frozen=True)
class PosteriorEstimate:
    posterior: DiagGaussian
    k_used: int
    clamped_dims: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {"mean": self.posterior.mean.tolist(), "std": self.posterior.std.tolist(),
                "k_used": int(self.k_used), "clamped_dims": [int(j) for j in self.clamped_dims]}


# --- aggregation ----------------------------------------------------------------

def aggregate_arrays(mu, sigma, f0, g0):
    """Precision-space combination of ``k`` elementals (rows of ``mu``/``sigma``).

    Works on arrays or tape variables. Returns ``(mean, std, clamped_mask)``.
    """
    k = dn.value_of(mu).shape[0]
    if k == 0:
        raise ConfigError("cannot aggregate zero elemental posteriors")
    inv_var = dn.power(sigma, -2.0)
    prior_prec = dn.power(g0, -2.0)
    prec_raw = dn.sum(inv_var, axis=0) - (k - 1) * prior_prec
    clamped = dn.value_of(prec_raw) < PRECISION_FLOOR
    prec = dn.clip(prec_raw, PRECISION_FLOOR, np.inf)
    var = dn.reciprocal(prec)
    mean = var * (dn.sum(mu * inv_var, axis=0) - (k - 1) * (f0 * prior_prec))
    return mean, dn.power(var, 0.5), clamped


def aggregate(elementals: Sequence[DiagGaussian], prior: PriorParams) -> PosteriorEstimate:
    if len(elementals) == 0:
        raise ConfigError("no elemental posteriors: collect more data")
    if len(elementals) == 1:
        return PosteriorEstimate(elementals[0], 1, ())
    mu = np.stack([e.mean for e in elementals])
    sd = np.stack([e.std for e in elementals])
    mean, std, clamped = aggregate_arrays(mu, sd, prior.f0, prior.g0)
    return PosteriorEstimate(DiagGaussian(mean, std), len(elementals), tuple(np.flatnonzero(clamped).tolist()))


def reparam_sample(mean, std, eps):
    return mean + std * eps


def kl_to_prior(mean, std, f0, g0):
    """Exact ``KL(N(mean, std^2) || N(f0, g0^2))`` summed over dimensions; tape-aware."""
    t = (dn.square(mean - f0) + dn.square(std)) / (2.0 * dn.square(g0))
    return dn.sum(t + dn.log(g0) - dn.log(std) - 0.5)


def kl_gaussians(post: DiagGaussian, prior: PriorParams) -> float:
    return float(kl_to_prior(post.mean, post.std, prior.f0, prior.g0))


# --- elemental estimator ----------------------------------------------------------

@dataclass(frozen=True)
class SysidConfig:
    family: str
    T: int = 50
    hidden: tuple[int, ...] = (64, 64)
    architecture: str = "pooled"  # "flat": MLP on the whole chunk; "pooled": per-step encoder + mean pool
    # "likelihood": network emits a per-chunk likelihood (mean, std) combined with the prior by Bayes
    # rule, so elemental precision always exceeds prior precision; "direct": network emits (mu, sigma)
    elemental_form: str = "likelihood"
    step_features: int = 32
    activation: str = "tanh"
    eps_samples: int = 4
    v: Optional[float] = None  # likelihood noise std; None -> environment's value, else 0.05
    lr: float = 0.002
    steps: int = 3000
    envs_per_step: int = 4
    chunks_per_env: tuple[int, int] = (8, 64)
    train_prior: bool = True
    prior_mean: float = 0.0  # prior init, internal coordinates (0 = base dynamics)
    prior_std: float = 1.0  # internal coordinates (1 = one randomization half-width)
    max_grad_norm: float = 10.0
    optimizer: str = "adam"  # "adam" | "sgd" (momentum > 0 gives heavy-ball SGD)
    momentum: float = 0.9
    noise_mode: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["chunks_per_env"] = list(self.chunks_per_env)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SysidConfig":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (64, 64)))
        d["chunks_per_env"] = tuple(d.get("chunks_per_env", (8, 64)))
        return cls(**d)


class ElementalEstimator:
    """Network from a flattened chunk to per-dimension ``(mu, sigma)`` in internal coordinates."""

    def __init__(self, cfg: SysidConfig, env: envs.EnvSpec, center, scale, params: dn.ParamStore | None = None,
                 feat_mean=None, feat_std=None, rng: SeededRng | None = None):
        self.cfg = cfg
        self.env = env
        fam = env.fam
        self.obs_dim, self.act_dim = fam.obs_dim, fam.act_dim
        self.step_dim = 2 * fam.obs_dim + fam.act_dim
        self.center = np.asarray(center, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        self.m = self.center.size
        self.n_dyn = fam.d
        self.feat_mean = np.zeros(self.step_dim) if feat_mean is None else np.asarray(feat_mean)
        self.feat_std = np.ones(self.step_dim) if feat_std is None else np.asarray(feat_std)
        if params is None:
            params = dn.ParamStore()
            rng = rng or SeededRng(0)
            for name, spec in self.specs().items():
                dn.mlp_init(spec, name, rng.spawn("sysid-init", name), params)
            if cfg.prior_std <= 0:
                raise ConfigError("prior_std must be positive")
            params["prior.f0"] = np.full(self.m, float(cfg.prior_mean))
            params["prior.log_g0"] = np.full(self.m, float(np.log(cfg.prior_std)))
        self.params = params

    @property
    def input_dim(self) -> int:
        return self.cfg.T * self.step_dim

    def specs(self) -> dict[str, dn.MlpSpec]:
        c, h = self.cfg, tuple(self.cfg.hidden)
        if c.architecture == "flat":
            return {"sysid": dn.MlpSpec((self.input_dim, *h, 2 * self.m), c.activation, "softplus-tail", self.m)}
        if c.architecture == "pooled":
            return {
                "sysid_step": dn.MlpSpec((self.step_dim, *h, c.step_features), c.activation),
                "sysid": dn.MlpSpec((c.step_features, *h, 2 * self.m), c.activation, "softplus-tail", self.m),
            }
        raise ConfigError(f"unknown estimator architecture {c.architecture!r}")

    def step_rows(self, chunks: Sequence[Chunk]) -> np.ndarray:
        """Per-step features, standardized, shape ``(k, T, step_dim)``.

        Each step contributes ``[o, a, o' - F(o, a; base)]``: the residual against the
        nominal simulator carries the dynamics deviation at order one.
        """
        for c in chunks:
            if c.T != self.cfg.T:
                raise ConfigError(f"chunk length {c.T} != configured T={self.cfg.T}")
        x = np.stack([c.x for c in chunks])
        y = np.stack([c.y for c in chunks])
        k, T = x.shape[:2]
        flat_x = x.reshape(k * T, -1)
        nominal = envs.step_deterministic(self.env, flat_x[:, :self.obs_dim], flat_x[:, self.obs_dim:],
                                          self.env.dynamics.base)
        feats = np.concatenate([x, y - nominal.reshape(k, T, -1)], axis=-1)
        return (feats - self.feat_mean) / self.feat_std

    def forward(self, params, chunks: Sequence[Chunk]):
        rows = self.step_rows(chunks)
        k = rows.shape[0]
        specs = self.specs()
        if self.cfg.architecture == "flat":
            out = dn.mlp_forward(specs["sysid"], params, "sysid", rows.reshape(k, -1))
        else:
            h = dn.mlp_forward(specs["sysid_step"], params, "sysid_step", rows.reshape(k * self.cfg.T, -1))
            pooled = dn.mean(dn.reshape(h, (k, self.cfg.T, self.cfg.step_features)), axis=1)
            out = dn.mlp_forward(specs["sysid"], params, "sysid", pooled)
        mu, sd = out[:, :self.m], out[:, self.m:]
        if self.cfg.elemental_form == "direct":
            return mu, sd
        if self.cfg.elemental_form != "likelihood":
            raise ConfigError(f"unknown elemental form {self.cfg.elemental_form!r}")
        f0, g0 = self.prior_tensors(params)
        lik_prec = dn.power(sd, -2.0)
        prior_prec = dn.power(g0, -2.0)
        prec = lik_prec + prior_prec
        mean = (mu * lik_prec + f0 * prior_prec) / prec
        return mean, dn.power(prec, -0.5)

    def prior_tensors(self, params):
        return params["prior.f0"], dn.exp(params["prior.log_g0"])

    # numpy conveniences
    def elementals(self, chunks: Sequence[Chunk]) -> tuple[np.ndarray, np.ndarray]:
        mu, sd = self.forward(self.params, chunks)
        return np.asarray(mu), np.asarray(sd)

    def prior(self) -> PriorParams:
        f0, g0 = self.prior_tensors(self.params)
        return PriorParams(f0, g0)

    def to_raw(self, post: DiagGaussian) -> DiagGaussian:
        return DiagGaussian(self.center + self.scale * post.mean, np.abs(self.scale) * post.std)

    def raw_prior(self) -> PriorParams:
        p = self.prior()
        return PriorParams(self.center + self.scale * p.f0, np.abs(self.scale) * p.g0)

    def likelihood_std(self) -> float:
        if self.cfg.v is not None:
            return float(self.cfg.v)
        return float(self.env.noise_std) if self.env.noise_std > 0 else 0.05

    def save(self, directory) -> None:
        meta = {"kind": "sysid", "cfg": self.cfg.to_dict(), "center": self.center.tolist(),
                "scale": self.scale.tolist(), "feat_mean": self.feat_mean.tolist(),
                "feat_std": self.feat_std.tolist(), "env": env_to_dict(self.env)}
        dn.save_params(self.params, directory, meta)

    @classmethod
    def load(cls, directory) -> "ElementalEstimator":
        params, meta = dn.load_params(directory)
        return cls(SysidConfig.from_dict(meta["cfg"]), env_from_dict(meta["env"]), meta["center"], meta["scale"],
                   params, meta["feat_mean"], meta["feat_std"])


def env_to_dict(env: envs.EnvSpec) -> dict:
    d = {"family": env.family, "dynamics": env.dynamics.to_dict(), "noise_std": env.noise_std,
         "dt": env.dt, "horizon": env.horizon, "seed": env.seed, "init_width": env.init_width}
    if env.motor is not None:
        d["motor"] = {"tau_seed": env.motor.tau_seed, "phi_dim": env.motor.phi_dim,
                      "omega": env.motor.omega.tolist(), "K": env.motor.K, "hidden": env.motor.hidden}
    return d


def env_from_dict(d: dict) -> envs.EnvSpec:
    from .core import DynamicsVector
    motor = None
    if d.get("motor"):
        m = d["motor"]
        motor = envs.MotorNoiseSpec(int(m["tau_seed"]), int(m["phi_dim"]), np.asarray(m["omega"]),
                                    float(m["K"]), int(m.get("hidden", 16)))
    return envs.EnvSpec(d["family"], DynamicsVector.from_dict(d["dynamics"]), float(d["noise_std"]), motor,
                        float(d["dt"]), int(d["horizon"]), int(d.get("seed", 0)), d.get("init_width"))


def elemental_posterior(est: ElementalEstimator, chunk: Chunk) -> DiagGaussian:
    mu, sd = est.elementals([chunk])
    return DiagGaussian(mu[0], sd[0])


class ConjugateLinearGaussian:
    """Exact per-chunk posteriors for ``o' = eta * o + a + N(0, v^2)`` under a Gaussian prior.

    Drop-in replacement for a learned estimator (coordinates are raw: center 0, scale 1).
    """

    def __init__(self, v: float, f0: float, g0: float):
        self.v, self.f0, self.g0 = float(v), float(f0), float(g0)
        self.center, self.scale, self.m = np.zeros(1), np.ones(1), 1

    def posterior_from_data(self, o, a, o2) -> DiagGaussian:
        o, a, o2 = (np.asarray(x, dtype=np.float64).reshape(-1) for x in (o, a, o2))
        prec = 1.0 / self.g0 ** 2 + np.sum(o * o) / self.v ** 2
        mean = (self.f0 / self.g0 ** 2 + np.sum(o * (o2 - a)) / self.v ** 2) / prec
        return DiagGaussian([mean], [prec ** -0.5])

    def elementals(self, chunks: Sequence[Chunk]):
        posts = [self.posterior_from_data(c.x[:, 0], c.x[:, 1], c.y[:, 0]) for c in chunks]
        return np.stack([p.mean for p in posts]), np.stack([p.std for p in posts])

    def prior(self) -> PriorParams:
        return PriorParams([self.f0], [self.g0])

    def raw_prior(self) -> PriorParams:
        return self.prior()

    def to_raw(self, post: DiagGaussian) -> DiagGaussian:
        return post


# --- likelihood through the simulator ---------------------------------------------

@dataclass
class TransitionData:
    obs: np.ndarray
    act: np.ndarray
    next_obs: np.ndarray

    @classmethod
    def from_chunks(cls, chunks: Sequence[Chunk], obs_dim: int) -> "TransitionData":
        x = np.concatenate([c.x for c in chunks])
        y = np.concatenate([c.y for c in chunks])
        return cls(x[:, :obs_dim], x[:, obs_dim:], y)


def transition_sse(env: envs.EnvSpec, data: TransitionData, eta_raw, n_dyn: int):
    """``sum ||o' - F(o, a; eta)||^2`` as a tape op differentiable in ``eta_raw``.

    Entries of ``eta_raw`` past ``n_dyn`` are motor-noise weights. Dynamics values are
    floored at 1% of base to keep the simulator well-defined for wild samples.
    """
    ev = np.asarray(dn.value_of(eta_raw), dtype=np.float64)
    base = env.dynamics.base
    dyn = np.maximum(ev[:n_dyn], 0.01 * base)
    live = (ev[:n_dyn] >= 0.01 * base).astype(np.float64)
    om = ev[n_dyn:] if ev.size > n_dyn else None
    a_eff = envs.apply_motor_noise(env.motor, data.obs, data.act, om) if om is not None else data.act
    pred = envs.step_deterministic(env, data.obs, a_eff, dyn)
    r = data.next_obs - pred
    sse = float(np.sum(r * r))
    if not isinstance(eta_raw, dn.Var):
        return sse
    J = envs.dstep_deta(env, data.obs, a_eff, dyn)
    g_dyn = -2.0 * np.einsum("no,nod->d", r, J) * live
    parts = [g_dyn]
    if om is not None:
        Ja = envs.dstep_da(env, data.obs, a_eff, dyn)
        phi = envs.phi_features(env.motor, data.obs)
        g_om = -2.0 * env.motor.K * np.einsum("no,noi,nj->ij", r, Ja, phi).reshape(-1)
        parts.append(g_om)
    grad = np.concatenate(parts)
    return dn.custom([eta_raw], np.asarray(sse), lambda g: (g * grad,))


def elbo_loss(chunks: Sequence[Chunk], est: ElementalEstimator, params, env: envs.EnvSpec,
              v: float, eps: np.ndarray):
    """Negative ELBO for one environment.

    ``eps`` holds the standard-normal draws, shape ``(eps_samples, m)``; fixing them makes
    the loss a deterministic function of ``params`` (used for gradient checks).
    Returns ``(loss, parts)``.
    """
    if v <= 0:
        raise ConfigError("likelihood noise std must be positive")
    mu_i, sd_i = est.forward(params, chunks)
    f0, g0 = est.prior_tensors(params)
    mean, std, clamped = aggregate_arrays(mu_i, sd_i, f0, g0)
    data = TransitionData.from_chunks(chunks, est.obs_dim)
    S = eps.shape[0]
    recon = 0.0
    for s in range(S):
        u = reparam_sample(mean, std, eps[s])
        raw = est.center + est.scale * u
        recon = recon + transition_sse(env, data, raw, est.n_dyn)
    recon = recon * (1.0 / (2.0 * v * v * S))
    kl = kl_to_prior(mean, std, f0, g0)
    loss = recon + kl
    return loss, {"recon": float(dn.value_of(recon)), "kl": float(dn.value_of(kl)),
                  "clamped": int(np.sum(clamped)), "n": data.obs.shape[0]}


# --- training --------------------------------------------------------------------

@dataclass
class SysidDataset:
    """Off-policy chunks for one training environment with its ground-truth vector."""

    chunks: list[Chunk]
    truth: np.ndarray  # raw (eta, omega)
    env: envs.EnvSpec  # spec with this environment's dynamics/motor weights

    @property
    def env_id(self) -> int:
        return id(self)


def datasets_from_episodes(episodes: Sequence[Episode], env_base: envs.EnvSpec, T: int,
                           noise_mode: bool = False) -> list[SysidDataset]:
    """Group episodes by ``env_id`` and chunk them."""
    groups: dict[int, list[Episode]] = {}
    for ep in episodes:
        groups.setdefault(ep.env_id, []).append(ep)
    out = []
    for env_id in sorted(groups):
        eps = groups[env_id]
        dyn = eps[0].dynamics
        for e in eps[1:]:
            if not np.array_equal(e.dynamics.values, dyn.values):
                raise ConfigError(f"env_id {env_id} mixes different dynamics")
        chunks = [c for e in eps for c in chunk_episode(e, T)]
        motor = env_base.motor
        truth = dyn.values
        if motor is not None:
            motor = envs.MotorNoiseSpec(motor.tau_seed, motor.phi_dim, eps[0].extra, motor.K, motor.hidden)
            if noise_mode:
                truth = np.concatenate([dyn.values, eps[0].extra])
        out.append(SysidDataset(chunks, truth, envs.EnvSpec(env_base.family, dyn, env_base.noise_std, motor,
                                                            env_base.dt, env_base.horizon, env_base.seed,
                                                            env_base.init_width)))
    return out


def coordinate_frame(env_base: envs.EnvSpec, range_frac: float, noise_mode: bool, omega_scale: float = 1.0):
    base = env_base.dynamics.base
    width = max(range_frac, 0.05)
    center, scale = [base], [base * width]
    if noise_mode and env_base.motor is not None:
        n = env_base.fam.act_dim * env_base.motor.phi_dim
        center.append(np.zeros(n))
        scale.append(np.full(n, omega_scale))
    return np.concatenate(center), np.concatenate(scale)


def feature_stats(datasets: Sequence[SysidDataset], est: ElementalEstimator):
    rows = np.concatenate([est.step_rows(d.chunks).reshape(-1, est.step_dim) for d in datasets if d.chunks])
    sd = rows.std(axis=0)
    return rows.mean(axis=0), np.where(sd > 1e-8, sd, 1.0)


@dataclass
class SysidResult:
    estimator: ElementalEstimator
    curve: list[dict] = field(default_factory=list)


def train_sysid(datasets: Sequence[SysidDataset], env_base: envs.EnvSpec, cfg: SysidConfig, range_frac: float,
                seed: int = 0, omega_scale: float = 1.0, estimator: Optional[ElementalEstimator] = None,
                log_every: int = 50) -> SysidResult:
    """Minimize the negative ELBO over environments with minibatch SGD (or momentum/Adam)."""
    rng = SeededRng(seed, 2)
    usable = []
    for d in datasets:
        if not d.chunks:
            log.warning("training environment with dynamics %s has no complete chunk; skipped", d.truth)
        else:
            usable.append(d)
    if estimator is None:
        center, scale = coordinate_frame(env_base, range_frac, cfg.noise_mode, omega_scale)
        estimator = ElementalEstimator(cfg, env_base, center, scale, rng=rng.spawn("init"))
        if usable:
            estimator.feat_mean, estimator.feat_std = feature_stats(usable, estimator)
    result = SysidResult(estimator)
    if cfg.steps == 0 or not usable:
        return result
    v = estimator.likelihood_std()
    params = estimator.params
    vel = {k: np.zeros_like(p) for k, p in params.items()}
    adam_m = {k: np.zeros_like(p) for k, p in params.items()}
    adam_v = {k: np.zeros_like(p) for k, p in params.items()}
    lo, hi = cfg.chunks_per_env
    for it in range(cfg.steps):
        srng = rng.spawn("step", it)
        picks = srng.integers(0, len(usable), cfg.envs_per_step)
        tape = dn.Tape()
        P = tape.watch(params)
        total, n_tr, parts_acc = 0.0, 0, {"recon": 0.0, "kl": 0.0, "clamped": 0}
        for e in picks:
            ds = usable[int(e)]
            k = int(srng.integers(lo, min(hi, len(ds.chunks)) + 1)) if len(ds.chunks) > lo else len(ds.chunks)
            idx = srng.permutation(len(ds.chunks))[:k]
            eps = srng.normal((cfg.eps_samples, estimator.m))
            loss, parts = elbo_loss([ds.chunks[i] for i in idx], estimator, P, ds.env, v, eps)
            total = total + loss
            n_tr += parts["n"]
            for key in parts_acc:
                parts_acc[key] += parts[key]
        # per-transition scaling keeps step sizes independent of dataset size
        obj = total * (1.0 / n_tr)
        val = float(dn.value_of(obj))
        if not np.isfinite(val):
            log.warning("non-finite sysid loss at step %d; step skipped", it)
            continue
        grads = tape.backward(obj)
        if not cfg.train_prior:
            grads = {k: g for k, g in grads.items() if not k.startswith("prior.")}
        grads, gnorm = dn.clip_grad_norm(grads, cfg.max_grad_norm)
        if cfg.optimizer == "adam":
            params = _adam(params, grads, adam_m, adam_v, cfg.lr, it + 1)
        elif cfg.momentum > 0:
            for k, g in grads.items():
                vel[k] = cfg.momentum * vel[k] + g
            params = dn.sgd_step(params, {k: vel[k] for k in grads}, cfg.lr)
        else:
            params = dn.sgd_step(params, grads, cfg.lr)
        if it % log_every == 0 or it == cfg.steps - 1:
            row = {"step": it, "loss": val, "grad_norm": gnorm, **parts_acc}
            result.curve.append(row)
            log.info("sysid step %d loss %.4f", it, val)
    estimator.params = params
    return result


def _adam(params, grads, m, v, lr, t, b1=0.9, b2=0.999, eps=1e-8):
    upd = {}
    for k, g in grads.items():
        m[k] = b1 * m[k] + (1 - b1) * g
        v[k] = b2 * v[k] + (1 - b2) * g * g
        mh = m[k] / (1 - b1 ** t)
        vh = v[k] / (1 - b2 ** t)
        upd[k] = mh / (np.sqrt(vh) + eps)
    return dn.sgd_step(params, upd, lr)


def estimate(trained, episodes: Sequence[Episode], T: int) -> PosteriorEstimate:
    """Chunk every episode, run the elemental estimator on each chunk and aggregate.

    The returned posterior is in raw parameter units.
    """
    chunks = [c for ep in episodes for c in chunk_episode(ep, T)]
    if not chunks:
        raise ConfigError(f"no complete chunk of length {T} in the data; collect longer or more episodes")
    mu, sd = trained.elementals(chunks)
    prior = trained.prior()
    if len(chunks) == 1:
        post, clamped = DiagGaussian(mu[0], sd[0]), ()
    else:
        mean, std, cl = aggregate_arrays(mu, sd, prior.f0, prior.g0)
        post, clamped = DiagGaussian(mean, std), tuple(np.flatnonzero(cl).tolist())
    return PosteriorEstimate(trained.to_raw(post), len(chunks), clamped)
