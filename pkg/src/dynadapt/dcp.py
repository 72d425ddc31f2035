"""Dynamics-conditioned policy: encoders, Gaussian action head, auxiliary regularizers.

Parameter names follow the checkpoint convention ``f_phi.*``, ``m_zeta.*``,
``g_theta.*``, ``g_inv.*``, ``f_rec.*`` and ``value.*``.  Every function takes the
parameter map explicitly, so the same code runs on plain arrays (rollouts) and on
tape variables (training).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffnum as dn
from .core import ConfigError, SeededRng

LOG_2PI = float(np.log(2 * np.pi))


@dataclass(frozen=True)
class DcpConfig:
    obs_dim: int
    act_dim: int
    cond_dim: int
    hidden: tuple[int, ...] = (64, 64)
    latent_obs: int = 32
    latent_dyn: int = 16
    activation: str = "tanh"
    use_eta_encoding: bool = True

    @property
    def latent(self) -> int:
        return self.latent_obs + self.latent_dyn

    def specs(self) -> dict[str, dn.MlpSpec]:
        h, act = tuple(self.hidden), self.activation
        return {
            "f_phi": dn.MlpSpec((self.obs_dim, *h, self.latent_obs), act),
            "m_zeta": dn.MlpSpec((self.cond_dim, *h, self.latent_dyn), act),
            "g_theta": dn.MlpSpec((self.latent, *h, 2 * self.act_dim), act, "softplus-tail", self.act_dim),
            "g_inv": dn.MlpSpec((2 * self.latent, *h, self.act_dim), act),
            "f_rec": dn.MlpSpec((self.latent_obs, *h, self.obs_dim), act),
            "value": dn.MlpSpec((self.latent, *h, 1), act),
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DcpConfig":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (64, 64)))
        return cls(**d)


def init_params(cfg: DcpConfig, rng: SeededRng) -> dn.ParamStore:
    params = dn.ParamStore()
    for name, spec in cfg.specs().items():
        dn.mlp_init(spec, name, rng.spawn("init", name), params)
    return params


@dataclass
class LatentState:
    z_obs: object
    z_dyn: object
    z: object


def encode_dynamics(cfg: DcpConfig, params, cond):
    """``M_zeta`` output for one or many conditioning vectors; zeros when the encoding is disabled."""
    cond_v = dn.value_of(cond)
    if cond_v.shape[-1] != cfg.cond_dim:
        raise ConfigError(f"conditioning vector has {cond_v.shape[-1]} entries, expected {cfg.cond_dim}")
    if not cfg.use_eta_encoding:
        return np.zeros(cond_v.shape[:-1] + (cfg.latent_dyn,))
    return dn.mlp_forward(cfg.specs()["m_zeta"], params, "m_zeta", cond)


def encode(cfg: DcpConfig, params, obs, cond, z_dyn=None) -> LatentState:
    """Latent ``z = [f_phi(o), M_zeta(eta)]``; ``obs`` and ``cond`` are batched row-aligned.

    A precomputed ``z_dyn`` (one row per obs row) may be passed to skip ``M_zeta``.
    """
    obs_v = dn.value_of(obs)
    if obs_v.shape[-1] != cfg.obs_dim:
        raise ConfigError(f"observation has {obs_v.shape[-1]} entries, expected {cfg.obs_dim}")
    z_obs = dn.mlp_forward(cfg.specs()["f_phi"], params, "f_phi", obs)
    if z_dyn is None:
        z_dyn = encode_dynamics(cfg, params, cond)
    return LatentState(z_obs, z_dyn, dn.concat([z_obs, z_dyn], axis=-1))


def policy_forward(cfg: DcpConfig, params, z):
    out = dn.mlp_forward(cfg.specs()["g_theta"], params, "g_theta", z)
    a = cfg.act_dim
    if dn.value_of(out).ndim == 1:
        return out[:a], out[a:]
    return out[:, :a], out[:, a:]


def value_forward(cfg: DcpConfig, params, z):
    out = dn.mlp_forward(cfg.specs()["value"], params, "value", z)
    return out[:, 0] if dn.value_of(out).ndim == 2 else out[0]


def gaussian_log_prob(mean, std, action):
    """Diagonal-Gaussian log density, summed over the last axis."""
    zs = (action - mean) / std
    lp = -0.5 * dn.square(zs) - dn.log(std) - 0.5 * LOG_2PI
    return dn.sum(lp, axis=-1)


def gaussian_entropy(std):
    return dn.sum(dn.log(std) + 0.5 * (LOG_2PI + 1.0), axis=-1)


def sample_action(mean: np.ndarray, std: np.ndarray, rng: SeededRng, eps: np.ndarray | None = None):
    mean, std = np.asarray(mean), np.asarray(std)
    if eps is None:
        eps = rng.normal(mean.shape)
    action = mean + std * eps
    return action, np.asarray(gaussian_log_prob(mean, std, action))


def inverse_dynamics_loss(cfg: DcpConfig, params, z_t, z_next, a_t):
    """Per-sample squared error of ``g_inv(z_{t+1}, z_t)`` against the executed action."""
    pred = dn.mlp_forward(cfg.specs()["g_inv"], params, "g_inv", dn.concat([z_next, z_t], axis=-1))
    return dn.sum(dn.square(pred - a_t), axis=-1)


def reconstruction_loss(cfg: DcpConfig, params, obs, z_obs=None):
    """Per-sample squared error of ``f_rec(f_phi(o))`` against ``o``."""
    if z_obs is None:
        z_obs = dn.mlp_forward(cfg.specs()["f_phi"], params, "f_phi", obs)
    rec = dn.mlp_forward(cfg.specs()["f_rec"], params, "f_rec", z_obs)
    return dn.sum(dn.square(rec - obs), axis=-1)


@dataclass
class AuxBatch:
    obs: np.ndarray
    next_obs: np.ndarray
    actions: np.ndarray
    cond: np.ndarray


def aux_loss(cfg: DcpConfig, params, batch: AuxBatch, w_inv: float, w_rec: float, latents=None):
    """``w_inv * mean(L_inv) + w_rec * mean(L_rec)``; zero weights switch a term off entirely."""
    if w_inv < 0 or w_rec < 0:
        raise ConfigError("auxiliary loss weights must be non-negative")
    total = 0.0
    if latents is None:
        latents = encode(cfg, params, batch.obs, batch.cond)
    if w_inv > 0:
        nxt = encode(cfg, params, batch.next_obs, batch.cond, z_dyn=latents.z_dyn)
        total = total + w_inv * dn.mean(inverse_dynamics_loss(cfg, params, latents.z, nxt.z, batch.actions))
    if w_rec > 0:
        total = total + w_rec * dn.mean(reconstruction_loss(cfg, params, batch.obs, latents.z_obs))
    return total


@dataclass
class Policy:
    """Config plus parameters; the unit that gets checkpointed."""

    cfg: DcpConfig
    params: dn.ParamStore
    meta: dict = field(default_factory=dict)

    def act(self, obs, cond, rng: SeededRng | None = None, deterministic: bool = False):
        lat = encode(self.cfg, self.params, np.atleast_2d(obs), np.atleast_2d(cond))
        mean, std = policy_forward(self.cfg, self.params, lat.z)
        if deterministic:
            return mean
        return sample_action(mean, std, rng)[0]

    def save(self, directory) -> None:
        dn.save_params(self.params, directory, {"kind": "dcp", "cfg": self.cfg.to_dict(), **self.meta})

    @classmethod
    def load(cls, directory) -> "Policy":
        params, meta = dn.load_params(directory)
        meta = dict(meta)
        cfg = DcpConfig.from_dict(meta.pop("cfg"))
        meta.pop("kind", None)
        return cls(cfg, params, meta)
