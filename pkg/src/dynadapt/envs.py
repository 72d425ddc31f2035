"""Analytic parameter-conditioned environments with process and motor noise.

All step functions are batched: states ``(n, obs_dim)``, actions ``(n, act_dim)``,
dynamics ``(n, d)`` or ``(d,)``.  They also accept complex dynamics/actions so that
Jacobians can be taken by complex-step differentiation, which is exact to
rounding error and needs no hand-written derivative per family.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import ConfigError, DynamicsVector, SeededRng

_CSTEP = 1e-30


def _clip(a, lo, hi):
    # complex-safe clip: decisions on the real part, derivative zero when saturated
    re = np.real(a)
    return np.where(re > hi, hi, np.where(re < lo, lo, a))


def _wrap(x):
    return (x + np.pi) % (2 * np.pi) - np.pi


class Family:
    name: str
    obs_dim: int
    act_dim: int
    d: int
    base: tuple
    param_names: tuple
    action_bound: float
    reward_max: float
    init_width: float
    substeps: int = 1

    # internal coordinates <-> observation vector
    def to_internal(self, s):
        return s

    def to_obs(self, q):
        return q

    def nominal_internal(self):
        raise NotImplementedError

    def step_internal(self, q, a, eta, dt):
        raise NotImplementedError

    def integrate(self, q, a, eta, dt):
        h = dt / self.substeps
        for _ in range(self.substeps):
            q = self.step_internal(q, a, eta, h)
        return q

    def reward(self, s, a):
        raise NotImplementedError


class PointMass1D(Family):
    name = "point_mass_1d"
    obs_dim, act_dim, d = 2, 1, 2
    base = (1.0, 0.5)
    param_names = ("mass", "friction")
    action_bound = 1.0
    reward_max = 0.0
    init_width = 0.1
    goal = 1.0

    def nominal_internal(self):
        return np.array([0.0, 0.0])

    def step_internal(self, q, a, eta, dt):
        m, c = eta[..., 0], eta[..., 1]
        p, v = q[..., 0], q[..., 1]
        v2 = v + dt * (a[..., 0] / m - c * v)
        p2 = p + dt * v2
        return np.stack([p2, v2], axis=-1)

    def reward(self, s, a):
        return -np.abs(s[..., 0] - self.goal) - 0.01 * np.sum(a * a, axis=-1)


class Pendulum(Family):
    """Angle measured from the hanging-down rest position; upright is ``pi``."""

    name = "pendulum"
    obs_dim, act_dim, d = 3, 1, 4
    base = (1.0, 1.0, 9.8, 0.1)
    param_names = ("mass", "length", "gravity", "damping")
    action_bound = 5.0
    reward_max = 0.0
    init_width = 0.3
    substeps = 4
    nominal_angle = np.pi

    def to_internal(self, s):
        return np.stack([np.arctan2(s[..., 1], s[..., 0]), s[..., 2]], axis=-1)

    def to_obs(self, q):
        th = q[..., 0]
        return np.stack([np.cos(th), np.sin(th), q[..., 1]], axis=-1)

    def nominal_internal(self):
        return np.array([self.nominal_angle, 0.0])

    def step_internal(self, q, a, eta, dt):
        m, ln, g, b = eta[..., 0], eta[..., 1], eta[..., 2], eta[..., 3]
        th, w = q[..., 0], q[..., 1]
        acc = (a[..., 0] - b * w - m * g * ln * np.sin(th)) / (m * ln * ln)
        w2 = w + dt * acc
        th2 = th + dt * w2
        return np.stack([th2, w2], axis=-1)

    def reward(self, s, a):
        th = np.arctan2(s[..., 1], s[..., 0])
        off = _wrap(th - np.pi)
        return -off ** 2 - 0.1 * s[..., 2] ** 2 - 0.001 * np.sum(a * a, axis=-1)

    def energy(self, s, eta):
        m, ln, g = eta[0], eta[1], eta[2]
        return 0.5 * m * ln ** 2 * s[..., 2] ** 2 + m * g * ln * (1.0 - s[..., 0])


class CartPole(Family):
    """Cart-pole with a torsional spring at the hinge pulling toward upright (``theta = pi``)."""

    name = "cart_pole"
    obs_dim, act_dim, d = 5, 1, 5
    base = (1.0, 0.1, 0.5, 9.8, 0.5)
    param_names = ("cart_mass", "pole_mass", "pole_length", "gravity", "joint_stiffness")
    action_bound = 10.0
    reward_max = 1.0
    init_width = 0.05
    substeps = 4

    def to_internal(self, s):
        return np.stack([s[..., 0], s[..., 1], np.arctan2(s[..., 3], s[..., 2]), s[..., 4]], axis=-1)

    def to_obs(self, q):
        th = q[..., 2]
        return np.stack([q[..., 0], q[..., 1], np.cos(th), np.sin(th), q[..., 3]], axis=-1)

    def nominal_internal(self):
        return np.array([0.0, 0.0, np.pi, 0.0])

    def step_internal(self, q, a, eta, dt):
        M, m, ln, g, k = (eta[..., i] for i in range(5))
        x, xd, th, thd = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
        phi = _wrap(np.real(th) - np.pi) + (th - np.real(th))
        s, c = np.sin(phi), np.cos(phi)
        total = M + m
        temp = (a[..., 0] + m * ln * thd ** 2 * s) / total
        acc = (g * s - c * temp - k * phi / (m * ln)) / (ln * (4.0 / 3.0 - m * c * c / total))
        xacc = temp - m * ln * acc * c / total
        thd2 = thd + dt * acc
        xd2 = xd + dt * xacc
        return np.stack([x + dt * xd2, xd2, th + dt * thd2, thd2], axis=-1)

    def reward(self, s, a):
        th = np.arctan2(s[..., 3], s[..., 2])
        up = (np.abs(_wrap(th - np.pi)) < 0.4) & (np.abs(s[..., 0]) < 2.4)
        return up.astype(np.float64) - 0.01 * np.sum(a * a, axis=-1)


class LinearGaussian(Family):
    name = "linear_gaussian"
    obs_dim, act_dim, d = 1, 1, 1
    base = (0.9,)
    param_names = ("gain",)
    action_bound = 1.0
    reward_max = 0.0
    init_width = 0.5

    def nominal_internal(self):
        return np.array([1.0])

    def step_internal(self, q, a, eta, dt):
        return eta[..., :1] * q + a

    def reward(self, s, a):
        return -s[..., 0] ** 2 - 0.01 * np.sum(a * a, axis=-1)


FAMILIES: dict[str, Family] = {f.name: f for f in (PointMass1D(), Pendulum(), CartPole(), LinearGaussian())}


def get_family(name: str) -> Family:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ConfigError(f"unknown environment family {name!r}") from None


@dataclass(frozen=True)
class MotorNoiseSpec:
    tau_seed: int
    phi_dim: int = 4
    omega: np.ndarray = field(default_factory=lambda: np.zeros(0))
    K: float = 0.0
    hidden: int = 16

    def __post_init__(self):
        if self.phi_dim < 1:
            raise ConfigError("phi_dim must be >= 1")
        om = np.asarray(self.omega, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(om)):
            raise ConfigError("omega must be finite")
        object.__setattr__(self, "omega", om)


_PHI_CACHE: dict = {}


def phi_weights(tau_seed: int, obs_dim: int, phi_dim: int, hidden: int = 16):
    """Fixed random network weights, fully determined by ``tau_seed``."""
    key = (int(tau_seed), obs_dim, phi_dim, hidden)
    if key not in _PHI_CACHE:
        rng = SeededRng(tau_seed, 0x7A5)
        W1 = rng.normal((obs_dim, hidden)) / np.sqrt(obs_dim)
        b1 = rng.normal(hidden) * 0.5
        W2 = rng.normal((hidden, phi_dim)) / np.sqrt(hidden)
        _PHI_CACHE[key] = (W1, b1, W2)
    return _PHI_CACHE[key]


def phi_features(motor: MotorNoiseSpec, o: np.ndarray) -> np.ndarray:
    W1, b1, W2 = phi_weights(motor.tau_seed, o.shape[-1], motor.phi_dim, motor.hidden)
    return np.tanh(o @ W1 + b1) @ W2


def apply_motor_noise(motor: Optional[MotorNoiseSpec], o, a, omega=None):
    """``a + K * Omega @ phi(o)`` with ``Omega`` shaped ``(act_dim, phi_dim)``.

    ``omega`` overrides ``motor.omega`` and may be batched ``(n, act_dim*phi_dim)``.
    """
    if motor is None or motor.K == 0.0:
        return a
    om = motor.omega if omega is None else omega
    om = np.asarray(om)
    act_dim = np.shape(a)[-1]
    if om.shape[-1] != act_dim * motor.phi_dim:
        raise ConfigError(f"omega has {om.shape[-1]} entries, expected {act_dim * motor.phi_dim}")
    feats = phi_features(motor, np.asarray(o, dtype=np.float64))
    Om = om.reshape(om.shape[:-1] + (act_dim, motor.phi_dim))
    return a + motor.K * np.einsum("...ij,...j->...i", Om, feats)


@dataclass(frozen=True)
class EnvSpec:
    family: str
    dynamics: DynamicsVector
    noise_std: float = 0.0
    motor: Optional[MotorNoiseSpec] = None
    dt: float = 0.05
    horizon: int = 200
    seed: int = 0
    init_width: Optional[float] = None

    def __post_init__(self):
        fam = get_family(self.family)
        if self.dynamics.d != fam.d:
            raise ConfigError(f"{self.family} expects d={fam.d}, got {self.dynamics.d}")
        if self.horizon < 1 or self.dt <= 0 or self.noise_std < 0:
            raise ConfigError("invalid horizon/dt/noise_std")

    @property
    def fam(self) -> Family:
        return get_family(self.family)

    def with_dynamics(self, dyn: DynamicsVector) -> "EnvSpec":
        return replace(self, dynamics=dyn)


def _eta(spec: EnvSpec, eta):
    return spec.dynamics.values if eta is None else eta


def step_deterministic(spec: EnvSpec, s, a, eta=None):
    """Semi-implicit Euler step ``F(o, a; eta)`` after clipping the action to the box."""
    fam = spec.fam
    a = _clip(np.asarray(a), -fam.action_bound, fam.action_bound)
    q = fam.to_internal(np.asarray(s))
    out = fam.to_obs(fam.integrate(q, a, np.asarray(_eta(spec, eta)), spec.dt))
    if np.iscomplexobj(out):
        return out
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{fam.name}: non-finite state after step from {s!r} with action {a!r}")
    return out


def step(spec: EnvSpec, s, a, rng: SeededRng, eta=None, strict: bool = True):
    """Deterministic step plus Gaussian process noise of std ``noise_std``.

    Noise is added in internal coordinates so trig observation pairs stay on the unit circle.
    With ``strict=False`` non-finite rows are returned as-is for the caller to handle.
    """
    fam = spec.fam
    a = _clip(np.asarray(a, dtype=np.float64), -fam.action_bound, fam.action_bound)
    q = fam.to_internal(np.asarray(s, dtype=np.float64))
    q2 = fam.integrate(q, a, np.asarray(_eta(spec, eta)), spec.dt)
    if spec.noise_std > 0:
        q2 = q2 + spec.noise_std * rng.normal(q2.shape)
    out = fam.to_obs(q2)
    if strict and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{fam.name}: non-finite state after step from {s!r}")
    return out


def dstep_deta(spec: EnvSpec, s, a, eta=None) -> np.ndarray:
    """Jacobian of :func:`step_deterministic` w.r.t. dynamics, shape ``(..., obs_dim, d)``."""
    eta = np.asarray(_eta(spec, eta), dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    cols = []
    for j in range(eta.shape[-1]):
        e = eta.astype(np.complex128)
        e[..., j] += 1j * _CSTEP
        cols.append(np.imag(step_deterministic(spec, s, a, e)) / _CSTEP)
    return np.stack(cols, axis=-1)


def dstep_da(spec: EnvSpec, s, a, eta=None) -> np.ndarray:
    """Jacobian w.r.t. the (pre-clip) action, shape ``(..., obs_dim, act_dim)``; zero when saturated."""
    a = np.asarray(a, dtype=np.float64)
    cols = []
    for j in range(a.shape[-1]):
        ac = a.astype(np.complex128)
        ac[..., j] += 1j * _CSTEP
        cols.append(np.imag(step_deterministic(spec, s, ac, eta)) / _CSTEP)
    return np.stack(cols, axis=-1)


def act_and_step(spec: EnvSpec, s, a, rng: SeededRng, eta=None, omega=None, strict: bool = True):
    """Apply motor noise (if configured) to the commanded action, then step."""
    return step(spec, s, apply_motor_noise(spec.motor, s, a, omega), rng, eta, strict)


def forward_model(spec: EnvSpec, s, a, eta=None, omega=None):
    """Noise-free ``F`` including the motor disturbance; the model used for identification."""
    return step_deterministic(spec, s, apply_motor_noise(spec.motor, s, a, omega), eta)


def reward(spec: EnvSpec, s, a):
    fam = spec.fam
    return fam.reward(np.asarray(s, dtype=np.float64),
                      _clip(np.asarray(a, dtype=np.float64), -fam.action_bound, fam.action_bound))


def reset(spec: EnvSpec, rng: SeededRng, n: Optional[int] = None):
    """Nominal start plus a uniform perturbation of half-width ``init_width`` per internal coordinate."""
    fam = spec.fam
    width = fam.init_width if spec.init_width is None else spec.init_width
    q0 = fam.nominal_internal()
    shape = q0.shape if n is None else (n,) + q0.shape
    q = q0 + (rng.uniform(-width, width, size=shape) if width > 0 else np.zeros(shape))
    return fam.to_obs(q)


def initial_box(spec: EnvSpec) -> tuple[np.ndarray, np.ndarray]:
    fam = spec.fam
    width = fam.init_width if spec.init_width is None else spec.init_width
    q0 = fam.nominal_internal()
    return q0 - width, q0 + width
