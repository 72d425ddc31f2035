"""Shared domain types: dynamics vectors, transitions, episodes, chunks, seeded streams."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised for shape or configuration mismatches."""


class SeededRng:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Two instances built from the same pair produce identical draw sequences.
    Use :meth:`spawn` to derive independent streams for a purpose/env pair.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence([self.seed, self.stream_id & 0xFFFFFFFFFFFFFFFF])
        self.gen = np.random.Generator(np.random.Philox(ss))

    def spawn(self, *keys) -> "SeededRng":
        h = hashlib.blake2b(repr((self.stream_id, keys)).encode(), digest_size=8)
        return SeededRng(self.seed, int.from_bytes(h.digest(), "little") >> 1)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id})"


@dataclass(frozen=True)
class DynamicsVector:
    values: np.ndarray
    base: np.ndarray
    range_frac: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        base = np.asarray(self.base, dtype=np.float64).reshape(-1)
        if values.shape != base.shape or values.size < 1:
            raise ConfigError(f"dynamics values {values.shape} vs base {base.shape}")
        if np.any(base <= 0):
            raise ConfigError("dynamics base values must be positive")
        if not 0.0 <= self.range_frac <= 1.0:
            raise ConfigError(f"range_frac {self.range_frac} outside [0, 1]")
        slack = 1e-12 * base
        if np.any(values < base * (1 - self.range_frac) - slack) or np.any(values > base * (1 + self.range_frac) + slack):
            raise ConfigError(f"dynamics values {values} outside base*(1 -/+ {self.range_frac})")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "base", base)

    @property
    def d(self) -> int:
        return self.values.size

    @classmethod
    def at_base(cls, base: Sequence[float], range_frac: float = 0.0) -> "DynamicsVector":
        base = np.asarray(base, dtype=np.float64)
        return cls(base.copy(), base, range_frac)

    def with_values(self, values) -> "DynamicsVector":
        return DynamicsVector(np.asarray(values, dtype=np.float64), self.base, self.range_frac)

    def to_dict(self) -> dict:
        return {"values": self.values.tolist(), "base": self.base.tolist(), "range_frac": self.range_frac}

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsVector":
        return cls(np.asarray(d["values"]), np.asarray(d["base"]), float(d.get("range_frac", 0.0)))


def sample_dynamics(base: DynamicsVector, range_frac: float, rng: SeededRng) -> DynamicsVector:
    """Draw each component uniformly from ``[b(1-x), b(1+x)]``."""
    if not 0.0 <= range_frac < 1.0:
        raise ConfigError(f"range_frac must lie in [0, 1), got {range_frac}")
    b = base.base
    if range_frac == 0.0:
        return DynamicsVector(b.copy(), b, 0.0)
    values = rng.uniform(b * (1.0 - range_frac), b * (1.0 + range_frac))
    return DynamicsVector(values, b, range_frac)


def normalize_dynamics(eta: DynamicsVector) -> np.ndarray:
    return eta.values / eta.base - 1.0


def denormalize_dynamics(z: np.ndarray, base: np.ndarray) -> np.ndarray:
    return (np.asarray(z, dtype=np.float64) + 1.0) * np.asarray(base, dtype=np.float64)


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise ConfigError("mean and std shapes differ")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise ValueError("non-finite Gaussian parameters")
        if np.any(std <= 0):
            raise ValueError("std must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def precision(self) -> np.ndarray:
        return self.std ** -2

    def log_prob(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        z = (x - self.mean) / self.std
        return float(np.sum(-0.5 * z * z - np.log(self.std) - 0.5 * np.log(2 * np.pi)))


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray
    reward: float
    step_index: int

    def to_dict(self) -> dict:
        return {
            "obs": np.asarray(self.obs).tolist(),
            "action": np.asarray(self.action).tolist(),
            "next_obs": np.asarray(self.next_obs).tolist(),
            "reward": float(self.reward),
            "step_index": int(self.step_index),
        }


@dataclass
class Episode:
    env_id: int
    transitions: list[Transition]
    dynamics: DynamicsVector
    # extra ground-truth conditioning (flattened motor weights) when motor noise is active
    extra: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.transitions)

    @classmethod
    def from_arrays(cls, env_id, obs, actions, next_obs, rewards, dynamics, extra=None) -> "Episode":
        trs = [
            Transition(np.asarray(obs[t], dtype=np.float64), np.asarray(actions[t], dtype=np.float64),
                       np.asarray(next_obs[t], dtype=np.float64), float(rewards[t]), t + 1)
            for t in range(len(obs))
        ]
        ex = np.zeros(0) if extra is None else np.asarray(extra, dtype=np.float64).reshape(-1)
        return cls(int(env_id), trs, dynamics, ex)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        obs = np.array([t.obs for t in self.transitions])
        act = np.array([t.action for t in self.transitions])
        nxt = np.array([t.next_obs for t in self.transitions])
        return obs, act, nxt

    def to_json(self) -> str:
        d = {
            "env_id": self.env_id,
            "dynamics": self.dynamics.to_dict(),
            "transitions": [t.to_dict() for t in self.transitions],
        }
        if self.extra.size:
            d["extra"] = self.extra.tolist()
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Episode":
        d = json.loads(line)
        trs = [
            Transition(np.asarray(t["obs"], dtype=np.float64), np.asarray(t["action"], dtype=np.float64),
                       np.asarray(t["next_obs"], dtype=np.float64), float(t["reward"]), int(t["step_index"]))
            for t in d["transitions"]
        ]
        return cls(int(d["env_id"]), trs, DynamicsVector.from_dict(d["dynamics"]),
                   np.asarray(d.get("extra", []), dtype=np.float64))


def write_episodes(path: str | Path, episodes: Iterable[Episode]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(ep.to_json())
            fh.write("\n")


def read_episodes(path: str | Path) -> list[Episode]:
    with open(path) as fh:
        return [Episode.from_json(line) for line in fh if line.strip()]


@dataclass(frozen=True)
class Chunk:
    """``x`` rows are ``[obs, action]``; ``y`` rows are next observations."""

    x: np.ndarray
    y: np.ndarray

    @property
    def T(self) -> int:
        return self.x.shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.x, self.y], axis=1).reshape(-1)


def chunk_episode(ep: Episode, T: int) -> list[Chunk]:
    """Split into ``len // T`` consecutive chunks; the trailing remainder is dropped."""
    if T < 1:
        raise ConfigError(f"chunk length must be >= 1, got {T}")
    n = len(ep.transitions) // T
    if n == 0:
        return []
    obs, act, nxt = ep.arrays()
    x = np.concatenate([obs, act], axis=1)
    return [Chunk(x[i * T:(i + 1) * T], nxt[i * T:(i + 1) * T]) for i in range(n)]
