"""Minimal reverse-mode autodiff over numpy arrays, MLP blocks, SGD, checkpoints.

Operations dispatch on their arguments: plain ``np.ndarray`` inputs are evaluated
eagerly with no recording, while :class:`Var` inputs append a node to the
owning :class:`Tape`.  The same network code therefore serves fast rollouts
and differentiable training passes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import ConfigError, SeededRng

STD_FLOOR = 1e-4


class Tape:
    """Wengert list of recorded primitives. Backward replays it in reverse."""

    def __init__(self):
        self.nodes: list[tuple[Var, tuple, Callable]] = []
        self._watched: dict[str, Var] = {}

    def var(self, value, name: str | None = None) -> "Var":
        v = Var(np.asarray(value, dtype=np.float64), self)
        if name is not None:
            if name in self._watched:
                raise ConfigError(f"parameter {name!r} watched twice")
            self._watched[name] = v
        return v

    def watch(self, params: "ParamStore", prefix: str = "") -> dict[str, "Var"]:
        return {k: self.var(v, k) for k, v in params.items() if k.startswith(prefix)}

    def record(self, value, inputs: tuple, vjp: Callable) -> "Var":
        out = Var(value, self)
        self.nodes.append((out, inputs, vjp))
        return out

    def backward(self, output: "Var", output_grad=None) -> dict[str, np.ndarray]:
        """Gradient of ``sum(output * output_grad)`` w.r.t. every watched variable."""
        if output.tape is not self:
            raise ConfigError("output was not recorded on this tape")
        if output_grad is None:
            output_grad = np.ones_like(output.value)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(output_grad, dtype=np.float64)}
        for out, inputs, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for x, gx in zip(inputs, in_grads):
                if isinstance(x, Var) and gx is not None:
                    k = id(x)
                    grads[k] = grads[k] + gx if k in grads else gx
        return {
            name: grads.get(id(v), np.zeros_like(v.value)).reshape(v.value.shape)
            for name, v in self._watched.items()
        }


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


class Var:
    __array_priority__ = 100.0

    def __init__(self, value: np.ndarray, tape: Tape):
        self.value = value
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(o))

    def __rsub__(self, o):
        return add(o, neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return mul(self, reciprocal(o))

    def __rtruediv__(self, o):
        return mul(o, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


# --- primitives ---------------------------------------------------------------

def add(a, b):
    va, vb = _val(a), _val(b)
    t = _tape(a, b)
    if t is None:
        return va + vb
    return t.record(va + vb, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def neg(a):
    if not isinstance(a, Var):
        return -_val(a)
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    va, vb = _val(a), _val(b)
    t = _tape(a, b)
    if t is None:
        return va * vb
    return t.record(va * vb, (a, b),
                    lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)))


def reciprocal(a):
    if not isinstance(a, Var):
        return 1.0 / _val(a)
    r = 1.0 / a.value
    return a.tape.record(r, (a,), lambda g: (-g * r * r,))


def power(a, p: float):
    if not isinstance(a, Var):
        return _val(a) ** p
    va = a.value
    return a.tape.record(va ** p, (a,), lambda g: (g * p * va ** (p - 1),))


def square(a):
    if not isinstance(a, Var):
        return _val(a) ** 2
    va = a.value
    return a.tape.record(va * va, (a,), lambda g: (2.0 * g * va,))


def matmul(a, b):
    va, vb = _val(a), _val(b)
    t = _tape(a, b)
    if t is None:
        return va @ vb
    if va.ndim != 2 or vb.ndim != 2:
        raise ConfigError("matmul supports 2-d operands only")
    return t.record(va @ vb, (a, b), lambda g: (g @ vb.T, va.T @ g))


def tanh(a):
    if not isinstance(a, Var):
        return np.tanh(_val(a))
    y = np.tanh(a.value)
    return a.tape.record(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    if not isinstance(a, Var):
        return np.maximum(_val(a), 0.0)
    mask = a.value > 0
    return a.tape.record(a.value * mask, (a,), lambda g: (g * mask,))


def softplus(a):
    if not isinstance(a, Var):
        return np.logaddexp(0.0, _val(a))
    va = a.value
    sig = 0.5 * (1.0 + np.tanh(0.5 * va))
    return a.tape.record(np.logaddexp(0.0, va), (a,), lambda g: (g * sig,))


def exp(a):
    if not isinstance(a, Var):
        return np.exp(_val(a))
    y = np.exp(a.value)
    return a.tape.record(y, (a,), lambda g: (g * y,))


def log(a):
    if not isinstance(a, Var):
        return np.log(_val(a))
    va = a.value
    return a.tape.record(np.log(va), (a,), lambda g: (g / va,))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if not isinstance(a, Var):
        return np.sum(_val(a), axis=axis, keepdims=keepdims)
    shape = a.value.shape
    y = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record(np.asarray(y), (a,), vjp)


def mean(a, axis=None):
    v = _val(a)
    n = v.size if axis is None else v.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def minimum(a, b):
    va, vb = _val(a), _val(b)
    t = _tape(a, b)
    if t is None:
        return np.minimum(va, vb)
    pick_a = va <= vb
    return t.record(np.minimum(va, vb), (a, b),
                    lambda g: (_unbroadcast(g * pick_a, va.shape), _unbroadcast(g * ~pick_a, vb.shape)))


def clip(a, lo: float, hi: float):
    if not isinstance(a, Var):
        return np.clip(_val(a), lo, hi)
    va = a.value
    inside = (va >= lo) & (va <= hi)
    return a.tape.record(np.clip(va, lo, hi), (a,), lambda g: (g * inside,))


def concat(xs: Sequence, axis: int = -1):
    vals = [_val(x) for x in xs]
    t = _tape(*xs)
    y = np.concatenate(vals, axis=axis)
    if t is None:
        return y
    ax = axis % y.ndim
    splits = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return t.record(y, tuple(xs), vjp)


def getitem(a, idx):
    if not isinstance(a, Var):
        return _val(a)[idx]
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape.record(a.value[idx], (a,), vjp)


def reshape(a, shape):
    if not isinstance(a, Var):
        return _val(a).reshape(shape)
    old = a.value.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def broadcast_rows(a, n: int):
    """Repeat a 1-d vector as ``n`` identical rows."""
    if not isinstance(a, Var):
        return np.broadcast_to(_val(a), (n, _val(a).shape[-1])).copy()
    return a.tape.record(np.broadcast_to(a.value, (n, a.value.shape[-1])).copy(), (a,),
                         lambda g: (g.sum(axis=0),))


def custom(inputs: Sequence, value: np.ndarray, vjp: Callable):
    """Record an op whose vector-Jacobian product is supplied by the caller."""
    t = _tape(*inputs)
    if t is None:
        return value
    return t.record(value, tuple(inputs), vjp)


def value_of(x) -> np.ndarray:
    return _val(x)


# --- parameters ---------------------------------------------------------------

class ParamStore(dict):
    """Ordered name -> float64 array map."""

    def __setitem__(self, key, value):
        super().__setitem__(key, np.asarray(value, dtype=np.float64))

    @property
    def total_count(self) -> int:
        return int(np.sum([v.size for v in self.values()]))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.items():
            out[k] = v.copy()
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.values()]) if self else np.zeros(0)

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]  # includes input and output width
    activation: str = "tanh"
    output_transform: str = "identity"  # or "softplus-tail"
    tail: int = 0  # number of trailing outputs passed through softplus

    def __post_init__(self):
        if len(self.layer_widths) < 2 or min(self.layer_widths) < 1:
            raise ConfigError(f"bad layer widths {self.layer_widths}")
        if self.activation not in ("tanh", "relu"):
            raise ConfigError(f"unknown activation {self.activation}")
        if self.output_transform not in ("identity", "softplus-tail"):
            raise ConfigError(f"unknown output transform {self.output_transform}")

    @property
    def n_in(self) -> int:
        return self.layer_widths[0]

    @property
    def n_out(self) -> int:
        return self.layer_widths[-1]


def mlp_init(spec: MlpSpec, prefix: str, rng: SeededRng, params: ParamStore | None = None) -> ParamStore:
    """Glorot-uniform weights, zero biases."""
    params = ParamStore() if params is None else params
    w = spec.layer_widths
    for i in range(len(w) - 1):
        lim = np.sqrt(6.0 / (w[i] + w[i + 1]))
        params[f"{prefix}.W{i}"] = rng.uniform(-lim, lim, size=(w[i], w[i + 1]))
        params[f"{prefix}.b{i}"] = np.zeros(w[i + 1])
    return params


def mlp_forward(spec: MlpSpec, params, prefix: str, x):
    """Evaluate the network on a batch ``x`` of shape ``(n, n_in)`` (or a single vector)."""
    single = _val(x).ndim == 1
    if single:
        x = reshape(x, (1, -1))
    if _val(x).shape[-1] != spec.n_in:
        raise ConfigError(f"{prefix}: input width {_val(x).shape[-1]} != {spec.n_in}")
    n_layers = len(spec.layer_widths) - 1
    act = tanh if spec.activation == "tanh" else relu
    h = x
    for i in range(n_layers):
        W, b = params[f"{prefix}.W{i}"], params[f"{prefix}.b{i}"]
        if _val(W).shape != (spec.layer_widths[i], spec.layer_widths[i + 1]):
            raise ConfigError(f"{prefix}.W{i} has shape {_val(W).shape}")
        h = add(matmul(h, W), b)
        if i < n_layers - 1:
            h = act(h)
    if spec.output_transform == "softplus-tail" and spec.tail > 0:
        head = spec.n_out - spec.tail
        h = concat([h[:, :head], add(softplus(h[:, head:]), STD_FLOOR)], axis=1)
    if single:
        h = reshape(h, (spec.n_out,))
    return h


def backward(tape: Tape, output: Var, output_grad=None) -> dict[str, np.ndarray]:
    return tape.backward(output, output_grad)


class NonFiniteGradient(FloatingPointError):
    pass


def sgd_step(params: ParamStore, grads: dict[str, np.ndarray], lr: float) -> ParamStore:
    """Return ``params - lr * grads``; rejects the whole step on any non-finite gradient."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for k, g in grads.items():
        if k not in params:
            raise ConfigError(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != params[k].shape:
            raise ConfigError(f"gradient shape mismatch for {k!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {k!r}")
    out = params.copy()
    for k, g in grads.items():
        out[k] = params[k] - lr * g
    return out


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


# --- checkpoints --------------------------------------------------------------

def save_params(params: ParamStore, directory: str | Path, meta: dict | None = None) -> None:
    """Write ``manifest.json`` (name, shape, offset) plus a little-endian float64 payload."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name, arr in params.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").reshape(-1))
    payload = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    (directory / "params.bin").write_bytes(payload.astype("<f8").tobytes())
    manifest = {"dtype": "<f8", "count": int(offset), "entries": entries}
    if meta is not None:
        manifest["meta"] = meta
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_params(directory: str | Path) -> tuple[ParamStore, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    payload = np.frombuffer((directory / "params.bin").read_bytes(), dtype="<f8")
    if payload.size != manifest["count"]:
        raise ConfigError(f"payload holds {payload.size} values, manifest says {manifest['count']}")
    params = ParamStore()
    for e in manifest["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        params[e["name"]] = payload[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return params, manifest.get("meta", {})


def finite_difference_grad(f: Callable[[ParamStore], float], params: ParamStore,
                           step: float = 1e-5, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Central differences of a scalar function, coordinate by coordinate."""
    out = {}
    for k in (names if names is not None else list(params)):
        g = np.zeros_like(params[k])
        it = np.nditer(params[k], flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            p = params.copy()
            p[k][idx] += step
            fp = f(p)
            p[k][idx] -= 2 * step
            fm = f(p)
            g[idx] = (fp - fm) / (2 * step)
        out[k] = g
    return out
