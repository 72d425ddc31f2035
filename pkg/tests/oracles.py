"""Independent reference computations used as test oracles.

None of these import the package's implementation of the quantity they check; they are
written in the most direct way available (python loops, sequential updates, brute force).
"""
from __future__ import annotations

import math

import numpy as np


def mlp_straight_line(weights, biases, x, activation="tanh"):
    """Neuron-by-neuron evaluation with python floats."""
    act = math.tanh if activation == "tanh" else (lambda v: max(v, 0.0))
    h = [float(v) for v in x]
    for layer, (W, b) in enumerate(zip(weights, biases)):
        out = []
        for j in range(W.shape[1]):
            s = float(b[j])
            for i in range(W.shape[0]):
                s += h[i] * float(W[i, j])
            out.append(s)
        h = out if layer == len(weights) - 1 else [act(v) for v in out]
    return np.array(h)


def conjugate_sequential(o, a, o2, v, f0, g0):
    """Posterior of eta in ``o2 = eta*o + a + N(0, v^2)`` by one scalar Bayes update per transition."""
    m, var = float(f0), float(g0) ** 2
    for oi, ai, yi in zip(np.ravel(o), np.ravel(a), np.ravel(o2)):
        # observe y - a = eta*o + noise: scalar Kalman update
        h = float(oi)
        s = h * var * h + v * v
        k = var * h / s
        m = m + k * (float(yi) - float(ai) - h * m)
        var = (1.0 - k * h) * var
    return m, math.sqrt(var)


def central_diff(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient/Jacobian of ``f`` over the entries of ``x`` (last axis of result)."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        xp, xm = x.copy().reshape(-1), x.copy().reshape(-1)
        xp[j] += step
        xm[j] -= step
        cols.append((np.asarray(f(xp.reshape(x.shape))) - np.asarray(f(xm.reshape(x.shape)))) / (2 * step))
    return np.stack(cols, axis=-1)


def discounted_returns_minus_value(rewards, values, bootstrap, gamma):
    """lambda=1 advantage by explicit discounted sums (no recursion)."""
    T = len(rewards)
    out = np.zeros(T)
    for t in range(T):
        g = 0.0
        for k in range(t, T):
            g += gamma ** (k - t) * rewards[k]
        g += gamma ** (T - t) * bootstrap
        out[t] = g - values[t]
    return out


def ks_uniform_statistic(samples, lo, hi) -> float:
    """Kolmogorov-Smirnov distance of ``samples`` to U[lo, hi]."""
    x = np.sort((np.asarray(samples) - lo) / (hi - lo))
    n = x.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - x), np.max(x - (i - 1) / n)))


def ks_critical(n: int, alpha: float = 0.01) -> float:
    """Asymptotic one-sample KS critical value."""
    c = math.sqrt(-0.5 * math.log(alpha / 2))
    return c / math.sqrt(n)


def gaussian_kl(m1, s1, m2, s2) -> float:
    """KL(N(m1,s1^2) || N(m2,s2^2)) by numerical integration on a wide grid (1-D)."""
    lo, hi = min(m1 - 12 * s1, m2 - 12 * s2), max(m1 + 12 * s1, m2 + 12 * s2)
    x = np.linspace(lo, hi, 200001)
    lp = -0.5 * ((x - m1) / s1) ** 2 - math.log(s1) - 0.5 * math.log(2 * math.pi)
    lq = -0.5 * ((x - m2) / s2) ** 2 - math.log(s2) - 0.5 * math.log(2 * math.pi)
    p = np.exp(lp)
    return float(np.trapezoid(p * (lp - lq), x))


def rel_err(a, b, floor: float = 1e-12) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
