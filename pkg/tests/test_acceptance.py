"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The expensive criteria train full models; they are marked ``slow`` and ``acceptance`` so the
fast unit suite can be run with ``-m "not slow"``.
"""
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from dynadapt import dcp, envs, harness, ppo, sysid
from dynadapt import diffnum as dn
from dynadapt.core import (Chunk, DiagGaussian, DynamicsVector, Episode, SeededRng, chunk_episode)

from .oracles import conjugate_sequential, rel_err

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

# Central-difference steps.  The simulator-based likelihood carries more floating-point noise
# than the network losses, so its step sits closer to the cube-root-of-epsilon optimum.
FD_STEP_POLICY = 1e-5
FD_STEP_ELBO = 1e-4


def report(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)
    assert ok, detail


# 1 ------------------------------------------------------------------------------

def test_criterion_1_aggregation_exactness(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        k, T = int(rng.integers(1, 21)), int(rng.integers(5, 51))
        v, f0, g0 = rng.uniform(0.01, 1.0), rng.uniform(-1.0, 2.0), rng.uniform(0.05, 3.0)
        eta = rng.uniform(0.5, 1.2)
        o = rng.uniform(-1, 1, (k, T))
        a = rng.uniform(-1, 1, (k, T))
        o2 = eta * o + a + v * rng.normal(size=(k, T))
        chunks = [Chunk(np.stack([o[i], a[i]], axis=1), o2[i][:, None]) for i in range(k)]
        conj = sysid.ConjugateLinearGaussian(v, f0, g0)
        mu, sd = conj.elementals(chunks)
        agg = sysid.aggregate([DiagGaussian(m, s) for m, s in zip(mu, sd)], conj.prior()).posterior
        m_ref, s_ref = conjugate_sequential(o, a, o2, v, f0, g0)
        worst = max(worst, rel_err(agg.mean, [m_ref], floor=1e-8), rel_err(agg.std, [s_ref]))
    dt = time.perf_counter() - t0
    report(capsys, 1, worst <= 1e-8 and dt < 10, f"max rel err {worst:.2e} (tol 1e-8), {dt:.1f}s (limit 10s)")


# 2 ------------------------------------------------------------------------------

def _policy_fd_error(seed: int) -> float:
    fam = envs.get_family("point_mass_1d")
    spec = envs.EnvSpec("point_mass_1d", DynamicsVector.at_base(fam.base), noise_std=0.002, horizon=10)
    cfg = ppo.PpoConfig(range_frac=0.2, episodes_per_iter=2, entropy_coef=0.01)
    pol = ppo.make_policy(spec, cfg, SeededRng(seed), hidden=(8, 8), latent_obs=4, latent_dyn=3)
    mb = ppo.prepare(ppo.collect(pol, spec, cfg, SeededRng(seed, 1)), cfg)
    p = pol.params.copy()
    rng = np.random.default_rng(seed)
    for k in p:
        p[k] = p[k] + 1e-3 * rng.normal(size=p[k].shape)

    def f(q):
        return float(dn.value_of(ppo.ppo_loss(pol.cfg, q, mb, cfg, fam.action_bound)[0]))

    tape = dn.Tape()
    g = tape.backward(ppo.ppo_loss(pol.cfg, tape.watch(p), mb, cfg, fam.action_bound)[0])
    fd = dn.finite_difference_grad(f, p, FD_STEP_POLICY)
    return max(rel_err(g[k], fd[k], floor=1e-6) for k in p)


def _elbo_fd_error(seed: int, family: str) -> float:
    fam = envs.get_family(family)
    env = envs.EnvSpec(family, DynamicsVector.at_base(fam.base, 0.2), noise_std=0.01, horizon=20)
    cfg = sysid.SysidConfig(family, T=5, hidden=(8,), step_features=4)
    est = sysid.ElementalEstimator(cfg, env, *sysid.coordinate_frame(env, 0.2, False), rng=SeededRng(seed))
    true_env = harness.sample_envs(env, 1, 0.2, 1.0, SeededRng(seed, 3))[0]
    chunks = [c for e in harness.collect_offpolicy(true_env, 1, SeededRng(seed, 4)) for c in chunk_episode(e, 5)]
    est.feat_mean, est.feat_std = sysid.feature_stats([sysid.SysidDataset(chunks, true_env.dynamics.values,
                                                                          true_env)], est)
    eps = np.random.default_rng(seed).normal(size=(2, est.m))

    def f(q):
        return float(dn.value_of(sysid.elbo_loss(chunks, est, q, true_env, 0.05, eps)[0]))

    tape = dn.Tape()
    g = tape.backward(sysid.elbo_loss(chunks, est, tape.watch(est.params), true_env, 0.05, eps)[0])
    fd = dn.finite_difference_grad(f, est.params, FD_STEP_ELBO)
    return max(rel_err(g[k], fd[k], floor=1e-5) for k in est.params)


def test_criterion_2_gradient_suite(capsys):
    t0 = time.perf_counter()
    pol = [_policy_fd_error(s) for s in range(20)]
    elbo = [_elbo_fd_error(s, fam) for s in range(20) for fam in ("point_mass_1d", "pendulum")]
    dt = time.perf_counter() - t0
    worst = max(max(pol), max(elbo))
    report(capsys, 2, worst <= 1e-4 and dt < 120,
           f"policy+aux max rel err {max(pol):.1e}, elbo max rel err {max(elbo):.1e} over 20 seeds "
           f"(tol 1e-4), {dt:.0f}s (limit 120s)")


# 3 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_3_sysid_recovery(capsys):
    t0 = time.perf_counter()
    cfg = harness.load_config(CONFIGS / "point_mass.toml").with_range(0.3)
    cfg = harness.sync_blocks(cfg)
    est = harness.train_sysid(cfg)
    env = harness.base_env(cfg)
    half = 0.3 * env.dynamics.base
    errs = []
    for i, e in enumerate(harness.sample_envs(env, 20, 0.3, 1.0, SeededRng(cfg.seed, 77))):
        data = harness.collect_offpolicy(e, cfg.eval.offpolicy_episodes, SeededRng(cfg.seed, 78).spawn(i))
        post = sysid.estimate(est, data, est.cfg.T)
        errs.append(np.abs(post.posterior.mean - e.dynamics.values))
    ratio = np.mean(errs, axis=0) / half
    # the learned estimator's std also shrinks over growing chunk prefixes of one held-out env
    held = [c for ep in data for c in chunk_episode(ep, est.cfg.T)]
    mu, sd = est.elementals(held[:20])
    elem = [DiagGaussian(m, s) for m, s in zip(mu, sd)]
    learned_std = [sysid.aggregate(elem[:k], est.prior()).posterior.std for k in range(5, 21)]
    learned_monotone = all(np.all(b <= a) for a, b in zip(learned_std, learned_std[1:]))
    # posterior std shrinks with data, checked against the conjugate oracle
    v, f0, g0 = 0.05, 0.9, 0.27
    rng = np.random.default_rng(0)
    stds, monotone, oracle_ok = [], True, True
    # one dataset, growing prefixes of it
    o = rng.uniform(-1, 1, (20, 10))
    a = rng.uniform(-1, 1, (20, 10))
    o2 = 0.95 * o + a + v * rng.normal(size=(20, 10))
    for k in range(5, 21):
        chunks = [Chunk(np.stack([o[i], a[i]], axis=1), o2[i][:, None]) for i in range(k)]
        eps = [Episode.from_arrays(1, c.x[:, :1], c.x[:, 1:], c.y, np.zeros(10), DynamicsVector.at_base([0.9], 0.3))
               for c in chunks]
        post = sysid.estimate(sysid.ConjugateLinearGaussian(v, f0, g0), eps, 10)
        _, s_ref = conjugate_sequential(o[:k], a[:k], o2[:k], v, f0, g0)
        oracle_ok &= abs(post.posterior.std[0] / s_ref - 1) <= 1e-8
        if stds:
            monotone &= post.posterior.std[0] <= stds[-1]
        stds.append(post.posterior.std[0])
    dt = time.perf_counter() - t0
    ok = bool(np.all(ratio <= 0.25)) and monotone and oracle_ok and learned_monotone and dt <= 900
    report(capsys, 3, ok, f"mean |error| / half-width per dim {np.round(ratio, 3).tolist()} (limit 0.25); "
                          f"std monotone 5..20 chunks: conjugate {monotone} (matches oracle: {oracle_ok}), "
                          f"learned {learned_monotone}; {dt:.0f}s")


# 4 ------------------------------------------------------------------------------

def _zero_shot(config: str, seed: int) -> dict:
    cfg = harness.load_config(CONFIGS / config, seed=seed)
    pol, _ = harness.train_policy(cfg)
    est = harness.train_sysid(cfg)
    rep = harness.evaluate_zero_shot(pol, est, cfg)
    return {k: rep.mean(f"{k}_mean") for k in ("oracle", "zero_shot", "base")} | {"skipped": len(rep.skipped)}


@pytest.mark.slow
def test_criterion_4_zero_shot_ordering(capsys):
    t0 = time.perf_counter()
    lines, ok = [], True
    for config in ("point_mass.toml", "pendulum.toml"):
        runs = [_zero_shot(config, s) for s in (0, 1, 2)]
        m = {k: float(np.mean([r[k] for r in runs])) for k in ("oracle", "zero_shot", "base")}
        # rewards are negative: "within 90% of the oracle" means no more than 10% of |oracle| below it
        ratio_ok = m["zero_shot"] >= m["oracle"] - 0.1 * abs(m["oracle"])
        order_ok = m["oracle"] >= m["zero_shot"] >= m["base"]
        ok &= ratio_ok and order_ok and all(r["skipped"] == 0 for r in runs)
        lines.append(f"{config.split('.')[0]}: oracle {m['oracle']:.3f} est {m['zero_shot']:.3f} "
                     f"base {m['base']:.3f} (order {'ok' if order_ok else 'violated'}, "
                     f"90% {'ok' if ratio_ok else 'violated'})")
    dt = time.perf_counter() - t0
    ok &= dt <= 3600
    report(capsys, 4, ok, "; ".join(lines) + f"; {dt / 60:.0f} min (limit 60)")


# 5 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_ablation_trend(capsys):
    cfg = harness.load_config(CONFIGS / "point_mass.toml").with_range(0.05)
    ff = harness.variant_config(cfg, "FF")
    ff_pure = replace(ff, flags=cfg.flags) == cfg and (ff.flags.use_eta_encoding, ff.flags.w_inv,
                                                        ff.flags.w_rec) == (False, 0.0, 0.0)
    rows = {r["variant"]: r for r in harness.run_ablation_suite(cfg, seeds=(0, 1, 2), variants=("full", "NoReg"))}
    full, noreg = rows["full"]["zero_shot_mean"], rows["NoReg"]["zero_shot_mean"]
    report(capsys, 5, full >= noreg and ff_pure,
           f"range 5%, 3 seeds: full {full:.3f} vs NoReg {noreg:.3f}; FF is a pure flag change: {ff_pure}")


# 6 ------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_noise_trend(capsys):
    cfg = harness.load_config(CONFIGS / "motor_noise.toml")
    K_max = cfg.env.motor.K
    rows = harness.run_noise_eval(cfg, K_values=(0.0, K_max), seeds=(0, 1, 2))
    by = {(r["setting"], r["K"]): r for r in rows}
    top, zero = by[("known", K_max)], by[("known", 0.0)]
    top_ok = top["diff"] >= 0
    zero_ok = abs(zero["diff"]) <= zero["pooled_se"]
    report(capsys, 6, top_ok and zero_ok,
           f"known noise, K={K_max}: noise-aware {top['noise_mean']:.3f} vs unaware {top['nonoise_mean']:.3f}; "
           f"K=0: |diff| {abs(zero['diff']):.3f} vs pooled SE {zero['pooled_se']:.3f}")


# 7 ------------------------------------------------------------------------------

def test_criterion_7_protocol_invariants(capsys, tmp_path):
    cfg = harness.load_config(CONFIGS / "smoke.toml")
    digests = []
    for run in ("a", "b"):
        out = tmp_path / run
        pol, _ = harness.train_policy(cfg, out)
        est = harness.train_sysid(cfg, out_dir=out)
        before = pol.params.checksum(), est.params.checksum()
        harness.evaluate_zero_shot(pol, est, cfg).write(out)
        pure = before == (pol.params.checksum(), est.params.checksum())
        files = ["metrics.csv", "sysid_metrics.csv", "zero_shot.csv", "policy/params.bin", "sysid/params.bin"]
        digests.append(tuple((out / f).read_bytes() for f in files))
    deterministic = digests[0] == digests[1]

    rng = np.random.default_rng(0)
    chunk_ok = True
    for n, T in ((150, 50), (49, 50), (120, 50), (7, 3)):
        o = rng.normal(size=(n + 1, 2))
        ep = Episode.from_arrays(1, o[:-1], rng.normal(size=(n, 1)), o[1:], np.zeros(n),
                                 DynamicsVector.at_base([1.0, 0.5]))
        chunks = chunk_episode(ep, T)
        chunk_ok &= len(chunks) == n // T
        if chunks:
            chunk_ok &= np.array_equal(np.concatenate([c.y for c in chunks]), o[1:][:len(chunks) * T])
    e = DiagGaussian([0.3, -1.2], [0.2, 0.7])
    single = sysid.aggregate([e], sysid.PriorParams([0.0, 0.0], [1.0, 1.0])).posterior
    k1_ok = np.array_equal(single.mean, e.mean) and np.array_equal(single.std, e.std)
    ok = pure and deterministic and chunk_ok and k1_ok
    report(capsys, 7, ok, f"eval leaves parameters unchanged: {pure}; byte-deterministic pipeline: "
                          f"{deterministic}; drop-remainder chunking: {chunk_ok}; k=1 aggregation identity: {k1_ok}")
