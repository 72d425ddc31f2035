import numpy as np
import pytest

from dynadapt import dcp
from dynadapt import diffnum as dn
from dynadapt.core import ConfigError, SeededRng

from .oracles import rel_err

CFG = dcp.DcpConfig(obs_dim=3, act_dim=2, cond_dim=4, hidden=(16, 16), latent_obs=6, latent_dyn=5)


def params(seed=0, cfg=CFG):
    return dcp.init_params(cfg, SeededRng(seed))


def zeroed(p, prefix=""):
    q = p.copy()
    for k in q:
        if k.startswith(prefix):
            q[k] = np.zeros_like(q[k])
    return q


def test_checkpoint_names_follow_convention():
    prefixes = {k.split(".")[0] for k in params()}
    assert prefixes == {"f_phi", "m_zeta", "g_theta", "g_inv", "f_rec", "value"}


def test_zero_networks_give_zero_latent():
    lat = dcp.encode(CFG, zeroed(params()), np.ones((2, 3)), np.ones((2, 4)))
    np.testing.assert_array_equal(lat.z, np.zeros((2, 11)))


def test_obs_and_dynamics_paths_are_separate():
    p = params(1)
    o = np.array([[0.1, -0.2, 0.3]])
    a = dcp.encode(CFG, p, o, np.array([[0.0, 0.1, 0.0, 0.0]]))
    b = dcp.encode(CFG, p, o, np.array([[0.5, -0.3, 0.2, 0.0]]))
    np.testing.assert_array_equal(a.z_obs, b.z_obs)
    assert not np.allclose(a.z_dyn, b.z_dyn)
    np.testing.assert_array_equal(a.z, np.concatenate([a.z_obs, a.z_dyn], axis=1))


@pytest.mark.parametrize("n", [1, 7])
def test_latent_length(n):
    lat = dcp.encode(CFG, params(), np.zeros((n, 3)), np.zeros((n, 4)))
    assert lat.z.shape == (n, CFG.latent_obs + CFG.latent_dyn)


def test_dimension_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        dcp.encode(CFG, params(), np.zeros((1, 4)), np.zeros((1, 4)))
    with pytest.raises(ConfigError):
        dcp.encode(CFG, params(), np.zeros((1, 3)), np.zeros((1, 2)))


def test_disabled_eta_encoding_gives_zero_dynamics_latent():
    cfg = dcp.DcpConfig(3, 2, 4, (8,), 6, 5, use_eta_encoding=False)
    lat = dcp.encode(cfg, params(cfg=cfg), np.ones((3, 3)), np.random.default_rng(0).normal(size=(3, 4)))
    np.testing.assert_array_equal(lat.z_dyn, np.zeros((3, 5)))


def test_zero_policy_head_closed_form():
    p = zeroed(params(), "g_theta")
    z = np.random.default_rng(0).normal(size=(4, 11))
    mean, std = dcp.policy_forward(CFG, p, z)
    np.testing.assert_array_equal(mean, np.zeros((4, 2)))
    np.testing.assert_allclose(std, np.log(2.0) + 1e-4, rtol=1e-15)
    assert std[0, 0] == pytest.approx(0.6932, abs=1e-4)


def test_std_strictly_positive_over_many_seeds():
    rng = np.random.default_rng(0)
    for seed in range(1000):
        p = params(seed) if seed < 20 else params(seed % 20)
        z = rng.normal(size=(1, 11)) * 20
        _, std = dcp.policy_forward(CFG, p, z)
        assert np.all(std > 0)


def test_sampled_action_log_density_matches_direct_formula():
    mean, std = np.array([[0.3, -1.0]]), np.array([[0.5, 2.0]])
    a, lp = dcp.sample_action(mean, std, SeededRng(1))
    direct = np.sum(-0.5 * ((a - mean) / std) ** 2 - np.log(std * np.sqrt(2 * np.pi)))
    assert np.isfinite(lp).all() and lp[0] == pytest.approx(direct, rel=1e-13)


def test_degenerate_draw_returns_mean():
    mean = np.array([[0.3, -1.0]])
    a, _ = dcp.sample_action(mean, np.full((1, 2), 1e-4), SeededRng(0), eps=np.zeros((1, 2)))
    np.testing.assert_array_equal(a, mean)


def test_standard_normal_log_prob_at_zero():
    lp = dcp.gaussian_log_prob(np.zeros(1), np.ones(1), np.zeros(1))
    assert float(lp) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-15)
    assert float(lp) == pytest.approx(-0.9189, abs=1e-4)


def test_sampling_moments_monte_carlo():
    n = 100_000
    mean, std = np.full((n, 1), 0.7), np.full((n, 1), 1.3)
    a, _ = dcp.sample_action(mean, std, SeededRng(5))
    assert abs(a.mean() / 0.7 - 1) < 0.01
    assert abs(a.std() / 1.3 - 1) < 0.01


def test_log_prob_integrates_to_one():
    x = np.linspace(-12, 12, 200_001)[:, None]
    dens = np.exp(np.asarray(dcp.gaussian_log_prob(np.full_like(x, 0.4), np.full_like(x, 1.7), x)))
    assert abs(np.trapezoid(dens, x[:, 0]) - 1.0) < 1e-3


def test_inverse_dynamics_loss_examples():
    p = zeroed(params(), "g_inv")
    z = np.random.default_rng(0).normal(size=(1, 11))
    loss = dcp.inverse_dynamics_loss(CFG, p, z, z, np.array([[2.0, 0.0]]))
    assert float(loss[0]) == 4.0
    # a perfect inverse model: the last bias equals the executed action
    p["g_inv.b2"] = np.array([0.5, -0.25])
    assert float(dcp.inverse_dynamics_loss(CFG, p, z, z, np.array([[0.5, -0.25]]))[0]) == 0.0


def test_reconstruction_loss_examples():
    cfg = dcp.DcpConfig(2, 1, 1, (4,), 3, 2)
    p = zeroed(params(cfg=cfg), "f_rec")
    assert float(dcp.reconstruction_loss(cfg, p, np.array([[1.0, 1.0]]))[0]) == 2.0
    # identity: linear f_phi/f_rec with widths 2 -> 2 -> 2 -> 2 -> 2 realised exactly
    lin = dcp.DcpConfig(2, 1, 1, (2,), 2, 2, activation="relu")
    q = params(cfg=lin)
    for net in ("f_phi", "f_rec"):
        q[f"{net}.W0"], q[f"{net}.b0"] = np.eye(2), np.zeros(2) + 5.0
        q[f"{net}.W1"], q[f"{net}.b1"] = np.eye(2), np.zeros(2) - 5.0
    o = np.array([[0.3, -0.7]])
    assert float(dcp.reconstruction_loss(lin, q, o)[0]) == pytest.approx(0.0, abs=1e-28)


def test_losses_are_nonnegative():
    rng = np.random.default_rng(1)
    p = params(3)
    for _ in range(50):
        z1, z2 = rng.normal(size=(5, 11)), rng.normal(size=(5, 11))
        assert np.all(np.asarray(dcp.inverse_dynamics_loss(CFG, p, z1, z2, rng.normal(size=(5, 2)))) >= 0)
        assert np.all(np.asarray(dcp.reconstruction_loss(CFG, p, rng.normal(size=(5, 3)))) >= 0)


def aux_batch(seed=0, n=6):
    rng = np.random.default_rng(seed)
    return dcp.AuxBatch(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.normal(size=(n, 2)),
                        np.tile(rng.normal(size=(1, 4)), (n, 1)))


def test_aux_loss_weights():
    p, b = params(2), aux_batch()
    assert dcp.aux_loss(CFG, p, b, 0.0, 0.0) == 0.0
    with pytest.raises(ConfigError):
        dcp.aux_loss(CFG, p, b, -0.1, 0.0)
    lat = dcp.encode(CFG, p, b.obs, b.cond)
    nxt = dcp.encode(CFG, p, b.next_obs, b.cond)
    A = np.mean(dcp.inverse_dynamics_loss(CFG, p, lat.z, nxt.z, b.actions))
    B = np.mean(dcp.reconstruction_loss(CFG, p, b.obs))
    assert float(dcp.aux_loss(CFG, p, b, 0.3, 0.7)) == pytest.approx(0.3 * A + 0.7 * B, rel=1e-13)


def test_only_inverse_with_perfect_model_is_zero():
    p = zeroed(params(2), "g_inv")
    b = aux_batch()
    b.actions[:] = 0.0
    assert float(dcp.aux_loss(CFG, p, b, 1.0, 0.0)) == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_aux_loss_gradient_matches_fd(seed):
    p, b = params(seed), aux_batch(seed, n=4)

    def f(q):
        return float(dcp.aux_loss(CFG, q, b, 0.4, 0.6))

    tape = dn.Tape()
    P = tape.watch(p)
    g = tape.backward(dcp.aux_loss(CFG, P, b, 0.4, 0.6))
    names = [k for k in p if not k.startswith(("g_theta", "value"))]
    fd = dn.finite_difference_grad(f, p, 1e-5, names)
    for k in names:
        assert rel_err(g[k], fd[k], floor=1e-7) <= 1e-4, k
    # the action head and value head are structurally untouched by the aux losses
    assert not np.any(g["g_theta.W0"]) and not np.any(g["value.W0"])


def test_policy_checkpoint_round_trip(tmp_path):
    pol = dcp.Policy(CFG, params(4), {"family": "point_mass_1d"})
    pol.save(tmp_path / "p")
    back = dcp.Policy.load(tmp_path / "p")
    assert back.cfg == CFG and back.meta == {"family": "point_mass_1d"}
    assert back.params.checksum() == pol.params.checksum()
    o, c = np.zeros((2, 3)), np.zeros((2, 4))
    np.testing.assert_array_equal(back.act(o, c, deterministic=True), pol.act(o, c, deterministic=True))
