import itertools
from types import SimpleNamespace

import numpy as np
import pytest

from gmmv_access import turbo
from gmmv_access.amp import run_gmmv_amp
from gmmv_access.detect import extract_rough_reliable
from gmmv_access.sysmodel import (ObservationSource, SystemConfig, generate_channels, generate_pilots,
                                  make_angular_transform, noise_variance_from_snr, synthesize_observations,
                                  to_angular, to_spatial)
from gmmv_access.turbo import (AdaptiveConfig, TurboConfig, initial_overhead, residual_power, run_adaptive,
                               run_turbo)

SMALL = SystemConfig(K=50, Ka=5, M=8, Ptilde=2, G=20, channel_mode="ongrid", Sa_range=(2, 3))


def _instance(cfg, seed, noiseless=False):
    r = np.random.default_rng(seed)
    ch, pb = generate_channels(cfg, r), generate_pilots(cfg, r)
    nv = 0.0 if noiseless else noise_variance_from_snr(cfg, pb, ch)
    obs = synthesize_observations(ch, pb, nv, r)
    return ch, pb.S, obs.Y, make_angular_transform(cfg.M)


def test_defaults_and_validation():
    cfg = TurboConfig()
    assert (cfg.T_tur, cfg.lambda_aus) == (10, 0.8)
    assert (cfg.amp_a.refine_mode, cfg.amp_b.refine_mode) == ("spatial", "angular")
    assert AdaptiveConfig().eps_stop == 0.8
    for bad in ({"lambda_aus": 0.0}, {"lambda_aus": 1.5}, {"T_tur": 0}):
        with pytest.raises(ValueError):
            TurboConfig(**bad)
    with pytest.raises(ValueError):
        AdaptiveConfig(G0=0)
    with pytest.raises(ValueError):
        AdaptiveConfig(G0=5, G_max=4)


def test_single_turbo_iteration_is_one_pass_of_each_module():
    ch, S, Y, A = _instance(SMALL, 3)
    cfg = TurboConfig(T_tur=1)
    got = run_turbo(Y, S, A, cfg)

    res_a = run_gmmv_amp(Y, S, cfg.amp_a)
    omega, _ = extract_rough_reliable(res_a.pi, set(), cfg.detector)
    cols = np.array(sorted(omega))
    res_b = run_gmmv_amp(to_angular(Y, A), S[:, :, cols], cfg.amp_b)
    assert got.aus_hat.tolist() == cols.tolist()
    np.testing.assert_array_equal(got.channels, to_spatial(res_b.xhat, A))
    assert got.consumed_G == SMALL.G


def test_set_inclusions_per_iteration():
    ch, S, Y, A = _instance(SMALL, 4)
    res = run_turbo(Y, S, A, TurboConfig(T_tur=4))
    for d in res.diagnostics:
        assert d["gamma"] <= d["xi"] <= d["omega"]
    assert res.channels.shape == (SMALL.Ptilde, res.aus_hat.size, SMALL.M)


def test_no_cancellation_keeps_observations(monkeypatch):
    ch, S, Y, A = _instance(SMALL, 5)
    seen = []
    real = turbo.run_gmmv_amp

    def spy(Yin, Sin, cfg):
        if cfg.refine_mode == "spatial":
            seen.append(Yin.copy())
        return real(Yin, Sin, cfg)

    monkeypatch.setattr(turbo, "run_gmmv_amp", spy)
    run_turbo(Y, S, A, TurboConfig(T_tur=3, lambda_aus=1e-9))
    assert len(seen) == 3
    for Yin in seen:
        np.testing.assert_array_equal(Yin, Y)


def test_cancellation_removes_exactly_the_cancelled_users(monkeypatch):
    ch, S, Y, A = _instance(SMALL, 6, noiseless=True)
    support = ch.spatial_support.tolist()
    module_a_inputs = []

    def fake(Yin, Sin, cfg):
        Pt, K, M = ch.X.shape
        if cfg.refine_mode == "spatial":
            module_a_inputs.append(Yin.copy())
            pi = np.broadcast_to(ch.activity[None, :, None].astype(float), (Pt, K, M)).copy()
            return SimpleNamespace(pi=pi, n_iter=1)
        assert Sin.shape[2] == len(support)
        return SimpleNamespace(xhat=ch.W[:, support], n_iter=1)

    monkeypatch.setattr(turbo, "run_gmmv_amp", fake)
    res = run_turbo(Y, S, A, TurboConfig(T_tur=2, lambda_aus=0.5))
    assert res.aus_hat.tolist() == support
    np.testing.assert_allclose(res.channels, ch.X[:, support], atol=1e-12)

    # the second module A input must equal Y minus the exact contribution of some
    # floor(0.5 * Ka) active users, and of nobody else
    Y2 = module_a_inputs[1]
    n_gamma = len(support) // 2
    matches = [g for g in itertools.combinations(support, n_gamma)
               if np.linalg.norm(Y2 - (Y - S[:, :, list(g)] @ ch.X[:, list(g)])) < 1e-10 * np.linalg.norm(Y)]
    assert len(matches) == 1
    rest = [k for k in support if k not in matches[0]]
    np.testing.assert_allclose(Y2, S[:, :, rest] @ ch.X[:, rest], atol=1e-10)


def test_full_cancellation_leaves_no_residual(monkeypatch):
    ch, S, Y, A = _instance(SMALL, 7, noiseless=True)
    support = ch.spatial_support.tolist()

    def fake(Yin, Sin, cfg):
        Pt, K, M = ch.X.shape
        if cfg.refine_mode == "spatial":
            return SimpleNamespace(pi=np.broadcast_to(ch.activity[None, :, None].astype(float),
                                                      (Pt, K, M)).copy(), n_iter=1)
        return SimpleNamespace(xhat=ch.W[:, support], n_iter=1)

    monkeypatch.setattr(turbo, "run_gmmv_amp", fake)
    res = run_turbo(Y, S, A, TurboConfig(T_tur=1, lambda_aus=1.0))
    assert res.diagnostics[0]["residual_power"] < 1e-20 * residual_power(Y, S, np.zeros_like(ch.X))
    assert res.residual_power < 1e-20


def test_empty_rough_set_stops_early(monkeypatch):
    ch, S, Y, A = _instance(SMALL, 8)

    def fake(Yin, Sin, cfg):
        return SimpleNamespace(pi=np.zeros((SMALL.Ptilde, SMALL.K, SMALL.M)), n_iter=1)

    monkeypatch.setattr(turbo, "run_gmmv_amp", fake)
    res = run_turbo(Y, S, A, TurboConfig(T_tur=5))
    assert res.aus_hat.size == 0 and len(res.diagnostics) == 1
    assert res.channels.shape == (SMALL.Ptilde, 0, SMALL.M)
    assert not res.dense().any()


def test_turbo_is_deterministic_given_rng():
    ch, S, Y, A = _instance(SMALL, 9)
    cfg = TurboConfig(T_tur=3)
    a = run_turbo(Y, S, A, cfg, np.random.default_rng(11))
    b = run_turbo(Y, S, A, cfg, np.random.default_rng(11))
    assert a.aus_hat.tolist() == b.aus_hat.tolist()
    np.testing.assert_array_equal(a.channels, b.channels)
    assert a.diagnostics == b.diagnostics


def test_initial_overhead_examples():
    assert initial_overhead(50, 500, 64, 11.0) == 13
    assert initial_overhead(0, 500, 64, 11.0) == 1
    for M in (4, 16, 64):
        assert initial_overhead(M, M, M, float(M)) == int(np.ceil(1.5 * M))
    with pytest.raises(ValueError):
        initial_overhead(5, 50, 0, 11.0)


def _source(cfg, seed):
    r = np.random.default_rng(seed)
    ch = generate_channels(cfg, r)
    return ch, ObservationSource(ch, cfg, np.random.SeedSequence(seed))


def test_adaptive_immediate_stop():
    ch, src = _source(SMALL, 10)
    res = run_adaptive(src, make_angular_transform(SMALL.M),
                       AdaptiveConfig(G0=12, G_max=30, eps_stop=1e9, turbo=TurboConfig(T_tur=1)))
    assert res.consumed_G == 12 and res.converged
    assert [h["G"] for h in res.diagnostics if "G" in h] == [12]


def test_adaptive_cap_flags_unconverged():
    ch, src = _source(SMALL, 11)
    res = run_adaptive(src, make_angular_transform(SMALL.M),
                       AdaptiveConfig(G0=3, G_max=5, eps_stop=-1.0, turbo=TurboConfig(T_tur=1)))
    assert res.consumed_G == 5 and not res.converged
    assert [h["G"] for h in res.diagnostics if "G" in h] == [3, 4, 5]


def test_adaptive_residual_matches_reconstruction():
    ch, src = _source(SMALL, 12)
    res = run_adaptive(src, make_angular_transform(SMALL.M),
                       AdaptiveConfig(G0=15, G_max=15, turbo=TurboConfig(T_tur=2)))
    Y, S = src.observe(15)
    assert res.residual_power == pytest.approx(residual_power(Y, S, res.dense()), rel=1e-12)
