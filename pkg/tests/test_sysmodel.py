import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gmmv_access.sysmodel import (
    InvalidStateError,
    ObservationSource,
    PilotBook,
    PilotStream,
    SystemConfig,
    angular_sparsity_level,
    array_response,
    config_from_mapping,
    generate_activity,
    generate_channels,
    generate_pilots,
    load_config,
    make_angular_transform,
    noise_variance_from_snr,
    parse_config_text,
    pilot_frequencies,
    synthesize_observations,
    to_angular,
    to_spatial,
)


# ---------------------------------------------------------------- angular transform

def test_transform_m1_is_identity():
    assert np.array_equal(make_angular_transform(1), np.array([[1.0 + 0j]]))


def test_transform_m4_unitary():
    A = make_angular_transform(4)
    assert np.allclose(A.conj().T @ A, np.eye(4), atol=1e-12)


@pytest.mark.parametrize("M", [1, 2, 3, 7, 16, 64, 100, 255, 256])
def test_transform_unitary_for_many_sizes(M):
    A = make_angular_transform(M)
    assert np.max(np.abs(A.conj().T @ A - np.eye(M))) < 1e-12


@pytest.mark.parametrize("q", range(8))
def test_on_grid_response_is_one_sparse(q):
    M = 8
    A = make_angular_transform(M)
    w = to_angular(array_response(q / M, M)[None, :], A)[0]
    nz = np.abs(w) > 1e-12
    assert nz.sum() == 1
    # and the transform round-trips
    assert np.allclose(to_spatial(w[None, :], A)[0], array_response(q / M, M), atol=1e-12)


def test_transform_rejects_nonpositive_m():
    with pytest.raises(ValueError):
        make_angular_transform(0)


# ---------------------------------------------------------------- activity

def test_activity_empty_and_full(rng):
    assert not generate_activity(10, 0, rng).any()
    assert generate_activity(10, 10, rng).all()


def test_activity_counts(rng):
    a = generate_activity(500, 50, rng)
    assert a.sum() == 50 and a.dtype == np.int8


def test_activity_rejects_bad_counts(rng):
    with pytest.raises(ValueError):
        generate_activity(5, 6, rng)


# ---------------------------------------------------------------- channels

def test_no_active_users_gives_zero_channels(rng):
    ch = generate_channels(SystemConfig(K=20, Ka=0, M=8, Ptilde=2, G=10), rng)
    assert not ch.X.any() and not ch.W.any()


@given(seed=st.integers(0, 2**32 - 1), Pt=st.integers(1, 4), M=st.sampled_from([4, 8, 16, 32]),
       mode=st.sampled_from(["ongrid", "physical"]))
def test_structured_sparsity_invariants(seed, Pt, M, mode):
    cfg = SystemConfig(K=30, Ka=6, M=M, Ptilde=Pt, G=10, channel_mode=mode)
    ch = generate_channels(cfg, np.random.default_rng(seed))
    inactive = ch.activity == 0
    # inactive users have exactly zero rows in both domains
    assert not ch.X[:, inactive].any() and not ch.W[:, inactive].any()
    # the active users are the same for every antenna and subcarrier
    row_nz = np.any(ch.X != 0, axis=2)
    assert np.array_equal(row_nz, np.broadcast_to(ch.activity.astype(bool), row_nz.shape))
    # energy is preserved by the unitary transform
    assert np.allclose(np.linalg.norm(ch.W, axis=(1, 2)), np.linalg.norm(ch.X, axis=(1, 2)),
                       rtol=0, atol=1e-10)
    if mode == "ongrid":
        supp = ch.W != 0
        assert np.array_equal(supp, np.broadcast_to(supp[:1], supp.shape))


def test_ongrid_cluster_sizes_and_contiguity(rng):
    cfg = SystemConfig(K=100, Ka=40, M=32, Ptilde=2, G=10)
    ch = generate_channels(cfg, rng)
    for k in np.flatnonzero(ch.activity):
        cols = np.flatnonzero(ch.W[0, k])
        assert 8 <= cols.size <= 14 and cols.size == ch.Sa[k]
        # contiguous modulo M: exactly one gap in the circular occupancy pattern
        occ = np.zeros(32, bool)
        occ[cols] = True
        assert np.sum(occ & ~np.roll(occ, 1)) == 1


def test_active_rows_have_unit_mean_energy(rng):
    for mode in ("ongrid", "physical"):
        ch = generate_channels(SystemConfig(K=60, Ka=12, M=16, Ptilde=3, channel_mode=mode), rng)
        act = ch.activity == 1
        assert np.mean(np.sum(np.abs(ch.X[:, act]) ** 2, axis=2)) == pytest.approx(1.0, rel=1e-12)


def test_physical_support_size_concentrates():
    cfg = SystemConfig(K=200, Ka=100, M=64, Ptilde=1, channel_mode="physical")
    ch = generate_channels(cfg, np.random.default_rng(3))
    sa = ch.Sa[ch.activity == 1]
    # dominant (90% energy) angular support of the one-ring model stays near the 8..14 band
    assert 6 <= np.median(sa) <= 16


def test_physical_support_overlaps_across_subcarriers():
    pair = []
    for seed in range(5):
        cfg = SystemConfig(K=50, Ka=20, M=64, Ptilde=4, channel_mode="physical")
        ch = generate_channels(cfg, np.random.default_rng(seed))
        for k in np.flatnonzero(ch.activity):
            p = np.abs(ch.W[:, k]) ** 2
            # dominant bins of the subcarrier-averaged spectrum (1% of peak) hold >= 90% of
            # every subcarrier's energy
            avg = p.mean(axis=0)
            dom = avg >= 0.01 * avg.max()
            assert np.all(p[:, dom].sum(axis=1) >= 0.9 * p.sum(axis=1))
            for a in range(4):
                own = p[a] >= 0.01 * p[a].max()
                pair.extend(p[b, own].sum() / p[b].sum() for b in range(4) if b != a)
    assert np.mean(pair) >= 0.9


def test_channel_determinism():
    cfg = SystemConfig(K=40, Ka=4, M=8, Ptilde=2)
    a = generate_channels(cfg, np.random.default_rng(9))
    b = generate_channels(cfg, np.random.default_rng(9))
    for f in ("activity", "X", "W", "rho", "Sa"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_angular_sparsity_level():
    W = np.zeros((2, 5, 4), complex)
    W[:, [0, 1, 3], 2] = 1.0
    W[0, 4, 0] = 1.0
    assert angular_sparsity_level(W) == 3
    assert angular_sparsity_level(np.zeros((1, 3, 2))) == 0


def test_pilot_frequency_offsets():
    cfg = SystemConfig(N=2048, P=64, Ptilde=3, bandwidth_hz=10e6)
    p = np.arange(1, 4)
    assert np.allclose(pilot_frequencies(cfg), -5e6 + 10e6 * (p * 2048 / 64 - 1) / 2048)


# ---------------------------------------------------------------- pilots

def test_pilots_differ_across_subcarriers(rng):
    S = generate_pilots(SystemConfig(K=3, Ka=1, G=2, Ptilde=2), rng).S
    assert S.shape == (2, 2, 3) and np.all(S[0] != S[1])


def test_identical_pilots_option(rng):
    S = generate_pilots(SystemConfig(K=3, Ka=1, G=2, Ptilde=3, identical_pilots=True), rng).S
    assert np.array_equal(S[0], S[1]) and np.array_equal(S[0], S[2])


def test_pilot_unit_power():
    S = generate_pilots(SystemConfig(K=1000, Ka=1, G=1000, Ptilde=1), np.random.default_rng(0)).S
    assert abs(np.mean(np.abs(S) ** 2) - 1.0) < 0.01
    # circular symmetry: real and imaginary parts each carry half the power
    assert abs(np.mean(S.real ** 2) - 0.5) < 0.01


def test_pilot_determinism():
    cfg = SystemConfig(K=20, Ka=2, G=7, Ptilde=3)
    a = generate_pilots(cfg, np.random.default_rng(5)).S
    b = generate_pilots(cfg, np.random.default_rng(5)).S
    assert np.array_equal(a, b)


@given(first=st.integers(1, 10), extra=st.integers(0, 10))
def test_pilot_stream_rows_stable_under_extension(first, extra):
    s = PilotStream(np.random.SeedSequence(1), 2, 5)
    head = s.take(first)
    s.extend(extra)
    assert np.array_equal(s.take(first + extra)[:, :first], head)
    fresh = PilotStream(np.random.SeedSequence(1), 2, 5).take(first + extra)
    assert np.array_equal(fresh, s.take(first + extra))


# ---------------------------------------------------------------- noise and observations

def _setup(rng, snr_db=30.0, Ka=3):
    cfg = SystemConfig(K=12, Ka=Ka, M=4, Ptilde=2, G=6, snr_db=snr_db)
    return cfg, generate_channels(cfg, rng), generate_pilots(cfg, rng)


def test_noise_variance_zero_db(rng):
    cfg, ch, pb = _setup(rng, 0.0)
    assert noise_variance_from_snr(cfg, pb, ch) == pytest.approx(np.mean(np.abs(pb.S @ ch.X) ** 2))


def test_noise_variance_30_db(rng):
    cfg, ch, pb = _setup(rng, 30.0)
    assert noise_variance_from_snr(cfg, pb, ch) == pytest.approx(np.mean(np.abs(pb.S @ ch.X) ** 2) / 1000)


def test_noise_variance_infinite_snr(rng):
    cfg, ch, pb = _setup(rng, math.inf)
    assert noise_variance_from_snr(cfg, pb, ch) == 0.0


def test_noise_variance_zero_signal(rng):
    cfg, ch, pb = _setup(rng, 30.0, Ka=0)
    with pytest.raises(InvalidStateError):
        noise_variance_from_snr(cfg, pb, ch)


def test_noiseless_single_user_is_rank_one(rng):
    cfg = SystemConfig(K=6, Ka=1, M=3, Ptilde=2, G=4)
    ch = generate_channels(cfg, rng)
    pb = generate_pilots(cfg, rng)
    k = int(np.flatnonzero(ch.activity)[0])
    Y = synthesize_observations(ch, pb, 0.0, rng).Y
    for p in range(2):
        assert np.allclose(Y[p], np.outer(pb.S[p][:, k], ch.X[p, k]), atol=1e-14)


def test_noiseless_no_users_gives_zero(rng):
    cfg = SystemConfig(K=6, Ka=0, M=3, Ptilde=2, G=4)
    obs = synthesize_observations(generate_channels(cfg, rng), generate_pilots(cfg, rng), 0.0, rng)
    assert not obs.Y.any()


def test_observations_match_dense_multiply(rng):
    cfg = SystemConfig(K=6, Ka=3, M=3, Ptilde=2, G=4)
    ch, pb = generate_channels(cfg, rng), generate_pilots(cfg, rng)
    Y = synthesize_observations(ch, pb, 0.0, rng).Y
    for p in range(2):
        ref = np.array([[sum(pb.S[p, g, k] * ch.X[p, k, m] for k in range(6)) for m in range(3)]
                        for g in range(4)])
        assert np.allclose(Y[p], ref, atol=1e-12)


def test_observation_determinism():
    cfg = SystemConfig(K=10, Ka=2, M=4, Ptilde=2, G=5)

    def draw():
        r = np.random.default_rng(77)
        ch, pb = generate_channels(cfg, r), generate_pilots(cfg, r)
        return synthesize_observations(ch, pb, noise_variance_from_snr(cfg, pb, ch), r)

    a, b = draw(), draw()
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.R, b.R)


def test_observation_shape_mismatch(rng):
    cfg = SystemConfig(K=6, Ka=1, M=3, Ptilde=2, G=4)
    ch = generate_channels(cfg, rng)
    with pytest.raises(ValueError):
        synthesize_observations(ch, PilotBook(np.ones((2, 4, 5))), 0.0, rng)


def test_observation_source_prefix_stable(rng):
    cfg = SystemConfig(K=20, Ka=3, M=4, Ptilde=2, G=5)
    ch = generate_channels(cfg, rng)
    src = ObservationSource(ch, cfg, np.random.SeedSequence(3))
    Y5, S5 = src.observe(5)
    Y9, S9 = src.observe(9)
    assert np.array_equal(Y9[:, :5], Y5) and np.array_equal(S9[:, :5], S5)
    Y5b, _ = ObservationSource(ch, cfg, np.random.SeedSequence(3)).observe(5)
    assert np.array_equal(Y5b, Y5)


# ---------------------------------------------------------------- configuration

def test_config_validation():
    with pytest.raises(ValueError):
        SystemConfig(K=5, Ka=6)
    with pytest.raises(ValueError):
        SystemConfig(Ptilde=65, P=64)


def test_scaled_keeps_ratios():
    cfg = SystemConfig(K=500, Ka=50, G=75).scaled(0.4)
    assert (cfg.K, cfg.Ka, cfg.G) == (200, 20, 30)


def test_config_text_round_trip(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nK = 40   # users\nKa=4\nsnr_db = 12.5\nSa_range = 3, 5\n"
                    "pathloss = false\nchannel_mode = physical\nextra_key = 1\n")
    cfg = load_config(path, seed=99)
    assert (cfg.K, cfg.Ka, cfg.snr_db, cfg.Sa_range, cfg.pathloss, cfg.channel_mode, cfg.seed) == \
        (40, 4, 12.5, (3, 5), False, "physical", 99)


def test_config_errors():
    with pytest.raises(ValueError):
        parse_config_text("K 40")
    with pytest.raises(ValueError):
        config_from_mapping({"nope": "1"})
    with pytest.raises(ValueError):
        config_from_mapping({"pathloss": "maybe"})
