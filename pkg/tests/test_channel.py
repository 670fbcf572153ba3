import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from noisylang.channel import (
    ChannelSpec,
    NumericError,
    apply_logit_noise,
    check_noise_matrix,
    corruption_distribution,
    corruption_prob,
    gumbel_noise,
    gumbel_sample,
    gumbel_softmax,
    noise_matrix,
    permutation_noise_matrices,
    permutation_noise_sample,
    sample_corrupt,
    softmax,
)
from noisylang.lang import DomainError, InstanceTooLarge, hamming


def test_spec_validation():
    with pytest.raises(DomainError):
        ChannelSpec(1.0, 2)
    with pytest.raises(DomainError):
        ChannelSpec(-0.1, 2)
    with pytest.raises(DomainError):
        ChannelSpec(0.1, 1)
    with pytest.raises(DomainError):
        ChannelSpec(0.1, 3, "bursty")
    assert ChannelSpec(0.5, 3).below_uniform
    assert not ChannelSpec(0.5, 2).below_uniform


def test_corruption_prob_values():
    assert corruption_prob([0, 1], [0, 1], ChannelSpec(0.1, 5)) == pytest.approx(0.81, abs=1e-15)
    assert corruption_prob([0, 1], [0, 2], ChannelSpec(0.1, 5)) == pytest.approx(0.0225, abs=1e-15)
    for shat in itertools.product(range(2), repeat=2):
        assert corruption_prob([0, 1], shat, ChannelSpec(0.5, 2)) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(DomainError):
        corruption_prob([0], [0], ChannelSpec(0.1, 2, "logit-matrix"))


def test_corruption_distribution_examples():
    d = corruption_distribution([1, 0], ChannelSpec(0.0, 3))
    assert d.probs[3] == 1.0 and d.probs.sum() == 1.0
    assert np.allclose(corruption_distribution([0], ChannelSpec(0.3, 2)).probs, [0.7, 0.3], atol=1e-15)
    p = corruption_distribution([0, 0], ChannelSpec(0.3, 2)).probs
    assert np.allclose(p, [0.49, 0.21, 0.21, 0.09], atol=1e-15)
    with pytest.raises(InstanceTooLarge):
        corruption_distribution([0] * 7, ChannelSpec(0.1, 10))


@pytest.mark.parametrize("d,L", [(d, L) for d in (2, 3, 4, 5, 8) for L in (1, 2, 3, 4) if d**L <= 4096])
def test_distributions_normalised_and_stay_mass(d, L):
    for eps in (0.0, 0.05, 0.3, 0.7):
        if eps >= 1:
            continue
        spec = ChannelSpec(eps, d)
        dist = corruption_distribution([d - 1] * L, spec)
        assert math.fsum(dist.probs) == pytest.approx(1.0, abs=1e-12)
        assert dist.probs[-1] == pytest.approx((1 - eps) ** L, abs=1e-15)


@pytest.mark.parametrize("d", [2, 3, 5])
def test_monotone_in_distance_iff_below_uniform(d):
    L = 3
    for eps in (0.05, 0.3, 0.5, 0.66, 0.7, 0.8, 0.95):
        spec = ChannelSpec(eps, d)
        by_rho = [(1 - eps) ** (L - k) * (eps / (d - 1)) ** k for k in range(L + 1)]
        decreasing = all(a > b for a, b in zip(by_rho, by_rho[1:]))
        assert decreasing == spec.below_uniform


def test_sample_corrupt_zero_noise_identity():
    rng = np.random.default_rng(0)
    s = rng.integers(0, 4, (100, 3))
    assert np.array_equal(sample_corrupt(s, ChannelSpec(0.0, 4), rng), s)


def test_sample_corrupt_flip_rate():
    rng = np.random.default_rng(1)
    out = sample_corrupt(np.zeros((100_000, 2), dtype=int), ChannelSpec(0.1, 5), rng)
    rate = (out != 0).mean(axis=0)
    assert np.all(np.abs(rate - 0.1) < 0.005)


def test_sample_corrupt_matches_exact_distribution():
    rng = np.random.default_rng(2)
    spec = ChannelSpec(0.3, 3)
    s = [2, 0]
    out = sample_corrupt(np.tile(s, (100_000, 1)), spec, rng)
    counts = np.bincount(out[:, 0] * 3 + out[:, 1], minlength=9)
    expected = corruption_distribution(s, spec).probs * 100_000
    assert stats.chisquare(counts, expected).pvalue > 1e-3


def test_noise_matrix_examples():
    assert np.array_equal(noise_matrix(ChannelSpec(0.0, 4)), np.eye(4))
    W = noise_matrix(ChannelSpec(0.1, 5))
    assert np.allclose(np.diag(W), 0.9) and np.allclose(W[~np.eye(5, dtype=bool)], 0.025)


@given(st.integers(2, 12), st.floats(0, 0.99))
def test_noise_matrix_stochastic(d, eps):
    W = noise_matrix(ChannelSpec(eps, d))
    check_noise_matrix(W)
    if eps > 0:
        assert (W > 0).all()


def test_check_noise_matrix_rejects_faults():
    W = noise_matrix(ChannelSpec(0.1, 3))
    bad = W.copy()
    bad[0, 0] += 1e-6
    with pytest.raises(DomainError):
        check_noise_matrix(bad)
    with pytest.raises(DomainError):
        check_noise_matrix(-W)


def test_logit_noise_examples():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(5))
    assert np.allclose(apply_logit_noise(p, noise_matrix(ChannelSpec(0.0, 5))), np.log(p), atol=1e-15)
    W = noise_matrix(ChannelSpec(0.1, 5))
    e2 = np.eye(5)[2]
    assert np.allclose(apply_logit_noise(e2, W), np.log(W[:, 2]))
    with pytest.raises(NumericError):
        apply_logit_noise(e2, np.eye(5))


@settings(max_examples=50)
@given(st.integers(2, 8), st.floats(0.001, 0.9), st.integers(0, 2**31))
def test_softmax_of_logit_noise_recovers_Wp(d, eps, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(d))
    W = noise_matrix(ChannelSpec(eps, d))
    assert np.allclose(softmax(apply_logit_noise(p, W)), W @ p, atol=1e-10, rtol=0)
    assert softmax(apply_logit_noise(p, W)).sum() == pytest.approx(1.0, abs=1e-12)


def test_logit_channel_flip_rate_is_eps():
    W = noise_matrix(ChannelSpec(0.15, 5))
    for k in range(5):
        q = softmax(apply_logit_noise(np.eye(5)[k], W))
        assert 1 - q[k] == pytest.approx(0.15, abs=1e-12)


def test_permutation_noise_zero_is_identity():
    rng = np.random.default_rng(0)
    m = np.eye(4)[rng.integers(0, 4, (50, 2))]
    out, N = permutation_noise_sample(m, ChannelSpec(0.0, 4, "permutation"), rng)
    assert np.array_equal(out, m)
    assert np.array_equal(N, np.broadcast_to(np.eye(4), N.shape))


def test_permutation_noise_full_binary():
    rng = np.random.default_rng(1)
    m = np.tile(np.eye(2)[0], (100_000, 1))
    out, _ = permutation_noise_sample(m, ChannelSpec(0.999999, 2, "permutation"), rng)
    assert abs(out[:, 1].mean() - 0.5) < 0.005


def test_permutation_noise_change_rate_exact():
    # P(a uniform permutation of d symbols moves a given symbol) by enumeration
    d, eps = 5, 0.015
    moved = sum(p[0] != 0 for p in itertools.permutations(range(d))) / math.factorial(d)
    exact = eps * moved
    assert exact == pytest.approx(eps * (1 - 1 / d), abs=1e-15)
    rng = np.random.default_rng(2)
    N = permutation_noise_matrices((1_000_000,), ChannelSpec(eps, d, "permutation"), rng)
    rate = 1 - N[:, 0, 0].mean()
    assert abs(rate - exact) < 4 * math.sqrt(exact / 1_000_000)


def test_permutation_noise_is_linear():
    rng = np.random.default_rng(3)
    spec = ChannelSpec(0.5, 4, "permutation")
    N = permutation_noise_matrices((6,), spec, rng)
    assert np.allclose(N.sum(axis=1), 1) and np.allclose(N.sum(axis=2), 1)
    with pytest.raises(DomainError):
        permutation_noise_sample(np.eye(4), ChannelSpec(0.5, 4), rng)


def test_gumbel_softmax_cases():
    x = np.array([0.3, -1.2, 2.0, 0.0])
    assert np.allclose(gumbel_softmax(x, 1.0, np.zeros(4)), softmax(x))
    g = gumbel_noise(np.random.default_rng(0), 4)
    y = gumbel_softmax(x, 1e-6, g)
    assert y.max() > 1 - 1e-6
    for tau in (1e-3, 0.5, 1.0, 10.0):
        assert np.argmax(gumbel_softmax(x, tau, g)) == gumbel_sample(x, g)
    with pytest.raises(DomainError):
        gumbel_softmax(x, 0.0, g)


def test_gumbel_softmax_large_logits_no_overflow():
    y = gumbel_softmax(np.array([1e4, 0.0]), 1.0, np.zeros(2))
    assert np.isfinite(y).all() and y[0] == 1.0


def test_gumbel_sample_examples():
    assert gumbel_sample(np.array([10.0, 0.0]), np.array([0.01, -0.02])) == 0
    assert gumbel_sample(np.zeros(3), np.zeros(3)) == 0  # ties go low


def test_gumbel_max_matches_softmax():
    rng = np.random.default_rng(4)
    x = rng.normal(size=5)
    n = 100_000
    draws = gumbel_sample(np.broadcast_to(x, (n, 5)), gumbel_noise(rng, (n, 5)))
    freq = np.bincount(draws, minlength=5) / n
    assert 0.5 * np.abs(freq - softmax(x)).sum() < 0.01
    uni = gumbel_sample(np.zeros((n, 5)), gumbel_noise(rng, (n, 5)))
    assert np.all(np.abs(np.bincount(uni, minlength=5) / n - 0.2) < 0.01)


def test_gumbel_noise_clamped():
    g = gumbel_noise(np.random.default_rng(0), 10_000)
    assert np.isfinite(g).all()
