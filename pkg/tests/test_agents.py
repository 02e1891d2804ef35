import math

import numpy as np
import pytest

from maac.agents import (
    AgentPolicy,
    PolicyNet,
    action_distribution,
    categorical,
    gumbel_softmax,
    gumbel_softmax_backward,
    sample,
)
from maac.numcore import DimensionError, entropy, softmax


@pytest.fixture
def net():
    return PolicyNet(np.random.default_rng(0), obs_dim=6, n_actions=5, hidden=16)


def test_zero_final_layer_gives_uniform(net):
    net.l2.W.value[:] = 0.0
    net.l2.b.value[:] = 0.0
    p = action_distribution(net, np.ones((3, 6)))
    np.testing.assert_allclose(p, 0.2, atol=1e-15)


def test_probabilities_normalised_and_positive(net):
    p = action_distribution(net, np.random.default_rng(1).normal(size=(50, 6)))
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_bias_shift_invariance(net):
    obs = np.random.default_rng(2).normal(size=(4, 6))
    p = action_distribution(net, obs)
    net.l2.b.value += 3.7
    np.testing.assert_allclose(action_distribution(net, obs), p, atol=1e-12)


def test_dimension_mismatch(net):
    with pytest.raises(DimensionError):
        action_distribution(net, np.zeros((1, 5)))


def test_sample_frequencies_match_probabilities():
    rng = np.random.default_rng(3)
    probs = np.array([0.1, 0.25, 0.05, 0.4, 0.2])
    draws = categorical(np.tile(probs, (100_000, 1)), rng)
    counts = np.bincount(draws, minlength=5)
    n = len(draws)
    sigma = np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) < 3 * sigma)


def test_degenerate_distribution_always_first(net):
    net.l2.W.value[:] = 0.0
    net.l2.b.value[:] = [[1000.0, 0, 0, 0, 0]]
    s = sample(net, np.zeros((200, 6)), np.random.default_rng(0))
    assert np.all(s.action == 0)


def test_sample_determinism_and_log_prob(net):
    obs = np.random.default_rng(4).normal(size=(64, 6))
    a = sample(net, obs, np.random.default_rng(9))
    b = sample(net, obs, np.random.default_rng(9))
    np.testing.assert_array_equal(a.action, b.action)
    picked = a.probs[np.arange(64), a.action]
    np.testing.assert_allclose(a.log_prob, np.log(picked), atol=1e-12)
    assert np.all(a.entropy <= math.log(5) + 1e-12)


def test_target_starts_equal():
    pol = AgentPolicy(np.random.default_rng(0), 4, 5, 8)
    for live, tgt in zip(pol.net.params(), pol.target.params()):
        np.testing.assert_array_equal(live.value, tgt.value)
        assert live.value is not tgt.value


class TestGumbel:
    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        out, soft = gumbel_softmax(rng.normal(size=(10, 5)), 1.0, rng, straight_through=False)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        hard, soft = gumbel_softmax(rng.normal(size=(10, 5)), 1.0, rng)
        np.testing.assert_array_equal(hard.sum(axis=1), 1.0)
        np.testing.assert_array_equal(hard.argmax(1), soft.argmax(1))

    def test_low_temperature_is_one_hot(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(20, 5))
        noise = rng.gumbel(size=(20, 5))
        out, _ = gumbel_softmax(logits, 0.01, rng, straight_through=False, noise=noise)
        hard = np.eye(5)[(logits + noise).argmax(1)]
        # rows whose top two perturbed logits nearly tie would need a lower temperature
        top2 = np.sort(logits + noise, axis=1)[:, -2:]
        clear = top2[:, 1] - top2[:, 0] > 0.15
        assert clear.sum() >= 15
        assert np.max(np.abs(out[clear] - hard[clear])) < 1e-6

    def test_argmax_frequencies_follow_softmax(self):
        rng = np.random.default_rng(2)
        logits = np.array([0.5, -1.0, 1.5, 0.0, -0.3])
        n = 100_000
        hard, _ = gumbel_softmax(np.tile(logits, (n, 1)), 1.0, rng)
        counts = hard.sum(axis=0)
        p = softmax(logits)
        assert np.all(np.abs(counts - n * p) < 3 * np.sqrt(n * p * (1 - p)))

    def test_relaxed_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(1, 5))
        noise = rng.gumbel(size=(1, 5))
        w = rng.normal(size=(1, 5))
        tau = 0.7

        def f(l):
            return float(np.sum(w * gumbel_softmax(l, tau, rng, False, noise)[1]))

        _, soft = gumbel_softmax(logits, tau, rng, False, noise)
        analytic = gumbel_softmax_backward(soft, w, tau)
        eps = 1e-6
        num = np.zeros_like(logits)
        for k in range(5):
            lp, lm = logits.copy(), logits.copy()
            lp[0, k] += eps
            lm[0, k] -= eps
            num[0, k] = (f(lp) - f(lm)) / (2 * eps)
        np.testing.assert_allclose(analytic, num, rtol=1e-5, atol=1e-10)

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValueError):
            gumbel_softmax(np.zeros((1, 3)), 0.0, np.random.default_rng(0))


def test_entropy_exact():
    assert entropy(np.full(5, 0.2)) == pytest.approx(math.log(5), abs=1e-15)
