import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ampl.fixtures import random_channel, random_joint
from ampl.inference import (
    ZeroEvidenceError,
    joint_output_probability,
    marginal_output,
    posterior_joint_batch,
    posterior_joint_exact,
    posterior_matrix,
    posterior_single,
)
from ampl.mechanism import Channel
from ampl.space import build_joint, product_joint


def _joint_oracle(table, channels, y_vec, ell, k):
    """Plain enumeration of sum over tuples with x_ell = x."""
    num = np.zeros(k)
    for tup, p in table.items():
        w = p
        for m, ch in enumerate(channels):
            w *= ch.matrix[tup[m], y_vec[m]]
        num[tup[ell]] += w
    return num / num.sum()


def test_single_posterior_toy(toy_fx):
    post = posterior_single(toy_fx.channel, [0.5, 0.5], 0)
    np.testing.assert_allclose(post.probs, [0.72, 0.28], atol=1e-15)
    assert post.conditioning == 0


def test_single_posterior_zero_evidence():
    ch = Channel([0, 1], ("a", "b"), [[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(ZeroEvidenceError):
        posterior_single(ch, [0.5, 0.5], 1)
    assert np.isnan(posterior_matrix(ch, [0.5, 0.5])[1]).all()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 8), m=st.integers(2, 8))
def test_bayes_consistency(seed, n, m):
    rng = np.random.default_rng(seed)
    ch = random_channel(rng, n, m)
    prior = rng.dirichlet(np.ones(n))
    post = posterior_matrix(ch, prior)
    marg = marginal_output(ch, prior)
    # sum_y Pr(x|y) Pr(y) = prior(x)
    np.testing.assert_allclose(marg @ post, prior, atol=1e-12)
    np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-12)
    for y in range(m):
        np.testing.assert_allclose(posterior_single(ch, prior, y).probs, post[y], atol=1e-15)


def test_joint_toy_posterior(toy_fx):
    post = posterior_joint_exact(toy_fx.joint, [toy_fx.channel] * 2, (0, 1), 0)
    np.testing.assert_allclose(post.probs, [0.86362, 0.13638], atol=1e-5)
    assert post.target_position == 0 and post.conditioning == (0, 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), length=st.integers(1, 3), k=st.integers(2, 4), m=st.integers(2, 4))
def test_joint_posterior_matches_enumeration(seed, length, k, m):
    rng = np.random.default_rng(seed)
    joint = random_joint(rng, length, k)
    channels = [random_channel(rng, k, m) for _ in range(length)]
    table = {tuple(t): p for t, p in zip(joint.support.tolist(), joint.probs)}
    for y_vec in itertools.product(range(m), repeat=length):
        for ell in range(length):
            got = posterior_joint_exact(joint, channels, y_vec, ell).probs
            np.testing.assert_allclose(got, _joint_oracle(table, channels, y_vec, ell, k), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), length=st.integers(1, 3), k=st.integers(2, 4))
def test_independence_lift_reduces_to_single(seed, length, k):
    rng = np.random.default_rng(seed)
    marginals = [rng.dirichlet(np.ones(k)) for _ in range(length)]
    joint = product_joint(marginals)
    channels = [random_channel(rng, k, 3) for _ in range(length)]
    for y_vec in itertools.product(range(3), repeat=length):
        for ell in range(length):
            got = posterior_joint_exact(joint, channels, y_vec, ell).probs
            want = posterior_single(channels[ell], marginals[ell], y_vec[ell]).probs
            np.testing.assert_allclose(got, want, atol=1e-12)


def test_joint_output_probability_sums_to_one(rng):
    joint = random_joint(rng, 2, 3)
    channels = [random_channel(rng, 3, 4) for _ in range(2)]
    total = sum(joint_output_probability(joint, channels, y) for y in itertools.product(range(4), repeat=2))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_joint_errors(toy_fx):
    with pytest.raises(IndexError):
        posterior_joint_exact(toy_fx.joint, [toy_fx.channel] * 2, (0, 0), 2)
    with pytest.raises(ValueError):
        posterior_joint_exact(toy_fx.joint, [toy_fx.channel], (0, 0), 0)
    ch = Channel([0, 1], ("a", "b"), [[1.0, 0.0], [1.0, 0.0]])
    joint = build_joint(2, {(0, 1): 1.0})
    with pytest.raises(ZeroEvidenceError):
        posterior_joint_exact(joint, [ch, ch], (1, 0), 0)
    batch = posterior_joint_batch(joint, [ch, ch], np.array([[0, 0], [1, 1]]), 0)
    np.testing.assert_allclose(batch[0], [1.0, 0.0])
    assert np.isnan(batch[1]).all()
