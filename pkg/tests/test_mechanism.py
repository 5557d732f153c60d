import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ampl.fixtures import random_space
from ampl.mechanism import (
    Channel,
    build_em_channel,
    certify_mdp,
    compose_levels,
    read_channel_csv,
    sample,
    sample_many,
    write_channel_csv,
)
from ampl.space import build_space


def _em_row_oracle(x, outputs, scale):
    w = [math.exp(-0.5 * scale * math.dist(x, y)) for y in outputs]
    return [v / sum(w) for v in w]


def test_em_row_direct_evaluation():
    s = build_space({"x": [0.0]})
    ch = build_em_channel(s, eps=1.0, alpha=1.0, output_labels=["y1", "y2"], output_embeddings=np.array([[0.0], [2.0]]))
    e = math.exp(-1.0)
    np.testing.assert_allclose(ch.matrix[0], [1 / (1 + e), e / (1 + e)], atol=1e-15)
    np.testing.assert_allclose(ch.matrix[0], [0.7311, 0.2689], atol=1e-4)


def test_em_tiny_eps_is_uniform(rng):
    s = random_space(rng, 7, 3)
    ch = build_em_channel(s, eps=1e-12)
    np.testing.assert_allclose(ch.matrix, 1 / 7, atol=1e-9)


def test_em_no_overflow_at_large_scale():
    s = build_space({"a": [0.0], "b": [1.0], "c": [5.0]})
    ch = build_em_channel(s, eps=2e4, alpha=1.0)  # alpha*eps*d/2 up to 5e4
    assert np.all(np.isfinite(ch.matrix))
    np.testing.assert_allclose(ch.matrix.sum(axis=1), 1.0, atol=1e-12)
    assert ch.matrix[0, 0] == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), size=st.integers(2, 10), scale=st.floats(0.01, 50.0))
def test_em_matches_direct_formula(seed, size, scale):
    s = random_space(np.random.default_rng(seed), size, 3)
    ch = build_em_channel(s, eps=scale)
    for r in range(size):
        np.testing.assert_allclose(ch.matrix[r], _em_row_oracle(s.embeddings[r], s.embeddings, scale), rtol=1e-9, atol=1e-300)
    np.testing.assert_allclose(ch.matrix.sum(axis=1), 1.0, atol=1e-12)


def test_em_rejects_bad_params(rng):
    s = random_space(rng, 3, 2)
    with pytest.raises(ValueError):
        build_em_channel(s, eps=0.0)
    with pytest.raises(ValueError):
        build_em_channel(s, eps=1.0, alpha=1.5)
    with pytest.raises(ValueError):
        build_em_channel(s, eps=1.0, output_labels=[], output_embeddings=np.zeros((0, 2)))


def test_sample_examples(toy_fx):
    ch = toy_fx.channel
    assert sample(ch, 0, 0.5) == 0
    assert sample(ch, 0, 0.72) == 1
    assert sample(ch, 0, 0.0) == 0
    assert sample(ch, 0, 0.999999) == 1
    point = Channel([0], ("a", "b"), [[1.0, 0.0]])
    for u in (0.0, 0.3, 0.9999999):
        assert sample(point, 0, u) == 0
    with pytest.raises(ValueError):
        sample(ch, 0, 1.0)


def test_sample_skips_zero_mass_outputs():
    ch = Channel([0], ("a", "b", "c"), [[0.5, 0.0, 0.5]])
    u = np.linspace(0, 1, 1001)[:-1]
    out = sample_many(ch, np.zeros(len(u), dtype=int), u)
    assert set(out.tolist()) == {0, 2}


def test_sampler_frequencies_match_rows(rng):
    s = random_space(rng, 6, 2)
    ch = build_em_channel(s, eps=2.0)
    n = 10**6
    u = (np.arange(n) + 0.5) / n
    rng.shuffle(u)
    for r in range(ch.matrix.shape[0]):
        counts = np.bincount(sample_many(ch, np.full(n, r), u), minlength=ch.n_outputs)
        p = ch.matrix[r]
        se = np.sqrt(p * (1 - p) / n)
        assert np.all(np.abs(counts / n - p) <= 3 * se + 1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_sampler_monotone_in_u(seed):
    rng = np.random.default_rng(seed)
    s = random_space(rng, 5, 2)
    ch = build_em_channel(s, eps=float(rng.uniform(0.1, 5)))
    u = np.sort(rng.random(200))
    for r in range(5):
        out = sample_many(ch, np.full(200, r), u)
        assert np.all(np.diff(out) >= 0)


def test_certify_toy(toy_fx):
    cert = certify_mdp(toy_fx.channel, toy_fx.space, 1.0)
    assert cert.epsilon_effective == pytest.approx(math.log(0.72 / 0.28), abs=1e-12)
    assert round(cert.epsilon_effective, 4) == pytest.approx(0.9445, abs=1e-4)
    assert abs(cert.epsilon_effective - 0.9444) < 1e-3
    assert cert.passed
    assert not certify_mdp(toy_fx.channel, toy_fx.space, 0.9).passed


def test_certify_identical_rows_and_zero_probability(toy_fx):
    flat = Channel([0, 1], ("y1", "y2"), [[0.3, 0.7], [0.3, 0.7]])
    assert certify_mdp(flat, toy_fx.space, 1e-6).epsilon_effective == 0.0
    hard = Channel([0, 1], ("y1", "y2"), [[1.0, 0.0], [0.5, 0.5]])
    cert = certify_mdp(hard, toy_fx.space, 100.0)
    assert math.isinf(cert.epsilon_effective) and not cert.passed
    assert cert.witness is not None and cert.witness[2] == 1


def _brute_force_eps(channel, space):
    best = 0.0
    m = channel.matrix
    for a in range(len(channel.inputs)):
        for b in range(len(channel.inputs)):
            d = space.distances[channel.inputs[a], channel.inputs[b]]
            if a == b or d == 0:
                continue
            for y in range(channel.n_outputs):
                best = max(best, abs(math.log(m[a, y]) - math.log(m[b, y])) / d)
    return best


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), size=st.integers(2, 12), dim=st.integers(1, 5), alpha=st.floats(0.01, 1.0))
def test_em_certificate_bounded_by_alpha_eps(seed, size, dim, alpha):
    rng = np.random.default_rng(seed)
    s = random_space(rng, size, dim)
    eps = float(rng.uniform(0.1, 5.0))
    ch = build_em_channel(s, eps, alpha)
    cert = certify_mdp(ch, s, alpha * eps)
    assert cert.passed
    assert cert.epsilon_effective <= alpha * eps + 1e-9
    assert cert.epsilon_effective == pytest.approx(_brute_force_eps(ch, s), rel=1e-9, abs=1e-12)


def test_compose_single_tier_equals_em(rng):
    s = random_space(rng, 8, 3)
    mech = compose_levels(s, 1.7, [1.0])
    np.testing.assert_allclose(mech.channel_of(1).matrix, build_em_channel(s, 1.7).matrix, atol=1e-15)


def test_compose_unit_alpha_is_baseline_em(rng):
    s = random_space(rng, 10, 3, n_tiers=2)
    mech = compose_levels(s, 2.0, [1.0, 1.0])
    for t in (1, 2):
        members = s.tier_members(t)
        np.testing.assert_allclose(mech.channel_of(t).matrix, build_em_channel(s, 2.0, 1.0, members).matrix, atol=1e-15)


def _entropy(rows):
    return -(rows * np.log(rows)).sum(axis=1)


def test_compose_lower_alpha_flatter_rows(rng):
    base = rng.normal(size=(5, 3))
    emb = {f"a{k}": v.tolist() for k, v in enumerate(base)}
    emb.update({f"b{k}": (v + 10.0).tolist() for k, v in enumerate(base)})
    tiers = {f"a{k}": 1 for k in range(5)} | {f"b{k}": 2 for k in range(5)}
    s = build_space(emb, tiers)
    mech = compose_levels(s, 3.0, [0.3, 0.8])
    h1, h2 = _entropy(mech.channel_of(1).matrix), _entropy(mech.channel_of(2).matrix)
    assert np.all(h1 >= h2 - 1e-12)


def test_compose_errors(rng):
    s = random_space(rng, 6, 2, n_tiers=2)
    with pytest.raises(ValueError):
        compose_levels(s, 1.0, [0.0, 1.0])
    with pytest.raises(ValueError):
        compose_levels(s, 1.0, {1: 0.5})
    with pytest.raises(ValueError):
        compose_levels(s, 1.0, [1.0, 1.0], outputs_per_tier={1: ([], np.zeros((0, 2)))})


def test_full_channel_block_structure(rng):
    s = random_space(rng, 9, 2, n_tiers=2)
    mech = compose_levels(s, 1.0, [0.5, 1.0])
    full = mech.full_channel(s)
    np.testing.assert_allclose(full.matrix.sum(axis=1), 1.0, atol=1e-12)
    for t in (1, 2):
        members = s.tier_members(t)
        cols = [full.output_labels.index(s.candidates[k]) for k in members]
        np.testing.assert_allclose(full.matrix[np.ix_(members, cols)], mech.channel_of(t).matrix)


def test_channel_csv_roundtrip(tmp_path, rng):
    s = random_space(rng, 5, 2)
    ch = build_em_channel(s, 1.3)
    write_channel_csv(tmp_path / "ch.csv", ch, s)
    back = read_channel_csv(tmp_path / "ch.csv", s)
    assert back.output_labels == ch.output_labels
    np.testing.assert_allclose(back.matrix, ch.matrix, rtol=1e-12)
    header = (tmp_path / "ch.csv").read_text().splitlines()[0]
    assert header.split(",")[1:] == list(s.candidates)
