import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ampl.adapt import utility_loss
from ampl.fixtures import random_channel, random_space
from ampl.inference import ZeroEvidenceError, posterior_single
from ampl.leakage import sup_single_mpl
from ampl.mechanism import Channel, LevelwiseMechanism, compose_levels
from ampl.remap import (
    RemapTable,
    bayes_remap,
    post_remap_posterior,
    read_remap_csv,
    remap_channel,
    write_remap_csv,
)
from ampl.space import CostMatrix, DataError, build_space, cost_matrix


def _single(ch):
    return LevelwiseMechanism({1: ch}, {1: 1.0}, 1.0)


def _remap_oracle(mech, space, cost, labels):
    """Loop over tiers, mix their posteriors by tier mass times tier evidence, then argmin."""
    n_out = len(labels)
    cost_values = cost.values[:, [cost.output_labels.index(label) for label in labels]]
    scores = np.zeros((n_out, n_out))
    reach = np.zeros(n_out, dtype=bool)
    for t in mech.tiers:
        ch = mech.channel_of(t)
        mass = sum(space.prior[x] for x in ch.inputs)
        pi = [space.prior[x] / mass for x in ch.inputs]
        for k, label in enumerate(ch.output_labels):
            y = labels.index(label)
            ev = sum(pi[r] * ch.matrix[r, k] for r in range(len(ch.inputs)))
            if ev == 0:
                continue
            reach[y] = True
            for yp in range(n_out):
                for r, x in enumerate(ch.inputs):
                    scores[y, yp] += mass * ev * (pi[r] * ch.matrix[r, k] / ev) * cost_values[x, yp]
    out = []
    for y in range(n_out):
        if not reach[y]:
            out.append(y)
            continue
        best = 0
        for yp in range(1, n_out):
            if scores[y, yp] < scores[y, best] - 1e-15:
                best = yp
        out.append(best)
    return out


def test_zero_cost_maps_to_first(toy_fx):
    table = bayes_remap(_single(toy_fx.channel), toy_fx.space, CostMatrix(np.zeros((2, 2)), ("y1", "y2")))
    assert table.mapping.tolist() == [0, 0]


def test_point_mass_posterior():
    s = build_space({"a": [1.0, 0.0], "b": [0.0, 1.0], "c": [1.0, 1.0]})
    ch = Channel([0, 1, 2], s.candidates, np.eye(3))
    cost = CostMatrix(1 - np.eye(3), s.candidates)
    assert bayes_remap(_single(ch), s, cost).mapping.tolist() == [0, 1, 2]


def test_hand_built_three_candidates():
    s = build_space({"a": [1.0, 0.0], "b": [0.0, 1.0], "c": [1.0, 1.0]}, counts={"a": 5, "b": 1, "c": 2})
    ch = Channel([0, 1, 2], s.candidates, [[0.6, 0.2, 0.2], [0.3, 0.4, 0.3], [0.1, 0.1, 0.8]])
    cost = cost_matrix(s)
    table = bayes_remap(_single(ch), s, cost)
    assert table.mapping.tolist() == _remap_oracle(_single(ch), s, cost, list(s.candidates))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(3, 12), tiers=st.integers(1, 3))
def test_bayes_remap_matches_oracle_and_lowers_cost(seed, n, tiers):
    rng = np.random.default_rng(seed)
    s = random_space(rng, n, 3, n_tiers=tiers)
    mech = compose_levels(s, float(rng.uniform(0.5, 5)), rng.uniform(0.1, 1.0, size=tiers).tolist())
    cost = CostMatrix(rng.random((n, n)), s.candidates)
    table = bayes_remap(mech, s, cost)
    assert table.mapping.tolist() == _remap_oracle(mech, s, cost, list(table.labels))
    assert utility_loss(mech, s, cost, table) <= utility_loss(mech, s, cost) + 1e-12


def test_remap_lowers_cost_with_shared_outputs(rng):
    s = random_space(rng, 8, 3, n_tiers=2)
    outs = (list(s.candidates), s.embeddings)
    mech = compose_levels(s, 2.0, [0.4, 1.0], outputs_per_tier={1: outs, 2: outs})
    cost = cost_matrix(s)
    table = bayes_remap(mech, s, cost)
    assert table.mapping.tolist() == _remap_oracle(mech, s, cost, list(table.labels))
    assert utility_loss(mech, s, cost, table) <= utility_loss(mech, s, cost) + 1e-12


def test_unreachable_outputs_map_to_self():
    s = build_space({"a": [1.0], "b": [2.0]})
    ch = Channel([0, 1], ("a", "b", "z"), [[0.5, 0.5, 0.0], [0.5, 0.5, 0.0]])
    cost = CostMatrix(np.zeros((2, 3)), ("a", "b", "z"))
    table = bayes_remap(_single(ch), s, cost)
    assert table.unreachable == (2,) and table.mapping[2] == 2


def test_missing_cost_column(toy_fx):
    with pytest.raises(DataError):
        bayes_remap(_single(toy_fx.channel), toy_fx.space, CostMatrix(np.zeros((2, 1)), ("y1",)))


def test_identity_and_collapse(toy_fx):
    ch = toy_fx.channel
    same = remap_channel(ch, RemapTable.identity(ch.output_labels))
    np.testing.assert_array_equal(same.matrix, ch.matrix)
    collapsed = remap_channel(ch, RemapTable(ch.output_labels, [1, 1]))
    np.testing.assert_allclose(collapsed.matrix, [[0.0, 1.0], [0.0, 1.0]])
    post = post_remap_posterior(ch, [0.3, 0.7], RemapTable(ch.output_labels, [1, 1]), 1)
    np.testing.assert_allclose(post.probs, [0.3, 0.7], atol=1e-15)
    assert sup_single_mpl(collapsed, [0.3, 0.7], toy_fx.space.distances)[0] == 0.0
    with pytest.raises(ZeroEvidenceError):
        post_remap_posterior(ch, [0.3, 0.7], RemapTable(ch.output_labels, [1, 1]), 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(2, 6))
def test_preimage_formula_matches_remapped_bayes(seed, m):
    rng = np.random.default_rng(seed)
    ch = random_channel(rng, 4, m)
    prior = rng.dirichlet(np.ones(4))
    table = RemapTable(ch.output_labels, rng.integers(0, m, size=m))
    remapped = remap_channel(ch, table)
    np.testing.assert_allclose(remapped.matrix.sum(axis=1), 1.0, atol=1e-12)
    for z in set(table.mapping.tolist()):
        direct = posterior_single(remapped, prior, z).probs
        np.testing.assert_allclose(post_remap_posterior(ch, prior, table, z).probs, direct, atol=1e-12)


def test_singleton_preimage_equals_single_posterior(toy_fx):
    ch = toy_fx.channel
    table = RemapTable.identity(ch.output_labels)
    for y in range(2):
        np.testing.assert_allclose(
            post_remap_posterior(ch, [0.4, 0.6], table, y).probs, posterior_single(ch, [0.4, 0.6], y).probs
        )


def test_table_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        RemapTable(("a", "b"), [0, 2])
    table = RemapTable(("a", "b", "c"), [2, 1, 2])
    assert table.preimages == {2: [0, 2], 1: [1]}
    write_remap_csv(tmp_path / "r.csv", table)
    assert (tmp_path / "r.csv").read_text().splitlines() == ["y_label,z_label", "a,c", "b,b", "c,c"]
    back = read_remap_csv(tmp_path / "r.csv")
    assert back.labels == table.labels and back.mapping.tolist() == [2, 1, 2]
    (tmp_path / "bad.csv").write_text("y_label,z_label\na,q\n")
    with pytest.raises(DataError):
        read_remap_csv(tmp_path / "bad.csv")
