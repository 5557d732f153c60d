"""Small built-in instances: the two-secret counterexample and synthetic tiered spaces."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mechanism import Channel
from .space import JointModel, SecretSpace, build_joint, build_space

TOY_SINGLE_MPL = 0.9444
TOY_JOINT_MPL = 1.8456
TOY_EPS = 1.0


@dataclass(frozen=True)
class Toy:
    space: SecretSpace
    channel: Channel
    joint: JointModel


def toy() -> Toy:
    """Two secrets at distance 1, a 0.72/0.28 channel and a strongly anti-correlated pair prior."""
    space = build_space({"x1": [1.0, 0.0], "x2": [1.0, 1.0]})
    channel = Channel(
        inputs=np.array([0, 1]),
        output_labels=("y1", "y2"),
        matrix=np.array([[0.72, 0.28], [0.28, 0.72]]),
    )
    joint = build_joint(2, {(0, 0): 0.01, (0, 1): 0.49, (1, 0): 0.49, (1, 1): 0.01})
    return Toy(space, channel, joint)


def random_space(
    rng: np.random.Generator,
    size: int,
    dim: int,
    n_tiers: int = 1,
    scale: float = 1.0,
) -> SecretSpace:
    """Gaussian embeddings with random counts; every tier gets at least one candidate."""
    labels = [f"c{k}" for k in range(size)]
    emb = rng.normal(0.0, scale, size=(size, dim))
    tiers = np.concatenate([np.arange(1, n_tiers + 1), rng.integers(1, n_tiers + 1, size=size - n_tiers)])
    counts = rng.integers(0, 20, size=size)
    return build_space(
        {l: e.tolist() for l, e in zip(labels, emb)},
        {l: int(t) for l, t in zip(labels, tiers)},
        {l: int(c) for l, c in zip(labels, counts)},
    )


def random_channel(rng: np.random.Generator, n_in: int, n_out: int, concentration: float = 1.0) -> Channel:
    """Dirichlet rows, strictly positive."""
    m = rng.dirichlet(np.full(n_out, concentration), size=n_in)
    m = np.maximum(m, 1e-6)
    m /= m.sum(axis=1, keepdims=True)
    return Channel(np.arange(n_in), tuple(f"y{k}" for k in range(n_out)), m)


def random_joint(rng: np.random.Generator, length: int, k: int, concentration: float = 0.3) -> JointModel:
    """Correlated joint prior with full support over ``k**length`` tuples."""
    probs = rng.dirichlet(np.full(k**length, concentration))
    probs = np.maximum(probs, 1e-9)
    probs /= probs.sum()
    tuples = np.array(np.unravel_index(np.arange(k**length), (k,) * length)).T
    return build_joint(length, {tuple(t): p for t, p in zip(tuples, probs)}, n_candidates=k)


@dataclass(frozen=True)
class TieredFixture:
    space: SecretSpace
    joint: JointModel


def tiered_fixture(
    seed: int = 0,
    n_pii: int = 20,
    n_poii: int = 30,
    dim: int = 4,
    rho: float = 0.9,
) -> TieredFixture:
    """Synthetic two-tier space with pairwise-correlated sequences of length 2.

    Candidates are paired up within their tier; the second secret of a
    sequence is the partner of the first with probability ``rho`` and an
    independent prior draw otherwise. Tier 1 (identifiers) is rarer than
    tier 2. Embeddings sit in the positive orthant so cosine costs spread
    over [0, 0.5].
    """
    rng = np.random.default_rng(seed)
    n = n_pii + n_poii
    emb = np.abs(rng.normal(0.0, 1.0, size=(n, dim))) + 0.05
    labels = [f"pii{k}" for k in range(n_pii)] + [f"poii{k}" for k in range(n_poii)]
    tiers = {l: (1 if k < n_pii else 2) for k, l in enumerate(labels)}
    counts = {l: (1 if k < n_pii else 10) + int(rng.integers(0, 4)) for k, l in enumerate(labels)}
    space = build_space({l: e.tolist() for l, e in zip(labels, emb)}, tiers, counts)
    partner = np.arange(n)
    for lo, hi in ((0, n_pii), (n_pii, n)):
        idx = rng.permutation(np.arange(lo, hi))
        for a, b in zip(idx[0::2], idx[1::2]):
            partner[a], partner[b] = b, a
    pi = space.prior
    table = {}
    for a in range(n):
        for b in range(n):
            table[(a, b)] = pi[a] * (rho * (b == partner[a]) + (1 - rho) * pi[b])
    return TieredFixture(space, build_joint(2, table, n_candidates=n))
