"""Monte-Carlo PBmPL audits and Hoeffding certificates."""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .adversary import Reconstructor, SoftmaxConfig, reconstruct, softmax_posteriors
from .inference import posterior_joint_batch, posterior_matrix
from .leakage import LeakageSample, mpl_batch
from .mechanism import LevelwiseMechanism, sample_many
from .space import JointModel, SecretSpace

BATCH_SIZE = 4096


@dataclass(frozen=True)
class AuditTarget:
    """Everything an audit needs: which pairs to test, how to draw releases, and the attacker.

    ``draw(rng, groups)`` returns one observation per requested pair group
    (the secret is drawn from the prior restricted to that group), and
    ``posterior(obs, groups)`` returns ``(n, K)`` attacker posteriors.
    """

    prior: np.ndarray
    distances: np.ndarray
    pairs: np.ndarray  # (P, 2) ordered pairs, i != j, d > 0
    pair_group: np.ndarray  # (P,)
    draw: Callable[[np.random.Generator, np.ndarray], np.ndarray]
    posterior: Callable[[np.ndarray, np.ndarray], np.ndarray]
    excluded_zero_distance: int = 0


def _within_group_pairs(distances, members_by_group, prior=None):
    pairs, groups, excluded = [], [], 0
    for g, members in members_by_group.items():
        for a in members:
            for b in members:
                if a == b:
                    continue
                if prior is not None and (prior[a] <= 0 or prior[b] <= 0):
                    continue
                if distances[a, b] > 0:
                    pairs.append((a, b))
                    groups.append(g)
                else:
                    excluded += 1
    if not pairs:
        raise ValueError("no candidate pair with positive distance to audit")
    return np.array(pairs, dtype=int), np.array(groups, dtype=int), excluded


def _tier_groups(space: SecretSpace, tiers):
    tiers = range(1, space.n_tiers + 1) if tiers is None else tiers
    return {t: space.tier_members(t) for t in tiers}


class LearnedAttacker:
    """Reconstructor + Gaussian softmax restricted to the candidates of the released tier."""

    def __init__(self, model: Reconstructor, space: SecretSpace, softmax: SoftmaxConfig):
        self.model, self.space, self.softmax = model, space, softmax

    def posteriors(self, inputs: np.ndarray, tiers: np.ndarray) -> np.ndarray:
        x_hat = reconstruct(self.model, inputs)
        out = np.zeros((len(inputs), self.space.size))
        for t in np.unique(tiers):
            rows = np.flatnonzero(tiers == t)
            members = self.space.tier_members(int(t))
            out[np.ix_(rows, members)] = softmax_posteriors(x_hat[rows], self.space.embeddings[members], self.softmax)
        return out


def single_release_target(
    mech: LevelwiseMechanism,
    space: SecretSpace,
    attacker="exact",
    y_mode: str = "mechanism",
    tiers: Sequence[int] | None = None,
) -> AuditTarget:
    """Audit target for one release per secret through its tier channel.

    ``attacker`` is ``"exact"`` (Bayes on the tier channel), ``"masked"``
    (posterior = prior) or a :class:`LearnedAttacker`. With
    ``y_mode="uniform"`` outputs are drawn uniformly instead of from the
    mechanism. Observations are ``(tier, output column)`` rows.
    """
    groups = _tier_groups(space, tiers)
    pairs, pair_group, excluded = _within_group_pairs(space.distances, groups)
    tier_post = {}
    if attacker == "exact":
        for t in groups:
            ch = mech.channel_of(t)
            post = np.zeros((ch.n_outputs, space.size))
            post[:, ch.inputs] = posterior_matrix(ch, space.prior[ch.inputs])
            tier_post[t] = post
    elif attacker != "masked" and not isinstance(attacker, LearnedAttacker):
        raise ValueError(f"unknown attacker {attacker!r}")
    cdf = {t: np.cumsum(space.tier_prior(t)) for t in groups}

    def draw(rng, grp):
        obs = np.zeros((len(grp), 2), dtype=int)
        obs[:, 0] = grp
        for t in np.unique(grp):
            rows = np.flatnonzero(grp == t)
            ch = mech.channel_of(int(t))
            if y_mode == "uniform":
                obs[rows, 1] = rng.integers(ch.n_outputs, size=len(rows))
                continue
            u_x, u_y = rng.random(len(rows)), rng.random(len(rows))
            local = np.minimum(np.searchsorted(cdf[int(t)], u_x, side="right"), len(cdf[int(t)]) - 1)
            x = space.tier_members(int(t))[local]
            obs[rows, 1] = sample_many(ch, ch.rows_for(x), u_y)
        return obs

    def posterior(obs, grp):
        if attacker == "masked":
            return np.broadcast_to(space.prior, (len(obs), space.size))
        if attacker == "exact":
            out = np.empty((len(obs), space.size))
            for t in np.unique(obs[:, 0]):
                rows = np.flatnonzero(obs[:, 0] == t)
                out[rows] = tier_post[int(t)][obs[rows, 1]]
            return out
        inputs = np.empty((len(obs), space.dim))
        for t in np.unique(obs[:, 0]):
            rows = np.flatnonzero(obs[:, 0] == t)
            inputs[rows] = mech.channel_of(int(t)).output_embeddings[obs[rows, 1]]
        return attacker.posteriors(inputs, obs[:, 0])

    if y_mode not in ("mechanism", "uniform"):
        raise ValueError("y_mode must be 'mechanism' or 'uniform'")
    return AuditTarget(space.prior, space.distances, pairs, pair_group, draw, posterior, excluded)


def joint_release_target(
    mech: LevelwiseMechanism,
    space: SecretSpace,
    joint: JointModel,
    ell: int = 0,
    attacker="exact",
    tiers: Sequence[int] | None = None,
) -> AuditTarget:
    """Audit target for an attacker that sees every release of a correlated sequence.

    Each position is released through the levelwise mechanism. Pairs are
    drawn within a tier of position ``ell``; the sequence is drawn from the
    joint model conditioned on the secret at ``ell`` lying in that tier.
    Prior odds use the joint marginal at ``ell``. Observations are rows of
    output columns of :meth:`LevelwiseMechanism.full_channel`.
    """
    full = mech.full_channel(space)
    channels = [full] * joint.length
    prior = joint.marginal(ell)
    groups = _tier_groups(space, tiers)
    pairs, pair_group, excluded = _within_group_pairs(space.distances, groups, prior)
    tier_at_ell = space.tier_of[joint.support[:, ell]]
    cond = {}
    for t in groups:
        idx = np.flatnonzero(tier_at_ell == t)
        if idx.size == 0:
            raise ValueError(f"joint model never places tier {t} at position {ell}")
        p = joint.probs[idx]
        cond[t] = (idx, np.cumsum(p / p.sum()))
    rows = [full.rows_for(joint.support[:, m]) for m in range(joint.length)]
    if attacker not in ("exact", "masked") and not isinstance(attacker, LearnedAttacker):
        raise ValueError(f"unknown attacker {attacker!r}")

    def draw(rng, grp):
        obs = np.zeros((len(grp), joint.length), dtype=int)
        for t in np.unique(grp):
            sel = np.flatnonzero(grp == t)
            idx, cdf = cond[int(t)]
            pick = idx[np.minimum(np.searchsorted(cdf, rng.random(len(sel)), side="right"), len(idx) - 1)]
            u = rng.random((len(sel), joint.length))
            for m in range(joint.length):
                obs[sel, m] = sample_many(full, rows[m][pick], u[:, m])
        return obs

    def posterior(obs, grp):
        if attacker == "masked":
            return np.broadcast_to(prior, (len(obs), space.size))
        if attacker == "exact":
            return posterior_joint_batch(joint, channels, obs, ell, rows=rows)
        inputs = full.output_embeddings[obs].reshape(len(obs), -1)
        return attacker.posteriors(inputs, grp)

    return AuditTarget(prior, space.distances, pairs, pair_group, draw, posterior, excluded)


# ---------------------------------------------------------------- sampling


@dataclass(frozen=True)
class AuditDraws:
    i: np.ndarray
    j: np.ndarray
    observations: np.ndarray
    mpl: np.ndarray


def _run_batch(target: AuditTarget, n: int, seed_seq) -> tuple:
    rng = np.random.default_rng(seed_seq)
    k = rng.integers(len(target.pairs), size=n)
    i, j = target.pairs[k, 0], target.pairs[k, 1]
    grp = target.pair_group[k]
    obs = target.draw(rng, grp)
    posts = target.posterior(obs, grp)
    return i, j, obs, mpl_batch(target.prior, posts, i, j, target.distances[i, j])


def draw_mpl(target: AuditTarget, S: int, seed: int, workers: int = 1) -> AuditDraws:
    """Draw ``S`` (pair, release) triples and their mPL values.

    Batches use child seeds spawned from ``seed``, so the stream does not
    depend on ``workers``.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    sizes = [min(BATCH_SIZE, S - s) for s in range(0, S, BATCH_SIZE)]
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda a: _run_batch(target, *a), zip(sizes, seeds)))
    else:
        parts = [_run_batch(target, n, s) for n, s in zip(sizes, seeds)]
    i, j, obs, mpl = (np.concatenate(p) for p in zip(*parts))
    return AuditDraws(i, j, obs, mpl)


def sample_triples(target: AuditTarget, S: int, seed: int, eps: float) -> list[LeakageSample]:
    """Audited triples as :class:`LeakageSample` records; deterministic given ``seed``."""
    d = draw_mpl(target, S, seed)
    return [
        LeakageSample((int(a), int(b)), tuple(int(v) for v in np.atleast_1d(o)), float(m), bool(m > eps))
        for a, b, o, m in zip(d.i, d.j, d.observations, d.mpl)
    ]


def empirical_rate(samples, eps: float) -> float:
    """Fraction of samples with mPL above ``eps``.

    Accepts :class:`LeakageSample` records or a plain array of mPL values.
    """
    if isinstance(samples, np.ndarray):
        values = samples
    else:
        values = np.array([s.mpl for s in samples], dtype=float)
    if values.size == 0:
        raise ValueError("empty sample set")
    return float(np.mean(values > eps))


# ---------------------------------------------------------------- certificates


class HoeffdingCertificate(NamedTuple):
    bound: float  # lower bound on Pr[p <= delta]
    log10_exponent: float  # k such that bound = 1 - 10**(-k)
    vacuous: bool


def hoeffding_certificate(S: int, xi: float, delta: float) -> HoeffdingCertificate:
    """``1 - 2 exp(-2 S (1 - xi)^2 delta^2)`` and its base-10 exponent.

    The exponent ``k = 2 S (1 - xi)^2 delta^2 log10(e) - log10(2)`` stays
    informative where the linear bound rounds to exactly 1. For ``xi >= 1``
    the certificate is vacuous and the bound is reported as 0.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    if xi < 0:
        raise ValueError("xi must be nonnegative")
    if xi >= 1:
        warnings.warn("xi >= 1: the Hoeffding certificate is vacuous", RuntimeWarning, stacklevel=2)
        return HoeffdingCertificate(0.0, -math.log10(2.0), True)
    x = 2.0 * S * (1.0 - xi) ** 2 * delta**2
    k = x * math.log10(math.e) - math.log10(2.0)
    return HoeffdingCertificate(1.0 - 2.0 * math.exp(-x), k, False)


def recommend_delta(p_hat_star: float, margin: float = 0.05) -> float:
    """Achievable target ``(1 + margin) * p_hat_star``, capped at 1."""
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    if not 0 <= p_hat_star <= 1:
        raise ValueError("p_hat_star must lie in [0, 1]")
    return min(1.0, (1.0 + margin) * p_hat_star)


@dataclass(frozen=True)
class AuditReport:
    sample_count: int
    eps: float
    p_hat: float
    violations: int
    delta_target: float
    delta_recommended: float
    xi: float | None
    confidence_bound: float
    log10_exponent: float | None
    vacuous: bool
    seed: int
    excluded_zero_distance_pairs: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AuditReport":
        return cls(**json.loads(text))


def audit(
    target: AuditTarget,
    S: int,
    eps: float,
    seed: int,
    delta: float | None = None,
    workers: int = 1,
) -> tuple[AuditReport, AuditDraws]:
    """Estimate the violation rate and certify it against ``delta``.

    ``delta`` defaults to the recommended ``1.05 * p_hat``.
    """
    draws = draw_mpl(target, S, seed, workers)
    violations = int(np.sum(draws.mpl > eps))
    p_hat = violations / S
    recommended = recommend_delta(p_hat)
    delta = recommended if delta is None else float(delta)
    if delta > 0:
        xi = p_hat / delta
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            cert = hoeffding_certificate(S, xi, delta)
        bound, k, vacuous = max(0.0, cert.bound), cert.log10_exponent, cert.vacuous
    else:
        xi, bound, k, vacuous = None, 0.0, None, True
    report = AuditReport(
        sample_count=S,
        eps=float(eps),
        p_hat=p_hat,
        violations=violations,
        delta_target=delta,
        delta_recommended=recommended,
        xi=xi,
        confidence_bound=bound,
        log10_exponent=k,
        vacuous=vacuous,
        seed=int(seed),
        excluded_zero_distance_pairs=target.excluded_zero_distance,
    )
    return report, draws


def format_report(report: AuditReport) -> str:
    """Fixed-width table for terminal output."""
    rows = [
        ("samples", f"{report.sample_count:d}"),
        ("eps", f"{report.eps:.4f}"),
        ("p_hat", f"{report.p_hat:.6f}"),
        ("violations", f"{report.violations:d}"),
        ("delta_target", f"{report.delta_target:.6f}"),
        ("delta_recommended", f"{report.delta_recommended:.6f}"),
        ("xi", "n/a" if report.xi is None else f"{report.xi:.6f}"),
        ("confidence_bound", f"{report.confidence_bound:.6f}"),
        ("log10_exponent_k", "n/a" if report.log10_exponent is None else f"{report.log10_exponent:.6g}"),
        ("vacuous", str(report.vacuous)),
        ("excluded_zero_distance", f"{report.excluded_zero_distance_pairs:d}"),
        ("seed", f"{report.seed:d}"),
    ]
    return "\n".join(f"{k:<24}{v:>16}" for k, v in rows)
