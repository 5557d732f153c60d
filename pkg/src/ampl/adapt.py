"""Feedback-driven calibration of per-tier perturbation strengths."""

from __future__ import annotations

import csv
import itertools
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .adversary import TrainConfig, default_softmax_config, train_reconstructor
from .audit import LearnedAttacker, draw_mpl, joint_release_target, single_release_target
from .mechanism import LevelwiseMechanism, compose_levels, sample_many
from .remap import RemapTable, _cost_columns, bayes_remap, remap_channel
from .space import CostMatrix, JointModel, SecretSpace

log = logging.getLogger(__name__)

ALPHA_MIN = 1e-3


@dataclass(frozen=True)
class AdaptConfig:
    eps: float
    lambda1: float = 1.0
    lambda2: float = 1.0
    audit_S: int = 2000
    eta0: float = 0.2
    decay: float = 0.75
    max_iters: int = 20
    tol: float = 1e-4
    probe: float = 0.05
    delta_target: float | None = None
    utility_slack: float = 0.0
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.lambda1) and np.isfinite(self.lambda2)):
            raise ValueError("loss weights must be finite")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.eta0 <= 0 or self.tol <= 0:
            raise ValueError("eta0 and tol must be positive")
        if not 0.5 < self.decay <= 1:
            raise ValueError("decay must lie in (0.5, 1]")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


# ---------------------------------------------------------------- audit targets


def simulate_training_pairs(
    mech: LevelwiseMechanism,
    space: SecretSpace,
    n: int,
    rng: np.random.Generator,
    joint: JointModel | None = None,
    ell: int = 0,
):
    """Secret/perturbed embedding pairs for training a reconstructor.

    Without a joint model each row is one secret drawn from the prior and
    its release. With one, the input is the concatenation of all L released
    embeddings and the target is the secret at position ``ell``.
    """
    full = mech.full_channel(space)
    if joint is None:
        x = np.minimum(np.searchsorted(np.cumsum(space.prior), rng.random(n), side="right"), space.size - 1)
        y = sample_many(full, x, rng.random(n))
        return space.embeddings[x], full.output_embeddings[y]
    pick = np.minimum(np.searchsorted(np.cumsum(joint.probs), rng.random(n), side="right"), len(joint.probs) - 1)
    tuples = joint.support[pick]
    u = rng.random(tuples.shape)
    ys = np.stack([sample_many(full, tuples[:, m], u[:, m]) for m in range(joint.length)], axis=1)
    return space.embeddings[tuples[:, ell]], full.output_embeddings[ys].reshape(n, -1)


class TargetBuilder:
    """Builds the audit target for a mechanism: exact, masked or learned attacker.

    The learned attacker is retrained on fresh simulated pairs every
    ``retrain_every`` iterations and reused in between.
    """

    def __init__(
        self,
        space: SecretSpace,
        attacker: str = "learned",
        joint: JointModel | None = None,
        ell: int = 0,
        train_config: TrainConfig | None = None,
        n_train: int = 2000,
        retrain_every: int = 5,
        softmax=None,
    ):
        if attacker not in ("exact", "masked", "learned"):
            raise ValueError(f"unknown attacker {attacker!r}")
        self.space, self.attacker, self.joint, self.ell = space, attacker, joint, ell
        self.train_config = train_config or TrainConfig()
        self.n_train, self.retrain_every = n_train, retrain_every
        self.softmax = softmax or default_softmax_config(space.embeddings)
        self._learned: LearnedAttacker | None = None
        self._trained_at: int | None = None

    def refresh(self, mech: LevelwiseMechanism, iteration: int, force: bool = False) -> None:
        if self.attacker != "learned":
            return
        due = force or self._trained_at is None or iteration - self._trained_at >= self.retrain_every
        if not due:
            return
        seed = self.train_config.seed + 7919 * iteration
        rng = np.random.default_rng(seed)
        x, y = simulate_training_pairs(mech, self.space, self.n_train, rng, self.joint, self.ell)
        model = train_reconstructor(x, y, replace(self.train_config, seed=seed))
        self._learned = LearnedAttacker(model, self.space, self.softmax)
        self._trained_at = iteration
        log.debug("retrained attacker at iteration %d (val mse %.4g)", iteration, model.training_log[-1][2])

    def __call__(self, mech: LevelwiseMechanism):
        attacker = self._learned if self.attacker == "learned" else self.attacker
        if attacker is None:
            raise RuntimeError("learned attacker not trained yet; call refresh() first")
        if self.joint is None:
            return single_release_target(mech, self.space, attacker)
        return joint_release_target(mech, self.space, self.joint, self.ell, attacker)


# ---------------------------------------------------------------- losses


def utility_loss(
    mech: LevelwiseMechanism,
    space: SecretSpace,
    cost: CostMatrix,
    remap: RemapTable | None = None,
) -> float:
    """Expected cost ``sum_x prior[x] sum_y c[x, y] P[y | x]`` over all tiers.

    With ``remap`` the cost is charged on the remapped release ``f(y)``.
    """
    ch = mech.full_channel(space)
    if remap is not None:
        ch = remap_channel(ch, remap)
    c = _cost_columns(cost, ch.output_labels)
    return float(np.sum(space.prior[:, None] * c * ch.matrix))


@dataclass(frozen=True)
class LossEval:
    alpha: tuple[float, ...]
    privacy: float
    utility: float
    composite: float


def composite_loss(
    alpha: Sequence[float],
    cfg: AdaptConfig,
    space: SecretSpace,
    cost: CostMatrix,
    builder: TargetBuilder,
    seed: int | None = None,
) -> LossEval:
    """``lambda1 * p_hat + lambda2 * utility_loss`` for the levelwise EM at ``alpha``."""
    mech = compose_levels(space, cfg.eps, list(alpha))
    if builder.attacker == "learned" and builder._learned is None:
        builder.refresh(mech, 0)
    target = builder(mech)
    draws = draw_mpl(target, cfg.audit_S, cfg.seed if seed is None else seed)
    privacy = float(np.mean(draws.mpl > cfg.eps))
    util = utility_loss(mech, space, cost)
    return LossEval(tuple(float(a) for a in alpha), privacy, util, cfg.lambda1 * privacy + cfg.lambda2 * util)


@dataclass
class AdaptState:
    alpha: tuple[float, ...]
    iter: int = 0
    history: list[LossEval] = field(default_factory=list)
    best: LossEval | None = None
    stop_reason: str = ""
    tier_order_inverted: bool = False

    @property
    def best_alpha(self) -> tuple[float, ...]:
        return self.best.alpha if self.best is not None else self.alpha


def _iteration_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def ampl_run(
    cfg: AdaptConfig,
    space: SecretSpace,
    cost: CostMatrix,
    builder: TargetBuilder,
    alpha0: Sequence[float] | None = None,
) -> AdaptState:
    """Finite-difference coordinate descent on the composite loss.

    Iteration ``t`` evaluates the loss at ``alpha`` and at ``alpha + h e_k``
    for each tier (``alpha - h e_k`` when that would leave (0, 1]) with
    common random numbers, then moves each coordinate by
    ``eta0 / (t + 1)**decay`` against the sign of its difference quotient.
    Alphas are clamped to ``[1e-3, 1]``. The best evaluated point is kept as
    the incumbent.
    """
    n = space.n_tiers
    alpha = np.clip(np.ones(n) if alpha0 is None else np.asarray(alpha0, dtype=float), ALPHA_MIN, 1.0)
    state = AdaptState(tuple(alpha))
    baseline_util = None
    if cfg.delta_target is not None:
        baseline_util = utility_loss(compose_levels(space, cfg.eps, [1.0] * n), space, cost)
    eta_scale, halved, stall = 1.0, False, 0
    last_change = np.inf
    for t in range(cfg.max_iters + 1):
        seed_t = _iteration_seed(cfg.seed, t)
        mech = compose_levels(space, cfg.eps, alpha)
        builder.refresh(mech, t)
        center = composite_loss(alpha, cfg, space, cost, builder, seed_t)
        state.history.append(center)
        state.alpha, state.iter = tuple(float(a) for a in alpha), t
        if state.best is None or center.composite < state.best.composite:
            state.best, stall = center, 0
        elif t > 0:
            stall += 1
        if t == cfg.max_iters:
            state.stop_reason = "max_iters"
            break
        if last_change < cfg.tol:
            state.stop_reason = "tol"
            break
        if baseline_util is not None and center.privacy <= cfg.delta_target and (
            center.utility <= baseline_util * (1 + cfg.utility_slack)
        ):
            state.stop_reason = "target"
            break
        if stall >= cfg.patience:
            if halved:
                state.stop_reason = "stalled"
                break
            eta_scale, halved, stall = 0.5, True, 0
        grad = np.zeros(n)
        for k in range(n):
            step = cfg.probe if alpha[k] + cfg.probe <= 1.0 else -cfg.probe
            probe = alpha.copy()
            probe[k] = np.clip(probe[k] + step, ALPHA_MIN, 1.0)
            actual = probe[k] - alpha[k]
            if actual == 0:
                continue
            grad[k] = (composite_loss(probe, cfg, space, cost, builder, seed_t).composite - center.composite) / actual
        eta = eta_scale * cfg.eta0 / (t + 1) ** cfg.decay
        new = np.clip(alpha - eta * np.sign(grad), ALPHA_MIN, 1.0)
        last_change = float(np.max(np.abs(new - alpha)))
        log.info("iter %d alpha=%s composite=%.5f grad=%s", t, np.round(alpha, 4), center.composite, np.round(grad, 4))
        alpha = new
    best = state.best_alpha
    if n >= 2 and best[0] > best[1]:
        state.tier_order_inverted = True
        warnings.warn("calibrated alpha_1 exceeds alpha_2: tier-1 gets milder noise than tier-2", RuntimeWarning)
    return state


def write_trajectory_csv(path, state: AdaptState) -> None:
    n = len(state.alpha)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", *(f"alpha_{k + 1}" for k in range(n)), "privacy", "utility", "composite"])
        for t, e in enumerate(state.history):
            w.writerow([t, *(f"{a:.12g}" for a in e.alpha), f"{e.privacy:.12g}", f"{e.utility:.12g}", f"{e.composite:.12g}"])


# ---------------------------------------------------------------- trade-off grid


@dataclass(frozen=True)
class GridRow:
    alpha: tuple[float, ...]
    violation_ratio: float
    utility: float
    utility_remap: float


def alpha_grid(n_tiers: int, lo: float = 0.1, hi: float = 1.0, step: float = 0.1) -> list[tuple[float, ...]]:
    values = np.round(np.arange(lo, hi + step / 2, step), 10)
    return [tuple(float(v) for v in combo) for combo in itertools.product(values, repeat=n_tiers)]


def grid_tradeoff(
    space: SecretSpace,
    cost: CostMatrix,
    builder: TargetBuilder,
    eps: float,
    S: int,
    seed: int,
    alphas: Sequence[Sequence[float]] | None = None,
) -> list[GridRow]:
    """Violation ratio and utility loss (raw and remapped) over an alpha lattice, one shared audit seed."""
    alphas = alpha_grid(space.n_tiers) if alphas is None else alphas
    rows = []
    for t, alpha in enumerate(alphas):
        mech = compose_levels(space, eps, list(alpha))
        builder.refresh(mech, t, force=True)
        draws = draw_mpl(builder(mech), S, seed)
        table = bayes_remap(mech, space, cost)
        rows.append(
            GridRow(
                tuple(float(a) for a in alpha),
                float(np.mean(draws.mpl > eps)),
                utility_loss(mech, space, cost),
                utility_loss(mech, space, cost, table),
            )
        )
    return rows


def write_grid_csv(path, rows: Sequence[GridRow]) -> None:
    n = len(rows[0].alpha) if rows else 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*(f"alpha_{k + 1}" for k in range(n)), "violation_ratio", "utility_loss", "utility_loss_remap"])
        for r in rows:
            w.writerow([*(f"{a:.4g}" for a in r.alpha), f"{r.violation_ratio:.12g}", f"{r.utility:.12g}", f"{r.utility_remap:.12g}"])
