"""Exact Bayesian posteriors under single and joint observation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mechanism import Channel
from .space import JointModel


class ZeroEvidenceError(ValueError):
    """The observation has zero probability under the prior and channel."""


@dataclass(frozen=True)
class PosteriorVector:
    probs: np.ndarray
    conditioning: object = None
    target_position: int = 0


def posterior_single(channel: Channel, prior, y: int) -> PosteriorVector:
    """Bayes' rule over the channel's inputs for a single observed output ``y``.

    ``prior`` is indexed like the channel rows.
    """
    prior = np.asarray(prior, dtype=float)
    joint = channel.matrix[:, y] * prior
    evidence = joint.sum()
    if evidence <= 0:
        raise ZeroEvidenceError(f"output {y} is unreachable under this prior")
    return PosteriorVector(joint / evidence, conditioning=int(y))


def posterior_matrix(channel: Channel, prior) -> np.ndarray:
    """Posterior for every output at once: ``(n_outputs, n_inputs)``.

    Unreachable outputs get a row of NaN.
    """
    joint = channel.matrix * np.asarray(prior, dtype=float)[:, None]
    evidence = joint.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        post = (joint / evidence).T
    post[evidence <= 0] = np.nan
    return post


def marginal_output(channel: Channel, prior) -> np.ndarray:
    """Output law ``Pr(Y = y) = sum_x P[y|x] prior[x]``."""
    out = np.asarray(prior, dtype=float) @ channel.matrix
    return out / out.sum()


def _likelihood_table(joint: JointModel, channels: Sequence[Channel]):
    """Per position, the channel row of every support tuple's entry."""
    if len(channels) != joint.length:
        raise ValueError(f"need {joint.length} channels, got {len(channels)}")
    return [ch.rows_for(joint.support[:, m]) for m, ch in enumerate(channels)]


def posterior_joint_batch(
    joint: JointModel,
    channels: Sequence[Channel],
    y_vecs: np.ndarray,
    ell: int,
    rows=None,
) -> np.ndarray:
    """Exact joint posteriors of position ``ell`` for a batch of output vectors.

    Returns ``(n, K)`` over candidate indices; rows with zero evidence are NaN.
    Cost is ``O(n * |support| * L)``.
    """
    y_vecs = np.atleast_2d(np.asarray(y_vecs, dtype=int))
    if y_vecs.shape[1] != joint.length:
        raise ValueError("output vector length must equal the joint length")
    rows = _likelihood_table(joint, channels) if rows is None else rows
    w = np.broadcast_to(joint.probs, (len(y_vecs), len(joint.probs))).copy()
    for m, ch in enumerate(channels):
        w *= ch.matrix[rows[m][None, :], y_vecs[:, m][:, None]]
    onehot = np.zeros((len(joint.probs), joint.n_candidates))
    onehot[np.arange(len(joint.probs)), joint.support[:, ell]] = 1.0
    out = w @ onehot
    evidence = out.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = out / evidence
    out[evidence[:, 0] <= 0] = np.nan
    return out


def posterior_joint_exact(
    joint: JointModel, channels: Sequence[Channel], y_vec, ell: int
) -> PosteriorVector:
    """``Pr(X_ell = x | Y_1..Y_L = y_vec)`` by summing the explicit joint support.

    Releases are conditionally independent given the secrets. Probabilities
    are indexed by candidate index.
    """
    if not 0 <= ell < joint.length:
        raise IndexError(f"position {ell} out of range for length {joint.length}")
    post = posterior_joint_batch(joint, channels, np.asarray(y_vec)[None, :], ell)[0]
    if np.isnan(post).any():
        raise ZeroEvidenceError(f"output vector {tuple(y_vec)} is unreachable")
    return PosteriorVector(post, conditioning=tuple(int(v) for v in y_vec), target_position=ell)


def joint_output_probability(joint: JointModel, channels: Sequence[Channel], y_vec) -> float:
    """Marginal probability of an output vector under the joint model."""
    rows = _likelihood_table(joint, channels)
    w = joint.probs.copy()
    for m, ch in enumerate(channels):
        w = w * ch.matrix[rows[m], int(y_vec[m])]
    return float(w.sum())
