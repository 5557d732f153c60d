"""Metric-normalized posterior leakage (mPL)."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .inference import PosteriorVector, posterior_joint_batch, posterior_matrix
from .mechanism import Channel
from .space import JointModel


@dataclass(frozen=True)
class LeakageSample:
    pair: tuple[int, int]
    observation: object
    mpl: float
    violated: bool
    position: int = 0


def mpl_value(prior, posterior, i: int, j: int, d_ij: float) -> float:
    """Shift in log posterior odds of ``i`` vs ``j``, divided by their distance.

    ``|(ln post[i] - ln post[j]) - (ln prior[i] - ln prior[j])| / d_ij``
    """
    post = posterior.probs if isinstance(posterior, PosteriorVector) else np.asarray(posterior)
    prior = np.asarray(prior, dtype=float)
    if d_ij <= 0:
        raise ValueError("mPL is undefined for zero distance")
    vals = (prior[i], prior[j], post[i], post[j])
    if min(vals) <= 0:
        raise ValueError("mPL needs strictly positive prior and posterior entries")
    shift = (np.log(post[i]) - np.log(post[j])) - (np.log(prior[i]) - np.log(prior[j]))
    return float(abs(shift) / d_ij)


def mpl_batch(prior, posts: np.ndarray, i: np.ndarray, j: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Vectorized mPL for rows of ``posts``; zero or NaN posteriors give ``inf``."""
    prior = np.asarray(prior, dtype=float)
    n = np.arange(len(i))
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = (np.log(posts[n, i]) - np.log(posts[n, j])) - (np.log(prior[i]) - np.log(prior[j]))
        out = np.abs(shift) / d
    out[~np.isfinite(out)] = np.inf
    return out


def check_bounded(samples: Sequence[LeakageSample], eps: float):
    """Return ``(max_mpl, violation_count, violating_samples)`` against budget ``eps``."""
    if not samples:
        return 0.0, 0, []
    bad = [s for s in samples if s.mpl > eps]
    return max(s.mpl for s in samples), len(bad), bad


def lipschitz_bound(p, q, gamma: float, d_min: float) -> float:
    """``2 / (gamma * d_min) * ||p - q||_1``, valid when both posteriors are floored at gamma."""
    p = np.asarray(p.probs if isinstance(p, PosteriorVector) else p, dtype=float)
    q = np.asarray(q.probs if isinstance(q, PosteriorVector) else q, dtype=float)
    if d_min <= 0:
        raise ValueError("d_min must be positive")
    if p.min() < gamma or q.min() < gamma:
        raise ValueError("posterior below the floor gamma")
    return float(2.0 / (gamma * d_min) * np.abs(p - q).sum())


def _pairs(d: np.ndarray):
    i, j = np.nonzero(d > 0)
    return i, j


def sup_single_mpl(channel: Channel, prior, distances: np.ndarray) -> tuple[float, tuple]:
    """Largest single-observation mPL over input pairs with ``d > 0`` and reachable outputs.

    ``prior`` and ``distances`` are indexed by channel row.
    """
    prior = np.asarray(prior, dtype=float)
    post = posterior_matrix(channel, prior)
    reachable = ~np.isnan(post).any(axis=1)
    i, j = _pairs(distances)
    best, arg = 0.0, None
    for y in np.flatnonzero(reachable):
        vals = mpl_batch(prior, np.broadcast_to(post[y], (len(i), post.shape[1])), i, j, distances[i, j])
        k = int(np.argmax(vals)) if len(vals) else 0
        if len(vals) and vals[k] > best:
            best, arg = float(vals[k]), (int(i[k]), int(j[k]), int(y))
    return best, arg


def sup_joint_mpl(
    joint: JointModel,
    channels: Sequence[Channel],
    distances: np.ndarray,
    positions: Sequence[int] | None = None,
) -> tuple[float, tuple]:
    """Largest joint-observation mPL, enumerating every output vector.

    The sup also runs over target positions; the prior odds at position
    ``ell`` use the joint model's marginal there. Exponential in length.
    """
    positions = range(joint.length) if positions is None else positions
    y_all = np.array(list(itertools.product(*(range(ch.n_outputs) for ch in channels))), dtype=int)
    marg = joint.marginals
    best, arg = 0.0, None
    for ell in positions:
        posts = posterior_joint_batch(joint, channels, y_all, ell)
        live = ~np.isnan(posts).any(axis=1)
        prior = marg[ell]
        # only pairs with positive marginal mass carry defined odds
        dd = distances * (prior[:, None] > 0) * (prior[None, :] > 0)
        i, j = _pairs(dd)
        for r in np.flatnonzero(live):
            vals = mpl_batch(prior, np.broadcast_to(posts[r], (len(i), posts.shape[1])), i, j, dd[i, j])
            k = int(np.argmax(vals)) if len(vals) else 0
            if len(vals) and vals[k] > best:
                best, arg = float(vals[k]), (int(i[k]), int(j[k]), tuple(y_all[r]), ell)
    return best, arg


def mpl_histogram(values: np.ndarray, eps: float, bins: int = 40):
    """Histogram rows ``(left, right, count, violated_count)``.

    Infinite values land in a final ``[max_finite, inf)`` bin.
    """
    values = np.asarray(values, dtype=float)
    finite = values[np.isfinite(values)]
    hi = float(finite.max()) if finite.size and finite.max() > 0 else max(eps, 1.0)
    edges = np.linspace(0.0, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, finite, side="right") - 1, 0, bins - 1)
    viol = finite > eps
    rows = []
    for b in range(bins):
        sel = idx == b
        rows.append((float(edges[b]), float(edges[b + 1]), int(sel.sum()), int((sel & viol).sum())))
    n_inf = int((~np.isfinite(values)).sum())
    if n_inf:
        rows.append((hi, float("inf"), n_inf, n_inf))
    return rows


def write_histogram_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "count", "violated_count"])
        for left, right, count, bad in rows:
            w.writerow([f"{left:.12g}", f"{right:.12g}", count, bad])
