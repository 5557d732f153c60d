"""Perturbation channels: adjusted exponential mechanism, CDF sampling, mDP checks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .space import DataError, SecretSpace


@dataclass(frozen=True)
class Channel:
    """Row-stochastic matrix ``P[y | x]``.

    ``inputs`` are candidate indices into a :class:`SecretSpace`; row ``r``
    of ``matrix`` is the output law of candidate ``inputs[r]``.
    """

    inputs: np.ndarray
    output_labels: tuple[str, ...]
    matrix: np.ndarray
    output_embeddings: np.ndarray | None = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        inputs = np.array(self.inputs, dtype=int).reshape(-1)
        if m.ndim != 2 or m.shape[1] < 1:
            raise ValueError("channel needs at least one output")
        if m.shape[0] != len(inputs):
            raise ValueError("one row per input required")
        if len(self.output_labels) != m.shape[1]:
            raise ValueError("one label per output column required")
        if np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("channel rows must be nonnegative and sum to 1")
        for name, arr in (("matrix", m), ("inputs", inputs)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "output_labels", tuple(self.output_labels))
        if self.output_embeddings is not None:
            e = np.array(self.output_embeddings, dtype=float)
            if e.shape[0] != m.shape[1]:
                raise ValueError("one embedding per output required")
            e.setflags(write=False)
            object.__setattr__(self, "output_embeddings", e)

    @property
    def n_outputs(self) -> int:
        return self.matrix.shape[1]

    def rows_for(self, candidates) -> np.ndarray:
        """Row positions of the given candidate indices; KeyError if absent."""
        lookup = {int(c): r for r, c in enumerate(self.inputs)}
        try:
            return np.array([lookup[int(c)] for c in np.atleast_1d(candidates)], dtype=int)
        except KeyError as exc:
            raise KeyError(f"candidate {exc.args[0]} is not an input of this channel") from None


def _stable_rows(logits: np.ndarray) -> np.ndarray:
    logits = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    rows = w / w.sum(axis=1, keepdims=True)
    # push the residual rounding into the largest entry so rows sum to 1
    rows[np.arange(len(rows)), rows.argmax(axis=1)] += 1.0 - rows.sum(axis=1)
    return rows


def build_em_channel(
    space: SecretSpace,
    eps: float,
    alpha: float = 1.0,
    inputs: Sequence[int] | None = None,
    output_labels: Sequence[str] | None = None,
    output_embeddings: np.ndarray | None = None,
) -> Channel:
    """Adjusted exponential mechanism ``P[y|x] ~ exp(-alpha * eps * d(x, y) / 2)``.

    Inputs default to every candidate; outputs default to the inputs
    themselves (secret-to-secret substitution).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    inputs = np.arange(space.size) if inputs is None else np.asarray(inputs, dtype=int)
    if output_embeddings is None:
        output_labels = [space.candidates[i] for i in inputs]
        output_embeddings = space.embeddings[inputs]
    out = np.asarray(output_embeddings, dtype=float)
    if out.ndim != 2 or out.shape[0] == 0:
        raise ValueError("empty output set")
    if out.shape[1] != space.dim:
        raise DataError("output embedding dimension does not match the space")
    x = space.embeddings[inputs]
    d = np.sqrt(np.maximum(((x[:, None, :] - out[None, :, :]) ** 2).sum(axis=2), 0.0))
    rows = _stable_rows(-0.5 * alpha * eps * d)
    return Channel(inputs, tuple(output_labels), rows, out)


def sample(channel: Channel, x: int, u: float) -> int:
    """CDF inversion: the output ``k`` with ``F[k-1] <= u < F[k]`` for input row ``x``."""
    if not 0.0 <= u < 1.0:
        raise ValueError("u must lie in [0, 1)")
    return int(sample_many(channel, np.array([x]), np.array([u]))[0])


def sample_many(channel: Channel, rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized :func:`sample` over row positions and uniform draws."""
    u = np.asarray(u, dtype=float)
    if np.any(u < 0) or np.any(u >= 1):
        raise ValueError("u must lie in [0, 1)")
    cdf = np.cumsum(channel.matrix, axis=1)
    r = np.asarray(rows, dtype=int)
    k = (cdf[r] <= u[:, None]).sum(axis=1)
    # rounding can leave F[K] marginally below u; fall back to the last live output
    last_live = channel.n_outputs - 1 - np.argmax(channel.matrix[:, ::-1] > 0, axis=1)
    return np.minimum(k, last_live[r])


@dataclass(frozen=True)
class MdpCertificate:
    epsilon_effective: float
    witness: tuple[int, int, int] | None  # (row i, row j, output) maximizing the ratio
    eps_target: float
    passed: bool


def certify_mdp(channel: Channel, space: SecretSpace, eps_target: float) -> MdpCertificate:
    """Exhaustive check of ``|ln P[y|x_i] - ln P[y|x_j]| <= eps * d(x_i, x_j)``."""
    m = channel.matrix
    d = space.distances[np.ix_(channel.inputs, channel.inputs)]
    with np.errstate(divide="ignore", invalid="ignore"):
        logm = np.log(m)
        diff = np.abs(logm[:, None, :] - logm[None, :, :])
        # both zero: no constraint on this output
        diff = np.where((m[:, None, :] == 0) & (m[None, :, :] == 0), 0.0, diff)
        ratio = diff / d[:, :, None]
    same = d == 0
    # duplicate embeddings are fine only with identical rows
    ratio[same] = np.where(diff[same] == 0, 0.0, np.inf)
    n = len(channel.inputs)
    ratio[np.arange(n), np.arange(n)] = 0.0
    flat = int(np.argmax(ratio))
    i, j, y = np.unravel_index(flat, ratio.shape)
    eff = float(ratio[i, j, y])
    witness = (int(i), int(j), int(y)) if eff > 0 else None
    return MdpCertificate(eff, witness, eps_target, bool(eff <= eps_target * (1 + 1e-9)))


@dataclass(frozen=True)
class LevelwiseMechanism:
    """One channel per tier; candidate ``x`` is released through tier ``g(x)``."""

    tier_channels: Mapping[int, Channel]
    alpha: Mapping[int, float]
    eps: float

    @property
    def tiers(self) -> list[int]:
        return sorted(self.tier_channels)

    def channel_of(self, tier: int) -> Channel:
        return self.tier_channels[tier]

    def full_channel(self, space: SecretSpace) -> Channel:
        """Single channel over all candidates and the union of tier outputs.

        Outputs are unioned by label in tier order; rows keep the tier
        channel's probabilities on that tier's outputs and zero elsewhere.
        """
        labels: list[str] = []
        embs: list[np.ndarray] = []
        col: dict[str, int] = {}
        for t in self.tiers:
            ch = self.tier_channels[t]
            for k, label in enumerate(ch.output_labels):
                if label not in col:
                    col[label] = len(labels)
                    labels.append(label)
                    embs.append(ch.output_embeddings[k] if ch.output_embeddings is not None else None)
        matrix = np.zeros((space.size, len(labels)))
        for t in self.tiers:
            ch = self.tier_channels[t]
            cols = [col[label] for label in ch.output_labels]
            for r, x in enumerate(ch.inputs):
                np.add.at(matrix[x], cols, ch.matrix[r])
        emb = None if any(e is None for e in embs) else np.array(embs)
        return Channel(np.arange(space.size), tuple(labels), matrix, emb)


def compose_levels(
    space: SecretSpace,
    eps: float,
    alpha: Sequence[float] | Mapping[int, float],
    outputs_per_tier: Mapping[int, tuple[Sequence[str], np.ndarray]] | None = None,
) -> LevelwiseMechanism:
    """Build one adjusted-EM channel per tier, restricted to that tier's inputs.

    ``alpha`` is either a sequence indexed by tier-1 or a ``tier -> alpha``
    mapping. ``outputs_per_tier`` maps a tier to ``(labels, embeddings)``;
    by default a tier's outputs are its own candidates.
    """
    if not isinstance(alpha, Mapping):
        alpha = {t + 1: float(a) for t, a in enumerate(alpha)}
    tiers = list(range(1, space.n_tiers + 1))
    missing = [t for t in tiers if t not in alpha]
    if missing:
        raise ValueError(f"no alpha for tiers {missing}")
    channels = {}
    for t in tiers:
        members = space.tier_members(t)
        if outputs_per_tier is not None and t in outputs_per_tier:
            labels, emb = outputs_per_tier[t]
            if len(labels) == 0:
                raise ValueError(f"tier {t} has no output candidates")
            channels[t] = build_em_channel(space, eps, alpha[t], members, labels, emb)
        else:
            channels[t] = build_em_channel(space, eps, alpha[t], members)
    return LevelwiseMechanism(channels, {t: float(alpha[t]) for t in tiers}, float(eps))


# ---------------------------------------------------------------- CSV interface


def write_channel_csv(path, channel: Channel, space: SecretSpace) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["input", *channel.output_labels])
        for r, x in enumerate(channel.inputs):
            w.writerow([space.candidates[x], *(f"{p:.17g}" for p in channel.matrix[r])])


def read_channel_csv(path, space: SecretSpace) -> Channel:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2:
        raise DataError(f"{path}: missing header")
    header, body = rows[0], rows[1:]
    try:
        inputs = [space.index(r[0]) for r in body]
        matrix = np.array([[float(v) for v in r[1:]] for r in body])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None
    # rows are rounded text; renormalize before validation
    matrix = matrix / matrix.sum(axis=1, keepdims=True)
    emb = None
    if all(label in space.candidates for label in header[1:]):
        emb = space.embeddings[[space.index(label) for label in header[1:]]]
    return Channel(np.array(inputs), tuple(header[1:]), matrix, emb)
