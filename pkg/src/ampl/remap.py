"""Bayesian remapping of released outputs (deterministic post-processing)."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .inference import PosteriorVector, ZeroEvidenceError, marginal_output, posterior_matrix
from .mechanism import Channel, LevelwiseMechanism
from .space import CostMatrix, DataError, SecretSpace


@dataclass(frozen=True)
class RemapTable:
    """Deterministic map ``f`` from output index ``y`` to output index ``z`` over ``labels``."""

    labels: tuple[str, ...]
    mapping: np.ndarray
    unreachable: tuple[int, ...] = ()

    def __post_init__(self):
        m = np.array(self.mapping, dtype=int)
        if m.shape != (len(self.labels),) or (m.size and (m.min() < 0 or m.max() >= len(self.labels))):
            raise ValueError("mapping must send every output to a valid output index")
        m.setflags(write=False)
        object.__setattr__(self, "mapping", m)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def preimages(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for y, z in enumerate(self.mapping):
            out.setdefault(int(z), []).append(y)
        return out

    def label_map(self) -> dict[str, str]:
        return {self.labels[y]: self.labels[z] for y, z in enumerate(self.mapping)}

    @classmethod
    def identity(cls, labels) -> "RemapTable":
        return cls(tuple(labels), np.arange(len(labels)))


def _cost_columns(cost: CostMatrix, labels) -> np.ndarray:
    col = {label: k for k, label in enumerate(cost.output_labels)}
    try:
        return cost.values[:, [col[label] for label in labels]]
    except KeyError as exc:
        raise DataError(f"cost matrix has no column for output {exc.args[0]!r}") from None


def bayes_remap(mech: LevelwiseMechanism, space: SecretSpace, cost: CostMatrix) -> RemapTable:
    """Send every output ``y`` to the output minimizing expected cost under its posterior.

    For outputs reachable from several tiers the tier posteriors are mixed
    with weights proportional to tier prior mass times the tier's evidence
    for ``y``, which is the posterior under the full channel. Ties go to the
    lowest output index; unreachable outputs map to themselves.
    """
    full = mech.full_channel(space)
    labels = full.output_labels
    c = _cost_columns(cost, labels)  # (K, n_out)
    post = posterior_matrix(full, space.prior)
    unreachable = tuple(int(y) for y in np.flatnonzero(np.isnan(post).any(axis=1)))
    expected = np.nan_to_num(post) @ c  # row y, column candidate output y'
    mapping = np.argmin(expected, axis=1)
    mapping[list(unreachable)] = list(unreachable)
    return RemapTable(labels, mapping, unreachable)


def remap_channel(channel: Channel, table: RemapTable) -> Channel:
    """Channel of ``f(M(x))``: ``P[z|x] = sum over y in f^-1(z) of P[y|x]``.

    The result is indexed by ``table.labels``; the channel's outputs are
    located in the table by label.
    """
    pos = {label: k for k, label in enumerate(table.labels)}
    try:
        z_of = np.array([table.mapping[pos[label]] for label in channel.output_labels], dtype=int)
    except KeyError as exc:
        raise KeyError(f"remap table does not cover output {exc.args[0]!r}") from None
    m = np.zeros((channel.matrix.shape[0], len(table.labels)))
    for y, z in enumerate(z_of):
        m[:, z] += channel.matrix[:, y]
    emb = None
    if channel.output_embeddings is not None and tuple(channel.output_labels) == table.labels:
        emb = channel.output_embeddings
    return Channel(channel.inputs, table.labels, m, emb)


def post_remap_posterior(channel: Channel, prior, table: RemapTable, z: int) -> PosteriorVector:
    """Posterior given the remapped release ``z``, as a mixture over its preimage.

    ``sum_{f(y)=z} Pr(x|y) Pr(y) / sum_{f(y)=z} Pr(y)``; the channel must
    share the table's output indexing.
    """
    if tuple(channel.output_labels) != table.labels:
        raise ValueError("channel and remap table must index the same outputs")
    pre = np.flatnonzero(table.mapping == z)
    marg = marginal_output(channel, prior)
    mass = marg[pre].sum() if pre.size else 0.0
    if mass <= 0:
        raise ZeroEvidenceError(f"remapped output {z} has no preimage mass")
    post = posterior_matrix(channel, prior)
    live = pre[marg[pre] > 0]
    probs = (marg[live, None] * post[live]).sum(axis=0) / mass
    return PosteriorVector(probs, conditioning=("z", int(z)))


def write_remap_csv(path, table: RemapTable) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y_label", "z_label"])
        for y, z in enumerate(table.mapping):
            w.writerow([table.labels[y], table.labels[z]])


def read_remap_csv(path) -> RemapTable:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["y_label", "z_label"]:
        raise DataError(f"{path}: expected header y_label,z_label")
    labels = tuple(r[0] for r in rows[1:])
    pos = {label: k for k, label in enumerate(labels)}
    try:
        mapping = [pos[r[1]] for r in rows[1:]]
    except KeyError as exc:
        raise DataError(f"{path}: image {exc.args[0]!r} is not an output label") from None
    return RemapTable(labels, np.array(mapping, dtype=int))
