"""Metric secret space: candidates, embeddings, tiers, priors and joint priors."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Raised when ingested data is malformed or inconsistent."""


@dataclass(frozen=True)
class SecretSpace:
    """Finite candidate set with embeddings, tier labels and a positive prior.

    Candidate order is ingestion order and every matrix in the package is
    indexed by it.
    """

    candidates: tuple[str, ...]
    embeddings: np.ndarray
    tier_of: np.ndarray
    prior: np.ndarray
    _dist: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=float)
        if emb.ndim != 2 or emb.shape[0] == 0 or emb.shape[1] < 1:
            raise DataError("embeddings must be a non-empty (K, D) array with D >= 1")
        k = emb.shape[0]
        if len(self.candidates) != k:
            raise DataError("one embedding per candidate required")
        if len(set(self.candidates)) != k:
            raise DataError("candidate labels must be unique")
        tiers = np.asarray(self.tier_of, dtype=int)
        prior = np.asarray(self.prior, dtype=float)
        if tiers.shape != (k,) or prior.shape != (k,):
            raise DataError("tier_of and prior must have one entry per candidate")
        if np.any(prior <= 0) or abs(prior.sum() - 1.0) > 1e-12:
            raise DataError("prior must be strictly positive and sum to 1")
        present = np.unique(tiers)
        if present[0] != 1 or not np.array_equal(present, np.arange(1, present[-1] + 1)):
            raise DataError(f"tier indices must form a contiguous range from 1, got {present.tolist()}")
        for name, arr in (("embeddings", emb), ("tier_of", tiers), ("prior", prior)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "candidates", tuple(self.candidates))
        diff = emb[:, None, :] - emb[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        dist = 0.5 * (dist + dist.T)
        np.fill_diagonal(dist, 0.0)
        dist.setflags(write=False)
        object.__setattr__(self, "_dist", dist)

    @property
    def size(self) -> int:
        return len(self.candidates)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def n_tiers(self) -> int:
        return int(self.tier_of.max())

    @property
    def distances(self) -> np.ndarray:
        """Pairwise Euclidean distance matrix (read-only)."""
        return self._dist

    def index(self, label: str) -> int:
        try:
            return self.candidates.index(label)
        except ValueError:
            raise KeyError(label) from None

    def tier_members(self, tier: int) -> np.ndarray:
        return np.flatnonzero(self.tier_of == tier)

    def tier_prior(self, tier: int) -> np.ndarray:
        """Prior restricted to one tier and renormalized."""
        p = self.prior[self.tier_members(tier)]
        return p / p.sum()


def build_space(
    embeddings: Mapping[str, Sequence[float]],
    tiers: Mapping[str, int] | None = None,
    counts: Mapping[str, float] | None = None,
    smoothing: float = 1.0,
) -> SecretSpace:
    """Build a secret space from labelled vectors.

    Candidates are the labels that carry a tier, in the iteration order of
    ``embeddings``. When ``tiers`` is None every label is a tier-1 candidate.
    The prior is the Laplace-smoothed frequency
    ``(counts[i] + smoothing) / sum_j (counts[j] + smoothing)``.
    """
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    if tiers is not None:
        unknown = [label for label in tiers if label not in embeddings]
        if unknown:
            raise DataError(f"tier labels without embeddings: {unknown[:5]}")
        labels = [label for label in embeddings if label in tiers]
    else:
        labels = list(embeddings)
    if not labels:
        raise DataError("empty candidate set")
    dims = {len(embeddings[label]) for label in labels}
    if len(dims) != 1:
        raise DataError(f"embedding dimension mismatch: {sorted(dims)}")
    emb = np.array([embeddings[label] for label in labels], dtype=float)
    tier_of = np.array([tiers[label] if tiers is not None else 1 for label in labels], dtype=int)
    counts = counts or {}
    weights = np.array([float(counts.get(label, 0.0)) for label in labels]) + smoothing
    if np.any(weights <= 0):
        raise DataError("counts must be nonnegative")
    prior = weights / weights.sum()
    # absorb rounding so the sum is 1 to machine precision
    prior[np.argmax(prior)] += 1.0 - prior.sum()
    return SecretSpace(tuple(labels), emb, tier_of, prior)


def distance(space: SecretSpace, i: int, j: int) -> float:
    """Euclidean distance between the embeddings of candidates ``i`` and ``j``."""
    k = space.size
    if not (0 <= i < k and 0 <= j < k):
        raise IndexError(f"candidate index out of range: ({i}, {j}) for size {k}")
    return float(space.distances[i, j])


@dataclass(frozen=True)
class JointModel:
    """Explicit joint prior over L-tuples of candidate indices."""

    length: int
    support: np.ndarray  # (T, L) int, sorted lexicographically
    probs: np.ndarray  # (T,)
    n_candidates: int

    @property
    def marginals(self) -> np.ndarray:
        """(L, K) array of per-position marginal priors."""
        out = np.zeros((self.length, self.n_candidates))
        for pos in range(self.length):
            np.add.at(out[pos], self.support[:, pos], self.probs)
        return out

    def marginal(self, position: int) -> np.ndarray:
        return self.marginals[position]


def build_joint(
    length: int,
    table: Mapping[tuple[int, ...], float],
    n_candidates: int | None = None,
) -> JointModel:
    """Build a joint model from a ``tuple -> probability`` table.

    Zero-probability tuples are dropped from the support.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    items = sorted((tuple(int(v) for v in t), float(p)) for t, p in table.items())
    if any(len(t) != length for t, _ in items):
        raise DataError(f"every tuple must have length {length}")
    if any(p < 0 or not np.isfinite(p) for _, p in items):
        raise DataError("joint probabilities must be finite and nonnegative")
    items = [(t, p) for t, p in items if p > 0]
    if not items:
        raise DataError("joint table has empty support")
    support = np.array([t for t, _ in items], dtype=int).reshape(len(items), length)
    probs = np.array([p for _, p in items])
    if abs(probs.sum() - 1.0) > 1e-9:
        raise DataError(f"joint table sums to {probs.sum():.12g}, expected 1")
    if support.min() < 0:
        raise DataError("negative candidate index in joint table")
    probs = probs / probs.sum()
    k = int(support.max()) + 1 if n_candidates is None else int(n_candidates)
    if support.max() >= k:
        raise DataError("joint table refers to a candidate outside the space")
    support.setflags(write=False)
    probs.setflags(write=False)
    return JointModel(length, support, probs, k)


def product_joint(marginals: Sequence[np.ndarray]) -> JointModel:
    """Joint model of independent positions with the given marginals."""
    marginals = [np.asarray(m, dtype=float) for m in marginals]
    k = max(len(m) for m in marginals)
    table = {}
    for t in itertools.product(*(range(len(m)) for m in marginals)):
        p = float(np.prod([m[v] for m, v in zip(marginals, t)]))
        if p > 0:
            table[t] = p
    return build_joint(len(marginals), table, n_candidates=k)


@dataclass(frozen=True)
class CostMatrix:
    """Utility cost ``c[x, y]`` in [0, 1] of releasing output ``y`` for secret ``x``."""

    values: np.ndarray  # (K, n_outputs)
    output_labels: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(v < 0) or np.any(v > 1):
            raise DataError("cost entries must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "output_labels", tuple(self.output_labels))


def cost_matrix(
    space: SecretSpace,
    output_labels: Sequence[str] | None = None,
    output_embeddings: np.ndarray | None = None,
) -> CostMatrix:
    """Cosine cost ``1 - (cos(x, y) + 1) / 2`` between every secret and output.

    Outputs default to the space's own candidates.
    """
    if output_embeddings is None:
        output_labels = space.candidates
        output_embeddings = space.embeddings
    out = np.asarray(output_embeddings, dtype=float)
    if out.ndim != 2 or out.shape[1] != space.dim:
        raise DataError("output embeddings must match the space dimension")
    xn = np.linalg.norm(space.embeddings, axis=1)
    yn = np.linalg.norm(out, axis=1)
    if np.any(xn == 0) or np.any(yn == 0):
        raise DataError("cosine similarity undefined for a zero-norm embedding")
    cos = (space.embeddings @ out.T) / np.outer(xn, yn)
    cos = np.clip(cos, -1.0, 1.0)
    return CostMatrix(1.0 - (cos + 1.0) / 2.0, tuple(output_labels))


# ---------------------------------------------------------------- file formats


def _open_lines(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.strip() and not line.lstrip().startswith("#"):
                yield lineno, line


def read_embeddings(path: str | Path) -> dict[str, list[float]]:
    """Read a GloVe-style ``label v1 ... vD`` file."""
    out: dict[str, list[float]] = {}
    for lineno, line in _open_lines(path):
        parts = line.split()
        if len(parts) < 2:
            raise DataError(f"{path}:{lineno}: expected a label followed by values")
        try:
            out[parts[0]] = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def _read_tab_pairs(path, convert):
    out = {}
    for lineno, line in _open_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected label<TAB>value")
        try:
            out[parts[0]] = convert(parts[1].strip())
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def read_tiers(path: str | Path) -> dict[str, int]:
    return _read_tab_pairs(path, int)


def read_counts(path: str | Path) -> dict[str, float]:
    counts = _read_tab_pairs(path, float)
    if any(v < 0 for v in counts.values()):
        raise DataError(f"{path}: counts must be nonnegative")
    return counts


def read_joint(path: str | Path, space: SecretSpace) -> JointModel:
    """Read ``label_1<TAB>...<TAB>label_L<TAB>probability`` lines."""
    table: dict[tuple[int, ...], float] = {}
    length = None
    for lineno, line in _open_lines(path):
        parts = line.split("\t")
        if len(parts) < 2:
            raise DataError(f"{path}:{lineno}: expected labels and a probability")
        if length is None:
            length = len(parts) - 1
        try:
            key = tuple(space.index(label) for label in parts[:-1])
            table[key] = table.get(key, 0.0) + float(parts[-1])
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    if length is None:
        raise DataError(f"{path}: empty joint table")
    return build_joint(length, table, n_candidates=space.size)


def write_embeddings(path, labels, vectors) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for label, vec in zip(labels, vectors):
            fh.write(label + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def write_tab_pairs(path, mapping) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for label, value in mapping.items():
            fh.write(f"{label}\t{value}\n")
