"""Sliced Latin hypercube designs and block partitions of a dataset."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import ValidationError


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; ``seed`` may be an int, a tuple of
    ints, a SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    if isinstance(seed, (tuple, list)):
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(seed))))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@dataclass(frozen=True)
class SlicedDesign:
    points: np.ndarray  # (k*m, p) in [0, 1)^p
    slice_of: np.ndarray  # labels 1..k
    k: int
    m: int

    @property
    def p(self) -> int:
        return self.points.shape[1]

    def scaled(self, lower, upper) -> np.ndarray:
        lower = np.broadcast_to(np.asarray(lower, dtype=float), (self.p,))
        upper = np.broadcast_to(np.asarray(upper, dtype=float), (self.p,))
        return lower + self.points * (upper - lower)


def generate_slhd(k: int, m: int, p: int, seed=0) -> SlicedDesign:
    """Sliced LHD with ``k`` slices of ``m`` points in ``[0, 1)^p``.

    For each dimension the k*m fine bins are grouped into m coarse bins of k
    consecutive fine bins; every coarse bin hands one of its fine bins to each
    slice through a random permutation. Within a slice the coarse bins are
    then shuffled independently per dimension and each point is jittered
    uniformly inside its fine bin.
    """
    if min(k, m, p) < 1:
        raise ValidationError("k, m and p must all be >= 1")
    rng = make_rng(seed)
    n = k * m
    points = np.empty((n, p))
    for d in range(p):
        # fine[c, g]: fine bin given to slice c inside coarse bin g
        fine = np.empty((k, m), dtype=np.int64)
        for g in range(m):
            fine[:, g] = g * k + rng.permutation(k)
        for c in range(k):
            order = rng.permutation(m)
            bins = fine[c, order]
            points[c * m:(c + 1) * m, d] = (bins + rng.random(m)) / n
    labels = np.repeat(np.arange(1, k + 1), m)
    return SlicedDesign(points=points, slice_of=labels, k=k, m=m)


def _bin_counts(values: np.ndarray, nbins: int) -> np.ndarray:
    idx = np.floor(values * nbins).astype(np.int64)
    return idx


def validate_slhd(design: SlicedDesign) -> tuple[bool, list[str]]:
    """Check both Latin properties with half-open bins [j/N, (j+1)/N).

    Returns ``(ok, violations)`` where each violation names the slice (or
    the union), the dimension and the offending bin.
    """
    pts = np.asarray(design.points, dtype=float)
    labels = np.asarray(design.slice_of)
    problems: list[str] = []
    if np.any(pts < 0) or np.any(pts >= 1):
        problems.append("points outside [0, 1)")
        return False, problems
    n, p = pts.shape
    groups = [("union", pts)]
    for c in np.unique(labels):
        groups.append((f"slice {int(c)}", pts[labels == c]))
    for name, sub in groups:
        nb = sub.shape[0]
        for d in range(p):
            counts = np.bincount(_bin_counts(sub[:, d], nb), minlength=nb)
            for b in np.flatnonzero(counts != 1):
                problems.append(f"{name}, dim {d + 1}: bin {int(b)} of {nb} holds {int(counts[b])} points")
    return not problems, problems


@dataclass(frozen=True)
class Partition:
    """Ordered list of disjoint index blocks covering 0..n-1."""

    blocks: tuple

    def __post_init__(self):
        blocks = tuple(np.asarray(b, dtype=np.int64) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not blocks:
            raise ValidationError("a partition needs at least one block")
        if any(b.size == 0 for b in blocks):
            raise ValidationError("empty block in partition")
        allidx = np.concatenate(blocks)
        if not np.array_equal(np.sort(allidx), np.arange(allidx.size)):
            raise ValidationError("blocks must be a disjoint cover of 0..n-1")

    @property
    def k(self) -> int:
        return len(self.blocks)

    @property
    def n(self) -> int:
        return int(sum(b.size for b in self.blocks))

    @property
    def sizes(self) -> list[int]:
        return [int(b.size) for b in self.blocks]

    def labels(self) -> np.ndarray:
        """Block number (1-based) of every row, aligned with dataset order."""
        out = np.empty(self.n, dtype=np.int64)
        for i, b in enumerate(self.blocks):
            out[b] = i + 1
        return out

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        labels = np.asarray(labels)
        uniq = sorted(np.unique(labels).tolist())
        return cls(tuple(np.flatnonzero(labels == u) for u in uniq))

    def reordered(self, order) -> "Partition":
        order = [int(i) for i in order]
        if sorted(order) != list(range(self.k)):
            raise ValidationError(f"block order must be a permutation of 0..{self.k - 1}")
        return Partition(tuple(self.blocks[i] for i in order))


def partition_dataset(ds, k: int, strategy: str = "random", seed=0) -> Partition:
    """Split the rows of ``ds`` into ``k`` ordered blocks.

    ``by-slice-labels`` copies the dataset's slice labels (block order follows
    label order); ``random`` deals a seeded permutation into balanced blocks;
    ``round-robin-sorted`` sorts rows lexicographically and deals them out
    cyclically so every block spans the domain.
    """
    n = ds.n
    if k < 1 or k > n:
        raise ValidationError(f"need 1 <= k <= n, got k={k}, n={n}")
    if strategy == "by-slice-labels":
        if ds.slice_of is None:
            raise ValidationError("dataset carries no slice labels")
        part = Partition.from_labels(ds.slice_of)
        if part.k != k:
            raise ValidationError(f"dataset has {part.k} slices, asked for k={k}")
        return part
    if strategy == "random":
        perm = make_rng(seed).permutation(n)
        return Partition(tuple(np.sort(chunk) for chunk in np.array_split(perm, k)))
    if strategy == "round-robin-sorted":
        order = np.lexsort(ds.X.T[::-1])
        return Partition(tuple(np.sort(order[i::k]) for i in range(k)))
    raise ValidationError(f"unknown partition strategy {strategy!r}")
