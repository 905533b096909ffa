"""Row-block partitions and block sampling schedules.

A :class:`SamplePlan` splits the m row indices into M disjoint blocks of
equal length ell (the index-level form of a partition of the identity).
A :class:`SampleSchedule` maps the 1-based step counter k to a 1-based
block index tau(k) under one of three strategies:

* ``cyclic``            tau(k) = ((k-1) mod M) + 1
* ``random_cyclic``     each epoch visits all blocks in a fresh random order
* ``random_replacement`` tau(k) uniform on {1..M}, independently per step

Randomness comes from numpy's PCG64 generator, which is seedable and
platform-independent; permutations are drawn by Fisher-Yates from the
generator stream, so a (seed, strategy) pair pins the whole schedule.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidArgumentError

STRATEGIES = ("cyclic", "random_cyclic", "random_replacement")


@dataclass(frozen=True)
class SamplePlan:
    """A disjoint equal-size cover of [0, m) by M ordered index blocks."""

    m: int
    M: int
    ell: int
    blocks: tuple
    strategy: str = "cyclic"
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise InvalidArgumentError(
                f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.M * self.ell != self.m:
            raise InvalidArgumentError(
                f"block count {self.M} x block size {self.ell} != {self.m}")
        if len(self.blocks) != self.M:
            raise InvalidArgumentError("wrong number of blocks")
        seen = np.concatenate(self.blocks)
        if any(len(b) != self.ell for b in self.blocks):
            raise InvalidArgumentError("blocks must all have length ell")
        if not np.array_equal(np.sort(seen), np.arange(self.m)):
            raise InvalidArgumentError(
                "blocks must be pairwise disjoint and cover [0, m) exactly")

    def block_rows(self, tau):
        """Row indices of 1-based block ``tau``."""
        return self.blocks[tau - 1]

    def schedule(self, seed=None):
        return SampleSchedule(self, self.seed if seed is None else seed)


def make_block_partition(m, M, strategy="cyclic", seed=0):
    """Partition [0, m) into M consecutive blocks of size m/M.

    M must divide m; unequal blocks are unsupported. Arbitrary partitions
    can be supplied to :class:`SamplePlan` directly and are validated
    against the disjoint-cover invariant.
    """
    m, M = int(m), int(M)
    if m <= 0 or M <= 0:
        raise InvalidArgumentError("m and M must be positive")
    if m % M != 0:
        raise InvalidArgumentError(f"block count {M} does not divide m={m}")
    ell = m // M
    blocks = tuple(np.arange(j * ell, (j + 1) * ell) for j in range(M))
    return SamplePlan(m=m, M=M, ell=ell, blocks=blocks,
                      strategy=strategy, seed=seed)


def _fisher_yates(rng, M):
    """Random permutation of 1..M drawn front-to-back from the stream."""
    perm = np.arange(1, M + 1)
    for i in range(M - 1):
        j = i + int(rng.integers(0, M - i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


class SampleSchedule:
    """Reproducible sequence tau(1), tau(2), ... of 1-based block indices.

    Entries are generated lazily and cached, so a schedule can be shared
    once materialized for a horizon.
    """

    def __init__(self, plan, seed=None):
        self.plan = plan
        self.strategy = plan.strategy
        self.seed = plan.seed if seed is None else int(seed)
        self._rng = np.random.Generator(np.random.PCG64(self.seed))
        self._cache = []

    def tau(self, k):
        """Block index for step k (k >= 1)."""
        if k < 1:
            raise InvalidArgumentError("step counter k starts at 1")
        M = self.plan.M
        while len(self._cache) < k:
            if self.strategy == "cyclic":
                self._cache.append(len(self._cache) % M + 1)
            elif self.strategy == "random_replacement":
                self._cache.append(int(self._rng.integers(0, M)) + 1)
            else:
                self._cache.extend(_fisher_yates(self._rng, M))
        return self._cache[k - 1]

    def __getitem__(self, k):
        return self.tau(k)

    def prefix(self, count):
        """tau(1..count) as a list."""
        self.tau(count)
        return list(self._cache[:count])


def next_block(schedule, k):
    """tau(k) of a schedule; thin functional alias for :meth:`SampleSchedule.tau`."""
    return schedule.tau(k)
