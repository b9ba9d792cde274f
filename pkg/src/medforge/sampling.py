"""Department-distribution extraction and seeded deterministic sampling.

All randomness flows through :class:`SeededRng`: a Mersenne Twister core
(``random.Random``) consumed only through ``getrandbits`` plus rejection
sampling, with selection and shuffling implemented here (Fisher-Yates,
sorted-index draws). That pins the byte-level stream to this module rather
than to stdlib implementation details, so a corpus built from a seed is
reproducible across platforms and Python versions.

Seed splitting: ``SeededRng.derive(label)`` hashes ``"{seed}:{label}"``
with SHA-256 and takes the first 8 bytes as the child seed, giving every
pipeline stage an independent, auditable stream from one top-level seed.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, TypeVar

from .datamodel import DepartmentDistribution
from .errors import StratumShortfallError, UnknownDepartmentError
from .taxonomy import DepartmentTaxonomy

T = TypeVar("T")


class SeededRng:
    """Deterministic random stream with documented semantics."""

    def __init__(self, seed: int):
        self.seed = seed
        self._rng = random.Random(seed)

    def derive(self, label: str) -> "SeededRng":
        digest = hashlib.sha256(f"{self.seed}:{label}".encode("utf-8")).digest()
        return SeededRng(int.from_bytes(digest[:8], "big"))

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling on getrandbits."""
        if n <= 0:
            raise ValueError("n must be positive")
        bits = n.bit_length()
        while True:
            value = self._rng.getrandbits(bits)
            if value < n:
                return value

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, high index down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, population: int, k: int) -> list[int]:
        """k distinct indices from range(population), ascending.

        Partial Fisher-Yates over the index list, then sorted, so the
        caller can select without replacement while preserving pool order.
        """
        if k > population:
            raise ValueError(f"cannot draw {k} from population of {population}")
        indices = list(range(population))
        for i in range(k):
            j = i + self.randbelow(population - i)
            indices[i], indices[j] = indices[j], indices[i]
        return sorted(indices[:k])

    def choice(self, items: Sequence[T]) -> T:
        return items[self.randbelow(len(items))]


@dataclass(frozen=True)
class SamplePlan:
    """Per-department quota for one stratified draw."""

    per_department_counts: Mapping[str, int]
    total: int
    seed: int

    def __post_init__(self):
        if sum(self.per_department_counts.values()) != self.total:
            raise ValueError("per-department counts do not sum to total")

    def to_record(self) -> dict:
        return {
            "per_department_counts": {k: self.per_department_counts[k] for k in sorted(self.per_department_counts)},
            "total": self.total,
            "seed": self.seed,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "SamplePlan":
        return cls(
            per_department_counts=dict(rec["per_department_counts"]),
            total=int(rec["total"]),
            seed=int(rec["seed"]),
        )


def extract_department_distribution(
    labels: Sequence[str], taxonomy: DepartmentTaxonomy
) -> DepartmentDistribution:
    """Tally department labels at their most specific leaf and normalize.

    ``labels`` may be leaf ids or slash-separated label paths; each is
    resolved to a leaf before counting. Unknown or non-leaf labels abort
    with the full offending list.
    """
    if not labels:
        raise ValueError("cannot extract a distribution from zero records")
    tally: dict[str, int] = {}
    bad: list[str] = []
    for label in labels:
        try:
            leaf = taxonomy.resolve_leaf(label)
        except UnknownDepartmentError:
            bad.append(label)
            continue
        tally[leaf] = tally.get(leaf, 0) + 1
    if bad:
        raise UnknownDepartmentError(bad)
    total = len(labels)
    return DepartmentDistribution(weights={dept: count / total for dept, count in sorted(tally.items())})


def plan_stratified(dist: DepartmentDistribution, total: int, seed: int) -> SamplePlan:
    """Largest-remainder apportionment of ``total`` by the distribution.

    Every department gets floor(total * weight); leftover units go to the
    largest fractional remainders, remainder ties broken by a seeded
    shuffle of department order. Counts always sum to exactly ``total``.
    """
    if total < 1:
        raise ValueError("total must be >= 1")
    departments = sorted(dist.weights)
    rng = SeededRng(seed).derive("plan_stratified")
    tiebreak = list(range(len(departments)))
    rng.shuffle(tiebreak)

    counts: dict[str, int] = {}
    remainders: list[tuple[float, int, str]] = []
    for position, dept in enumerate(departments):
        exact = dist.weights[dept] * total
        base = math.floor(exact)
        counts[dept] = base
        remainders.append((exact - base, tiebreak[position], dept))
    leftover = total - sum(counts.values())
    remainders.sort(key=lambda item: (-item[0], item[1]))
    for _, _, dept in remainders[:leftover]:
        counts[dept] += 1
    return SamplePlan(per_department_counts=counts, total=total, seed=seed)


def draw_uniform(pool: Sequence[T], n: int, seed: int) -> list[T]:
    """n items without replacement, deterministic, preserving pool order."""
    if n > len(pool):
        raise ValueError(f"pool has {len(pool)} items, cannot draw {n}")
    rng = SeededRng(seed).derive("draw_uniform")
    return [pool[i] for i in rng.sample_indices(len(pool), n)]


def draw_stratified(
    pool: Sequence[T],
    plan: SamplePlan,
    seed: int,
    department_of: Callable[[T], str],
) -> list[T]:
    """Per-department quotas from the plan, deterministic, pool-ordered.

    Raises StratumShortfallError naming the first department (in sorted
    order) whose stratum cannot cover its quota.
    """
    by_dept: dict[str, list[int]] = {}
    for idx, item in enumerate(pool):
        by_dept.setdefault(department_of(item), []).append(idx)

    for dept in sorted(plan.per_department_counts):
        want = plan.per_department_counts[dept]
        have = len(by_dept.get(dept, []))
        if want > have:
            raise StratumShortfallError(dept, want, have)

    rng = SeededRng(seed).derive("draw_stratified")
    chosen: list[int] = []
    for dept in sorted(plan.per_department_counts):
        want = plan.per_department_counts[dept]
        if want == 0:
            continue
        stratum = by_dept[dept]
        sub = rng.derive(dept)
        chosen.extend(stratum[i] for i in sub.sample_indices(len(stratum), want))
    return [pool[i] for i in sorted(chosen)]


def apportion_capped(
    weights: Mapping[str, float],
    total: int,
    caps: Mapping[str, int],
    seed: int,
) -> tuple[dict[str, int], list[dict]]:
    """Largest-remainder apportionment with per-key capacity caps.

    Quota overflowing a key's cap is redistributed proportionally among
    keys with spare capacity. Returns (counts, warnings); each warning
    names the capped key and the deficit that was moved. Raises
    StratumShortfallError when total capacity cannot cover ``total``.
    """
    capacity_total = sum(min(caps.get(k, 0), total) for k in weights)
    if capacity_total < total:
        worst = min(weights, key=lambda k: caps.get(k, 0))
        raise StratumShortfallError(worst, total, capacity_total)

    active = dict(weights)
    counts = {k: 0 for k in weights}
    warnings: list[dict] = []
    remaining = total
    round_no = 0
    while remaining > 0:
        norm = math.fsum(active.values())
        sub_dist = DepartmentDistribution(weights={k: w / norm for k, w in active.items()})
        plan = plan_stratified(sub_dist, remaining, seed + round_no)
        remaining = 0
        for key, quota in plan.per_department_counts.items():
            room = caps.get(key, 0) - counts[key]
            take = min(quota, room)
            counts[key] += take
            if take < quota:
                warnings.append({"department": key, "deficit_moved": quota - take})
                remaining += quota - take
        active = {k: w for k, w in active.items() if counts[k] < caps.get(k, 0)}
        round_no += 1
    return counts, warnings


def subsample_targets(
    original_sizes: Mapping[str, int],
    fraction: float = 0.1,
    explicit: Mapping[str, int] | None = None,
) -> dict[str, int]:
    """Per-subset draw sizes: explicit counts win, otherwise the fraction
    of the original size rounded half-up."""
    targets: dict[str, int] = {}
    for subset, size in original_sizes.items():
        if explicit and subset in explicit:
            targets[subset] = explicit[subset]
        else:
            targets[subset] = int(math.floor(size * fraction + 0.5))
    return targets


def total_variation(p: Mapping[str, float], q: Mapping[str, float]) -> float:
    """TV distance between two distributions over a shared label space."""
    keys = set(p) | set(q)
    return 0.5 * math.fsum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)
