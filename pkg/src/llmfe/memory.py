"""Island-structured memory of scored programs.

Programs live on independent islands, grouped into clusters by a rounded
score signature. Demonstration sampling picks a cluster with a Boltzmann
weight over mean cluster scores, under a temperature that decays with the
island's registration count, then a uniform member. Admission compares a
candidate against the island's best score; ties are admitted by default.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .evaluation import Score
from .sandbox import FeatureProgram, Provenance

logger = logging.getLogger(__name__)

SIGNATURE_DECIMALS = 6

ADMIT_ISLAND = "island"
ADMIT_GLOBAL = "global"


@dataclass(frozen=True)
class BoltzmannParams:
    """Temperature schedule for cluster sampling.

    tau(u) = t0 * (1 - (u mod period) / period), so the schedule restarts at
    t0 each period and never reaches zero.
    """

    t0: float = 0.1
    period: int = 10_000

    def __post_init__(self):
        if self.t0 <= 0 or self.period <= 0:
            raise ValueError(f"nonpositive Boltzmann parameter: {self}")


def temperature(u: int, params: BoltzmannParams = BoltzmannParams()) -> float:
    if u < 0:
        raise ValueError(f"registration count must be >= 0, got {u}")
    return params.t0 * (1.0 - (u % params.period) / params.period)


def boltzmann_probabilities(scores, tau: float) -> np.ndarray:
    """Softmax of scores / tau, max-shifted so large scores cannot overflow."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("no scores to sample from")
    logits = scores / tau
    logits = logits - logits.max()
    weights = np.exp(logits)
    probs = weights / weights.sum()
    # renormalize so the probabilities sum to 1 exactly despite rounding
    return probs / probs.sum()


def signature(score: Score) -> float:
    if score.disqualified or score.value is None:
        raise ValueError("disqualified scores have no signature")
    return round(score.value, SIGNATURE_DECIMALS)


@dataclass(frozen=True)
class ScoredProgram:
    """A program paired with its validation score and buffer admission id."""

    program: FeatureProgram
    score: Score
    admission_seq: int = -1

    def identity(self) -> str:
        return self.program.source_hash()


@dataclass
class Cluster:
    key: float
    members: list[ScoredProgram] = field(default_factory=list)

    def mean_score(self) -> float:
        return float(np.mean([m.score.value for m in self.members]))


@dataclass
class Island:
    island_id: int
    clusters: dict[float, Cluster] = field(default_factory=dict)
    admitted_count: int = 0  # programs registered since init; drives the temperature
    best: ScoredProgram | None = None

    def members(self) -> list[ScoredProgram]:
        return [m for c in self.clusters.values() for m in c.members]

    def _place(self, entry: ScoredProgram) -> None:
        key = signature(entry.score)
        self.clusters.setdefault(key, Cluster(key)).members.append(entry)
        if self.best is None or entry.score.ordering > self.best.score.ordering:
            self.best = entry

    def sample_cluster(self, rng: np.random.Generator, params: BoltzmannParams) -> Cluster:
        clusters = list(self.clusters.values())
        tau = temperature(self.admitted_count, params)
        probs = boltzmann_probabilities([c.mean_score() for c in clusters], tau)
        return clusters[rng.choice(len(clusters), p=probs)]

    def sample_programs(
        self, k: int, rng: np.random.Generator, params: BoltzmannParams
    ) -> list[ScoredProgram]:
        """k draws of (cluster, then uniform member), deduplicated by program.

        Redraws a bounded number of times to avoid duplicates, then allows
        them; the result is sorted ascending by score.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        picks: list[ScoredProgram] = []
        seen: set[str] = set()
        for _ in range(max(16, 4 * k)):
            if len(picks) == k:
                break
            cluster = self.sample_cluster(rng, params)
            entry = cluster.members[rng.integers(len(cluster.members))]
            if entry.identity() not in seen:
                seen.add(entry.identity())
                picks.append(entry)
        while len(picks) < k:
            cluster = self.sample_cluster(rng, params)
            picks.append(cluster.members[rng.integers(len(cluster.members))])
        picks.sort(key=lambda e: (e.score.ordering, e.admission_seq))
        return picks


class MemoryBuffer:
    """m islands plus a global best, with configurable admission gating."""

    def __init__(
        self,
        islands: list[Island],
        params: BoltzmannParams = BoltzmannParams(),
        admission: str = ADMIT_ISLAND,
        strict: bool = False,
        next_seq: int = 0,
        global_best: ScoredProgram | None = None,
    ):
        if admission not in (ADMIT_ISLAND, ADMIT_GLOBAL):
            raise ValueError(f"admission must be island or global, got {admission!r}")
        self.islands = islands
        self.params = params
        self.admission = admission
        self.strict = strict
        self._next_seq = next_seq
        self._global_best = global_best

    @classmethod
    def init(
        cls,
        seed_program: FeatureProgram,
        seed_score: Score,
        m: int,
        params: BoltzmannParams = BoltzmannParams(),
        admission: str = ADMIT_ISLAND,
        strict: bool = False,
    ) -> "MemoryBuffer":
        """Fresh buffer: every island holds a copy of the seed, counters at zero."""
        if m < 1:
            raise ValueError(f"need at least one island, got {m}")
        if seed_score.disqualified:
            raise ValueError("seed program must carry a valid score")
        buf = cls([], params=params, admission=admission, strict=strict)
        for i in range(m):
            island = Island(island_id=i)
            entry = ScoredProgram(
                program=replace(
                    seed_program,
                    provenance=Provenance(island_id=i, iteration=0, parent_ids=()),
                ),
                score=seed_score,
                admission_seq=buf._take_seq(),
            )
            island._place(entry)
            if buf._global_best is None:
                buf._global_best = entry
            buf.islands.append(island)
        return buf

    def _take_seq(self) -> int:
        seq = self._next_seq
        self._next_seq += 1
        return seq

    @property
    def n_islands(self) -> int:
        return len(self.islands)

    def sample_island(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.n_islands))

    def sample_demonstrations(
        self, island_id: int, k: int, rng: np.random.Generator
    ) -> list[ScoredProgram]:
        return self.islands[island_id].sample_programs(k, rng, self.params)

    def register(self, island_id: int, program: FeatureProgram, score: Score) -> bool:
        """Offer a candidate to an island; True if admitted.

        The candidate must carry a valid score. Admission compares against
        the island best (or the global best in global mode); equal scores
        are admitted unless strict. A rejected candidate leaves the buffer
        untouched.
        """
        if score.disqualified:
            raise ValueError("disqualified programs cannot be registered")
        island = self.islands[island_id]
        reference = self._global_best if self.admission == ADMIT_GLOBAL else island.best
        bar = reference.score.ordering
        admitted = score.ordering > bar if self.strict else score.ordering >= bar
        if not admitted:
            return False
        entry = ScoredProgram(program=program, score=score, admission_seq=self._take_seq())
        island._place(entry)
        island.admitted_count += 1
        # global best moves only on strict improvement, so ties keep the earliest
        if score.ordering > self._global_best.score.ordering:
            self._global_best = entry
        return True

    def global_best(self) -> ScoredProgram:
        return self._global_best

    def all_members(self) -> list[ScoredProgram]:
        return [m for island in self.islands for m in island.members()]

    # --- persistence ---------------------------------------------------

    def to_snapshot(self) -> dict:
        def entry_dict(e: ScoredProgram) -> dict:
            prov = e.program.provenance
            return {
                "admission_seq": e.admission_seq,
                "score": {
                    "value": e.score.value,
                    "raw_metric": e.score.raw_metric,
                    "disqualified": e.score.disqualified,
                    "reason": e.score.reason,
                },
                "program": {
                    "source": e.program.source,
                    "function_name": e.program.function_name,
                    "version": e.program.version,
                    "provenance": None
                    if prov is None
                    else {
                        "island_id": prov.island_id,
                        "iteration": prov.iteration,
                        "parent_ids": list(prov.parent_ids),
                    },
                },
            }

        return {
            "params": {"t0": self.params.t0, "period": self.params.period},
            "admission": self.admission,
            "strict": self.strict,
            "next_seq": self._next_seq,
            "global_best_seq": self._global_best.admission_seq,
            "islands": [
                {
                    "island_id": island.island_id,
                    "admitted_count": island.admitted_count,
                    "best_seq": island.best.admission_seq,
                    "clusters": [
                        {"signature": c.key, "members": [entry_dict(m) for m in c.members]}
                        for c in island.clusters.values()
                    ],
                }
                for island in self.islands
            ],
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "MemoryBuffer":
        def entry_from(d: dict) -> ScoredProgram:
            p = d["program"]
            prov = p["provenance"]
            return ScoredProgram(
                program=FeatureProgram(
                    source=p["source"],
                    function_name=p["function_name"],
                    version=p["version"],
                    provenance=None
                    if prov is None
                    else Provenance(
                        island_id=prov["island_id"],
                        iteration=prov["iteration"],
                        parent_ids=tuple(prov["parent_ids"]),
                    ),
                ),
                score=Score(**d["score"]),
                admission_seq=d["admission_seq"],
            )

        buf = cls(
            [],
            params=BoltzmannParams(**snap["params"]),
            admission=snap["admission"],
            strict=snap["strict"],
            next_seq=snap["next_seq"],
        )
        by_seq: dict[int, ScoredProgram] = {}
        for isl in snap["islands"]:
            island = Island(island_id=isl["island_id"], admitted_count=isl["admitted_count"])
            for c in isl["clusters"]:
                cluster = Cluster(key=c["signature"])
                for m in c["members"]:
                    entry = entry_from(m)
                    cluster.members.append(entry)
                    by_seq[entry.admission_seq] = entry
                island.clusters[cluster.key] = cluster
            island.best = by_seq[isl["best_seq"]]
            buf.islands.append(island)
        buf._global_best = by_seq[snap["global_best_seq"]]
        return buf

    def save(self, path: str | Path) -> None:
        Path(path).write_text(snapshot_text(self))

    @classmethod
    def load(cls, path: str | Path) -> "MemoryBuffer":
        return cls.from_snapshot(json.loads(Path(path).read_text()))


def snapshot_text(buffer: MemoryBuffer) -> str:
    return json.dumps(buffer.to_snapshot(), indent=2, sort_keys=True) + "\n"
