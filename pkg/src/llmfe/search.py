"""The evolutionary search loop and the experiment protocol around it.

Each iteration samples an island, builds a prompt from that island's
demonstrations, asks the backend for a batch of candidate programs, scores
each in the sandbox, and registers improvements back onto the island. The
protocol repeats the whole search over several seeded splits and compares a
top-m ensemble of discovered programs against the untransformed baseline.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .backend import BackendUnreachable, ParseFailure, parse_program
from .dataset import Dataset, SplitSpec, anonymize, split
from .evaluation import (
    ACCURACY,
    GRADIENT_BOOSTED_TREES,
    MODEL_KINDS,
    Evaluator,
    PredictionModel,
    Score,
    accuracy,
    label_scale,
    metric_for,
    n_rmse,
    preprocess,
)
from .memory import ADMIT_GLOBAL, ADMIT_ISLAND, BoltzmannParams, MemoryBuffer, ScoredProgram
from .prompt import PromptSpec, build_prompt
from .sandbox import ExecutionLimits, FeatureProgram, Provenance, execute, identity_program

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class AllProgramsFailed(RuntimeError):
    """Every ensemble member was disqualified on the final feature tables."""


@dataclass(frozen=True)
class SearchConfig:
    """Everything a search run depends on, seeds included."""

    model_kind: str = GRADIENT_BOOSTED_TREES
    metric: str | None = None  # default: chosen by task kind
    islands: int = 3
    batch_size: int = 3
    demonstrations: int = 2
    sample_budget: int = 20
    iterations: int | None = None  # default: ceil(budget / batch), last batch truncated
    llm_temperature: float = 0.8
    split_seed: int = 0
    search_seed: int = 0
    test_fraction: float = 0.2
    val_fraction: float = 0.2
    wall_time_s: float = 30.0
    memory_bytes: int = 2 * 1024**3
    n_example_rows: int = 10
    no_domain_knowledge: bool = False
    no_data_examples: bool = False
    no_evolution: bool = False
    admission: str = ADMIT_ISLAND
    strict_admission: bool = False

    def __post_init__(self):
        for name in ("islands", "batch_size", "demonstrations", "sample_budget"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.iterations is not None:
            if self.iterations < 1:
                raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
            if self.iterations * self.batch_size > self.sample_budget:
                raise ConfigError(
                    f"{self.iterations} iterations x {self.batch_size} completions "
                    f"exceed the sample budget {self.sample_budget}"
                )
        if self.batch_size > self.sample_budget:
            raise ConfigError("batch_size exceeds the sample budget")
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model_kind!r}")
        if self.admission not in (ADMIT_ISLAND, ADMIT_GLOBAL):
            raise ConfigError(f"admission must be island or global, got {self.admission!r}")
        if not 0.0 < self.test_fraction < 1.0 or not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("split fractions must be in (0, 1)")

    def batch_plan(self) -> list[int]:
        """Per-iteration completion counts; the total never exceeds the budget."""
        if self.iterations is not None:
            return [self.batch_size] * self.iterations
        plan = []
        remaining = self.sample_budget
        for _ in range(math.ceil(self.sample_budget / self.batch_size)):
            take = min(self.batch_size, remaining)
            if take == 0:
                break
            plan.append(take)
            remaining -= take
        return plan

    def limits(self) -> ExecutionLimits:
        return ExecutionLimits(wall_time_s=self.wall_time_s, memory_bytes=self.memory_bytes)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(
            test_fraction=self.test_fraction,
            val_fraction=self.val_fraction,
            seed=self.split_seed,
        )

    def prompt_spec(self) -> PromptSpec:
        return PromptSpec(
            k=self.demonstrations,
            n_example_rows=self.n_example_rows,
            include_domain_knowledge=not self.no_domain_knowledge,
            include_data_examples=not self.no_data_examples,
        )


STATUS_SCORED = "scored"
STATUS_DISQUALIFIED = "disqualified"
STATUS_PARSE_FAILURE = "parse_failure"


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    island_id: int
    variant: str
    requested: int
    prompt_text: str
    demo_hashes: tuple[str, ...]
    demo_parent_ids: tuple[int, ...]

    def to_record(self) -> dict:
        d = asdict(self)
        d["demo_hashes"] = list(self.demo_hashes)
        d["demo_parent_ids"] = list(self.demo_parent_ids)
        d["kind"] = "iteration"
        return d


@dataclass(frozen=True)
class CandidateRecord:
    iteration: int
    island_id: int
    batch_index: int
    status: str
    reason: str | None
    source_hash: str | None
    score: float | None
    raw_metric: float | None
    admitted: bool
    best_score_after: float
    elapsed: float

    def to_record(self) -> dict:
        d = asdict(self)
        d["kind"] = "candidate"
        return d


@dataclass
class SearchResult:
    config: SearchConfig
    seed_entry: ScoredProgram
    buffer: MemoryBuffer
    iterations: list[IterationRecord] = field(default_factory=list)
    candidates: list[CandidateRecord] = field(default_factory=list)
    completions_used: int = 0
    aborted: str | None = None

    @property
    def best(self) -> ScoredProgram:
        return self.buffer.global_best()

    @property
    def base_score(self) -> Score:
        return self.seed_entry.score

    def trace_records(self) -> list[dict]:
        """Interleaved iteration and candidate records, in event order."""
        records: list[dict] = []
        by_iter: dict[int, list[CandidateRecord]] = {}
        for cand in self.candidates:
            by_iter.setdefault(cand.iteration, []).append(cand)
        for it in self.iterations:
            records.append(it.to_record())
            for cand in by_iter.get(it.iteration, []):
                records.append(cand.to_record())
        return records


_VOLATILE_TRACE_FIELDS = ("elapsed",)


def canonical_trace(records: list[dict]) -> str:
    """Deterministic serialization of a trace: volatile timing fields dropped."""
    lines = []
    for record in records:
        clean = {k: v for k, v in record.items() if k not in _VOLATILE_TRACE_FIELDS}
        lines.append(json.dumps(clean, sort_keys=True))
    return "\n".join(lines) + "\n"


def run(
    cfg: SearchConfig,
    ds: Dataset,
    backend,
    evaluator: Evaluator | None = None,
) -> SearchResult:
    """One full search: split, seed the buffer, iterate prompt/sample/score.

    Deterministic given (cfg, ds, deterministic backend). If the backend
    becomes unreachable the partial result is returned with the abort
    reason recorded.
    """
    if cfg.no_domain_knowledge:
        ds = anonymize(ds)
    train, val, _ = split(ds, cfg.split_spec())
    evaluator = evaluator or Evaluator(
        model_kind=cfg.model_kind, metric=cfg.metric, limits=cfg.limits()
    )
    rng = np.random.default_rng(cfg.search_seed)
    model_seed = cfg.split_seed

    seed_program = identity_program()
    seed_score = evaluator.score(seed_program, train, val, model_seed)
    if seed_score.disqualified:
        raise RuntimeError(f"seed program disqualified: {seed_score.reason}")
    buffer = MemoryBuffer.init(
        seed_program,
        seed_score,
        m=cfg.islands,
        params=BoltzmannParams(),
        admission=cfg.admission,
        strict=cfg.strict_admission,
    )
    seed_entry = buffer.islands[0].members()[0]
    result = SearchResult(config=cfg, seed_entry=seed_entry, buffer=buffer)
    prompt_spec = cfg.prompt_spec()

    for iteration, batch in enumerate(cfg.batch_plan(), start=1):
        island_id = buffer.sample_island(rng)
        if cfg.no_evolution:
            demos = [seed_entry]
        else:
            demos = buffer.sample_demonstrations(island_id, cfg.demonstrations, rng)
        # example rows come from the train split only; val and test stay unseen
        prompt = build_prompt(train, demos, prompt_spec, rng)
        try:
            completions = backend.sample(prompt.text, batch)
        except BackendUnreachable as exc:
            logger.warning("backend unreachable at iteration %d: %s", iteration, exc)
            result.aborted = str(exc)
            break
        result.completions_used += batch
        result.iterations.append(
            IterationRecord(
                iteration=iteration,
                island_id=island_id,
                variant=prompt.variant,
                requested=batch,
                prompt_text=prompt.text,
                demo_hashes=tuple(d.identity() for d in demos),
                demo_parent_ids=tuple(d.admission_seq for d in demos),
            )
        )
        for batch_index, completion in enumerate(completions):
            parsed = parse_program(completion, expected_version=len(demos))
            if isinstance(parsed, ParseFailure):
                result.candidates.append(
                    CandidateRecord(
                        iteration=iteration,
                        island_id=island_id,
                        batch_index=batch_index,
                        status=STATUS_PARSE_FAILURE,
                        reason=parsed.reason,
                        source_hash=None,
                        score=None,
                        raw_metric=None,
                        admitted=False,
                        best_score_after=buffer.global_best().score.value,
                        elapsed=0.0,
                    )
                )
                continue
            program = replace(
                parsed,
                provenance=Provenance(
                    island_id=island_id,
                    iteration=iteration,
                    parent_ids=tuple(d.admission_seq for d in demos),
                ),
            )
            started = time.monotonic()
            score = evaluator.score(program, train, val, model_seed)
            elapsed = time.monotonic() - started
            admitted = False
            if score.disqualified:
                status, reason = STATUS_DISQUALIFIED, score.reason
            else:
                status, reason = STATUS_SCORED, None
                admitted = buffer.register(island_id, program, score)
            result.candidates.append(
                CandidateRecord(
                    iteration=iteration,
                    island_id=island_id,
                    batch_index=batch_index,
                    status=status,
                    reason=reason,
                    source_hash=program.source_hash(),
                    score=score.value,
                    raw_metric=score.raw_metric,
                    admitted=admitted,
                    best_score_after=buffer.global_best().score.value,
                    elapsed=elapsed,
                )
            )
    return result


def _rank_key(entry: ScoredProgram) -> tuple[int, float, int]:
    """Best first: valid before disqualified, higher score, earlier admission."""
    valid, value = entry.score.ordering
    return (-valid, -value, entry.admission_seq)


def top_programs(buffer: MemoryBuffer, m: int) -> list[ScoredProgram]:
    """The m highest-scoring distinct programs in the buffer.

    Distinct by source; score ties break toward the earliest admission. If
    fewer than m distinct programs exist, all of them are returned.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    by_identity: dict[str, ScoredProgram] = {}
    for entry in buffer.all_members():
        kept = by_identity.get(entry.identity())
        if kept is None or entry.admission_seq < kept.admission_seq:
            by_identity[entry.identity()] = entry
    return sorted(by_identity.values(), key=_rank_key)[:m]


@dataclass(frozen=True)
class EnsembleMember:
    entry: ScoredProgram
    test_metric: float


@dataclass(frozen=True)
class EnsembleResult:
    predictions: np.ndarray
    members: tuple[EnsembleMember, ...]
    dropped: tuple[str, ...]  # identities of programs that failed on test


def ensemble_predict(
    programs: list[ScoredProgram],
    model_kind: str,
    train: Dataset,
    test: Dataset,
    seed: int = 0,
    limits: ExecutionLimits = ExecutionLimits(),
) -> EnsembleResult:
    """Fit one model per program and combine test predictions.

    Classification aggregates by majority vote, ties resolved by the vote
    of the highest-validation-score member; regression averages. Programs
    that disqualify on either table are dropped; if none survive,
    AllProgramsFailed.
    """
    if not programs:
        raise ValueError("no programs to ensemble")
    metric = metric_for(train.task.kind)
    label_name = train.labels.name
    ordered = sorted(programs, key=_rank_key)
    members: list[EnsembleMember] = []
    predictions: list[np.ndarray] = []
    dropped: list[str] = []
    for entry in ordered:
        out_train = execute(entry.program, train.features, limits, label_name)
        out_test = execute(entry.program, test.features, limits, label_name)
        if not (out_train.ok and out_test.ok):
            dropped.append(entry.identity())
            continue
        try:
            x_train, x_test = preprocess(out_train.table, out_test.table)
            model = PredictionModel(model_kind, train.task.is_classification, seed)
            model.fit(x_train, train.labels)
            preds = model.predict(x_test)
        except Exception as exc:
            logger.debug("ensemble member failed: %s", exc)
            dropped.append(entry.identity())
            continue
        if metric == ACCURACY:
            value = accuracy(test.labels, preds)
        else:
            value = n_rmse(test.labels, preds, label_scale(train.labels))
        members.append(EnsembleMember(entry=entry, test_metric=value))
        predictions.append(np.asarray(preds))
    if not members:
        raise AllProgramsFailed(f"all {len(programs)} programs failed on the final tables")
    if train.task.is_classification:
        combined = _majority_vote(predictions)
    else:
        combined = np.mean(np.vstack(predictions), axis=0)
    return EnsembleResult(
        predictions=combined, members=tuple(members), dropped=tuple(dropped)
    )


def _majority_vote(predictions: list[np.ndarray]) -> np.ndarray:
    """Row-wise plurality; ties go to the earliest (highest-scored) voter."""
    votes = np.vstack([p.astype(int) for p in predictions])
    n_rows = votes.shape[1]
    out = np.empty(n_rows, dtype=int)
    for i in range(n_rows):
        counts = np.bincount(votes[:, i])
        top = counts.max()
        tied = set(np.nonzero(counts == top)[0])
        for voter in range(votes.shape[0]):
            if votes[voter, i] in tied:
                out[i] = votes[voter, i]
                break
    return out


@dataclass(frozen=True)
class SplitOutcome:
    split_index: int
    split_seed: int
    search_seed: int
    base_metric: float
    llmfe_metric: float
    best_score: float
    ensemble_size: int
    fallback: bool = False  # base predictions used because every member failed


@dataclass
class ProtocolResult:
    dataset_name: str
    n_rows: int
    n_features: int
    metric: str
    direction: str  # "max" | "min"
    outcomes: list[SplitOutcome]
    results: list[SearchResult]
    aborted: str | None = None

    def _agg(self, values: list[float]) -> tuple[float, float]:
        arr = np.asarray(values, dtype=float)
        if arr.size == 0:
            return float("nan"), 0.0
        # sample std across splits, matching how repeated-split studies report
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return float(arr.mean()), std

    @property
    def base_mean_std(self) -> tuple[float, float]:
        return self._agg([o.base_metric for o in self.outcomes])

    @property
    def llmfe_mean_std(self) -> tuple[float, float]:
        return self._agg([o.llmfe_metric for o in self.outcomes])

    def summary(self) -> dict:
        base_mean, base_std = self.base_mean_std
        fe_mean, fe_std = self.llmfe_mean_std
        return {
            "dataset": self.dataset_name,
            "n_rows": self.n_rows,
            "n_features": self.n_features,
            "metric": self.metric,
            "direction": self.direction,
            "n_splits": len(self.outcomes),
            "base_mean": base_mean,
            "base_std": base_std,
            "llmfe_mean": fe_mean,
            "llmfe_std": fe_std,
        }


def _test_metric_base(
    model_kind: str, train: Dataset, test: Dataset, metric: str, seed: int
) -> float:
    x_train, x_test = preprocess(
        train.features.reset_index(drop=True), test.features.reset_index(drop=True)
    )
    model = PredictionModel(model_kind, train.task.is_classification, seed)
    model.fit(x_train, train.labels)
    preds = model.predict(x_test)
    if metric == ACCURACY:
        return accuracy(test.labels, preds)
    return n_rmse(test.labels, preds, label_scale(train.labels))


def run_protocol(cfg: SearchConfig, ds: Dataset, backend, n_splits: int = 5) -> ProtocolResult:
    """Repeat the search over n_splits seeded splits and compare against base.

    Split i uses split_seed + i and search_seed + i with a fresh backend,
    so reruns with a deterministic backend reproduce the summary exactly.
    """
    if n_splits < 1:
        raise ConfigError(f"n_splits must be >= 1, got {n_splits}")
    metric = cfg.metric or metric_for(ds.task.kind)
    direction = "max" if metric == ACCURACY else "min"
    work_ds = anonymize(ds) if cfg.no_domain_knowledge else ds
    outcomes: list[SplitOutcome] = []
    results: list[SearchResult] = []
    aborted = None
    for i in range(n_splits):
        cfg_i = replace(cfg, split_seed=cfg.split_seed + i, search_seed=cfg.search_seed + i)
        result = run(cfg_i, ds, backend.fresh())
        results.append(result)
        if result.aborted:
            aborted = result.aborted
            break
        train, _, test = split(work_ds, cfg_i.split_spec())
        model_seed = cfg_i.split_seed
        base_value = _test_metric_base(cfg.model_kind, train, test, metric, model_seed)
        chosen = top_programs(result.buffer, cfg.islands)
        try:
            ensemble = ensemble_predict(
                chosen, cfg.model_kind, train, test, model_seed, cfg.limits()
            )
            if metric == ACCURACY:
                fe_value = accuracy(test.labels, ensemble.predictions)
            else:
                fe_value = n_rmse(test.labels, ensemble.predictions, label_scale(train.labels))
            fallback = False
            size = len(ensemble.members)
        except AllProgramsFailed:
            logger.warning("split %d: every top program failed on test; using base", i)
            fe_value, fallback, size = base_value, True, 0
        outcomes.append(
            SplitOutcome(
                split_index=i,
                split_seed=cfg_i.split_seed,
                search_seed=cfg_i.search_seed,
                base_metric=base_value,
                llmfe_metric=fe_value,
                best_score=result.best.score.value,
                ensemble_size=size,
                fallback=fallback,
            )
        )
    return ProtocolResult(
        dataset_name=ds.name,
        n_rows=ds.n_rows,
        n_features=len(ds.feature_names),
        metric=metric,
        direction=direction,
        outcomes=outcomes,
        results=results,
        aborted=aborted,
    )
