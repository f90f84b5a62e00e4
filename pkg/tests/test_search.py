"""Search loop, ensembling, and the repeated-split protocol."""

import numpy as np
import pytest

from llmfe.backend import BackendUnreachable, ScriptedBackend
from llmfe.dataset import SplitSpec, split
from llmfe.evaluation import PredictionModel, Score, preprocess
from llmfe.memory import MemoryBuffer, ScoredProgram
from llmfe.sandbox import identity_program
from llmfe.search import (
    AllProgramsFailed,
    ConfigError,
    SearchConfig,
    _majority_vote,
    canonical_trace,
    ensemble_predict,
    run,
    run_protocol,
    top_programs,
)

from conftest import FAST_LIMITS, fenced, program

BODY_SUM = "    df = df.copy()\n    df['sum_x'] = df['x1'] + df['x2']\n    return df"
BODY_SQ = "    df = df.copy()\n    df['x3_sq'] = df['x3'] ** 2\n    return df"
BODY_PROD = "    df = df.copy()\n    df['x1x2'] = df['x1'] * df['x2']\n    return df"
BODY_COPY = "    return df.copy()"

SEPARABLE_SCRIPT = [
    [fenced(BODY_SQ), fenced(BODY_COPY)],
    [fenced(BODY_SUM), "no code in this reply"],
    [fenced(BODY_SUM), fenced(BODY_SQ, version=5)],
]


def small_config(**kwargs) -> SearchConfig:
    defaults = dict(
        batch_size=2,
        sample_budget=6,
        wall_time_s=FAST_LIMITS.wall_time_s,
        memory_bytes=FAST_LIMITS.memory_bytes,
        split_seed=0,
        search_seed=0,
    )
    defaults.update(kwargs)
    return SearchConfig(**defaults)


class TestConfig:
    def test_defaults_valid(self):
        cfg = SearchConfig()
        assert cfg.islands == 3
        assert cfg.batch_size == 3
        assert cfg.demonstrations == 2
        assert cfg.sample_budget == 20
        assert cfg.llm_temperature == 0.8

    def test_default_batch_plan_truncates_final(self):
        assert SearchConfig().batch_plan() == [3, 3, 3, 3, 3, 3, 2]
        assert sum(SearchConfig().batch_plan()) == 20

    def test_explicit_iterations_within_budget(self):
        cfg = SearchConfig(iterations=5)
        assert cfg.batch_plan() == [3, 3, 3, 3, 3]

    def test_iterations_exceeding_budget_rejected(self):
        with pytest.raises(ConfigError):
            SearchConfig(iterations=7, batch_size=3, sample_budget=20)

    def test_batch_larger_than_budget_rejected(self):
        with pytest.raises(ConfigError):
            SearchConfig(batch_size=30, sample_budget=20)

    def test_even_division_has_no_short_batch(self):
        assert SearchConfig(batch_size=5, sample_budget=20).batch_plan() == [5, 5, 5, 5]

    def test_bad_model_kind(self):
        with pytest.raises(ConfigError):
            SearchConfig(model_kind="linear")

    def test_bad_fractions(self):
        with pytest.raises(ConfigError):
            SearchConfig(test_fraction=0.0)

    def test_bad_admission(self):
        with pytest.raises(ConfigError):
            SearchConfig(admission="everything")


@pytest.fixture(scope="module")
def sep_outcome(separable_ds):
    cfg = SearchConfig(
        batch_size=2,
        sample_budget=6,
        wall_time_s=FAST_LIMITS.wall_time_s,
        memory_bytes=FAST_LIMITS.memory_bytes,
        split_seed=0,
        search_seed=0,
    )
    backend = ScriptedBackend(SEPARABLE_SCRIPT, sample_budget=6)
    result = run(cfg, separable_ds, backend)
    return cfg, backend, result


class TestRun:
    def test_finds_improvement(self, sep_outcome):
        _, _, result = sep_outcome
        assert result.base_score.value == pytest.approx(0.9)
        assert result.best.score.value == pytest.approx(1.0)
        assert result.aborted is None

    def test_budget_accounting(self, sep_outcome):
        cfg, backend, result = sep_outcome
        assert result.completions_used == sum(cfg.batch_plan()) == 6
        assert backend.budget.used == result.completions_used
        # every completion yields exactly one candidate record
        assert len(result.candidates) == result.completions_used
        assert result.completions_used <= cfg.sample_budget

    def test_best_trajectory_monotone(self, sep_outcome):
        _, _, result = sep_outcome
        trajectory = [c.best_score_after for c in result.candidates]
        assert all(a <= b for a, b in zip(trajectory, trajectory[1:]))
        assert trajectory[0] >= result.base_score.value

    def test_parse_failure_recorded_not_fatal(self, sep_outcome):
        _, _, result = sep_outcome
        failures = [c for c in result.candidates if c.status == "parse_failure"]
        assert len(failures) == 2  # prose reply and wrong function name
        reasons = {c.reason for c in failures}
        assert reasons == {"no_code_block", "wrong_function_name"}
        for c in failures:
            assert c.score is None and not c.admitted

    def test_island_isolation(self, sep_outcome):
        _, _, result = sep_outcome
        by_seq = {}
        for island in result.buffer.islands:
            for member in island.members():
                by_seq[member.admission_seq] = island.island_id
        for island in result.buffer.islands:
            for member in island.members():
                prov = member.program.provenance
                assert prov.island_id == island.island_id
                # every demonstration that led here lived on the same island
                for parent in prov.parent_ids:
                    assert by_seq[parent] == island.island_id

    def test_no_disqualified_in_buffer(self, sep_outcome):
        _, _, result = sep_outcome
        for member in result.buffer.all_members():
            assert not member.score.disqualified

    def test_iteration_records_complete(self, sep_outcome):
        cfg, _, result = sep_outcome
        assert [r.iteration for r in result.iterations] == [1, 2, 3]
        for record in result.iterations:
            assert record.requested == 2
            assert record.variant in ("basic", "complex_operators")
            assert record.prompt_text
            assert len(record.demo_hashes) == cfg.demonstrations
            per_iter = [c for c in result.candidates if c.iteration == record.iteration]
            assert len(per_iter) == record.requested
            assert all(c.island_id == record.island_id for c in per_iter)

    def test_trace_is_deterministic(self, sep_outcome, separable_ds):
        cfg, _, result = sep_outcome
        rerun = run(cfg, separable_ds, ScriptedBackend(SEPARABLE_SCRIPT, sample_budget=6))
        first = canonical_trace(result.trace_records())
        second = canonical_trace(rerun.trace_records())
        assert first == second
        assert "elapsed" not in first

    def test_different_search_seed_changes_trace(self, sep_outcome, separable_ds):
        cfg, _, result = sep_outcome
        other_cfg = small_config(search_seed=99)
        other = run(other_cfg, separable_ds, ScriptedBackend(SEPARABLE_SCRIPT, sample_budget=6))
        islands_a = [r.island_id for r in result.iterations]
        islands_b = [r.island_id for r in other.iterations]
        variants_a = [r.variant for r in result.iterations]
        variants_b = [r.variant for r in other.iterations]
        assert islands_a != islands_b or variants_a != variants_b


class TestRunModes:
    def test_no_evolution_demos_always_seed(self, separable_ds):
        script = [[fenced(BODY_SUM, version=1)], [fenced(BODY_SQ, version=1)]]
        cfg = small_config(batch_size=1, sample_budget=2, no_evolution=True)
        result = run(cfg, separable_ds, ScriptedBackend(script, sample_budget=2))
        seed_hash = result.seed_entry.identity()
        for record in result.iterations:
            assert record.demo_hashes == (seed_hash,)
            assert record.demo_parent_ids == (result.seed_entry.admission_seq,)
            # one seed demonstration, so completions must define version 1
            assert "def modify_features_v1" in record.prompt_text
        assert result.best.score.value == pytest.approx(1.0)

    def test_no_domain_knowledge_anonymizes(self, separable_ds):
        cfg = small_config(batch_size=1, sample_budget=1, no_domain_knowledge=True)
        script = [[fenced("    return df.copy()")]]
        result = run(cfg, separable_ds, ScriptedBackend(script, sample_budget=1))
        prompt = result.iterations[0].prompt_text
        for name in separable_ds.feature_names:
            assert name not in prompt
        assert separable_ds.metadata.task_description not in prompt

    def test_no_data_examples(self, separable_ds):
        cfg = small_config(batch_size=1, sample_budget=1, no_data_examples=True)
        script = [[fenced("    return df.copy()")]]
        result = run(cfg, separable_ds, ScriptedBackend(script, sample_budget=1))
        assert "Then Result is" not in result.iterations[0].prompt_text

    def test_backend_abort_returns_partial_result(self, separable_ds):
        class FlakyBackend:
            def __init__(self):
                self.calls = 0

            def sample(self, prompt, b):
                self.calls += 1
                if self.calls >= 2:
                    raise BackendUnreachable("gone")
                return [fenced(BODY_SQ)] * b

            def fresh(self):
                return FlakyBackend()

        cfg = small_config(batch_size=2, sample_budget=6)
        result = run(cfg, separable_ds, FlakyBackend())
        assert result.aborted == "gone"
        assert len(result.iterations) == 1
        assert result.completions_used == 2

    def test_disqualified_candidates_recorded(self, separable_ds):
        script = [[fenced('    raise ValueError("bad")'), fenced("    return df.head(3)")]]
        cfg = small_config(batch_size=2, sample_budget=2)
        result = run(cfg, separable_ds, ScriptedBackend(script, sample_budget=2))
        statuses = [c.status for c in result.candidates]
        assert statuses == ["disqualified", "disqualified"]
        reasons = [c.reason for c in result.candidates]
        assert any("runtime_error" in r for r in reasons)
        assert any("contract_violation" in r for r in reasons)
        # nothing entered the buffer beyond the three seed copies
        assert len(result.buffer.all_members()) == 3

    def test_regression_task(self, regression_ds):
        script = [[fenced(BODY_PROD)], [fenced(BODY_COPY)]]
        cfg = small_config(batch_size=1, sample_budget=2)
        result = run(cfg, regression_ds, ScriptedBackend(script, sample_budget=2))
        assert result.base_score.value == pytest.approx(-0.8508421416578448)
        # the product feature cuts normalized RMSE, so the signed score rises
        assert result.best.score.value > result.base_score.value
        assert result.best.score.raw_metric < result.base_score.raw_metric


def entry(body: str, value: float, seq: int) -> ScoredProgram:
    return ScoredProgram(program=program(body), score=Score(value, value), admission_seq=seq)


class TestTopPrograms:
    def test_ranked_and_distinct(self):
        buf = MemoryBuffer.init(identity_program(), Score(0.5, 0.5), m=2)
        buf.register(0, program("    return df * 2"), Score(0.9, 0.9))
        buf.register(1, program("    return df + 1"), Score(0.7, 0.7))
        top = top_programs(buf, 2)
        assert [e.score.value for e in top] == [0.9, 0.7]

    def test_duplicate_sources_collapse(self):
        buf = MemoryBuffer.init(identity_program(), Score(0.5, 0.5), m=3)
        # the seed sits on all three islands but counts once
        top = top_programs(buf, 5)
        assert len(top) == 1
        assert top[0].admission_seq == 0

    def test_ties_break_to_earliest(self):
        buf = MemoryBuffer.init(identity_program(), Score(0.5, 0.5), m=2)
        buf.register(0, program("    return df * 2"), Score(0.9, 0.9))
        buf.register(1, program("    return df + 1"), Score(0.9, 0.9))
        top = top_programs(buf, 2)
        assert [e.admission_seq for e in top] == [2, 3]

    def test_m_validation(self):
        buf = MemoryBuffer.init(identity_program(), Score(0.5, 0.5), m=1)
        with pytest.raises(ValueError):
            top_programs(buf, 0)


class TestMajorityVote:
    def test_plain_majority(self):
        votes = [np.array([0, 1, 2]), np.array([0, 1, 0]), np.array([1, 1, 0])]
        assert _majority_vote(votes).tolist() == [0, 1, 0]

    def test_tie_goes_to_first_voter(self):
        votes = [np.array([2]), np.array([1])]
        assert _majority_vote(votes).tolist() == [2]

    def test_three_way_tie(self):
        votes = [np.array([0]), np.array([1]), np.array([2])]
        assert _majority_vote(votes).tolist() == [0]


class TestEnsemble:
    def test_failing_member_dropped(self, separable_ds):
        train, _, test = split(separable_ds, SplitSpec(seed=0))
        good = entry(BODY_SUM, 1.0, seq=1)
        # this one only works on the training table
        brittle = entry(
            f"    if len(df) == {test.n_rows}:\n"
            '        raise ValueError("no test table please")\n'
            "    return df",
            0.95,
            seq=2,
        )
        result = ensemble_predict(
            [good, brittle], "gradient_boosted_trees", train, test, seed=0, limits=FAST_LIMITS
        )
        assert len(result.members) == 1
        assert result.dropped == (brittle.identity(),)
        assert result.members[0].entry.identity() == good.identity()
        assert result.predictions.shape == (test.n_rows,)

    def test_all_failing_raises(self, separable_ds):
        train, _, test = split(separable_ds, SplitSpec(seed=0))
        bad = entry('    raise ValueError("nope")', 0.9, seq=1)
        with pytest.raises(AllProgramsFailed):
            ensemble_predict(
                [bad], "gradient_boosted_trees", train, test, seed=0, limits=FAST_LIMITS
            )

    def test_empty_rejected(self, separable_ds):
        train, _, test = split(separable_ds, SplitSpec(seed=0))
        with pytest.raises(ValueError):
            ensemble_predict([], "gradient_boosted_trees", train, test)

    def test_identical_members_match_single_model(self, regression_ds):
        train, _, test = split(regression_ds, SplitSpec(seed=0))
        members = [entry("    return df", -0.8, seq=1), entry("    return df.copy()", -0.8, seq=2)]
        result = ensemble_predict(
            members, "gradient_boosted_trees", train, test, seed=0, limits=FAST_LIMITS
        )
        assert len(result.members) == 2
        x_train, x_test = preprocess(
            train.features.reset_index(drop=True), test.features.reset_index(drop=True)
        )
        model = PredictionModel("gradient_boosted_trees", False, seed=0).fit(x_train, train.labels)
        expected = model.predict(x_test)
        # both members transform identically, so the mean equals one model's output
        assert np.allclose(result.predictions, expected, atol=1e-12)


@pytest.fixture(scope="module")
def protocol_pair(separable_ds):
    cfg = SearchConfig(
        batch_size=2,
        sample_budget=4,
        wall_time_s=FAST_LIMITS.wall_time_s,
        memory_bytes=FAST_LIMITS.memory_bytes,
    )
    script = [[fenced(BODY_SUM), fenced(BODY_COPY)], [fenced(BODY_SQ), fenced(BODY_SUM)]]
    backend = ScriptedBackend(script, sample_budget=4)
    first = run_protocol(cfg, separable_ds, backend, n_splits=2)
    second = run_protocol(cfg, separable_ds, backend, n_splits=2)
    return first, second


class TestProtocol:
    def test_outcomes_per_split(self, protocol_pair):
        protocol, _ = protocol_pair
        assert len(protocol.outcomes) == 2
        assert [o.split_index for o in protocol.outcomes] == [0, 1]
        assert [o.split_seed for o in protocol.outcomes] == [0, 1]
        assert [o.search_seed for o in protocol.outcomes] == [0, 1]
        for outcome in protocol.outcomes:
            assert 0.0 <= outcome.base_metric <= 1.0
            assert 0.0 <= outcome.llmfe_metric <= 1.0
            assert outcome.ensemble_size >= 1
            assert not outcome.fallback

    def test_summary_fields(self, protocol_pair):
        protocol, _ = protocol_pair
        s = protocol.summary()
        assert s["dataset"] == "separable-pair"
        assert s["metric"] == "accuracy"
        assert s["direction"] == "max"
        assert s["n_splits"] == 2
        values = [o.llmfe_metric for o in protocol.outcomes]
        assert s["llmfe_mean"] == pytest.approx(np.mean(values))
        assert s["llmfe_std"] == pytest.approx(np.std(values, ddof=1))

    def test_fresh_backend_per_split(self, protocol_pair):
        protocol, _ = protocol_pair
        # each split saw the script from the start and spent the full budget
        for result in protocol.results:
            assert result.completions_used == 4

    def test_protocol_deterministic(self, protocol_pair):
        first, second = protocol_pair
        assert first.summary() == second.summary()
        assert first.outcomes == second.outcomes
        for a, b in zip(first.results, second.results):
            assert canonical_trace(a.trace_records()) == canonical_trace(b.trace_records())

    def test_fallback_when_every_program_fails(self, separable_ds, monkeypatch):
        import llmfe.search as search_module

        def explode(*args, **kwargs):
            raise AllProgramsFailed("all gone")

        monkeypatch.setattr(search_module, "ensemble_predict", explode)
        cfg = small_config(batch_size=1, sample_budget=1)
        backend = ScriptedBackend([[fenced(BODY_COPY)]], sample_budget=1)
        protocol = run_protocol(cfg, separable_ds, backend, n_splits=1)
        outcome = protocol.outcomes[0]
        assert outcome.fallback
        assert outcome.ensemble_size == 0
        assert outcome.llmfe_metric == outcome.base_metric

    def test_aborted_protocol_reports(self, separable_ds):
        class DeadBackend:
            def sample(self, prompt, b):
                raise BackendUnreachable("nothing listening")

            def fresh(self):
                return self

        cfg = small_config(batch_size=1, sample_budget=1)
        protocol = run_protocol(cfg, separable_ds, DeadBackend(), n_splits=3)
        assert protocol.aborted == "nothing listening"
        assert protocol.outcomes == []
        assert len(protocol.results) == 1

    def test_bad_n_splits(self, separable_ds):
        backend = ScriptedBackend([], sample_budget=1)
        with pytest.raises(ConfigError):
            run_protocol(small_config(), separable_ds, backend, n_splits=0)
