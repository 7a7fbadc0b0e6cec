import numpy as np
import pytest

from scmlearn.harness import (
    ConfigError,
    SUMMARY_COLUMNS,
    TRACE_COLUMNS,
    TraceRow,
    build_candidates,
    parse_config,
    read_trace_csv,
    run_experiment,
    run_trial,
    summarize,
    validate_config,
    write_trace_csv,
)
from scmlearn.scm import Intervention
from scmlearn.strategy import CostModel


def base_config(**overrides):
    raw = {
        "version": 1,
        "scm": {
            "nodes": 3,
            "edges": [[0, 1], [1, 2]],
            "functions": ["0", "2*sin(p0)", "cos(p0) + p0"],
            "noise_vars": 0.1,
        },
        "candidates": {"family": "upstream-chain", "values_per_node": 4, "include_null": False},
        "risk": {},
        "kernel": {"bandwidth": 1.0, "amplitude": 1.0},
        "policy": {"name": "observe"},
        "metrics": {"kl_samples": 60, "mmd_samples": 20, "stride": 2},
        "run": {"trials": 1, "steps": 2, "seed": 5},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return raw


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError):
        parse_config({**base_config(), "plots": {}})
    with pytest.raises(ConfigError):
        parse_config(base_config(run={"trails": 3}))
    with pytest.raises(ConfigError):
        parse_config(base_config(scm={"functs": []}))


def test_version_is_checked():
    raw = base_config()
    raw["version"] = 2
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_policy_names_are_checked():
    with pytest.raises(ConfigError):
        parse_config(base_config(policy={"name": "annealing"}))
    with pytest.raises(ConfigError):
        parse_config(base_config(policy={"name": ["observe", "observe"]}))
    cfg = parse_config(base_config(policy={"name": ["observe", "random"]}))
    assert cfg.policy_names == ("observe", "random")


def test_dp_policies_demand_matching_family_and_graph():
    with pytest.raises(ConfigError):
        parse_config(
            base_config(policy={"name": "dp_single"})
        )  # family is upstream-chain
    with pytest.raises(ConfigError):
        parse_config(
            base_config(
                scm={
                    "nodes": 3,
                    "edges": [[0, 1], [0, 2]],
                    "functions": ["0", "sin(p0)", "cos(p0)"],
                    "noise_vars": 0.1,
                },
                policy={"name": "dp_upstream"},
            )
        )


def test_bad_expression_or_noise_is_a_config_error():
    with pytest.raises(ConfigError):
        parse_config(base_config(scm={"functions": ["0", "p1", "p0"]}))
    with pytest.raises(ConfigError):
        parse_config(base_config(scm={"noise_vars": [-1, 0.1, 0.1]}))


def test_validate_reports_candidate_count():
    summary = validate_config(parse_config(base_config()))
    assert summary["candidates"] == 12
    assert summary["nodes"] == 3


# ---------------------------------------------------------------------------
# candidate construction
# ---------------------------------------------------------------------------


def test_upstream_candidates_count_and_structure():
    raw = base_config(
        scm={
            "nodes": 5,
            "edges": [[0, 1], [1, 2], [2, 3], [3, 4]],
            "functions": ["0", "sin(p0)", "cos(p0)", "sin(p0)", "cos(p0)"],
            "noise_vars": 0.1,
        },
        candidates={"values_per_node": 50},
    )
    cands = build_candidates(parse_config(raw))
    assert len(cands) == 250
    assert cands[0].clamps == ((0, -6.0),)
    # the deepest family member clamps the whole chain to one value
    assert cands[249].nodes == frozenset({0, 1, 2, 3, 4})


def test_single_variable_values_are_evenly_spaced_with_endpoints():
    raw = base_config(
        scm={"nodes": 1, "edges": [], "functions": ["0"], "noise_vars": 0.1},
        candidates={"family": "single-variable", "values_per_node": 3},
        policy={"name": "observe"},
    )
    cands = build_candidates(parse_config(raw))
    assert [iv.clamps[0][1] for iv in cands] == [-6.0, 0.0, 6.0]


def test_null_candidate_is_appended_last():
    cfg = parse_config(base_config(candidates={"include_null": True}))
    cands = build_candidates(cfg)
    assert cands[len(cands) - 1].is_null
    assert len(cands) == 13


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def test_zero_steps_emits_baseline_rows_only(tmp_path):
    cfg = parse_config(base_config(run={"steps": 0, "trials": 2}))
    result = run_experiment(cfg, output_dir=tmp_path)
    assert len(result.rows) == 2
    for row in result.rows:
        assert row.step == 0
        assert row.expected_total_risk == 3.0
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == ",".join(TRACE_COLUMNS)
    assert len(lines) == 3


def test_observe_step_records_null_and_grows_dataset():
    cfg = parse_config(base_config(run={"steps": 1}))
    rows, belief = run_trial(cfg, "observe", 0, 0, build_candidates(cfg), CostModel())
    assert rows[1].intervention_nodes == ""
    assert rows[1].intervention_values == ""
    assert len(belief.draws) == 1
    assert rows[1].candidates_evaluated == 0


def test_dataset_length_tracks_step_count():
    cfg = parse_config(base_config(policy={"name": "random"}, run={"steps": 4}))
    rows, belief = run_trial(cfg, "random", 0, 0, build_candidates(cfg), CostModel())
    assert len(belief.draws) == 4
    assert [r.step for r in rows] == [0, 1, 2, 3, 4]


def test_metrics_follow_the_stride():
    cfg = parse_config(base_config(run={"steps": 3}, metrics={"stride": 2}))
    rows, _ = run_trial(cfg, "observe", 0, 0, build_candidates(cfg), CostModel())
    present = [r.step for r in rows if r.true_total_risk is not None]
    assert present == [0, 2, 3]  # stride hits plus the final step


def test_same_seed_gives_byte_identical_traces(tmp_path):
    cfg = parse_config(
        base_config(
            policy={"name": ["random", "sampling"], "samples_per_candidate": 8},
            run={"steps": 2, "trials": 2},
        )
    )
    a_dir = tmp_path / "a"
    b_dir = tmp_path / "b"
    run_experiment(cfg, output_dir=a_dir)
    run_experiment(cfg, output_dir=b_dir)
    assert (a_dir / "trace.csv").read_bytes() == (b_dir / "trace.csv").read_bytes()
    assert (a_dir / "summary.csv").read_bytes() == (b_dir / "summary.csv").read_bytes()


def test_different_seeds_choose_different_values(tmp_path):
    cfg_a = parse_config(base_config(policy={"name": "random"}, run={"steps": 3, "seed": 1}))
    cfg_b = parse_config(base_config(policy={"name": "random"}, run={"steps": 3, "seed": 2}))
    rows_a = run_experiment(cfg_a, write=False).rows
    rows_b = run_experiment(cfg_b, write=False).rows
    picked_a = [r.intervention_values for r in rows_a if r.step > 0]
    picked_b = [r.intervention_values for r in rows_b if r.step > 0]
    assert picked_a != picked_b


def test_failed_trial_leaves_diagnostic_row(monkeypatch, tmp_path):
    cfg = parse_config(base_config(run={"trials": 2, "steps": 1}))

    calls = {"n": 0}
    import scmlearn.harness as harness_module

    original = harness_module.sample_scm

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 1:
            raise RuntimeError("boom")
        return original(*args, **kwargs)

    monkeypatch.setattr(harness_module, "sample_scm", flaky)
    result = run_experiment(cfg, output_dir=tmp_path)
    assert len(result.failures) == 1
    marked = [r for r in result.rows if r.intervention_nodes == "error"]
    assert len(marked) == 1
    assert "boom" in marked[0].intervention_values
    # the baseline row of the aborted trial survives and the diagnostic row
    # lands at the step that failed
    assert any(r.trial == 0 and r.step == 0 and r.intervention_nodes == "" for r in result.rows)
    assert marked[0].step == 1
    # the second trial still ran to completion
    assert any(r.trial == 1 and r.step == 1 for r in result.rows)


def test_selection_never_touches_true_mechanisms(monkeypatch):
    cfg = parse_config(
        base_config(policy={"name": "sampling", "samples_per_candidate": 8}, run={"steps": 1})
    )
    from scmlearn.belief import BeliefState
    from scmlearn.strategy import select_intervention, PolicyParams
    import scmlearn.scm as scm_module

    belief = BeliefState(cfg.scm.graph, cfg.kernels(), cfg.scm.noise_vars)

    def forbidden(*args, **kwargs):
        raise AssertionError("true mechanism evaluated during selection")

    monkeypatch.setattr(scm_module, "_eval_tree", forbidden)
    result = select_intervention(
        "sampling",
        belief,
        build_candidates(cfg),
        CostModel(),
        cfg.risk,
        PolicyParams(samples_per_candidate=4),
        np.random.default_rng(0),
    )
    assert result.intervention is not None


# ---------------------------------------------------------------------------
# summaries and CSV round trips
# ---------------------------------------------------------------------------


def _row(trial, step, policy, risk, ttr=None):
    return TraceRow(
        trial=trial,
        step=step,
        policy=policy,
        intervention_nodes="",
        intervention_values="",
        expected_total_risk=risk,
        true_total_risk=ttr,
        kl_max=None,
        kl_median=None,
        mmd_max=None,
        mmd_median=None,
        candidates_evaluated=0,
        elapsed_ms=0.0,
    )


def test_summary_of_single_trial_equals_trace():
    rows = [_row(0, 0, "observe", 3.0, 9.0), _row(0, 1, "observe", 2.0, 8.0)]
    summary = summarize(rows)
    assert [(s.step, s.expected_total_risk, s.true_total_risk) for s in summary] == [
        (0, 3.0, 9.0),
        (1, 2.0, 8.0),
    ]


def test_summary_averages_across_trials():
    rows = [_row(0, 1, "observe", 1.0), _row(1, 1, "observe", 3.0)]
    summary = summarize(rows)
    assert summary[0].expected_total_risk == 2.0
    assert summary[0].trials == 2
    assert summary[0].true_total_risk is None


def test_summary_row_count_is_policies_times_steps():
    rows = [
        _row(t, s, p, 1.0)
        for p in ("observe", "random")
        for t in range(3)
        for s in range(4)
    ]
    assert len(summarize(rows)) == 2 * 4


def test_summary_rejects_ragged_step_counts():
    rows = [_row(0, 0, "observe", 1.0), _row(0, 1, "observe", 1.0), _row(1, 0, "observe", 1.0)]
    with pytest.raises(ValueError):
        summarize(rows)


def test_trace_csv_round_trip(tmp_path):
    rows = [
        _row(0, 0, "observe", 3.0, 9.0),
        _row(0, 1, "observe", 1.0 / 3.0),
    ]
    path = tmp_path / "t.csv"
    write_trace_csv(rows, path)
    text = path.read_text()
    assert "0.33333333333333331" in text  # 17 significant digits
    assert text.endswith("\n")
    assert read_trace_csv(path) == rows


def test_trace_columns_are_fixed():
    assert TRACE_COLUMNS[:3] == ("trial", "step", "policy")
    assert TRACE_COLUMNS[-2:] == ("candidates_evaluated", "elapsed_ms")
    assert SUMMARY_COLUMNS[0] == "policy"
