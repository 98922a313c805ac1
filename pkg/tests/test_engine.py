"""Engine: statistics, selection, planning, replay, and log reconstruction."""

import math
import shutil
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestcv.checkpoint import CheckpointStore
from nestcv.engine import (
    ConfigSummary,
    EngineError,
    MatrixShapeError,
    RunIncomplete,
    ValidationMatrix,
    load_matrix_file,
    plan_dachos,
    plan_nachos,
    reconstruct_report,
    replay_dachos,
    replay_nachos,
    report_to_json,
    run_job,
    run_progress,
    select_best,
    summarize_tests,
)
from nestcv.hpspace import HyperparameterConfig
from nestcv.jobspec import JobSpec
from nestcv.manifest import write_manifest
from nestcv.synthetic import make_manifest
from nestcv.trainer import TRAIN_VAL

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def oracle_stats(values):
    n = len(values)
    mean = sum(values) / n
    sd = math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1))
    return mean, sd, sd / math.sqrt(n)


# -- statistics ----------------------------------------------------------------


def test_summarize_tests_four_folds():
    values = [0.79, 0.71, 0.69, 0.82]
    stats = summarize_tests(values)
    mean, sd, se = oracle_stats(values)
    assert stats.count == 4
    assert stats.mean == pytest.approx(mean, abs=1e-15)
    assert stats.mean == pytest.approx(0.7525, abs=1e-12)
    assert stats.sample_sd == pytest.approx(sd, abs=1e-15)
    assert stats.sample_sd == pytest.approx(0.0623832, abs=1e-7)
    assert stats.standard_error == pytest.approx(se, abs=1e-15)
    assert stats.standard_error == pytest.approx(0.0311916, abs=1e-7)
    assert stats.display() == "0.75 ± 0.03"


def test_summarize_tests_ten_folds():
    values = [0.73, 0.71, 0.79, 0.75, 0.88, 0.87, 0.94, 0.90, 0.96, 0.86]
    stats = summarize_tests(values)
    assert stats.mean == pytest.approx(0.839, abs=1e-12)
    assert stats.sample_sd == pytest.approx(0.0885, abs=5e-5)
    assert stats.standard_error == pytest.approx(0.0280, abs=5e-5)
    assert stats.display() == "0.84 ± 0.03"


def test_summarize_needs_two():
    with pytest.raises(EngineError, match="at least 2"):
        summarize_tests([0.5])


@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=2, max_size=20))
@settings(max_examples=60)
def test_summarize_matches_oracle(values):
    stats = summarize_tests(values)
    mean, sd, se = oracle_stats(values)
    assert stats.mean == pytest.approx(mean, abs=1e-12)
    assert stats.sample_sd == pytest.approx(sd, abs=1e-12)
    assert stats.standard_error == pytest.approx(se, abs=1e-12)


# -- selection -----------------------------------------------------------------


def test_select_best_full_precision_near_tie():
    # means that round to the same two decimals must still order exactly
    summaries = [ConfigSummary(5, 3.00 / 4), ConfigSummary(8, 2.99 / 4)]
    result = select_best(summaries)
    assert result.jstar == 5
    assert result.vbar_star == pytest.approx(0.75, abs=1e-15)
    assert result.runner_up_gap == pytest.approx(0.0025, abs=1e-12)


def test_select_best_tie_goes_to_lowest_index():
    summaries = [ConfigSummary(7, 0.8), ConfigSummary(2, 0.8), ConfigSummary(4, 0.8)]
    assert select_best(summaries).jstar == 2
    assert select_best(summaries).runner_up_gap == 0.0


def test_select_best_empty_rejected():
    with pytest.raises(EngineError, match="empty"):
        select_best([])


# -- validation matrix -----------------------------------------------------------


def test_matrix_add_and_lookup():
    matrix = ValidationMatrix()
    matrix.add(0, 1, 2, 0.7)
    matrix.add(0, 1, 3, 0.9)
    matrix.add(None, 4, 0, 0.5)
    assert len(matrix) == 3
    assert matrix.values_for(0, 1) == [0.7, 0.9]
    assert matrix.test_folds() == [0, None]
    assert matrix.config_indexes() == [1, 4]


def test_matrix_rejects_duplicates_and_bad_metrics():
    matrix = ValidationMatrix()
    matrix.add(0, 1, 2, 0.7)
    with pytest.raises(EngineError, match="duplicate"):
        matrix.add(0, 1, 2, 0.8)
    with pytest.raises(EngineError, match="outside"):
        matrix.add(0, 1, 3, 1.5)


def test_matrix_summaries_are_means():
    matrix = ValidationMatrix()
    matrix.add(0, 3, 1, 0.6)
    matrix.add(0, 3, 2, 0.8)
    summaries = matrix.summaries(0)
    assert summaries == [ConfigSummary(config_index=3, vbar=pytest.approx(0.7))]


def test_matrix_check_complete_names_missing_cells():
    matrix = ValidationMatrix()
    matrix.add(0, 0, 1, 0.5)
    with pytest.raises(MatrixShapeError) as err:
        matrix.check_complete(3, [0], nested=True)
    assert (0, 0, 2) in err.value.missing
    assert (1, 0, 0) in err.value.missing
    assert "test=0" in str(err.value)


# -- fixture parsing -------------------------------------------------------------


def test_load_nested_fixture_shape():
    matrix, test_rows = load_matrix_file(FIXTURES / "nested_k4_matrix.csv")
    assert len(matrix) == 4 * 9 * 3
    assert sorted(test_rows) == [0, 1, 2, 3]
    assert test_rows[0] == (2, 0.79)
    assert matrix.values_for(0, 2) == [0.69, 0.70, 0.76]


def test_load_matrix_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("0,1,2\n")
    with pytest.raises(EngineError, match="row 1"):
        load_matrix_file(bad)
    bad.write_text("0,1,2,high\n")
    with pytest.raises(EngineError, match="row 1"):
        load_matrix_file(bad)
    bad.write_text("0,1,-,0.5\n0,2,-,0.6\n")
    with pytest.raises(EngineError, match="row 2: duplicate test row"):
        load_matrix_file(bad)
    bad.write_text("-,1,-,0.5\n")
    with pytest.raises(EngineError, match="row 1"):
        load_matrix_file(bad)
    bad.write_text("0,1,2,1.5\n")
    with pytest.raises(EngineError, match="row 1.*outside"):
        load_matrix_file(bad)


# -- planning --------------------------------------------------------------------


def configs_of(n):
    return [HyperparameterConfig(index=j, values=(("lr", "0.01"),)) for j in range(n)]


@pytest.mark.parametrize(
    "k,n,phase1,phase2",
    [(4, 9, 108, 4), (10, 9, 810, 10), (3, 1, 6, 3), (5, 2, 40, 5)],
)
def test_nachos_plan_counts(k, n, phase1, phase2):
    plan = plan_nachos("p", configs_of(n), k=k, epochs=2)
    assert len(plan.phases[0].tasks) == phase1 == k * (k - 1) * n
    assert plan.phases[1].deferred_count == phase2 == k
    assert plan.total_tasks() == phase1 + phase2


@pytest.mark.parametrize("k,n,phase1", [(4, 9, 36), (2, 3, 6), (10, 9, 90)])
def test_dachos_plan_counts(k, n, phase1):
    plan = plan_dachos("p", configs_of(n), k=k, epochs=2)
    assert len(plan.phases[0].tasks) == phase1 == k * n
    assert plan.phases[1].deferred_count == 1


def test_nachos_rejects_small_k():
    with pytest.raises(EngineError, match="k >= 3"):
        plan_nachos("p", configs_of(2), k=2, epochs=1)


def test_dachos_rejects_small_k():
    with pytest.raises(EngineError, match="k >= 2"):
        plan_dachos("p", configs_of(2), k=1, epochs=1)


def test_plans_reject_empty_configs():
    with pytest.raises(EngineError, match="no configurations"):
        plan_nachos("p", [], k=4, epochs=1)
    with pytest.raises(EngineError, match="no configurations"):
        plan_dachos("p", [], k=4, epochs=1)


def test_nachos_no_leakage_exhaustive():
    # every phase-1 task must exclude its test fold from training and
    # validation; checked for all k up to 10 and n up to 9
    for k in range(3, 11):
        for n in (1, 4, 9):
            plan = plan_nachos("p", configs_of(n), k=k, epochs=1)
            combos = set()
            for task in plan.phases[0].tasks:
                assert task.mode == TRAIN_VAL
                assert task.test_fold is not None and task.val_fold is not None
                assert task.test_fold != task.val_fold
                assert task.test_fold not in task.train_folds
                assert task.val_fold not in task.train_folds
                assert len(task.train_folds) == k - 2
                assert set(task.train_folds) | {task.test_fold, task.val_fold} == set(range(k))
                combos.add((task.test_fold, task.config.index, task.val_fold))
            assert len(combos) == k * (k - 1) * n


def test_dachos_plan_trains_on_all_but_val():
    plan = plan_dachos("p", configs_of(2), k=4, epochs=1)
    for task in plan.phases[0].tasks:
        assert task.test_fold is None
        assert task.val_fold not in task.train_folds
        assert set(task.train_folds) | {task.val_fold} == {0, 1, 2, 3}


# -- replay ----------------------------------------------------------------------


def test_replay_nested_k4_fixture():
    matrix, test_rows = load_matrix_file(FIXTURES / "nested_k4_matrix.csv")
    report = replay_nachos(matrix, test_rows)
    assert [f.selected_config for f in report.folds] == [2, 1, 8, 5]
    assert [f.test_metric for f in report.folds] == [0.79, 0.71, 0.69, 0.82]
    assert report.folds[0].mean_validation == pytest.approx((0.69 + 0.70 + 0.76) / 3, abs=1e-15)
    assert report.test_summary.mean == pytest.approx(0.7525, abs=1e-12)
    assert report.test_summary.display() == "0.75 ± 0.03"
    assert report.task_counts == {"train_val": 108, "train_test": 4}


def test_replay_test_rows_only():
    matrix, test_rows = load_matrix_file(FIXTURES / "test_row_k10.csv")
    assert len(matrix) == 0
    report = replay_nachos(matrix, test_rows)
    assert report.meta.k == 10
    assert [f.selected_config for f in report.folds] == [5, 5, 2, 5, 5, 2, 0, 2, 8, 2]
    assert all(f.mean_validation is None for f in report.folds)
    assert report.test_summary.display() == "0.84 ± 0.03"


def test_replay_detects_selection_mismatch(tmp_path):
    source = (FIXTURES / "nested_k4_matrix.csv").read_text()
    # claim fold 0 selected config 7 instead of 2
    tampered = source.replace("0,2,-,0.79", "0,7,-,0.79")
    path = tmp_path / "tampered.csv"
    path.write_text(tampered)
    matrix, test_rows = load_matrix_file(path)
    with pytest.raises(EngineError, match="names config 7 but the matrix selects 2"):
        replay_nachos(matrix, test_rows)


def test_replay_incomplete_matrix_rejected(tmp_path):
    lines = (FIXTURES / "nested_k4_matrix.csv").read_text().splitlines()
    # drop one matrix cell row
    dropped = [line for line in lines if line != "0,4,2,0.50"]
    path = tmp_path / "short.csv"
    path.write_text("\n".join(dropped) + "\n")
    matrix, test_rows = load_matrix_file(path)
    with pytest.raises(MatrixShapeError, match="test=0, config=4, val=2"):
        replay_nachos(matrix, test_rows)


def test_replay_deploy_k4_fixture():
    matrix, test_rows = load_matrix_file(FIXTURES / "deploy_k4_matrix.csv")
    assert test_rows == {}
    report = replay_dachos(matrix)
    assert report.selection.jstar == 5
    assert report.selection.vbar_star == pytest.approx(0.75, abs=1e-15)
    assert report.selection.runner_up_gap == pytest.approx(0.0025, abs=1e-12)
    by_index = {s.config_index: s.vbar for s in report.config_summaries}
    assert by_index[8] == pytest.approx(0.7475, abs=1e-12)
    assert report.artifact is None


def test_replay_deploy_k10_fixture():
    matrix, _ = load_matrix_file(FIXTURES / "deploy_k10_matrix.csv")
    report = replay_dachos(matrix)
    assert report.selection.jstar == 2
    assert report.selection.vbar_star == pytest.approx(0.898, abs=1e-12)
    assert report.selection.runner_up_gap == pytest.approx(0.002, abs=1e-12)
    by_index = {s.config_index: s.vbar for s in report.config_summaries}
    assert by_index[5] == pytest.approx(0.896, abs=1e-12)


def test_replay_dachos_rejects_nested_rows():
    matrix, _ = load_matrix_file(FIXTURES / "nested_k4_matrix.csv")
    with pytest.raises(EngineError, match="'-' for the test fold"):
        replay_dachos(matrix)


# -- live runs and reconstruction -------------------------------------------------


def write_demo_data(root: Path):
    manifest = make_manifest(n_groups=16, items_per_group=3, seed=1)
    path = root / "manifest.csv"
    write_manifest(manifest, path)
    return path


def demo_spec(root: Path, *, run_id="eng", algorithm="nachos", n=3, k=4, pool="local:2"):
    return JobSpec(
        run_id=run_id,
        algorithm=algorithm,
        manifest=str(write_demo_data(root)),
        k=k,
        level="group",
        seeds={"partition": 1, "sampling": 2, "trainer": 3},
        space={"preset": "default"},
        n=n,
        epochs=3,
        backend={"kind": "mock"},
        store=str(root / "store"),
        pool=pool,
    )


def test_run_job_nachos_end_to_end(tmp_path):
    report, path = run_job(demo_spec(tmp_path))
    assert path.exists()
    assert report.meta.k == 4
    assert len(report.folds) == 4
    payload = report_to_json(report)
    assert path.read_text() == payload
    assert payload.endswith("\n")
    assert report.task_counts is None  # live runs use the k(k-1)n default


def test_run_job_worker_count_invariance(tmp_path):
    payloads = set()
    for g in (1, 2, 4):
        root = tmp_path / f"g{g}"
        root.mkdir()
        report, path = run_job(demo_spec(root, pool=f"local:{g}"))
        payloads.add(path.read_text())
    assert len(payloads) == 1


def test_run_job_rerun_is_idempotent(tmp_path):
    report1, path1 = run_job(demo_spec(tmp_path))
    store = CheckpointStore(tmp_path / "store")
    records_before = len(store.read_records())
    report2, path2 = run_job(demo_spec(tmp_path))
    assert path1 == path2
    assert report_to_json(report1) == report_to_json(report2)
    assert len(store.read_records()) == records_before


def test_run_job_dachos_end_to_end(tmp_path):
    report, path = run_job(demo_spec(tmp_path, algorithm="dachos", run_id="dep"))
    assert report.artifact is not None
    assert report.artifact.trained_on == (0, 1, 2, 3)
    assert report.selection.jstar == report.artifact.config.index
    store = CheckpointStore(tmp_path / "store")
    # the artifact ref resolves to a real blob
    assert store.load_ref(report.artifact.artifact_ref)


def test_reconstruct_nachos_report_matches_bytes(tmp_path):
    report, path = run_job(demo_spec(tmp_path))
    store = CheckpointStore(tmp_path / "store")
    rebuilt = reconstruct_report(store, "eng")
    assert report_to_json(rebuilt) == path.read_text()


def test_reconstruct_dachos_report_matches_bytes(tmp_path):
    report, path = run_job(demo_spec(tmp_path, algorithm="dachos", run_id="dep"))
    store = CheckpointStore(tmp_path / "store")
    rebuilt = reconstruct_report(store, "dep")
    assert report_to_json(rebuilt) == path.read_text()


def test_reconstruct_unknown_run(tmp_path):
    store = CheckpointStore(tmp_path)
    with pytest.raises(EngineError, match="unknown run"):
        reconstruct_report(store, "ghost")


def truncated_store(tmp_path, keep_completed):
    """Run to completion, then rebuild a store whose log stops early."""
    run_job(demo_spec(tmp_path))
    src = CheckpointStore(tmp_path / "store")
    cut_root = tmp_path / "cut"
    shutil.copytree(src.root / "runs", cut_root / "runs")
    kept = []
    completed = 0
    for record in src.read_records():
        if record.status == "completed":
            completed += 1
            if completed > keep_completed:
                break
        kept.append(record)
    cut = CheckpointStore(cut_root)
    for record in kept:
        cut.append(record)
    cut.close()
    return cut


def test_reconstruct_incomplete_run_reports_progress(tmp_path):
    cut = truncated_store(tmp_path, keep_completed=10)
    with pytest.raises(RunIncomplete) as err:
        reconstruct_report(cut, "eng")
    progress = dict((name, (done, total)) for name, done, total in err.value.progress)
    assert progress["train_val"] == (10, 36)
    assert progress["train_test"] == (0, 4)
    assert run_progress(cut, "eng") == err.value.progress


def test_report_json_is_canonical(tmp_path):
    matrix, test_rows = load_matrix_file(FIXTURES / "nested_k4_matrix.csv")
    report = replay_nachos(matrix, test_rows)
    a = report_to_json(report)
    matrix2, test_rows2 = load_matrix_file(FIXTURES / "nested_k4_matrix.csv")
    b = report_to_json(replay_nachos(matrix2, test_rows2))
    assert a == b
    lines = a.splitlines()
    assert lines[0] == "{"
    assert a.endswith("}\n")
