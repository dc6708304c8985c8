import numpy as np
import pandas as pd
import pytest

from config import ExperimentConfig
from conftest import CASES
from evaluate import MetricsReport, write_trace
from experiment import ExperimentRunner, feasibility_table, online_table, sweep_series


def trace_frame(method, topology_id, epochs, eta1, feasibility=1.0, source=None):
    rows = [
        {
            "method": method,
            "topology_id": topology_id,
            "epoch": e,
            "eta1": v,
            "eta2": 1.0 - v,
            "eta3": 1.0 - v / 2,
            "feasibility_rate": feasibility,
            "wall_clock_ms": 0.0,
        }
        for e, v in zip(epochs, eta1)
    ]
    frame = pd.DataFrame(rows)
    if source is not None:
        frame["source"] = source
    return frame


def test_online_table_averages_topologies():
    traces = pd.concat([
        trace_frame("scratch", 5, [0, 1, 10], [0.4, 0.3, 0.2]),
        trace_frame("scratch", 6, [0, 1, 10], [0.6, 0.5, 0.4]),
        trace_frame("mtl", 5, [0, 1, 10], [0.1, 0.05, 0.01]),
    ], ignore_index=True)
    table = online_table(traces, [0, 10, 100])
    assert table["metric"].tolist() == ["eta1", "eta1", "eta2", "eta2", "eta3", "eta3"]
    assert table["method"].tolist()[:2] == ["mtl", "scratch"]
    row = table[(table["metric"] == "eta1") & (table["method"] == "scratch")].iloc[0]
    assert row["epoch_0"] == pytest.approx(0.5)
    assert row["epoch_10"] == pytest.approx(0.3)
    assert np.isnan(row["epoch_100"])


def test_feasibility_table_uses_final_epoch():
    traces = pd.concat([
        trace_frame("mtl", 5, [0, 10], [0.1, 0.01], feasibility=0.5),
        trace_frame("mtl", 6, [10], [0.01], feasibility=1.0),
        trace_frame("pretrain1", 5, [0, 10], [0.2, 0.1], feasibility=0.25),
    ], ignore_index=True)
    table = feasibility_table(traces, "case30")
    assert table["method"].tolist() == ["mtl", "pretrain1"]
    assert table["case30"].tolist() == pytest.approx([0.75, 0.25])


def test_sweep_series_groups_by_axis():
    traces = pd.concat([
        trace_frame("mtl", 5, [0, 10], [0.5, 0.2], source="sweep_samples_10"),
        trace_frame("mtl", 5, [0, 10], [0.5, 0.1], source="sweep_samples_50"),
        trace_frame("mtl", 5, [0, 10], [0.5, 0.3], source="sweep_gamma_0.05"),
        trace_frame("scratch", 5, [0, 10], [0.6, 0.4], source="sweep_gamma_0.05"),
    ], ignore_index=True)
    series = sweep_series(traces)
    assert sorted(series) == ["gamma", "samples"]
    samples = series["samples"]
    assert samples["value"].tolist() == [10, 50]
    assert samples["eta1"].tolist() == pytest.approx([0.2, 0.1])
    gamma = series["gamma"]
    assert gamma["method"].tolist() == ["mtl", "scratch"]
    assert gamma["value"].tolist() == pytest.approx([0.05, 0.05])


def test_report_from_trace_files(tmp_path):
    config = ExperimentConfig(run_dir=str(tmp_path), report_epochs=(0, 10))
    runner = ExperimentRunner(config)
    reports = [
        MetricsReport(0.4, 0.8, 0.9, 0.5, 3, topology_id=7, epoch=0),
        MetricsReport(0.1, 0.95, 0.99, 1.0, 3, topology_id=7, epoch=10),
    ]
    write_trace(runner.trace_dir / "trace_scratch.csv", "scratch", reports)
    write_trace(runner.trace_dir / "sweep_gamma_0.1.csv", "mtl", reports)
    summary = runner.report()
    assert summary["case"] == "case14"
    assert summary["feasibility"] == [{"method": "scratch", "case14": 1.0}]
    assert summary["sweep_gamma"][0]["eta1"] == pytest.approx(0.1)
    assert (runner.report_dir / "fig_online_eta1.csv").exists()
    assert (runner.report_dir / "fig_sweep_gamma.csv").exists()
    assert not (runner.report_dir / "table_offline_cost.csv").exists()


@pytest.mark.slow
def test_end_to_end_case14(tmp_path):
    """A scaled-down run of the full pipeline; meta-learning should start closer than scratch."""
    config = ExperimentConfig(
        case_path=str(CASES / "case14.m"),
        corpus_dir=str(tmp_path / "corpus"),
        run_dir=str(tmp_path / "runs"),
        m_total=8,
        m_offline=6,
        k_per_topology=60,
        test_samples=20,
        hidden_dims=(32, 16),
        offline_epochs=200,
        meta_epochs=200,
        task_batch_size=3,
        adapt_epochs=10,
        adapt_samples=40,
        report_epochs=(0, 1, 10),
        progress=False,
    ).validate()
    runner = ExperimentRunner(config)
    runner.generate()
    runner.train(["mtl", "pretrain1", "pretrain2"])
    runner.adapt(["mtl", "scratch", "pretrain1", "pretrain2"])
    summary = runner.report()
    rows = {(r["metric"], r["method"]): r for r in summary["online"]}
    assert rows[("eta1", "mtl")]["epoch_0"] < rows[("eta1", "scratch")]["epoch_0"]
    for row in summary["feasibility"]:
        assert 0.0 <= row["case14"] <= 1.0


@pytest.mark.slow
def test_pipeline_replay_is_byte_identical(tmp_path):
    def run(root):
        config = ExperimentConfig(
            case_path=str(CASES / "case14.m"),
            corpus_dir=str(root / "corpus"),
            run_dir=str(root / "runs"),
            m_total=4,
            m_offline=3,
            k_per_topology=12,
            test_samples=4,
            hidden_dims=(8,),
            offline_epochs=20,
            meta_epochs=20,
            task_batch_size=2,
            adapt_epochs=5,
            adapt_samples=8,
            report_epochs=(0, 1, 5),
            progress=False,
        ).validate()
        runner = ExperimentRunner(config)
        runner.generate()
        runner.train(["mtl", "pretrain1", "pretrain2"])
        return runner.adapt(["mtl", "scratch", "pretrain1", "pretrain2"])

    first = run(tmp_path / "a")
    second = run(tmp_path / "b")
    assert [p.name for p in first] == [p.name for p in second]
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()


SLACK_Q_AT_ZERO = "case14's slack generator has Qmin = 0 and the OPF labels sit on it; see DESIGN.md"
NEAR_ZERO_P = "near-zero non-slack P_G labels dominate the relative dispatch error on case14; see DESIGN.md"


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """The default case14 experiment: 20 topologies, 14 offline, 300 samples each."""
    root = tmp_path_factory.mktemp("desk")
    config = ExperimentConfig(
        case_path=str(CASES / "case14.m"),
        corpus_dir=str(root / "corpus"),
        run_dir=str(root / "runs"),
        sample_counts=(1, 10, 50, 300),
        task_counts=(3, 7, 14),
        progress=False,
    ).validate()
    runner = ExperimentRunner(config)
    runner.generate()
    runner.train(["mtl", "pretrain1", "pretrain2"])
    runner.adapt(["mtl", "scratch", "pretrain1", "pretrain2"])
    summary = runner.report()
    rows = {(r["metric"], r["method"]): r for r in summary["online"]}
    return runner, summary, rows


@pytest.mark.slow
def test_desk_mtl_beats_scratch_at_epoch_10(desk_run):
    _, _, rows = desk_run
    assert rows[("eta2", "mtl")]["epoch_10"] > rows[("eta2", "scratch")]["epoch_10"]


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason=NEAR_ZERO_P)
def test_desk_mtl_accuracy_at_epoch_10(desk_run):
    _, _, rows = desk_run
    assert rows[("eta3", "mtl")]["epoch_10"] >= 0.98
    assert rows[("eta2", "mtl")]["epoch_10"] >= 0.95


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="pretrained baselines keep improving under online SGD at lr 0.1")
def test_desk_mtl_gains_most_while_pretrained_stay_flat(desk_run):
    _, _, rows = desk_run

    def gain(method):
        return rows[("eta1", method)]["epoch_0"] - rows[("eta1", method)]["epoch_10"]

    assert gain("mtl") > gain("pretrain1")
    assert gain("mtl") > gain("pretrain2")
    for method in ("pretrain1", "pretrain2"):
        start = rows[("eta1", method)]["epoch_0"]
        assert rows[("eta1", method)]["epoch_10"] == pytest.approx(start, rel=0.1)


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason=SLACK_Q_AT_ZERO)
def test_desk_mtl_feasibility_after_100_epochs(desk_run):
    _, summary, _ = desk_run
    rates = {r["method"]: r["case14"] for r in summary["feasibility"]}
    assert rates["mtl"] >= 0.97


@pytest.mark.slow
def test_desk_checkpoint_counts(desk_run):
    runner, summary, _ = desk_run
    saved = {r["method"]: r["checkpoints"] for r in summary["offline_cost"]}
    assert saved == {"mtl": 1, "pretrain1": 1, "pretrain2": 14}
    assert len(list((runner.checkpoint_dir / "pretrain2").glob("task_*.json"))) == 14


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="pretrain1 and pretrain2 do the same number of sample-gradients per run")
def test_desk_offline_cost_ordering(desk_run):
    _, summary, _ = desk_run
    seconds = {r["method"]: r["wall_clock_s"] for r in summary["offline_cost"]}
    assert seconds["mtl"] < seconds["pretrain1"] < seconds["pretrain2"]


def assert_non_decreasing(values, tie=0.005):
    for before, after in zip(values, values[1:]):
        assert after >= before - tie, values


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason=NEAR_ZERO_P)
def test_desk_eta2_grows_with_online_samples(desk_run):
    runner, _, _ = desk_run
    runner.adapt(["mtl"], sweep="samples")
    series = runner.report()["sweep_samples"]
    assert [r["value"] for r in series] == [1, 10, 50, 300]
    assert_non_decreasing([r["eta2"] for r in series])


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason=NEAR_ZERO_P)
def test_desk_eta2_grows_with_offline_tasks(desk_run):
    runner, _, _ = desk_run
    runner.adapt(["mtl"], sweep="tasks")
    series = runner.report()["sweep_tasks"]
    assert [r["value"] for r in series] == [3, 7, 14]
    assert_non_decreasing([r["eta2"] for r in series])
