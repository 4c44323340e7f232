"""
Experiment runner, every experiment kind on the tiny model, plot data and the CLI.
"""
import json

import numpy as np
import pandas as pd
import pytest

from icl_lab.cli import main
from icl_lab.errors import EmptyGrid, ExperimentError, InvalidConfig, NumericalFailure, SpecError, UnknownFigureKind
from icl_lab.experiments import ExperimentRunner, ExperimentSpec, MetricsVsK, emit_plot_data
from icl_lab.experiments.base_experiment import ExperimentContext, resolve_mode
from icl_lab.experiments.plot_data import read_report
from icl_lab.hidden_io import HiddenCloud, read_dump, write_dump
from icl_lab.tasks import DemoMode, InstructionMode
from icl_lab.train import TrainConfig
from icl_lab.tvs_filter import TVSFilter, save_filter

SMALL = dict(tasks=["color"], layers=[0, 1], shots=[0, 1, 2], ranks=[2], flux_rank=2, n_train=12, n_val=4,
             n_test=4, eval_shots=2, control_trials=2, workers=1,
             train=TrainConfig(learning_rate=1e-2, epochs=1, pseudo_batch=4))


def _spec(kind, model_file, out, **overrides):
    return ExperimentSpec.build(kind=kind, model=model_file, out=out, **{**SMALL, **overrides})


def _rows(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


class FailingMetrics(MetricsVsK):
    def run_point(self, coords):
        if coords["layer"] == 1 and coords["k"] == 2:
            raise NumericalFailure("synthetic failure")
        return super().run_point(coords)


class TestSpec:

    def test_rejects_unknown_field(self, model_file, tmp_path):
        with pytest.raises(InvalidConfig):
            ExperimentSpec.build(kind="metrics_vs_k", model=model_file, out=tmp_path, bogus=1)

    def test_rejects_bad_values(self, model_file, tmp_path):
        for bad in ({"ranks": [0]}, {"shots": [-1]}, {"modes": ["shuffled"]}, {"kind": "nope"}):
            with pytest.raises(InvalidConfig):
                ExperimentSpec.build(**{"kind": "metrics_vs_k", "model": model_file, "out": tmp_path, **bad})

    def test_resolve_mode(self):
        assert resolve_mode("instruct_ls", 4) == (DemoMode.GOLD, InstructionMode.WITH_LABEL_SPACE)
        assert resolve_mode("random_sample", 4) == (DemoMode.GOLD, InstructionMode.NONE)
        assert resolve_mode("unseen", 0) == (DemoMode.GOLD, InstructionMode.NONE)
        assert resolve_mode("seen", 2) == (DemoMode.SEEN, InstructionMode.NONE)


class TestRunner:

    def test_metrics_vs_k_rows(self, model_file, tmp_path):
        path = ExperimentRunner().run(_spec("metrics_vs_k", model_file, tmp_path))
        rows = _rows(path)
        assert len(rows) == 2 * 3 * 5
        assert list(rows[0]) == ["kind", "task", "mode", "layer", "k", "metric", "value", "seed"]
        assert [(r["layer"], r["k"]) for r in rows[::5]] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
        ecc = [r["value"] for r in rows if r["metric"] == "eccentricity"]
        assert all(0.0 < v <= 1.0 for v in ecc)
        summary = json.loads((tmp_path / "metrics_vs_k.summary.json").read_text())
        assert (summary["points"], summary["rows"], summary["resumed_points"]) == (6, 30, 0)
        assert len(list((tmp_path / "filters").glob("color_L1_r2_*.tvs"))) == 1

    def test_metrics_vs_layer_order(self, model_file, tmp_path):
        rows = _rows(ExperimentRunner().run(_spec("metrics_vs_layer", model_file, tmp_path, shots=[1])))
        assert [r["layer"] for r in rows[::5]] == [0, 1]

    def test_rerun_is_byte_identical(self, model_file, tmp_path):
        a = ExperimentRunner().run(_spec("metrics_vs_k", model_file, tmp_path / "a"))
        b = ExperimentRunner().run(_spec("metrics_vs_k", model_file, tmp_path / "b"))
        assert a.read_bytes() == b.read_bytes()
        a = ExperimentRunner().run(_spec("filter_sweep", model_file, tmp_path / "c", layers=[1]))
        b = ExperimentRunner().run(_spec("filter_sweep", model_file, tmp_path / "d", layers=[1]))
        assert a.read_bytes() == b.read_bytes()

    def test_filter_cache_keyed_by_training(self, model_file, tmp_path):
        ExperimentRunner().run(_spec("filter_sweep", model_file, tmp_path / "shared", layers=[1]))
        changed = dict(seed=99, layers=[1], train=TrainConfig(learning_rate=0.5, epochs=5, pseudo_batch=2))
        shared = ExperimentRunner().run(_spec("filter_sweep", model_file, tmp_path / "shared", **changed))
        fresh = ExperimentRunner().run(_spec("filter_sweep", model_file, tmp_path / "fresh", **changed))
        assert shared.read_bytes() == fresh.read_bytes()
        assert len(list((tmp_path / "shared" / "filters").glob("color_L1_r2_*.tvs"))) == 2

    def test_zero_shot_cloud_has_one_point_per_query(self, model_file, tmp_path):
        context = ExperimentContext(_spec("metrics_vs_k", model_file, tmp_path))
        zero, two = context.k_shot("color", 0, "gold"), context.k_shot("color", 2, "gold")
        assert len(zero) == 4
        assert len({p.token_ids for p in zero}) == 4
        assert len(two) == 8

    def test_record_timing(self, model_file, tmp_path):
        rows = _rows(ExperimentRunner().run(_spec("metrics_vs_k", model_file, tmp_path, shots=[1],
                                                  layers=[0], record_timing=True)))
        assert all(r["wall_clock"] >= 0.0 for r in rows)

    def test_empty_grid(self, model_file, tmp_path):
        with pytest.raises(EmptyGrid):
            ExperimentRunner().run(_spec("metrics_vs_k", model_file, tmp_path, flux_rank=32))

    def test_failure_then_resume(self, model_file, tmp_path):
        spec = _spec("metrics_vs_k", model_file, tmp_path / "resumed")
        runner = ExperimentRunner()
        runner.experiments["metrics_vs_k"] = FailingMetrics
        with pytest.raises(ExperimentError) as info:
            runner.run(spec)
        assert info.value.coords == {"task": "color", "mode": "gold", "layer": 1, "k": 2}
        assert info.value.exit_code == 3
        partial = tmp_path / "resumed" / "metrics_vs_k.jsonl"
        assert len(_rows(partial)) == 25
        assert (tmp_path / "resumed" / "metrics_vs_k.resume.json").exists()

        path = ExperimentRunner().run(spec)
        assert not (tmp_path / "resumed" / "metrics_vs_k.resume.json").exists()
        summary = json.loads((tmp_path / "resumed" / "metrics_vs_k.summary.json").read_text())
        assert summary["resumed_points"] == 5
        fresh = ExperimentRunner().run(_spec("metrics_vs_k", model_file, tmp_path / "fresh"))
        assert path.read_bytes() == fresh.read_bytes()

    def test_unknown_task(self, model_file, tmp_path):
        with pytest.raises(Exception) as info:
            ExperimentRunner().run(_spec("metrics_vs_k", model_file, tmp_path, tasks=["taste"]))
        assert "taste" in str(info.value)


class TestExperimentKinds:

    def test_filter_sweep(self, model_file, tmp_path):
        rows = _rows(ExperimentRunner().run(_spec("filter_sweep", model_file, tmp_path, layers=[1])))
        assert [r["metric"] for r in rows] == ["zero_shot_accuracy", "icl_accuracy", "val_accuracy", "effective_rank"]
        assert rows[0]["layer"] is None and rows[0]["rank"] == 0
        assert rows[1]["k"] == 2
        assert rows[3]["value"] <= 2

    def test_head_scan(self, model_file, tmp_path):
        path = ExperimentRunner().run(_spec("head_scan", model_file, tmp_path))
        rows = _rows(path)
        assert len(rows) == 2 * (3 + 2 * 4)
        clean = [r for r in rows if r["head"] is None]
        assert {r["metric"] for r in clean} == {"eccentricity", "covariance_flux", "accuracy"}
        selection = json.loads((tmp_path / "dh_selection.json").read_text())
        assert set(selection["tasks"]["color"]) >= {"dh", "anti_dh", "theta", "layers", "coverage"}
        assert selection["tasks"]["color"]["coverage"] == pytest.approx(1.0)
        assert selection["overlap"] == {}
        summary = json.loads((tmp_path / "head_scan.summary.json").read_text())
        assert summary["dh_selection"].endswith("dh_selection.json")

    def test_dh_ablation(self, model_file, tmp_path):
        spec = _spec("dh_ablation", model_file, tmp_path, ablation_configs=["random_sample", "unseen"])
        rows = _rows(ExperimentRunner().run(spec))
        assert len(rows) == 2 * (1 + 1 + 2 + 2)
        controls = [r for r in rows if r["condition"] == "controls" and r["metric"] == "accuracy"]
        assert [r["trial"] for r in controls] == [0, 1, 0, 1]
        ablation = json.loads((tmp_path / "ablation_set.json").read_text())
        assert len(ablation["color"]["controls"]) == 2
        assert all(len(c) == len(ablation["color"]["heads"]) for c in ablation["color"]["controls"])

    def test_verbalization(self, model_file, tmp_path):
        rows = _rows(ExperimentRunner().run(_spec("verbalization", model_file, tmp_path, layers=[1])))
        assert [r["trained"] for r in rows] == ["pre", "both", "enc", "dec"]
        assert all(r["chance"] == 0.5 for r in rows)
        assert all(0.0 <= r["value"] <= 1.0 for r in rows)

    def test_fact_recall(self, model_file, tmp_path):
        rows = _rows(ExperimentRunner().run(_spec("fact_recall", model_file, tmp_path, layers=[1])))
        assert [r["metric"] for r in rows] == ["zero_shot_ce", "icl_ce", "filter_ce", "filter_accuracy"]
        assert all(r["value"] > 0.0 for r in rows[:3])

    def test_pca_export(self, model_file, tmp_path):
        spec = _spec("pca_export", model_file, tmp_path, layers=[0], shots=[2], pca_dims=[1, 2])
        rows = _rows(ExperimentRunner().run(spec))
        assert [r["dim"] for r in rows] == [1, 2]
        assert rows[0]["value"] >= rows[1]["value"]
        frame = pd.read_csv(tmp_path / "pca" / "color_gold_L0_k2.csv")
        assert list(frame.columns) == ["point_id", "gold_label", "pc1", "pc2"]
        assert read_dump(tmp_path / "clouds" / "color_gold_L0_k2.hsc").n == len(frame) == 8


class TestPlotData:

    def test_empty_report_gives_headers(self, tmp_path):
        report = tmp_path / "metrics_vs_k.jsonl"
        report.write_text("", encoding="utf-8")
        written = emit_plot_data(report, "metrics_vs_k", tmp_path / "plots")
        assert len(written) == 5
        for path in written:
            assert path.read_text().strip() == "k,layer,value"

    def test_unknown_figure(self, tmp_path):
        report = tmp_path / "r.jsonl"
        report.write_text("", encoding="utf-8")
        with pytest.raises(UnknownFigureKind):
            emit_plot_data(report, "fig99", tmp_path)

    def test_missing_report(self, tmp_path):
        with pytest.raises(SpecError):
            read_report(tmp_path / "absent.jsonl")

    def test_facets_by_task(self, tmp_path):
        rows = [{"kind": "metrics_vs_k", "task": t, "mode": "gold", "layer": 0, "k": k, "metric": "accuracy",
                 "value": 0.1 * k, "seed": 0} for t in ("color", "shape") for k in (0, 2)]
        report = tmp_path / "metrics_vs_k.jsonl"
        report.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
        written = {p.name for p in emit_plot_data(report, "metrics_vs_k", tmp_path / "plots")}
        assert {"metrics_vs_k_accuracy__color.csv", "metrics_vs_k_accuracy__shape.csv"} <= written
        frame = pd.read_csv(tmp_path / "plots" / "metrics_vs_k_accuracy__shape.csv")
        assert list(frame.columns) == ["k", "layer", "value"]
        np.testing.assert_allclose(frame["value"], [0.0, 0.2])

    def test_head_scan_is_wide(self, tmp_path):
        rows = [{"kind": "head_scan", "task": "color", "layer": 0, "head": None, "metric": "accuracy", "value": 0.5}]
        for head, flux in ((0, -0.2), (1, 0.1)):
            rows += [{"kind": "head_scan", "task": "color", "layer": 0, "head": head, "metric": m, "value": v}
                     for m, v in (("d_ecc", 0.0), ("d_flux", flux), ("d_acc", -0.1), ("induction", 0.3))]
        report = tmp_path / "head_scan.jsonl"
        report.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
        (path,) = emit_plot_data(report, "head_scan", tmp_path / "plots")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["layer", "head", "d_flux", "d_ecc", "d_acc", "induction"]
        assert frame["head"].tolist() == [0, 1]
        np.testing.assert_allclose(frame["d_flux"], [-0.2, 0.1])

    def test_from_a_real_run(self, model_file, tmp_path):
        report = ExperimentRunner().run(_spec("metrics_vs_k", model_file, tmp_path, layers=[0]))
        written = emit_plot_data(report, "metrics_vs_k", tmp_path / "plots")
        frame = pd.read_csv(tmp_path / "plots" / "metrics_vs_k_covariance_flux.csv")
        assert len(written) == 5
        assert frame["k"].tolist() == [0, 1, 2]


class TestCli:

    def test_missing_model_is_a_spec_error(self, tmp_path):
        assert main(["train-filter", "--out", str(tmp_path)]) == 2

    def test_bad_rank_is_a_spec_error(self, model_file, tmp_path):
        assert main(["train-filter", "--model", str(model_file), "--out", str(tmp_path), "--ranks", "0"]) == 2

    def test_missing_report(self, tmp_path):
        assert main(["report", "--report", str(tmp_path / "absent.jsonl")]) == 2

    def test_train_filter_verb(self, model_file, tmp_path, capsys):
        code = main(["train-filter", "--model", str(model_file), "--out", str(tmp_path), "--tasks", "color",
                     "--layers", "1", "--ranks", "2", "--n-train", "12", "--n-val", "4", "--n-test", "4",
                     "--eval-shots", "1", "--epochs", "1", "--pseudo-batch", "4", "--lr", "0.01", "--workers", "1"])
        assert code == 0
        assert "filter_sweep" in capsys.readouterr().out
        assert len(_rows(tmp_path / "filter_sweep.jsonl")) == 4
        assert main(["report", "--report", str(tmp_path / "filter_sweep.jsonl")]) == 0
        assert (tmp_path / "plots" / "filter_sweep_accuracy.csv").exists()

    def test_measure_dump(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        dump = write_dump(HiddenCloud(rng.standard_normal((20, 4)), layer=1, k=4, mode="gold"), tmp_path / "c.hsc")
        filt = save_filter(TVSFilter.identity(4, 1), tmp_path / "f.tvs")
        assert main(["measure", "--dump", str(dump), "--filter", str(filt)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["covariance_flux"] == pytest.approx(1.0, abs=1e-6)
        assert (out["layer"], out["k"], out["mode"]) == (1, 4, "gold")

    def test_measure_errors(self, tmp_path):
        dump = write_dump(HiddenCloud(np.ones((5, 4)), layer=0, k=0, mode="gold"), tmp_path / "flat.hsc")
        filt = save_filter(TVSFilter.identity(4, 0), tmp_path / "f.tvs")
        other = save_filter(TVSFilter.identity(4, 2), tmp_path / "g.tvs")
        assert main(["measure", "--dump", str(dump)]) == 2
        assert main(["measure", "--dump", str(dump), "--filter", str(filt)]) == 3
        good = write_dump(HiddenCloud(np.random.default_rng(1).standard_normal((6, 4)), layer=0, k=0, mode="gold"),
                          tmp_path / "good.hsc")
        assert main(["measure", "--dump", str(good), "--filter", str(other)]) == 2
        assert main(["measure", "--dump", str(good), "--filter", str(other), "--allow-layer-mismatch"]) == 0

    def test_gradcheck_verb(self, capsys):
        assert main(["gradcheck", "--d", "8"]) == 0
        assert "filter" in capsys.readouterr().out
