"""Dataset generation, sweep harness, loss statistics, correlations, reports."""

import json
import math

import numpy as np
import pytest

from debris_edge.experiments import (
    DEFAULT_CLASSES,
    GenSpec,
    LossStats,
    RunRecord,
    SweepConfig,
    TrialConfig,
    dataset_from_manifest,
    derive_seed,
    generate_dataset,
    lagged_correlation,
    load_manifest,
    loss_stats,
    render_report,
    run_grid,
)
from debris_edge.imaging import pnm_load
from debris_edge.neuralnet import DivergenceError, EvalRecord, TrainHistory

TEN_LOSSES = [
    0.177537, 0.181777, 0.177506, 0.188233, 0.180881,
    0.171767, 0.174148, 0.172995, 0.175724, 0.179366,
]


class TestGenerateDataset:
    def test_corpus_sizing(self, tmp_path):
        recs = generate_dataset(GenSpec(per_class=2, seed=0), tmp_path)
        assert len(recs) == 12  # 6 classes x 2
        manifest = load_manifest(tmp_path / "manifest.jsonl")
        assert len(manifest) == 12

    def test_same_seed_identical_output(self, tmp_path):
        spec = GenSpec(per_class=2, seed=5, classes=("paper", "trash"))
        a = tmp_path / "a"
        b = tmp_path / "b"
        ra = generate_dataset(spec, a)
        rb = generate_dataset(spec, b)
        assert ra == rb
        assert (a / "manifest.jsonl").read_bytes() == (b / "manifest.jsonl").read_bytes()
        for rec in ra:
            assert (a / rec["path"]).read_bytes() == (b / rec["path"]).read_bytes()

    def test_boxes_inside_bounds_and_files_parse(self, tmp_path):
        spec = GenSpec(per_class=1, seed=9)
        recs = generate_dataset(spec, tmp_path)
        w, h = spec.image_size
        for rec in recs:
            img = pnm_load(tmp_path / rec["path"])
            assert (img.width, img.height) == (w, h)
            assert rec["boxes"], "every image carries at least one object"
            for x, y, bw, bh in rec["boxes"]:
                assert 0 <= x and 0 <= y
                assert x + bw <= w and y + bh <= h

    def test_manifest_record_shape(self, tmp_path):
        recs = generate_dataset(GenSpec(per_class=1, seed=1, classes=("metal",)), tmp_path)
        line = (tmp_path / "manifest.jsonl").read_text().splitlines()[0]
        parsed = json.loads(line)
        assert set(parsed) == {"path", "label", "boxes"}
        assert parsed["label"] == "metal"
        assert parsed == recs[0]

    def test_objects_do_not_overlap(self, tmp_path):
        recs = generate_dataset(
            GenSpec(per_class=6, seed=2, classes=("cardboard",), objects_min=3, objects_max=5),
            tmp_path,
        )
        for rec in recs:
            boxes = rec["boxes"]
            for i, (x1, y1, w1, h1) in enumerate(boxes):
                for x2, y2, w2, h2 in boxes[i + 1 :]:
                    ix = min(x1 + w1, x2 + w2) - max(x1, x2)
                    iy = min(y1 + h1, y2 + h2) - max(y1, y2)
                    assert ix <= 0 or iy <= 0

    def test_unknown_class_rejected(self):
        with pytest.raises(ValueError, match="grammar"):
            GenSpec(per_class=1, seed=0, classes=("glass",))

    def test_dataset_bridge(self, tmp_path):
        generate_dataset(GenSpec(per_class=2, seed=3), tmp_path)
        data = dataset_from_manifest(tmp_path / "manifest.jsonl", DEFAULT_CLASSES)
        assert len(data) == 12
        assert data.class_names == DEFAULT_CLASSES
        labels = set(data.labels.tolist())
        assert labels == set(range(6))


def history_of(losses):
    h = TrainHistory()
    for i, v in enumerate(losses, start=1):
        h.append(EvalRecord(i * 10, v, v, 0.5, 0.5))
    return h


class TestRunGrid:
    def test_product_count(self):
        sweep = SweepConfig((1,), (10,), ("Adam", "SGD"), (4, 8, 16), trials_per_config=1)
        records = run_grid(sweep, lambda cfg: history_of([0.5]))
        assert len(records) == 6
        assert [r.config_id for r in records] == list(range(6))

    def test_published_grid_shape_reproduces_ten_rows(self):
        sweep = SweepConfig((2,), (2000,), ("Adam", "SGD"), (8, 16, 16, 16, 32))
        records = run_grid(sweep, lambda cfg: history_of([0.2]))
        assert len(records) == 10
        solvers = [r.solver_type for r in records]
        assert solvers == ["Adam"] * 5 + ["SGD"] * 5
        assert [r.nn_size for r in records] == [8, 16, 16, 16, 32] * 2

    def test_deterministic_records(self):
        sweep = SweepConfig((3,), (20,), ("Adam",), (4,), trials_per_config=3, seed=9)
        def task(cfg):
            return history_of([cfg.seed % 1000 / 1000.0])
        r1 = run_grid(sweep, task)
        r2 = run_grid(sweep, task)
        assert r1 == r2
        assert len({r.seed for r in r1}) == 3  # distinct derived seeds

    def test_divergence_recorded_not_dropped(self):
        sweep = SweepConfig((1,), (10,), ("Adam",), (4, 8))
        def task(cfg):
            if cfg.nn_size == 8:
                raise DivergenceError(7, history_of([0.4]))
            return history_of([0.3])
        records = run_grid(sweep, task)
        assert len(records) == 2
        assert records[0].diverged_at is None
        assert records[1].diverged_at == 7
        assert math.isnan(records[1].test_loss)

    def test_parallel_matches_serial(self):
        sweep = SweepConfig((1, 2), (10,), ("Adam", "SGD"), (4, 8), trials_per_config=2)
        def task(cfg):
            return history_of([(cfg.config_id + 1) / 100 + cfg.trial / 1000])
        assert run_grid(sweep, task, workers=4) == run_grid(sweep, task, workers=1)

    def test_trials_share_config_id(self):
        sweep = SweepConfig((1,), (10,), ("Adam",), (4,), trials_per_config=3)
        records = run_grid(sweep, lambda cfg: history_of([0.1]))
        assert [(r.config_id, r.trial) for r in records] == [(0, 0), (0, 1), (0, 2)]

    def test_solver_names_validated(self):
        with pytest.raises(ValueError):
            SweepConfig((1,), (10,), ("adamw",), (4,))


class TestLossStats:
    def test_published_statistics_block(self):
        stats = loss_stats(TEN_LOSSES)
        assert abs(stats.mean - 0.177993) < 1e-6
        assert abs(stats.median - 0.177521) < 1e-6
        assert abs(stats.sd - 0.004871) < 1e-6
        assert abs(stats.min - 0.171767) < 1e-6
        assert abs(stats.max - 0.188233) < 1e-6
        assert abs(stats.range - 0.016466) < 1e-6
        assert abs(stats.spread - 1.278311) < 1e-6

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(0)
        vals = rng.uniform(0.1, 0.9, size=17).tolist()
        stats = loss_stats(vals)
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
        assert stats.mean == pytest.approx(mean, abs=1e-12)
        assert stats.sd == pytest.approx(math.sqrt(var), abs=1e-12)
        ordered = sorted(vals)
        assert stats.median == pytest.approx(ordered[8], abs=1e-12)
        assert stats.range == stats.max - stats.min

    def test_two_point_case(self):
        stats = loss_stats([1.0, 3.0])
        assert stats.mean == 2.0
        assert stats.median == 2.0
        assert stats.sd == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_even_median_is_middle_mean(self):
        stats = loss_stats([1.0, 2.0, 10.0, 20.0])
        assert stats.median == 6.0

    def test_constant_list_spread_undefined(self):
        stats = loss_stats([0.5, 0.5, 0.5])
        assert stats.sd == 0.0
        assert math.isnan(stats.spread)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            loss_stats([0.5])


class TestLaggedCorrelation:
    def test_identity_lag_zero(self):
        x = np.sin(np.linspace(0, 10, 50)).tolist()
        corr = lagged_correlation(x, x, max_lag=0)
        assert corr[0] == pytest.approx(1.0, abs=1e-12)

    def test_shift_peaks_at_lag(self):
        t = np.linspace(0, 12 * np.pi, 203)
        base = np.sin(t) + 0.2 * np.sin(3.1 * t)
        x = base[3:]
        y = base[:-3]  # y[i] = x[i - 3]: y trails x by 3 samples
        corr = lagged_correlation(x, y, max_lag=5)
        best = max(corr, key=lambda l: corr[l])
        assert best == 3
        assert corr[3] == pytest.approx(1.0, abs=1e-9)

    def test_constant_series_undefined(self):
        x = np.arange(20.0)
        corr = lagged_correlation(x, np.full(20, 2.0), max_lag=3)
        assert all(math.isnan(v) for v in corr.values())

    def test_values_bounded(self):
        rng = np.random.default_rng(1)
        corr = lagged_correlation(rng.normal(size=60), rng.normal(size=60), 10)
        assert len(corr) == 21
        for v in corr.values():
            assert -1.0 <= v <= 1.0

    def test_negative_lag_swaps_roles(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=40)
        y = rng.normal(size=40)
        corr = lagged_correlation(x, y, 4)
        swapped = lagged_correlation(y, x, 4)
        for lag in range(-4, 5):
            assert corr[lag] == pytest.approx(swapped[-lag], abs=1e-12)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            lagged_correlation([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], max_lag=2)


def make_records(n=10):
    records = []
    for i, loss in enumerate(TEN_LOSSES[:n]):
        records.append(
            RunRecord(i, 0, 2, 2000, "Adam" if i < 5 else "SGD", 16, 100 + i,
                      loss, loss * 0.9, None, history_of([loss * 1.2, loss])),
        )
    return records


class TestRenderReport:
    def test_csv_layout_ten_rows_plus_stats(self, tmp_path):
        records = make_records()
        out = render_report(records, loss_stats(TEN_LOSSES), {0: 1.0, 1: 0.5}, tmp_path)
        lines = out["table"].read_text().strip().split("\n")
        assert lines[0] == "config,test_loss,input_size,iters,solver_type,nn_size"
        assert len(lines) == 1 + 10 + 7
        assert lines[1].startswith("1,0.177537,2,2000,Adam,16")
        assert lines[11] == "mean,0.177993"
        assert lines[17] == "spread,1.278311"

    def test_empty_correlations_noted_and_chart_omitted(self, tmp_path):
        records = make_records(2)
        out = render_report(records, None, None, tmp_path)
        assert out["correlations"] is None
        assert any("correlation chart omitted" in n for n in out["notes"])
        assert "note,correlation chart omitted" in out["table"].read_text()

    def test_identical_inputs_identical_bytes(self, tmp_path):
        records = make_records()
        stats = loss_stats(TEN_LOSSES)
        corr = {-1: 0.2, 0: 1.0, 1: 0.3}
        a = render_report(records, stats, corr, tmp_path / "a")
        b = render_report(records, stats, corr, tmp_path / "b")
        assert a["table"].read_bytes() == b["table"].read_bytes()
        assert a["losses"].read_bytes() == b["losses"].read_bytes()
        assert a["correlations"].read_bytes() == b["correlations"].read_bytes()

    def test_diverged_rows_marked(self, tmp_path):
        rec = RunRecord(0, 0, 2, 100, "SGD", 8, 1, math.nan, math.nan, 55, None)
        out = render_report([rec], None, None, tmp_path)
        text = out["table"].read_text()
        assert "1,diverged,2,100,SGD,8" in text

    def test_empty_records_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            render_report([], None, None, tmp_path)


class TestDeriveSeed:
    def test_stable_and_distinct(self):
        assert derive_seed(5, 1, 2) == derive_seed(5, 1, 2)
        assert derive_seed(5, 1, 2) != derive_seed(5, 2, 1)
        assert derive_seed(5, 1) != derive_seed(6, 1)
