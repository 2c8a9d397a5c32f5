import numpy as np
import pytest
import scipy.sparse as sp

from conftest import TINY_ARCH
from dynglr import bench, dataio
from dynglr.bench import (ExperimentGrid, Report, error_rate, load_dataset,
                          mean_edge_weight_proportion, prepare_cell,
                          residual_noise, run_grid, subsample_dataset)
from dynglr.errors import ConfigError
from dynglr.graphs import Graph, assign_weights, knn_edges


class TestErrorRate:
    def test_perfect(self):
        assert error_rate(np.array([1, -1]), np.array([1, -1])) == 0.0

    def test_all_flipped(self):
        assert error_rate(np.array([1, -1]), np.array([-1, 1])) == 100.0

    def test_one_of_four(self):
        assert error_rate(np.array([1, 1, 1, 1]), np.array([1, 1, 1, -1])) == 25.0

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            error_rate(np.array([1]), np.array([1, 1]))


def two_edge_graph(w_same, w_opposite):
    edges = sp.csr_matrix((np.ones(4, dtype=np.int8),
                           ([0, 1, 1, 2], [1, 0, 2, 1])), shape=(3, 3))
    weights = sp.csr_matrix((np.array([w_same, w_same, w_opposite, w_opposite]),
                             ([0, 1, 1, 2], [1, 0, 2, 1])), shape=(3, 3))
    return Graph(n_nodes=3, edges=edges, weights=weights,
                 gamma=np.ones(3, dtype=np.int64))


class TestMeanEdgeWeightProportion:
    def test_hand_evaluated_mix(self):
        # same-label edge w=0.5, opposite w=0.8 over 2 positive-weight edges
        g = two_edge_graph(0.5, 0.8)
        labels = np.array([1, 1, -1])
        assert mean_edge_weight_proportion(g, labels) == pytest.approx(0.4)

    def test_no_opposite_edges(self):
        g = two_edge_graph(0.5, 0.8)
        assert mean_edge_weight_proportion(g, np.array([1, 1, 1])) == 0.0

    def test_complete_same_label_graph(self):
        rng = np.random.default_rng(0)
        emb = rng.normal(size=(8, 2))
        g = assign_weights(knn_edges(emb, 7), emb, sigma=1.0)
        assert mean_edge_weight_proportion(g, np.ones(8)) == 0.0

    def test_scaling_property(self):
        g = two_edge_graph(0.5, 0.8)
        labels = np.array([1, 1, -1])
        base = mean_edge_weight_proportion(g, labels)
        for c in (0.25, 0.5, 0.9):
            scaled = Graph(n_nodes=3, edges=g.edges, weights=g.weights * c,
                           gamma=g.gamma)
            assert mean_edge_weight_proportion(scaled, labels) == pytest.approx(c * base)

    def test_edgeless_graph(self):
        g = Graph(n_nodes=2, edges=sp.csr_matrix((2, 2), dtype=np.int8),
                  weights=sp.csr_matrix((2, 2)), gamma=np.ones(2, dtype=np.int64))
        assert mean_edge_weight_proportion(g, np.array([1, -1])) == 0.0


class TestResidualNoise:
    def test_perfect_restoration(self):
        clean = np.array([1, -1, 1, -1])
        mask = np.ones(4, dtype=bool)
        assert residual_noise(clean.astype(float), clean, mask) == 0.0

    def test_unchanged_quarter_flip(self):
        clean = np.ones(100)
        noisy = clean.copy()
        noisy[:25] = -1
        assert residual_noise(noisy, clean, np.ones(100, dtype=bool)) == 0.25

    def test_one_of_ten(self):
        clean = np.ones(10)
        denoised = np.ones(10)
        denoised[3] = -0.2
        assert residual_noise(denoised, clean, np.ones(10, dtype=bool)) == 0.1

    def test_zeros_count_as_errors(self):
        clean = np.ones(4)
        denoised = np.array([1.0, 0.0, 1.0, 1.0])
        assert residual_noise(denoised, clean, np.ones(4, dtype=bool)) == 0.25

    def test_only_train_nodes_counted(self):
        clean = np.array([1, 1, -1, -1])
        denoised = np.array([1.0, -1.0, -1.0, 1.0])
        mask = np.array([True, False, True, False])
        assert residual_noise(denoised, clean, mask) == 0.0


class TestLoadDataset:
    def test_synthetic_fallback(self, tmp_path):
        ds, source = load_dataset("phoneme", data_dir=str(tmp_path), seed=0,
                                  desk_scale=True)
        assert source == "synthetic"
        assert ds.n_nodes <= bench.DESK_SCALE_MAX_NODES

    def test_csv_preferred_when_present(self, tmp_path):
        rng = np.random.default_rng(1)
        lines = ["a,b,c,label"]
        for i in range(60):
            f = rng.normal(size=3)
            lines.append(f"{f[0]},{f[1]},{f[2]},{i % 2}")
        (tmp_path / "toy.csv").write_text("\n".join(lines) + "\n")
        ds, source = load_dataset("toy", data_dir=str(tmp_path), seed=0)
        assert source.startswith("csv:")
        assert ds.n_nodes == 60

    def test_env_var_honored(self, tmp_path, monkeypatch):
        (tmp_path / "mini.csv").write_text(
            "a,label\n" + "\n".join(f"{i}.5,{i % 2}" for i in range(20)) + "\n")
        monkeypatch.setenv(bench.DATA_DIR_ENV, str(tmp_path))
        ds, source = load_dataset("mini")
        assert source.startswith("csv:")

    def test_subsample_stratified(self):
        ds = dataio.synthetic_dataset("phoneme", seed=0, max_nodes=1000)
        small = subsample_dataset(ds, 300, seed=1)
        assert small.n_nodes <= 300
        frac_before = (ds.clean_labels > 0).mean()
        frac_after = (small.clean_labels > 0).mean()
        assert abs(frac_before - frac_after) < 0.05


def tiny_grid(tmp_path, **kw):
    defaults = dict(datasets=("toy",), noise_levels=(0.0, 0.25), repeats=1,
                    variants=("DML-KNN", "G-12"), base_seed=3,
                    data_dir=str(tmp_path))
    defaults.update(kw)
    return ExperimentGrid(**defaults)


@pytest.fixture()
def toy_csv_dir(tmp_path):
    rng = np.random.default_rng(5)
    half = 150
    lines = ["a,b,c,label"]
    for cls in (0, 1):
        mean = -2.0 if cls == 0 else 2.0
        for _ in range(half):
            f = rng.normal(mean, 1.0, size=3)
            lines.append(f"{f[0]},{f[1]},{f[2]},{cls}")
    (tmp_path / "toy.csv").write_text("\n".join(lines) + "\n")
    return tmp_path


TINY_OVERRIDES = dict(arch=TINY_ARCH, triplets_per_graph=20, embedding_dim=4,
                      gamma_candidates=(2, 4), rank_sample_k=24,
                      rank_sample_batches=6, rank_coverage=1.0)


class TestRunGrid:
    def test_cell_count(self, toy_csv_dir, tmp_path):
        grid = tiny_grid(toy_csv_dir, noise_levels=(0.0, 0.25), repeats=1,
                         variants=("DML-KNN",))
        out = tmp_path / "results.csv"
        report = run_grid(grid, out, TINY_OVERRIDES)
        ok = [r for r in report.rows if r["status"] == "ok"]
        assert len(ok) == 2

    def test_resume_skips_completed_cells(self, toy_csv_dir, tmp_path):
        grid = tiny_grid(toy_csv_dir, variants=("DML-KNN",))
        out = tmp_path / "results.csv"
        first = run_grid(grid, out, TINY_OVERRIDES)
        n_lines = len(out.read_text().splitlines())
        second = run_grid(grid, out, TINY_OVERRIDES)
        assert len(out.read_text().splitlines()) == n_lines
        assert len(second.rows) == len(first.rows)

    def test_identical_flip_sets_across_variants(self, toy_csv_dir):
        ds, _ = load_dataset("toy", str(toy_csv_dir), seed=3)
        grid = tiny_grid(toy_csv_dir)
        a = prepare_cell(ds, grid, "toy", 0.25, 0)
        b = prepare_cell(ds, grid, "toy", 0.25, 0)
        assert np.array_equal(a.noisy_labels, b.noisy_labels)
        assert np.array_equal(a.split, b.split)

    def test_determinism_bit_for_bit(self, toy_csv_dir, tmp_path):
        grid = tiny_grid(toy_csv_dir, variants=("G-12",), noise_levels=(0.25,))
        out1 = tmp_path / "r1.csv"
        out2 = tmp_path / "r2.csv"
        rep1 = run_grid(grid, out1, TINY_OVERRIDES)
        rep2 = run_grid(grid, out2, TINY_OVERRIDES)
        # wall-clock runtime differs; the error table must not
        assert [r["error_rate"] for r in rep1.rows] == [r["error_rate"] for r in rep2.rows]
        assert rep1.to_csv() == rep2.to_csv()

    def test_diagnostics_recorded_for_glr_variants(self, toy_csv_dir, tmp_path):
        grid = tiny_grid(toy_csv_dir, noise_levels=(0.25,))
        report = run_grid(grid, tmp_path / "diag.csv", TINY_OVERRIDES)
        by_variant = {r["variant"]: r for r in report.rows}
        assert by_variant["DML-KNN"]["diag_residual_noise"] == ""
        assert 0.0 <= float(by_variant["G-12"]["diag_residual_noise"]) <= 1.0
        assert float(by_variant["G-12"]["diag_rho"]) >= 0.0

    def test_failed_cell_recorded_and_grid_continues(self, toy_csv_dir, tmp_path,
                                                     monkeypatch):
        calls = {"n": 0}
        real = bench.run_cell

        def flaky(ds_cell, dataset_id, variant, seed, overrides=None):
            calls["n"] += 1
            if calls["n"] == 1:
                raise RuntimeError("boom")
            return real(ds_cell, dataset_id, variant, seed, overrides)

        monkeypatch.setattr(bench, "run_cell", flaky)
        grid = tiny_grid(toy_csv_dir, variants=("DML-KNN",))
        report = run_grid(grid, tmp_path / "res.csv", TINY_OVERRIDES)
        statuses = sorted(r["status"] for r in report.rows)
        assert statuses == ["error:RuntimeError", "ok"]


class TestReport:
    def _rows(self):
        return [
            {"dataset": "toy", "noise": "0", "repeat": "0", "variant": "G-12",
             "status": "ok", "error_rate": "10.0"},
            {"dataset": "toy", "noise": "0", "repeat": "1", "variant": "G-12",
             "status": "ok", "error_rate": "20.0"},
            {"dataset": "toy", "noise": "0.25", "repeat": "0", "variant": "G-12",
             "status": "ok", "error_rate": "30.0"},
            {"dataset": "toy", "noise": "0", "repeat": "0", "variant": "DML-KNN",
             "status": "ok", "error_rate": "12.0"},
            {"dataset": "toy", "noise": "0", "repeat": "1", "variant": "DML-KNN",
             "status": "error:X", "error_rate": ""},
        ]

    def test_mean_over_ok_repeats(self):
        report = Report(rows=self._rows())
        means = report.mean_errors()
        assert means[("toy", "G-12", 0.0)] == pytest.approx(15.0)
        assert means[("toy", "DML-KNN", 0.0)] == pytest.approx(12.0)

    def test_markdown_orders_variants_by_ladder(self):
        text = Report(rows=self._rows()).to_markdown()
        assert text.index("DML-KNN") < text.index("G-12")
        assert "15.00" in text

    def test_csv_rendering(self):
        text = Report(rows=self._rows()).to_csv()
        lines = text.splitlines()
        assert lines[0].startswith("dataset,variant,")
        assert any("G-12" in ln for ln in lines)
