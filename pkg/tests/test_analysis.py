import numpy as np
import numpy.testing as npt
import pytest

from gmlp import analysis as A
from gmlp.data import Dataset
from gmlp.errors import DataError
from gmlp.layers import RoutingParams
from gmlp.model import build, parse_arch
from gmlp.tensor import Tensor


def routing(psi, temperature=1.0, k=None, m=None):
    psi = np.asarray(psi, dtype=np.float64)
    km, d = psi.shape
    k = k or 1
    m = m or km // k
    return RoutingParams(Tensor(psi), temperature, k, m, d)


class TestDiscretize:
    def test_argmax_row(self):
        table = A.discretize_routing(routing([[0.0, 5.0, 1.0]]))
        assert table.slot_to_feature[0] == 1

    def test_tie_breaks_low(self):
        table = A.discretize_routing(routing([[3.0, 3.0]]))
        assert table.slot_to_feature[0] == 0

    def test_confidence_at_current_temperature(self):
        r = routing([[2.0, 0.0]], temperature=0.1)
        table = A.discretize_routing(r)
        assert table.row_confidence[0] == pytest.approx(1.0, abs=1e-8)
        r.temperature = 1.0
        softer = A.discretize_routing(r)
        assert softer.row_confidence[0] == pytest.approx(np.exp(2) / (np.exp(2) + 1), rel=1e-9)


class TestSparsity:
    def test_saturated(self):
        assert A.sparsity_report(routing(np.eye(4) * 1e3)) == 1.0

    def test_uniform(self):
        assert A.sparsity_report(routing(np.zeros((4, 6)))) == 0.0

    def test_monotone_in_temperature(self):
        rng = np.random.default_rng(0)
        psi = rng.normal(size=(10, 6))
        psi[np.arange(10), psi.argmax(1)] += 0.5  # unique maxima
        values = []
        for tau in (1.0, 0.1, 0.01):
            values.append(A.sparsity_report(routing(psi, temperature=tau)))
        assert values == sorted(values)
        assert values[-1] == 1.0


class TestHeatmap:
    def test_counts(self):
        table = A.RoutingTable(np.array([3, 3]), np.ones(2), 1, 2, 5)
        counts = A.selection_heatmap(table)
        npt.assert_array_equal(counts, [0, 0, 0, 2, 0])

    def test_total_is_km(self):
        rng = np.random.default_rng(1)
        slots = rng.integers(0, 7, size=12)
        table = A.RoutingTable(slots, np.ones(12), 4, 3, 7)
        assert A.selection_heatmap(table).sum() == 12

    def test_permutation_equivariance(self):
        # relabeling features with a permutation relabels the counts the same way
        rng = np.random.default_rng(2)
        slots = rng.integers(0, 5, size=8)
        perm = rng.permutation(5)
        counts = A.selection_heatmap(A.RoutingTable(slots, np.ones(8), 4, 2, 5))
        relabeled = A.selection_heatmap(A.RoutingTable(perm[slots], np.ones(8), 4, 2, 5))
        npt.assert_array_equal(relabeled[perm], counts)


class TestGroupGraph:
    def test_repeated_pair_accumulates(self):
        table = A.RoutingTable(np.array([0, 1, 0, 1]), np.ones(4), 2, 2, 4)
        graph = A.group_graph(table)
        assert graph.edges == [(0, 1, 2)]

    def test_no_self_edge(self):
        table = A.RoutingTable(np.array([2, 2]), np.ones(2), 1, 2, 4)
        assert A.group_graph(table).edges == []

    def test_triple_group_complete_subgraph(self):
        table = A.RoutingTable(np.array([0, 1, 2]), np.ones(3), 1, 3, 4)
        assert A.group_graph(table).edges == [(0, 1, 1), (0, 2, 1), (1, 2, 1)]

    def test_total_weight_counts_pairs(self):
        rng = np.random.default_rng(3)
        k, m, d = 5, 3, 8
        slots = rng.integers(0, d, size=k * m)
        graph = A.group_graph(A.RoutingTable(slots, np.ones(k * m), k, m, d))
        expected = 0
        for g in range(k):
            uniq = len(set(slots[g * m : (g + 1) * m].tolist()))
            expected += uniq * (uniq - 1) // 2
        assert graph.total_weight == expected


class TestCorrelation:
    def _model_with_assignment(self, assign, d, k, m):
        arch = f"GSel-{k}-{m}, GFC, ReLU, BNorm, Concat, FC-2"
        model = build(parse_arch(arch, d=d, seed=0))
        psi = np.full((k * m, d), -200.0)
        psi[np.arange(k * m), assign] = 200.0
        model.routing.psi.data[:] = psi
        return model

    def test_same_feature_slots_fully_correlated(self):
        model = self._model_with_assignment([1, 1, 0, 2], d=4, k=2, m=2)
        rng = np.random.default_rng(4)
        ds = Dataset(rng.normal(size=(200, 4)), rng.integers(0, 2, 200), 2)
        report = A.correlation_analysis(model, ds)
        assert report.corr[0, 1] == pytest.approx(1.0, abs=1e-9)

    def test_negated_feature_anticorrelated(self):
        model = self._model_with_assignment([0, 1], d=2, k=1, m=2)
        rng = np.random.default_rng(5)
        base = rng.normal(size=200)
        ds = Dataset(np.column_stack([base, -base]), np.zeros(200, dtype=int), 1)
        report = A.correlation_analysis(model, ds)
        assert report.corr[0, 1] == pytest.approx(-1.0, abs=1e-9)

    def test_pair_partition_counts(self):
        model = self._model_with_assignment(list(range(6)), d=6, k=3, m=2)
        rng = np.random.default_rng(6)
        ds = Dataset(rng.normal(size=(100, 6)), rng.integers(0, 2, 100), 2)
        report = A.correlation_analysis(model, ds)
        n = 6
        assert report.intra_hist.sum() + report.inter_hist.sum() == n * (n - 1) // 2
        assert report.intra_hist.sum() == 3  # one intra pair per group

    def test_zero_variance_slot_flagged(self):
        model = self._model_with_assignment([0, 1], d=2, k=1, m=2)
        rng = np.random.default_rng(7)
        X = np.column_stack([np.full(50, 3.0), rng.normal(size=50)])
        ds = Dataset(X, np.zeros(50, dtype=int), 1)
        report = A.correlation_analysis(model, ds)
        assert report.zero_variance_slots == 1
        assert report.corr[0, 0] == 0.0

    def test_cap_respected(self):
        model = self._model_with_assignment(list(range(6)) + [0, 1], d=6, k=4, m=2)
        rng = np.random.default_rng(8)
        ds = Dataset(rng.normal(size=(60, 6)), rng.integers(0, 2, 60), 2)
        report = A.correlation_analysis(model, ds, n_features_cap=4)
        assert report.corr.shape == (4, 4)

    def test_needs_samples(self):
        model = self._model_with_assignment([0, 1], d=2, k=1, m=2)
        ds = Dataset(np.zeros((1, 2)), np.zeros(1, dtype=int), 1)
        with pytest.raises(DataError):
            A.correlation_analysis(model, ds)


class TestExports:
    def test_heatmap_round_trip(self, tmp_path):
        counts = np.array([3, 0, 5, 1])
        A.save_heatmap_csv(counts, tmp_path / "h.csv", feature_names=list("abcd"))
        npt.assert_array_equal(A.load_heatmap_csv(tmp_path / "h.csv"), counts)

    def test_edge_list_round_trip(self, tmp_path):
        graph = A.GroupGraph([0, 1, 4], [(0, 1, 2), (1, 4, 1)])
        A.save_edge_list(graph, tmp_path / "e.txt")
        back = A.load_edge_list(tmp_path / "e.txt")
        assert back.edges == graph.edges
        assert back.nodes == graph.nodes

    def test_histogram_round_trip(self, tmp_path):
        report = A.CorrelationReport(
            corr=np.eye(2),
            intra_hist=np.arange(40),
            inter_hist=np.arange(40)[::-1],
            bin_edges=np.linspace(-1, 1, 41),
            zero_variance_slots=0,
        )
        A.save_histogram_csv(report, tmp_path / "hist.csv")
        intra, inter, edges = A.load_histogram_csv(tmp_path / "hist.csv")
        npt.assert_array_equal(intra, report.intra_hist)
        npt.assert_array_equal(inter, report.inter_hist)
        npt.assert_allclose(edges, report.bin_edges)
