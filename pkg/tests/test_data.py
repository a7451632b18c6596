import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medmatch.data import (
    AnalyticDataset,
    Schema,
    cluster_support,
    load_dataset,
    trim_exposure_tails,
    truncate_by_cluster_support,
)
from medmatch.errors import (
    EmptyResultError,
    InputError,
    IntegrityError,
    ParameterError,
    SchemaError,
)

from conftest import make_dataset

SCHEMA = Schema(covariates=("C1", "C2"))


def write_csv(tmp_path, text, name="units.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def dataset_from_supports(supports, per_cluster=5):
    """One cluster per (lo, hi) with exposures spread evenly over it."""
    w, cl, u = [], [], []
    for g, (lo, hi) in enumerate(supports):
        w += list(np.linspace(lo, hi, per_cluster))
        cl += [f"c{g}"] * per_cluster
        u += [float(g)] * per_cluster
    n = len(w)
    return AnalyticDataset(unit_id=np.arange(n), cluster_id=np.array(cl), exposure=np.array(w),
                           outcome=np.zeros(n), covariates=np.zeros((n, 1)), zstar=np.zeros(n),
                           u=np.array(u), covariate_names=("C1",))


class TestLoad:
    HEADER = "unit_id,cluster_id,W,Y,C1,C2,Zstar,U\n"

    def test_three_rows(self, tmp_path):
        path = write_csv(tmp_path, self.HEADER + "a,A,1.0,2,0,1,0.5,100\n"
                                               "b,A,2.0,3,1,0,0.6,100\n"
                                               "c,B,3.5,1,2,2,0.1,200\n")
        data = load_dataset(path, SCHEMA)
        assert len(data) == 3
        assert data.exposure_range == (1.0, 3.5)
        assert data.covariates.shape == (3, 2)
        assert list(data.clusters) == ["A", "B"]

    def test_semicolon_delimiter(self, tmp_path):
        path = write_csv(tmp_path, self.HEADER.replace(",", ";")
                         + "a;A;1;2;0;1;0.5;1\nb;A;2;3;1;0;0.6;1\n")
        assert len(load_dataset(path, SCHEMA)) == 2

    def test_u_varies_within_cluster(self, tmp_path):
        path = write_csv(tmp_path, self.HEADER + "a,A,1,2,0,1,0.5,100\nb,A,2,3,1,0,0.6,200\n")
        with pytest.raises(IntegrityError, match="'A'"):
            load_dataset(path, SCHEMA)

    def test_nan_exposure_reports_row(self, tmp_path):
        path = write_csv(tmp_path, self.HEADER + "a,A,1,2,0,1,0.5,1\nb,A,NaN,3,1,0,0.6,1\n")
        with pytest.raises(InputError, match="row 1 column 'W'"):
            load_dataset(path, SCHEMA)

    def test_unparseable_value(self, tmp_path):
        path = write_csv(tmp_path, self.HEADER + "a,A,1,2,0,1,0.5,1\nb,A,2,x,1,0,0.6,1\n")
        with pytest.raises(InputError, match="'Y'"):
            load_dataset(path, SCHEMA)

    def test_missing_column(self, tmp_path):
        path = write_csv(tmp_path, "unit_id,cluster_id,W,Y,C1,Zstar\na,A,1,2,0,1\nb,A,2,3,1,0\n")
        with pytest.raises(SchemaError, match="missing columns"):
            load_dataset(path, SCHEMA)

    def test_empty_file(self, tmp_path):
        with pytest.raises(InputError):
            load_dataset(write_csv(tmp_path, ""), SCHEMA)

    def test_header_only(self, tmp_path):
        with pytest.raises(InputError):
            load_dataset(write_csv(tmp_path, self.HEADER), SCHEMA)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError, match="no such file"):
            load_dataset(tmp_path / "absent.csv", SCHEMA)

    def test_schema_needs_covariate(self, tmp_path):
        path = write_csv(tmp_path, self.HEADER + "a,A,1,2,0,1,0.5,1\n")
        with pytest.raises(SchemaError):
            load_dataset(path, Schema())

    def test_duplicate_ids(self, tmp_path):
        path = write_csv(tmp_path, self.HEADER + "a,A,1,2,0,1,0.5,1\na,A,2,3,1,0,0.6,1\n")
        with pytest.raises(IntegrityError, match="unique"):
            load_dataset(path, SCHEMA)

    def test_schema_from_mapping_rejects_unknown_keys(self):
        with pytest.raises(SchemaError):
            Schema.from_mapping({"exposure": "pm25", "colour": "red"})

    def test_round_trip_through_frame(self, tmp_path, dataset):
        path = tmp_path / "rt.csv"
        dataset.to_frame().to_csv(path, index=False)
        back = load_dataset(path, Schema(covariates=dataset.covariate_names))
        np.testing.assert_array_equal(back.exposure, dataset.exposure)
        np.testing.assert_array_equal(back.unit_id, dataset.unit_id)


class TestDataset:
    def test_needs_two_units(self):
        with pytest.raises(InputError):
            AnalyticDataset(unit_id=[1], cluster_id=["a"], exposure=[1.0], outcome=[1.0],
                            covariates=[[0.0]], zstar=[0.0], u=[0.0], covariate_names=("C1",))

    def test_arrays_are_read_only(self, dataset):
        with pytest.raises(ValueError):
            dataset.exposure[0] = 99.0

    def test_input_arrays_not_aliased(self):
        w = np.array([1.0, 2.0, 3.0])
        d = AnalyticDataset(unit_id=[1, 2, 3], cluster_id=["a"] * 3, exposure=w, outcome=w,
                            covariates=w[:, None], zstar=w, u=np.zeros(3), covariate_names=("C",))
        w[0] = 50.0
        assert d.exposure[0] == 1.0

    def test_numeric_ids_rank_numerically(self):
        d = make_dataset(n=12, ids=np.array([10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 11, 100]))
        assert d.id_rank[list(d.unit_id).index("2")] < d.id_rank[list(d.unit_id).index("10")]

    def test_unit_view(self, dataset):
        unit = dataset.unit(3)
        assert unit.exposure == dataset.exposure[3]
        assert unit.covariates == tuple(dataset.covariates[3])

    def test_take_relabel_makes_ids_unique(self, dataset):
        sub = dataset.take([0, 0, 1], relabel=True)
        assert len(set(sub.unit_id)) == 3
        assert list(sub.block_id) == [dataset.unit_id[0]] * 2 + [dataset.unit_id[1]]

    def test_variables(self, dataset):
        assert set(dataset.variables()) == {"C1", "C2", "Zstar", "U"}


class TestTruncation:
    def test_identical_supports_keep_everything(self):
        data = dataset_from_supports([(0, 10)] * 3)
        kept, report = truncate_by_cluster_support(data, 3)
        assert report.dropped == 0 and report.kept == len(data)
        assert report.retained_interval == (0.0, 10.0)
        assert kept is data

    def test_staggered_supports(self):
        # coverage counts: [0,4) 1, [4,5] 3, (5,10] 1  ->  [4, 5]
        data = dataset_from_supports([(0, 5), (4, 10), (4, 5)], per_cluster=11)
        kept, report = truncate_by_cluster_support(data, 3)
        assert report.retained_interval == (4.0, 5.0)
        assert np.all((kept.exposure >= 4) & (kept.exposure <= 5))
        expected = np.count_nonzero((data.exposure >= 4) & (data.exposure <= 5))
        assert report.kept == expected and report.dropped == len(data) - expected

    def test_report_json(self):
        _, report = truncate_by_cluster_support(dataset_from_supports([(0, 5), (4, 10)]), 2)
        doc = json.loads(json.dumps(report.to_dict()))
        assert set(doc) == {"retained_interval", "dropped", "kept"}

    def test_no_coverage(self):
        data = dataset_from_supports([(0, 1), (2, 3), (4, 5)])
        with pytest.raises(EmptyResultError):
            truncate_by_cluster_support(data, 2)

    def test_k_out_of_range(self, dataset):
        with pytest.raises(ParameterError):
            truncate_by_cluster_support(dataset, 0)
        with pytest.raises(ParameterError):
            truncate_by_cluster_support(dataset, 4)

    def test_k1_overlapping_supports_is_identity(self, dataset):
        kept, report = truncate_by_cluster_support(dataset, 1)
        assert report.dropped == 0 and kept is dataset

    def test_k1_disjoint_supports_keeps_largest_piece(self):
        # with a gap between supports only the most populated piece can be contiguous
        data = dataset_from_supports([(0, 1), (5, 6), (5.5, 7)])
        _, report = truncate_by_cluster_support(data, 1)
        assert report.retained_interval == (5.0, 7.0)

    def test_support_within_range(self, dataset):
        lo, hi = dataset.exposure_range
        for a, b in cluster_support(dataset).intervals.values():
            assert lo <= a <= b <= hi

    def test_idempotent(self):
        data = dataset_from_supports([(0, 5), (3, 10), (3, 5)], per_cluster=21)
        once, _ = truncate_by_cluster_support(data, 2)
        twice, report = truncate_by_cluster_support(once, 2)
        assert twice is once and report.dropped == 0

    @given(st.integers(0, 10_000), st.integers(1, 4))
    @settings(max_examples=40, deadline=None)
    def test_subset_and_unmutated(self, seed, k):
        data = make_dataset(seed=seed, n=40, n_clusters=4)
        try:
            once, report = truncate_by_cluster_support(data, k)
        except EmptyResultError:
            return
        lo, hi = report.retained_interval
        assert set(once.unit_id) <= set(data.unit_id)
        assert np.all((once.exposure >= lo) & (once.exposure <= hi))
        lookup = dict(zip(data.unit_id, data.exposure))
        assert all(lookup[u] == w for u, w in zip(once.unit_id, once.exposure))


def test_trim_tails(dataset):
    trimmed, keep = trim_exposure_tails(dataset, 0.1)
    lo, hi = np.quantile(dataset.exposure, [0.1, 0.9])
    assert np.all((trimmed.exposure >= lo) & (trimmed.exposure <= hi))
    np.testing.assert_array_equal(trimmed.exposure, dataset.exposure[keep])
    assert trim_exposure_tails(dataset, 0.0)[0] is dataset
    with pytest.raises(ParameterError):
        trim_exposure_tails(dataset, 0.5)
