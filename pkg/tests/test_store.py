import numpy as np
import pytest

from conftest import dataset_from_rows, random_unit_dataset, unit

from featage.errors import ConfigError, DataFormatError, ValidationError
from featage.store import (
    GalleryProbeSplit,
    LongitudinalDataset,
    add_distractors,
    build_youngest_oldest,
    make_record,
    merge_datasets,
    parse_dataset,
    serialize_dataset,
    split_folds,
)


class TestParseCsv:
    def test_renormalizes_three_four_five(self):
        ds = parse_dataset(b"d=2\na,10,0,3.0,4.0\n", "csv")
        assert ds.dim == 2
        np.testing.assert_allclose(ds.records[0].vector, [0.6, 0.8], atol=1e-15)

    def test_empty_body_gives_empty_dataset_with_header_dim(self):
        ds = parse_dataset(b"d=7\n# just a comment\n", "csv")
        assert ds.dim == 7
        assert len(ds) == 0

    def test_duplicate_key_names_the_line(self):
        body = (
            b"d=2\n"
            b"a,5,0,1.0,0.0\n"
            b"b,5,0,0.0,1.0\n"
            b"a,6,0,1.0,0.0\n"
            b"a,5,0,0.6,0.8\n"
        )
        with pytest.raises(DataFormatError, match="line 5"):
            parse_dataset(body, "csv")

    def test_comments_and_blank_lines_skipped(self):
        ds = parse_dataset(b"# top\nd=2\n\n# mid\na,3,1,0.0,1.0\n", "csv")
        assert len(ds) == 1
        assert ds.records[0].key == ("a", 3, 1)

    def test_malformed_row_reports_line(self):
        with pytest.raises(DataFormatError, match="line 2"):
            parse_dataset(b"d=2\na,notanage,0,1.0,0.0\n", "csv")

    def test_wrong_field_count_reports_line(self):
        with pytest.raises(DataFormatError, match="line 3"):
            parse_dataset(b"d=3\na,5,0,1.0,0.0,0.0\nb,5,0,1.0,0.0\n", "csv")

    def test_zero_vector_rejected(self):
        with pytest.raises(DataFormatError, match="zero-norm"):
            parse_dataset(b"d=2\na,5,0,0.0,0.0\n", "csv")

    def test_missing_header(self):
        with pytest.raises(DataFormatError, match="header"):
            parse_dataset(b"a,5,0,1.0,0.0\n", "csv")

    def test_age_out_of_range(self):
        with pytest.raises(DataFormatError, match="age"):
            parse_dataset(b"d=2\na,121,0,1.0,0.0\n", "csv")


class TestBinFormat:
    def test_bad_magic(self):
        with pytest.raises(DataFormatError, match="magic"):
            parse_dataset(b"NOPE" + bytes(20), "bin")

    def test_truncated_stream(self):
        rng = np.random.default_rng(0)
        ds = random_unit_dataset(rng)
        blob = serialize_dataset(ds, "bin")
        with pytest.raises(DataFormatError, match="truncated"):
            parse_dataset(blob[:-3], "bin")

    def test_trailing_bytes_rejected(self):
        rng = np.random.default_rng(0)
        ds = random_unit_dataset(rng)
        blob = serialize_dataset(ds, "bin")
        with pytest.raises(DataFormatError, match="trailing"):
            parse_dataset(blob + b"x", "bin")


class TestRoundTrips:
    def test_csv_round_trip_bit_exact(self):
        rng = np.random.default_rng(42)
        ds = random_unit_dataset(rng, n_subjects=9, dim=13)
        again = parse_dataset(serialize_dataset(ds, "csv"), "csv")
        assert ds.equals(again)

    def test_bin_round_trip_stable_after_float32_quantization(self):
        rng = np.random.default_rng(43)
        ds = random_unit_dataset(rng, n_subjects=9, dim=13)
        once = parse_dataset(serialize_dataset(ds, "bin"), "bin")
        twice = parse_dataset(serialize_dataset(once, "bin"), "bin")
        assert once.equals(twice)
        for a, b in zip(ds.records, once.records):
            np.testing.assert_allclose(a.vector, b.vector, atol=1e-6)
            assert a.key == b.key

    def test_cross_format_metadata_preserved(self):
        rng = np.random.default_rng(44)
        ds = random_unit_dataset(rng, n_subjects=4, dim=5, ages=(0, 60, 120))
        via_bin = parse_dataset(serialize_dataset(ds, "bin"), "bin")
        back = parse_dataset(serialize_dataset(via_bin, "csv"), "csv")
        assert via_bin.equals(back)


class TestDatasetInvariants:
    def test_indexes_enumerate_exactly_the_records(self):
        rng = np.random.default_rng(1)
        ds = random_unit_dataset(rng, n_subjects=5, dim=3)
        from_subjects = [r.key for recs in ds.by_subject.values() for r in recs]
        from_ages = [r.key for recs in ds.by_age.values() for r in recs]
        all_keys = [r.key for r in ds.records]
        assert sorted(from_subjects) == sorted(all_keys)
        assert sorted(from_ages) == sorted(all_keys)

    def test_by_subject_sorted_by_age_then_seq(self):
        ds = dataset_from_rows(2, [
            ("a", 9, 1, (1, 0)),
            ("a", 3, 0, (0, 1)),
            ("a", 9, 0, (0.6, 0.8)),
        ])
        assert [r.key for r in ds.by_subject["a"]] == [("a", 3, 0), ("a", 9, 0), ("a", 9, 1)]

    def test_unit_norm_after_ingestion(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            vec = rng.standard_normal(6) * rng.uniform(0.1, 10)
            rec = make_record("x", 4, 0, vec)
            assert abs(np.linalg.norm(rec.vector) - 1.0) <= 1e-4

    def test_dimension_mismatch_rejected(self):
        recs = [make_record("a", 1, 0, np.array([1.0, 0.0]))]
        recs.append(make_record("b", 1, 0, np.array([1.0, 0.0, 0.0])))
        with pytest.raises(ValidationError, match="dimension"):
            LongitudinalDataset(2, recs)


class TestSplitFolds:
    def test_ten_subjects_five_folds_of_two(self):
        rng = np.random.default_rng(3)
        ds = random_unit_dataset(rng, n_subjects=10)
        folds = split_folds(ds, 5, seed=0)
        assert [len(f.subjects) for f in folds] == [2] * 5

    def test_same_seed_reproduces_partition(self):
        rng = np.random.default_rng(4)
        ds = random_unit_dataset(rng, n_subjects=9)
        a = split_folds(ds, 2, seed=7)
        b = split_folds(ds, 2, seed=7)
        assert [f.subjects for f in a] == [f.subjects for f in b]

    def test_eleven_subjects_five_folds_brute_force_disjoint(self):
        rng = np.random.default_rng(5)
        ds = random_unit_dataset(rng, n_subjects=11)
        folds = split_folds(ds, 5, seed=1)
        sizes = sorted(len(f.subjects) for f in folds)
        assert sizes == [2, 2, 2, 2, 3]
        subject_sets = [set(f.subjects) for f in folds]
        for i in range(len(folds)):
            for j in range(i + 1, len(folds)):
                assert not (subject_sets[i] & subject_sets[j])
        assert set().union(*subject_sets) == set(ds.subjects)
        merged = merge_datasets(folds)
        assert sorted(r.key for r in merged.records) == sorted(r.key for r in ds.records)

    def test_more_folds_than_subjects(self):
        rng = np.random.default_rng(6)
        ds = random_unit_dataset(rng, n_subjects=3)
        with pytest.raises(ValidationError):
            split_folds(ds, 4, seed=0)

    def test_k_below_two(self):
        rng = np.random.default_rng(6)
        ds = random_unit_dataset(rng, n_subjects=3)
        with pytest.raises(ConfigError):
            split_folds(ds, 1, seed=0)

    def test_partition_independent_of_record_order(self):
        rng = np.random.default_rng(7)
        ds = random_unit_dataset(rng, n_subjects=8)
        shuffled = LongitudinalDataset(ds.dim, list(ds.records)[::-1])
        a = split_folds(ds, 3, seed=5)
        b = split_folds(shuffled, 3, seed=5)
        assert [f.subjects for f in a] == [f.subjects for f in b]


class TestYoungestOldest:
    def test_picks_age_extremes(self):
        rows = [("kid", age, 0, unit([1.0, age])) for age in (5, 6, 8, 11)]
        ds = dataset_from_rows(2, rows)
        split = build_youngest_oldest(ds)
        assert [r.age for r in split.gallery] == [5]
        assert [r.age for r in split.mated_probes] == [11]
        assert split.unmated_probes == []

    def test_single_record_subject_excluded(self):
        ds = dataset_from_rows(2, [("solo", 4, 0, (1.0, 0.0))])
        split = build_youngest_oldest(ds, min_gap=0)
        assert split.gallery == [] and split.mated_probes == []

    def test_min_gap_filters_subjects(self):
        rows = []
        for sid, gap in (("g1", 1), ("g4", 4), ("g9", 9)):
            rows.append((sid, 5, 0, unit([1.0, gap])))
            rows.append((sid, 5 + gap, 0, unit([gap, 1.0])))
        ds = dataset_from_rows(2, rows)
        split = build_youngest_oldest(ds, min_gap=5)
        assert [r.subject_id for r in split.gallery] == ["g9"]
        assert [r.subject_id for r in split.mated_probes] == ["g9"]

    def test_equal_age_ties_break_by_smallest_seq(self):
        ds = dataset_from_rows(2, [
            ("a", 5, 2, (1.0, 0.0)),
            ("a", 5, 0, (0.0, 1.0)),
            ("a", 11, 1, (0.6, 0.8)),
            ("a", 11, 0, (0.8, 0.6)),
        ])
        split = build_youngest_oldest(ds)
        assert split.gallery[0].key == ("a", 5, 0)
        assert split.mated_probes[0].key == ("a", 11, 0)

    def test_all_same_age_probes_with_second_image(self):
        ds = dataset_from_rows(2, [("a", 5, 0, (1.0, 0.0)), ("a", 5, 1, (0.0, 1.0))])
        split = build_youngest_oldest(ds, min_gap=0)
        assert split.gallery[0].key == ("a", 5, 0)
        assert split.mated_probes[0].key == ("a", 5, 1)

    def test_split_invariants_on_random_datasets(self):
        rng = np.random.default_rng(8)
        for trial in range(30):
            rows = []
            n_subj = int(rng.integers(1, 8))
            for i in range(n_subj):
                for _ in range(int(rng.integers(1, 5))):
                    age = int(rng.integers(0, 30))
                    seq = int(rng.integers(0, 3))
                    if any(r[0] == f"s{i}" and r[1] == age and r[2] == seq for r in rows):
                        continue
                    rows.append((f"s{i}", age, seq, unit(rng.standard_normal(3))))
            ds = dataset_from_rows(3, rows)
            split = build_youngest_oldest(ds, min_gap=int(rng.integers(0, 4)))
            split.validate()
            assert len(split.gallery) == len(split.mated_probes)
            gallery_by_id = {r.subject_id: r for r in split.gallery}
            for probe in split.mated_probes:
                assert gallery_by_id[probe.subject_id].age <= probe.age


class TestAddDistractors:
    def _split(self):
        return GalleryProbeSplit(
            gallery=[make_record("a", 3, 0, np.array([1.0, 0.0]))],
            mated_probes=[make_record("a", 9, 0, np.array([0.0, 1.0]))],
        )

    def test_empty_distractor_set_is_noop(self):
        out = add_distractors(self._split(), LongitudinalDataset(2, []))
        assert out.unmated_probes == []
        assert len(out.gallery) == 1 and len(out.mated_probes) == 1

    def test_cardinality_grows_exactly(self):
        rng = np.random.default_rng(9)
        distractors = random_unit_dataset(rng, n_subjects=50, dim=2, ages=(5, 20), prefix="d")
        out = add_distractors(self._split(), distractors)
        assert len(out.unmated_probes) == 100

    def test_gallery_collision_names_the_subject(self):
        clash = dataset_from_rows(2, [("a", 30, 0, (1.0, 0.0))])
        with pytest.raises(ValidationError, match="'a'"):
            add_distractors(self._split(), clash)
