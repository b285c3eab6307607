import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from framealign.dataset import (AnnotatedClip, ManifestParseError, ManifestValidationError,
                                Ontology, Region, coverage, dataset_stats, format_seconds,
                                load_manifest, merge_overlapping_regions, save_manifest,
                                stratified_split)


def _clip(cid, regions, duration=20.0, subclass="dog", weak=None):
    return AnnotatedClip(cid, duration, subclass, [Region(*r) for r in regions], weak, f"{cid}.wav")


def rasterized_union(spans, ms_total):
    grid = np.zeros(ms_total, dtype=bool)
    for on, off in spans:
        grid[int(round(on * 1000)):int(round(off * 1000))] = True
    return grid


class TestRegion:
    def test_offset_must_exceed_onset(self):
        with pytest.raises(ValueError):
            Region(1.0, 1.0, "a dog barks")

    def test_blank_text_rejected(self):
        with pytest.raises(ValueError):
            Region(0.0, 1.0, "   ")

    def test_offset_slack_of_one_frame(self):
        AnnotatedClip("c", 20.0, "x", [Region(0.0, 20.02, "a b")])
        with pytest.raises(ValueError):
            AnnotatedClip("c", 20.0, "x", [Region(0.0, 20.05, "a b")])


class TestManifest:
    def test_round_trip(self, tmp_path, train_clip):
        other = _clip("b", [(0.1, 3.14159, "rain falls softly", None)], 15.5, "rain")
        path = tmp_path / "m.jsonl"
        save_manifest([train_clip, other], path)
        assert load_manifest(path) == [train_clip, other]

    def test_seconds_have_three_decimals(self, tmp_path):
        path = tmp_path / "m.jsonl"
        save_manifest([_clip("a", [(2.6, 20.0, "x y", None)])], path)
        line = path.read_text()
        assert '"onset_s": 2.600' in line and '"duration_s": 20.000' in line
        assert format_seconds(1 / 3) == "0.3333333333333333"

    def test_zero_length_region_names_record_and_region(self, tmp_path):
        path = tmp_path / "m.jsonl"
        good = {"clip_id": "a", "duration_s": 20.0, "regions": []}
        bad = {"clip_id": "b", "duration_s": 20.0,
               "regions": [{"onset_s": 1.0, "offset_s": 1.0, "text": "x"}]}
        path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
        with pytest.raises(ManifestValidationError) as info:
            load_manifest(path)
        assert info.value.index == 1
        assert info.value.clip_id == "b"
        assert info.value.field_name == "regions[0]"

    def test_malformed_json_reports_index(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"clip_id": "a", "duration_s": 20.0}\n{not json\n')
        with pytest.raises(ManifestParseError) as info:
            load_manifest(path)
        assert info.value.index == 1

    def test_duration_gate(self, tmp_path):
        path = tmp_path / "m.jsonl"
        save_manifest([_clip("a", [(0, 1, "x", None)], duration=5.0)], path)
        with pytest.raises(ManifestValidationError):
            load_manifest(path)
        assert len(load_manifest(path, duration_range=None)) == 1

    def test_duplicate_ids_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        save_manifest([_clip("a", []), _clip("a", [])], path)
        with pytest.raises(ManifestValidationError):
            load_manifest(path)


class TestMerge:
    def test_overlap(self):
        assert merge_overlapping_regions([(0, 2), (1, 3)]) == [(0, 3)]

    def test_touching(self):
        assert merge_overlapping_regions([(0, 1), (1, 2)]) == [(0, 2)]

    def test_empty(self):
        assert merge_overlapping_regions([]) == []

    def test_random_sets_match_rasterization(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 30))
            on = rng.integers(0, 20000, n)
            length = rng.integers(1, 3000, n)
            spans = [(a / 1000, (a + b) / 1000) for a, b in zip(on, length)]
            merged = merge_overlapping_regions(spans)
            assert np.array_equal(rasterized_union(merged, 23000), rasterized_union(spans, 23000))
            assert all(a[1] < b[0] for a, b in zip(merged, merged[1:]))

    @given(st.lists(st.tuples(st.integers(0, 1000), st.integers(1, 200)), max_size=40),
           st.randoms())
    @settings(max_examples=100, deadline=None)
    def test_permutation_invariant_union(self, spans, rnd):
        spans = [(a, a + b) for a, b in spans]
        shuffled = list(spans)
        rnd.shuffle(shuffled)
        merged = merge_overlapping_regions(spans)
        assert merged == merge_overlapping_regions(shuffled)
        assert len(merged) <= len(spans)


class TestCoverage:
    def test_full(self):
        assert coverage(_clip("a", [(0, 10, "x", None), (5, 20, "y", None)])) == 1.0

    def test_quarter(self):
        assert coverage(_clip("a", [(0, 5, "x", None)])) == 0.25

    def test_two_annotators(self, train_clip):
        # A leaves a gap 2.605-2.624 that B fills; B leaves 2.969-2.982 that A fills
        assert coverage(train_clip) == 1.0

    @given(st.floats(1.0, 9.0), st.floats(0.01, 0.99))
    def test_split_region_invariance(self, end, frac):
        cut = end * frac
        whole = _clip("a", [(0.0, end, "x", None)])
        halves = _clip("a", [(0.0, cut, "x", None), (cut, end, "x", None)])
        assert coverage(whole) == pytest.approx(coverage(halves), abs=1e-12)


class TestStats:
    def test_words_and_vocab(self):
        report = dataset_stats([_clip("a", [(0, 1, "a b", None), (1, 2, "a b c", None)])])
        assert report.caption_words_mean == 2.5
        assert report.vocabulary_size == 3
        assert report.regions == 2 and report.regions_per_clip == 2.0

    def test_vocab_case_and_punctuation(self):
        report = dataset_stats([_clip("a", [(0, 1, "A dog barks.", None),
                                            (1, 2, "the DOG, barks!", None)])])
        assert report.vocabulary_size == 4  # a, dog, barks, the

    def test_stop_words_flag(self):
        clips = [_clip("a", [(0, 1, "the dog and a cat", None)])]
        assert dataset_stats(clips, remove_stop_words=True).vocabulary_size == 2

    def test_histogram_bins(self):
        report = dataset_stats([_clip("a", [(0, 0.5, "x", None), (0, 1.0, "x", None),
                                            (0, 15.0, "x", None)], duration=30.0),
                                _clip("b", [(0, 30.0, "x", None)], duration=30.0)])
        h = report.duration_histogram
        assert len(h) == 31
        assert h[0] == 1 and h[1] == 1 and h[15] == 1 and h[30] == 1

    def test_hours(self):
        report = dataset_stats([_clip("a", [(0, 18, "x", None), (0, 18, "y", None)], 18.0)])
        assert report.audio_hours == pytest.approx(18 / 3600)
        assert report.region_hours == pytest.approx(36 / 3600)

    def test_permutation_invariant(self, rng):
        clips = [_clip(f"c{i}", [(0, float(rng.uniform(1, 10)), " ".join("w" * int(k) for k in
                                                                             rng.integers(1, 4, 5)),
                                  None)]) for i in range(30)]
        a = dataset_stats(clips)
        b = dataset_stats(list(reversed(clips)))
        assert a == b

    def test_table_and_json(self, train_clip):
        report = dataset_stats([train_clip])
        assert "regions per clip" in report.to_table()
        assert json.loads(report.to_json())["regions"] == 5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            dataset_stats([])


class TestSplit:
    def _clips(self, counts):
        return [_clip(f"{name}{i}", [], subclass=name)
                for name, n in counts.items() for i in range(n)]

    def test_equal_subclasses(self):
        split = stratified_split(self._clips({"a": 50, "b": 50}), 0.2, seed=3)
        test = split.test_ids
        assert sum(t.startswith("a") for t in test) == 10
        assert sum(t.startswith("b") for t in test) == 10

    def test_deterministic(self):
        clips = self._clips({"a": 50, "b": 50})
        assert stratified_split(clips, 0.2, 9) == stratified_split(clips, 0.2, 9)
        assert stratified_split(clips, 0.2, 9).test_ids != stratified_split(clips, 0.2, 10).test_ids

    def test_fifty_nine_subclasses(self, rng):
        counts = {f"s{k:02d}": int(c) for k, c in enumerate(rng.integers(45, 855, 59))}
        clips = self._clips(counts)
        total = len(clips)
        fraction = 2000 / 12358
        split = stratified_split(clips, fraction, seed=0)
        assert len(split.test_ids) == math.floor(total * fraction + 0.5)
        for name, n in counts.items():
            got = sum(t.startswith(name) for t in split.test_ids)
            assert math.floor(n * fraction) <= got <= math.ceil(n * fraction)
            assert abs(got - n * fraction) <= 1

    def test_partition(self):
        clips = self._clips({"a": 7, "b": 13, "c": 1})
        split = stratified_split(clips, 0.3, seed=1)
        assert not set(split.train_ids) & set(split.test_ids)
        assert set(split.train_ids) | set(split.test_ids) == {c.clip_id for c in clips}

    def test_empty_subclass_warned(self):
        onto = Ontology(["Animals"], [("a", "Animals"), ("b", "Animals"), ("z", "Animals")])
        split = stratified_split(self._clips({"a": 10, "b": 10}), 0.2, 0, ontology=onto)
        assert len(split.warnings) == 1 and "'z'" in split.warnings[0]

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            stratified_split(self._clips({"a": 3}), 1.0, 0)


class TestOntology:
    def test_from_dict(self):
        onto = Ontology.from_dict({"Animals": ["Rooster Crow", "Dog Bark"], "Human": ["Speech"]})
        assert onto.parent("Rooster Crow") == "Animals"
        assert onto.leaves() == ["Rooster Crow", "Dog Bark", "Speech"]

    def test_unknown_parent(self):
        with pytest.raises(ValueError):
            Ontology(["Animals"], [("Dog", "Pets")])

    def test_duplicate_names(self):
        with pytest.raises(ValueError):
            Ontology(["Animals"], [("Dog", "Animals"), ("Dog", "Animals")])
