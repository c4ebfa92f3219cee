import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from consensus_uda.errors import DataError, ShapeError
from consensus_uda.fusion import consensus_fuse, fuse_directory
from consensus_uda.synth import SceneSpec, default_sources, gen_dataset
from consensus_uda.taxonomy import IGNORE_ID, apply_mapping
from consensus_uda.tensor_io import read_labelmap, write_labelmap

PLANT, ART, GROUND, OTHER = 0, 1, 2, 3

maps = st.lists(
    arrays(np.uint8, (5, 4), elements=st.sampled_from([0, 1, 2, 3, IGNORE_ID])), min_size=1, max_size=4
)


def _fuse_by_loops(preds):
    out = np.full(preds[0].shape, IGNORE_ID, dtype=np.uint8)
    for idx in np.ndindex(out.shape):
        vals = {int(p[idx]) for p in preds}
        if len(vals) == 1 and IGNORE_ID not in vals:
            out[idx] = vals.pop()
    return out


class TestConsensus:
    def test_unanimous(self):
        preds = [np.full((2, 2), PLANT, np.uint8)] * 3
        assert np.all(consensus_fuse(preds).pseudo == PLANT)

    def test_disagreement(self):
        preds = [np.full((1, 1), v, np.uint8) for v in (PLANT, GROUND, PLANT)]
        assert consensus_fuse(preds).pseudo.tolist() == [[IGNORE_ID]]

    def test_single_source_copies_input(self):
        pred = np.array([[0, 1, 255], [2, 255, 1]], dtype=np.uint8)
        res = consensus_fuse([pred])
        assert np.array_equal(res.pseudo, pred)
        assert res.coverage == pytest.approx(4 / 6)

    def test_agreed_other_is_ignored(self):
        preds = [np.array([[OTHER, PLANT]], np.uint8)] * 2
        res = consensus_fuse(preds, ignore_ids=[OTHER], n_classes=4)
        assert res.pseudo.tolist() == [[IGNORE_ID, PLANT]]
        assert res.per_class_counts.tolist() == [1, 0, 0, 0]

    def test_errors(self):
        with pytest.raises(DataError):
            consensus_fuse([])
        with pytest.raises(ShapeError):
            consensus_fuse([np.zeros((2, 2), np.uint8), np.zeros((2, 3), np.uint8)])

    @given(maps)
    def test_matches_loop_oracle(self, preds):
        assert np.array_equal(consensus_fuse(preds).pseudo, _fuse_by_loops(preds))

    @given(maps, st.randoms(use_true_random=False))
    def test_permutation_invariant(self, preds, rnd):
        shuffled = list(preds)
        rnd.shuffle(shuffled)
        assert np.array_equal(consensus_fuse(shuffled).pseudo, consensus_fuse(preds).pseudo)

    @given(maps, st.integers(1, 4))
    def test_idempotent(self, preds, copies):
        base = preds[0]
        assert np.array_equal(consensus_fuse([base] * copies).pseudo, base)

    @given(maps, arrays(np.uint8, (5, 4), elements=st.sampled_from([0, 1, 2, 3, IGNORE_ID])))
    def test_adding_source_never_raises_coverage(self, preds, extra):
        assert consensus_fuse(preds + [extra]).coverage <= consensus_fuse(preds).coverage

    @given(maps)
    @settings(max_examples=50)
    def test_covered_pixels_match_every_input(self, preds):
        pseudo = consensus_fuse(preds).pseudo
        covered = pseudo != IGNORE_ID
        for p in preds:
            assert np.array_equal(p[covered], pseudo[covered])


@pytest.fixture(scope="module")
def small_set(tmp_path_factory, config):
    out = tmp_path_factory.mktemp("synth")
    manifest = gen_dataset(SceneSpec(width=24, height=24, seed=3), default_sources(config), 5, 1, out)
    return out, manifest


class TestDirectory:
    def test_three_sources(self, tmp_path, small_set, config):
        data, manifest = small_set
        sources = [(s, data / "train" / "sources" / s) for s in ("camvid", "cityscapes", "forest")]
        report = fuse_directory(config, sources, tmp_path / "pseudo")
        assert sorted(p.name for p in (tmp_path / "pseudo").glob("*.pgm")) == [f"{i:04d}.pgm" for i in range(5)]
        lines = (tmp_path / "pseudo" / "summary.txt").read_text().splitlines()
        assert lines[0].startswith("0000 coverage=") and lines[-1].startswith("TOTAL images=5")

        # batch mean equals the mean of independently recomputed per-image coverages
        covs = []
        for e in manifest.split("train"):
            mapped = [apply_mapping(config.mapping(s, "greenhouse"), read_labelmap(data / e.sources[s]))
                      for s, _ in sources]
            res = consensus_fuse(mapped, ignore_ids=[OTHER], n_classes=4)
            covs.append(res.coverage)
            stem = e.gt.split("/")[-1]
            assert np.array_equal(read_labelmap(tmp_path / "pseudo" / stem), res.pseudo)
        assert report.mean_coverage == pytest.approx(float(np.mean(covs)), abs=1e-15)

    def test_zero_common(self, tmp_path, config):
        for name, stem in (("a", "x"), ("b", "y")):
            (tmp_path / name).mkdir()
            write_labelmap(np.zeros((2, 2), np.uint8), tmp_path / name / f"{stem}.pgm")
        with pytest.raises(DataError, match="zero common filenames"):
            fuse_directory(config, [("camvid", tmp_path / "a"), ("forest", tmp_path / "b")], tmp_path / "o")

    def test_partial_files_skipped(self, tmp_path, config):
        for name, stems in (("a", "xy"), ("b", "x")):
            (tmp_path / name).mkdir()
            for stem in stems:
                write_labelmap(np.zeros((2, 2), np.uint8), tmp_path / name / f"{stem}.pgm")
        report = fuse_directory(config, [("camvid", tmp_path / "a"), ("forest", tmp_path / "b")], tmp_path / "o")
        assert report.skipped == ["y"] and list(report.coverage) == ["x"]

    def test_coverage_monotone_over_subsets(self, tmp_path, small_set, config):
        data, _ = small_set
        names = ("camvid", "cityscapes", "forest")
        cov = {}
        for k in (1, 2, 3):
            for subset in itertools.combinations(names, k):
                rep = fuse_directory(config, [(s, data / "train" / "sources" / s) for s in subset],
                                     tmp_path / "-".join(subset))
                cov[subset] = rep.mean_coverage
        for subset, value in cov.items():
            for smaller in itertools.combinations(subset, len(subset) - 1):
                if smaller:
                    assert value <= cov[smaller]
