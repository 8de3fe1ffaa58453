import numpy as np
import pytest

from repspace import feature_store as fs
from repspace.container import ContainerError


def make_corpus(*sizes_roles):
    stories = [
        fs.Story(f"s{i}", tuple(f"w{j}" for j in range(size)), role)
        for i, (size, role) in enumerate(sizes_roles)
    ]
    return fs.TokenCorpus(stories)


def make_bundle(rep_id, values, **spec_kw):
    values = np.asarray(values, dtype=np.float64)
    spec = fs.RepresentationSpec(id=rep_id, dim=values.shape[1], **spec_kw)
    return fs.FeatureBundle(spec=spec, values=values)


class TestBundleIO:
    def test_round_trip_identity(self, tmp_path):
        bundle = make_bundle("b", [[1, 2, 3], [4, 5, 6]], model_group="g")
        path = tmp_path / "b.fbn"
        fs.write_bundle(bundle, path)
        back = fs.read_bundle(path)
        assert back.spec == bundle.spec
        np.testing.assert_array_equal(back.values, bundle.values)

    def test_round_trip_is_byte_exact_at_storage_precision(self, tmp_path):
        rng = np.random.default_rng(0)
        bundle = make_bundle("b", rng.standard_normal((7, 5)))
        path = tmp_path / "b.fbn"
        fs.write_bundle(bundle, path)
        first = path.read_bytes()
        fs.write_bundle(fs.read_bundle(path), path)
        assert path.read_bytes() == first

    def test_word_embedding_dimensionality_accepted(self, tmp_path):
        bundle = make_bundle("glove", np.zeros((4, 300)), model_group="glove")
        fs.write_bundle(bundle, tmp_path / "glove.fbn")
        assert fs.read_bundle(tmp_path / "glove.fbn").spec.dim == 300

    def test_non_finite_values_rejected(self):
        with pytest.raises(fs.BundleValidationError):
            make_bundle("bad", [[1.0, np.nan]])

    def test_truncated_payload(self, tmp_path):
        bundle = make_bundle("b", [[1, 2, 3], [4, 5, 6]])
        path = tmp_path / "b.fbn"
        fs.write_bundle(bundle, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(ContainerError):
            fs.read_bundle(path)

    def test_zero_dim_header_rejected(self, tmp_path):
        from repspace.container import write_container

        path = tmp_path / "z.fbn"
        write_container(
            path,
            {"id": "z", "dim": "0", "token_count": "1", "model_group": "",
             "mds_weight": "default", "dtype": "f32le", "layout": "row-major"},
            np.zeros(0, dtype="<f4"),
        )
        with pytest.raises(fs.BundleValidationError):
            fs.read_bundle(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.fbn"
        path.write_bytes(b"JUNKxxxxxxxx")
        with pytest.raises(ContainerError, match="magic"):
            fs.read_bundle(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v2.fbn"
        path.write_bytes(b"FBN2" + (0).to_bytes(4, "little"))
        with pytest.raises(ContainerError, match="version"):
            fs.read_bundle(path)

    def test_layer_index_round_trip(self, tmp_path):
        bundle = make_bundle("gpt-l3", np.ones((2, 4)), model_group="gpt",
                             layer_index=3, mds_weight=1 / 12)
        fs.write_bundle(bundle, tmp_path / "l.fbn")
        back = fs.read_bundle(tmp_path / "l.fbn")
        assert back.spec.layer_index == 3
        assert back.spec.mds_weight == 1 / 12


class TestAlign:
    def test_consistent_bundles(self):
        corpus = make_corpus((80, "train"), (20, "test"))
        bundles = [make_bundle(f"r{i}", np.zeros((100, 2)), model_group=f"r{i}")
                    for i in range(3)]
        ds = fs.align(corpus, bundles, "r0")
        assert ds.n == 3
        assert ds.rep_ids == ["r0", "r1", "r2"]

    def test_mismatch_names_offender(self):
        corpus = make_corpus((80, "train"), (20, "test"))
        bundles = [make_bundle("ok", np.zeros((100, 2)), model_group="a"),
                   make_bundle("short", np.zeros((99, 2)), model_group="b")]
        with pytest.raises(fs.AlignmentError, match="short"):
            fs.align(corpus, bundles, "ok")

    def test_story_scale_split_sizes(self):
        corpus = make_corpus((54_000, "train"), (1_839, "test"))
        bundle = make_bundle("u", np.zeros((55_839, 1)))
        ds = fs.align(corpus, [bundle], "u")
        train, test = fs.split(ds)
        assert train.size == 54_000
        assert test.size == 1_839

    def test_missing_universal(self):
        corpus = make_corpus((10, "train"), (2, "test"))
        with pytest.raises(fs.AlignmentError, match="universal"):
            fs.align(corpus, [make_bundle("a", np.zeros((12, 1)))], "nope")

    def test_order_preserved(self):
        corpus = make_corpus((10, "train"), (2, "test"))
        bundles = [make_bundle(name, np.zeros((12, 1)), model_group=name)
                   for name in ("z", "a", "m")]
        ds = fs.align(corpus, bundles, "a")
        assert [ds.index_of(n) for n in ("z", "a", "m")] == [0, 1, 2]


class TestSplit:
    def test_direct_partition(self):
        corpus = make_corpus((80, "train"), (20, "test"))
        ds = fs.align(corpus, [make_bundle("u", np.zeros((100, 1)))], "u")
        train, test = fs.split(ds)
        np.testing.assert_array_equal(train, np.arange(80))
        np.testing.assert_array_equal(test, np.arange(80, 100))

    def test_missing_test_role(self):
        corpus = make_corpus((80, "train"), (20, "train"))
        ds = fs.align(corpus, [make_bundle("u", np.zeros((100, 1)))], "u")
        with pytest.raises(fs.AlignmentError):
            fs.split(ds)

    def test_many_stories_single_test(self):
        sizes = [(40, "train")] * 24 + [(60, "test")]
        corpus = make_corpus(*sizes)
        ds = fs.align(corpus, [make_bundle("u", np.zeros((corpus.total_tokens, 1)))], "u")
        train, test = fs.split(ds)
        np.testing.assert_array_equal(test, np.arange(24 * 40, 24 * 40 + 60))
        assert np.intersect1d(train, test).size == 0
        np.testing.assert_array_equal(
            np.sort(np.concatenate([train, test])), np.arange(corpus.total_tokens)
        )


class TestWeights:
    def test_default_weight_is_inverse_group_size(self):
        corpus = make_corpus((8, "train"), (2, "test"))
        bundles = [
            make_bundle("m-0", np.zeros((10, 1)), model_group="m", layer_index=0),
            make_bundle("m-1", np.zeros((10, 1)), model_group="m", layer_index=1),
            make_bundle("w", np.zeros((10, 1)), model_group="w"),
        ]
        ds = fs.align(corpus, bundles, "w")
        np.testing.assert_allclose(fs.resolved_mds_weights(ds), [0.5, 0.5, 1.0])

    def test_explicit_weight_wins(self):
        corpus = make_corpus((8, "train"), (2, "test"))
        bundles = [make_bundle("a", np.zeros((10, 1)), model_group="a", mds_weight=0.25)]
        ds = fs.align(corpus, bundles, "a")
        np.testing.assert_allclose(fs.resolved_mds_weights(ds), [0.25])

    def test_duplicate_group_layer_pair_rejected(self):
        corpus = make_corpus((8, "train"), (2, "test"))
        bundles = [
            make_bundle("a", np.zeros((10, 1)), model_group="m", layer_index=1),
            make_bundle("b", np.zeros((10, 1)), model_group="m", layer_index=1),
        ]
        with pytest.raises(fs.AlignmentError):
            fs.align(corpus, bundles, "a")


def test_corpus_manifest_round_trip(tmp_path):
    corpus = make_corpus((5, "train"), (3, "test"))
    path = tmp_path / "corpus.json"
    fs.save_corpus_manifest(path, corpus, ["bundles/a.fbn"], "a", inline_tokens=True)
    back, bundle_paths, universal = fs.load_corpus_manifest(path)
    assert universal == "a"
    assert bundle_paths == [str(tmp_path / "bundles/a.fbn")]
    assert [s.id for s in back.stories] == [s.id for s in corpus.stories]
    assert back.total_tokens == corpus.total_tokens
    assert back.stories[0].tokens == corpus.stories[0].tokens
