import numpy as np
import pytest

from crossface.errors import ProtocolError
from crossface.evaluation import Protocol
from crossface.manifest import Manifest
from crossface.synth import SynthConfig, generate
from crossface.workflow import (
    BenchmarkConfig,
    DescriptorArchive,
    ExtractParams,
    build_pairs,
    extract_archive,
    gallery_records,
)


@pytest.fixture(scope="module")
def small_archive(tmp_path_factory):
    root = tmp_path_factory.mktemp("wf")
    cfg = SynthConfig(n_subjects=4, images_per_subject=3, width=44, height=52, identity_seed=17)
    manifest = generate(cfg, root)
    params = ExtractParams(pca_dims=12)
    archive = extract_archive(manifest, root, train_subjects=["s000", "s001"], params=params)
    return manifest, archive, root


class TestExtractArchive:
    def test_descriptor_shapes(self, small_archive):
        manifest, archive, _ = small_archive
        assert len(archive.sets) == len(manifest.records)
        some = next(iter(archive.sets.values()))
        # 44x52 with 20/8 blocks: 4 x 5 grid, two scales
        assert some.n_descriptors == 2 * 4 * 5
        assert some.dim == 12 + 2

    def test_pca_fitted_per_modality(self, small_archive):
        _, archive, _ = small_archive
        assert archive.pca_source.fingerprint != archive.pca_target.fingerprint

    def test_save_load_roundtrip(self, small_archive, tmp_path):
        _, archive, _ = small_archive
        path = tmp_path / "arch.bin"
        archive.save(path)
        loaded = DescriptorArchive.load(path)
        assert set(loaded.sets) == set(archive.sets)
        for image_id in archive.sets:
            np.testing.assert_array_equal(loaded.sets[image_id].values, archive.sets[image_id].values)
            assert loaded.records[image_id] == archive.records[image_id]
        assert loaded.pipeline_fingerprints() == archive.pipeline_fingerprints()


class TestBuildPairs:
    def test_same_session_pair_counts(self, small_archive):
        _, archive, _ = small_archive
        x, t = build_pairs(archive, ["s000", "s001"], pair_mode="same-session", pool_size=None)
        per_image = 2 * 4 * 5
        assert x.shape == (2 * 3 * per_image, 14)
        assert t.shape == x.shape

    def test_all_sessions_pair_counts(self, small_archive):
        _, archive, _ = small_archive
        x, t = build_pairs(archive, ["s000", "s001"], pair_mode="all-sessions", pool_size=None)
        per_image = 2 * 4 * 5
        assert x.shape == (2 * 9 * per_image, 14)

    def test_pool_subsampling_is_seeded(self, small_archive):
        _, archive, _ = small_archive
        a = build_pairs(archive, ["s000", "s001"], pool_size=100, seed=5)
        b = build_pairs(archive, ["s000", "s001"], pool_size=100, seed=5)
        c = build_pairs(archive, ["s000", "s001"], pool_size=100, seed=6)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[0].shape == (100, 14)
        assert not np.array_equal(a[0], c[0])

    def test_positions_align_between_modalities(self, small_archive):
        # pairing is positional: row i of x and row i of t come from the same
        # block position and scale of corresponding images
        _, archive, _ = small_archive
        x, t = build_pairs(archive, ["s000"], pair_mode="same-session", pool_size=None)
        np.testing.assert_allclose(x[:, -2:], t[:, -2:], atol=1e-12)

    def test_missing_modality_raises(self, small_archive):
        _, archive, _ = small_archive
        with pytest.raises(ProtocolError):
            build_pairs(archive, ["s999"], pool_size=None)


class TestGalleryRecords:
    def test_enrollment_order_selection(self, small_archive):
        manifest, _, _ = small_archive
        source = manifest.filter(modality="source")
        one = gallery_records(source, Protocol(gallery_spec="one_per_subject"))
        assert len(one) == 4
        assert all(r.enrollment_order == 0 for r in one)
        two = gallery_records(source, Protocol(gallery_spec="two_per_subject"))
        assert len(two) == 8
        all_recs = gallery_records(source, Protocol(gallery_spec="all_per_subject"))
        assert len(all_recs) == 12


class TestBenchmarkConfigEcho:
    def test_echo_contains_every_train_field(self):
        from dataclasses import fields

        from crossface.dpm import TrainConfig

        echo = BenchmarkConfig().config_echo()
        for f in fields(TrainConfig):
            assert f.name in echo["train"]


class TestDefaults:
    def test_pair_pool_defaults_to_one_million(self):
        import inspect

        sig = inspect.signature(build_pairs)
        assert sig.parameters["pool_size"].default == 1_000_000


class TestPreprocessRoundtrip:
    def test_archive_preserves_preprocess_params(self, tmp_path):
        from crossface.imgproc import PreprocessParams
        from crossface.synth import SynthConfig, generate

        cfg = SynthConfig(n_subjects=2, images_per_subject=1, width=40, height=40, identity_seed=3)
        manifest = generate(cfg, tmp_path)
        params = ExtractParams(
            pca_dims=8,
            preprocess=PreprocessParams(median_radius=2, dog_sigma_inner=0.8, dog_sigma_outer=1.7),
        )
        archive = extract_archive(manifest, tmp_path, ["s000"], params)
        archive.save(tmp_path / "a.bin")
        loaded = DescriptorArchive.load(tmp_path / "a.bin")
        assert loaded.params.preprocess == params.preprocess
