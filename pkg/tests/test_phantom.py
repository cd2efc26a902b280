import warnings

import numpy as np
import pytest
from PIL import Image

from cxrmask.errors import DataIOError, InvalidArgumentError
from cxrmask.phantom import (
    Domain,
    PhantomDataset,
    augment,
    decode_image,
    load_domain_dir,
    read_manifest,
    sample_batch,
    synth_phantom,
    write_phantom_dataset,
)


class TestSynthPhantom:
    def test_zero_blobs_is_non_opacity(self):
        s = synth_phantom(7, 64, 0)
        assert s.domain_label is Domain.NON_OPACITY
        assert not s.gt_opacity_mask.any()

    def test_deterministic(self):
        a, b = synth_phantom(7, 64, 2), synth_phantom(7, 64, 2)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.gt_opacity_mask.tobytes() == b.gt_opacity_mask.tobytes()
        assert a.domain_label is b.domain_label is Domain.OPACITY

    def test_shapes_and_range(self):
        s = synth_phantom(3, 48, 1)
        assert s.image.shape == (1, 48, 48)
        assert s.gt_opacity_mask.shape == (48, 48)
        assert s.image.min() >= -1.0 and s.image.max() <= 1.0

    def test_coverage_bounds_over_1000_seeds(self):
        # Enumeration oracle for the blob-size range.
        cover = np.array([synth_phantom(seed, 64, 2).gt_opacity_mask.mean() for seed in range(1000)])
        assert cover.min() >= 0.005
        assert cover.max() <= 0.30

    def test_blobs_brighten_the_lungs(self):
        clear, op = synth_phantom(11, 64, 0), synth_phantom(11, 64, 2)
        m = op.gt_opacity_mask.astype(bool)
        assert (op.image[0][m] - clear.image[0][m]).mean() > 0.2
        np.testing.assert_allclose(op.image[0][~m].mean(), clear.image[0][~m].mean(), atol=0.05)

    @pytest.mark.parametrize("size", [0, 8, 15])
    def test_small_size_rejected(self, size):
        with pytest.raises(InvalidArgumentError):
            synth_phantom(0, size, 1)

    def test_negative_blob_count_rejected(self):
        with pytest.raises(InvalidArgumentError):
            synth_phantom(0, 32, -1)


def test_phantom_dataset_labels_sound():
    op = PhantomDataset(Domain.OPACITY, 20, seed=5)
    clear = PhantomDataset(Domain.NON_OPACITY, 20, seed=5)
    assert all(it.gt_opacity_mask.any() for it in op)
    assert all(not it.gt_opacity_mask.any() for it in clear)
    assert all(it.domain_label is Domain.NON_OPACITY for it in clear)


def _write_png(path, value=128, size=16):
    Image.fromarray(np.full((size, size), value, dtype=np.uint8), mode="L").save(path)


class TestLoadDomainDir:
    def test_counts_pngs(self, tmp_path):
        for i in range(3):
            _write_png(tmp_path / f"{i}.png")
        handle = load_domain_dir(tmp_path, Domain.OPACITY)
        assert len(handle) == 3
        img = handle.load(0).image
        assert img.shape == (1, 16, 16)
        assert -1.0 <= img.min() <= img.max() <= 1.0

    def test_empty_dir(self, tmp_path):
        with pytest.raises(DataIOError):
            load_domain_dir(tmp_path, Domain.OPACITY)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(DataIOError):
            load_domain_dir(tmp_path / "nope", Domain.OPACITY)

    def test_skips_non_images_with_warning(self, tmp_path):
        _write_png(tmp_path / "a.png")
        _write_png(tmp_path / "b.png")
        (tmp_path / "notes.txt").write_text("not an image")
        with pytest.warns(UserWarning) as record:
            handle = load_domain_dir(tmp_path, Domain.NON_OPACITY)
        assert len(handle) == 2
        assert handle.skipped == 1
        assert len(record) == 1

    def test_16bit_decoding(self, tmp_path):
        arr = np.array([[0, 65535], [32768, 65535]], dtype=np.uint16)
        Image.fromarray(arr).save(tmp_path / "x.png")
        img = decode_image(tmp_path / "x.png")
        np.testing.assert_allclose(img[0], arr / 65535.0 * 2 - 1, atol=1e-6)

    def test_8bit_decoding_endpoints(self, tmp_path):
        Image.fromarray(np.array([[0, 255]], dtype=np.uint8), mode="L").save(tmp_path / "y.png")
        np.testing.assert_array_equal(decode_image(tmp_path / "y.png")[0], [[-1.0, 1.0]])


class TestAugment:
    def test_full_frame_is_identity(self, rng):
        img = rng.uniform(-1, 1, size=(1, 32, 32)).astype(np.float32)
        out = augment(img, seed=3, out_size=32, crop_fraction_range=(1.0, 1.0))
        assert np.abs(out - img).max() < 1e-6

    def test_seeded(self, rng):
        img = rng.uniform(-1, 1, size=(1, 40, 40)).astype(np.float32)
        a = augment(img, seed=9, out_size=24)
        b = augment(img, seed=9, out_size=24)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (1, 24, 24)

    def test_full_scale_default_size(self, rng):
        img = rng.uniform(-1, 1, size=(1, 64, 64)).astype(np.float32)
        assert augment(img, seed=0).shape == (1, 512, 512)

    def test_range_kept(self, rng):
        img = rng.uniform(-1, 1, size=(1, 64, 64)).astype(np.float32)
        out = augment(img, seed=1, out_size=100, crop_fraction_range=(0.5, 0.9))
        assert out.min() >= -1.0 and out.max() <= 1.0

    @pytest.mark.parametrize("rng_range,size", [((0.0, 1.0), 16), ((0.5, 1.2), 16), ((0.9, 0.8), 16), ((1.0, 1.0), 4)])
    def test_bad_arguments(self, rng_range, size):
        with pytest.raises(InvalidArgumentError):
            augment(np.zeros((1, 16, 16), np.float32), 0, size, rng_range)


class TestSampleBatch:
    @pytest.fixture
    def handles(self):
        return PhantomDataset(Domain.OPACITY, 8, 1, 32), PhantomDataset(Domain.NON_OPACITY, 8, 1, 32)

    def test_rho_zero(self, handles):
        items = sample_batch(*handles, batch_size=20, rho=0.0, seed=1)
        assert all(it.domain_label is Domain.OPACITY for it in items)

    def test_rho_one(self, handles):
        items = sample_batch(*handles, batch_size=20, rho=1.0, seed=1)
        assert all(it.domain_label is Domain.NON_OPACITY for it in items)

    def test_mixing_fraction(self, handles):
        # Counting oracle: the intra-domain fraction converges to rho.
        items = sample_batch(*handles, batch_size=10_000, rho=0.25, seed=4)
        frac = np.mean([it.domain_label is Domain.NON_OPACITY for it in items])
        assert abs(frac - 0.25) <= 0.02

    def test_deterministic(self, handles):
        a = sample_batch(*handles, batch_size=6, rho=0.5, seed=2)
        b = sample_batch(*handles, batch_size=6, rho=0.5, seed=2)
        assert [x.image.tobytes() for x in a] == [x.image.tobytes() for x in b]

    def test_invalid_rho(self, handles):
        with pytest.raises(InvalidArgumentError):
            sample_batch(*handles, batch_size=2, rho=1.5, seed=0)


def test_write_phantom_dataset_manifest(tmp_path):
    manifest = write_phantom_dataset(tmp_path, n=10, seed=1, size=32)
    recs = read_manifest(manifest)
    assert len(recs) == 10
    assert {r.domain_label for r in recs} == {Domain.OPACITY, Domain.NON_OPACITY}
    for r in recs:
        assert (tmp_path / r.image).is_file() and (tmp_path / r.mask).is_file()
        mask = np.asarray(Image.open(tmp_path / r.mask))
        assert mask.any() == (r.domain_label is Domain.OPACITY)
