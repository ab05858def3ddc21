from pathlib import Path

import numpy as np
import pytest
from PIL import Image as PILImage
from pydantic import ValidationError

from epsr.image import (
    Image, PatchSampler, bicubic_downsample, bicubic_upsample, crop_to_multiple, cubic_kernel,
    load_dataset, load_png, read_manifest, resize_array, resize_matrix, resize_taps, rgb_to_y,
    sample_patch_pairs, save_png, to_bytes, upsample_batch,
)
from epsr.logger import ImageIOError, UsageError


def dense_oracle(values: np.ndarray, out_len: int, antialias: bool) -> np.ndarray:
    """Resample the rows of ``values`` by evaluating the kernel at every input sample."""
    in_len = values.shape[0]
    scale = out_len / in_len
    stretch = scale if (scale < 1 and antialias) else 1.0
    out = np.zeros((out_len,) + values.shape[1:])
    for o in range(out_len):
        center = (o + 0.5) / scale - 0.5
        offsets = np.arange(int(np.floor(center - 4 / stretch)), int(np.ceil(center + 4 / stretch)) + 1)
        weights = stretch * cubic_kernel(stretch * (center - offsets))
        weights = weights / weights.sum()
        taps = np.clip(offsets, 0, in_len - 1)
        out[o] = np.tensordot(weights, values[taps], axes=1)
    return out


class TestPng:
    def test_byte_normalisation_and_round_trip(self, tmp_path, rng):
        raw = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        raw[0, 0] = 0
        raw[0, 1] = 255
        PILImage.fromarray(raw).save(tmp_path / "a.png")
        image = load_png(tmp_path / "a.png")
        assert image.pixels[0, 0, 0] == 0.0
        assert image.pixels[0, 1, 0] == 1.0
        save_png(image, tmp_path / "b.png")
        np.testing.assert_array_equal(np.asarray(PILImage.open(tmp_path / "b.png")), raw)

    def test_grayscale(self, tmp_path):
        PILImage.fromarray(np.full((4, 4), 128, dtype=np.uint8)).save(tmp_path / "g.png")
        image = load_png(tmp_path / "g.png")
        assert image.channels == 1
        assert image.pixels[0, 0, 0] == pytest.approx(128 / 255)

    def test_quantisation_rounds_half_up(self):
        image = Image(pixels=np.array([[0.5, 1.49 / 255, 1.0]]))
        np.testing.assert_array_equal(to_bytes(image)[:, :, 0], [[128, 1, 255]])

    def test_sixteen_bit_rejected(self, tmp_path):
        PILImage.fromarray(np.full((4, 4), 1000, dtype=np.uint16)).save(tmp_path / "deep.png")
        with pytest.raises(ImageIOError, match="bit depth 16"):
            load_png(tmp_path / "deep.png")

    def test_alpha_rejected(self, tmp_path):
        PILImage.new("RGBA", (4, 4)).save(tmp_path / "alpha.png")
        with pytest.raises(ImageIOError):
            load_png(tmp_path / "alpha.png")

    def test_missing_and_not_png(self, tmp_path):
        with pytest.raises(ImageIOError, match="not found"):
            load_png(tmp_path / "nope.png")
        (tmp_path / "text.png").write_text("hello")
        with pytest.raises(ImageIOError, match="Not a PNG"):
            load_png(tmp_path / "text.png")


class TestImage:
    def test_two_dimensional_input_gets_a_channel(self):
        assert Image(pixels=np.zeros((3, 4))).pixels.shape == (3, 4, 1)

    def test_rejects_two_channels(self):
        with pytest.raises(ValidationError):
            Image(pixels=np.zeros((3, 4, 2)))

    def test_from_array_clamps(self):
        image = Image.from_array(np.array([[-0.5, 1.5]]))
        np.testing.assert_array_equal(image.luma_array(), [[0.0, 1.0]])


class TestResampling:
    def test_kernel_values(self):
        np.testing.assert_allclose(cubic_kernel(np.array([0.0, 0.5, 1.0, 1.5, 2.0])),
                                   [1.0, 0.5625, 0.0, -0.0625, 0.0])

    @pytest.mark.parametrize("in_len,out_len,antialias", [(16, 4, True), (5, 20, False), (7, 3, True)])
    def test_rows_sum_to_one(self, in_len, out_len, antialias):
        _, weights = resize_taps(in_len, out_len, antialias)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0)
        np.testing.assert_allclose(resize_matrix(in_len, out_len, antialias).sum(axis=1), 1.0)

    def test_constant_is_preserved(self):
        image = Image(pixels=np.full((12, 8, 3), 0.37))
        np.testing.assert_allclose(bicubic_downsample(image, 4).pixels, 0.37)
        np.testing.assert_allclose(bicubic_upsample(image, 4).pixels, 0.37)

    def test_shape_laws(self):
        image = Image(pixels=np.zeros((192, 192, 3)))
        assert bicubic_downsample(image, 4).pixels.shape == (48, 48, 3)
        assert bicubic_upsample(Image(pixels=np.zeros((48, 48, 3))), 4).pixels.shape == (192, 192, 3)

    def test_downsample_ramp_matches_dense_oracle(self):
        ramp = np.tile(np.linspace(0.0, 1.0, 8), (8, 1))
        expected = dense_oracle(dense_oracle(ramp, 2, True).T, 2, True).T
        out = bicubic_downsample(Image(pixels=ramp), 4).luma_array()
        np.testing.assert_allclose(out, np.clip(expected, 0.0, 1.0), atol=1e-6)

    def test_upsample_ramp_matches_dense_oracle(self):
        ramp = np.tile(np.linspace(0.1, 0.9, 4), (4, 1))
        expected = dense_oracle(dense_oracle(ramp, 16, False).T, 16, False).T
        out = bicubic_upsample(Image(pixels=ramp), 4).luma_array()
        np.testing.assert_allclose(out, np.clip(expected, 0.0, 1.0), atol=1e-6)

    def test_bicubic_beats_nearest_on_smooth_image(self):
        yy, xx = np.mgrid[0:64, 0:64] / 64.0
        smooth = Image(pixels=0.5 + 0.3 * np.sin(2 * np.pi * xx) * np.cos(np.pi * yy))
        lr = bicubic_downsample(smooth, 4)
        bicubic = bicubic_upsample(lr, 4).luma_array()
        nearest = np.repeat(np.repeat(lr.luma_array(), 4, axis=0), 4, axis=1)
        target = smooth.luma_array()
        assert np.sqrt(np.mean((bicubic - target) ** 2)) < np.sqrt(np.mean((nearest - target) ** 2))

    def test_extent_not_divisible(self):
        with pytest.raises(UsageError):
            bicubic_downsample(Image(pixels=np.zeros((10, 8))), 4)

    def test_resize_array_keeps_range_unclamped(self):
        step = np.zeros((8, 8))
        step[:, 4:] = 1.0
        out = resize_array(step, 8, 16, antialias=False)
        assert out.min() < 0.0 and out.max() > 1.0

    def test_batch_upsample_matches_per_image(self, make_image):
        images = [make_image(5, 7), make_image(5, 7)]
        batch = np.stack([im.pixels.transpose(2, 0, 1) for im in images])
        out = upsample_batch(batch, 4)
        assert out.shape == (2, 3, 20, 28)
        for item, image in zip(out, images):
            expected = resize_array(image.pixels, 20, 28, antialias=False)
            np.testing.assert_allclose(item.transpose(1, 2, 0), expected, atol=1e-12)


class TestColourAndCrop:
    @pytest.mark.parametrize("value,expected", [(0.0, 16.0), (1.0, 235.0), (0.5, 125.5)])
    def test_luma_formula(self, value, expected):
        y = rgb_to_y(Image(pixels=np.full((2, 2, 3), value)))
        np.testing.assert_allclose(y.pixels * 255.0, expected)

    def test_luma_needs_rgb(self):
        with pytest.raises(UsageError):
            rgb_to_y(Image(pixels=np.zeros((2, 2))))

    def test_center_crop(self):
        pixels = np.arange(10 * 11, dtype=np.float64).reshape(10, 11) / 200.0
        cropped = crop_to_multiple(Image(pixels=pixels), 4)
        assert cropped.pixels.shape == (8, 8, 1)
        np.testing.assert_array_equal(cropped.luma_array(), pixels[1:9, 1:9])


class TestDataset:
    def test_manifest(self, tmp_path):
        (tmp_path / "data").mkdir()
        manifest = tmp_path / "data" / "train.txt"
        manifest.write_text("# hr images\na.png\n\n/abs/b.png\n")
        entries = read_manifest(manifest)
        assert entries == [tmp_path / "data" / "a.png", Path("/abs/b.png")]

    def test_parallel_load_keeps_order(self, tmp_path, write_pngs):
        paths = write_pngs(tmp_path, count=5, height=18, width=21)
        serial = load_dataset(paths, scale=4)
        parallel = load_dataset(paths, scale=4, workers=3)
        assert [im.source for im in parallel] == [str(p) for p in paths]
        assert serial[0].pixels.shape == (16, 20, 3)
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.pixels, b.pixels)


class TestPatchSampler:
    def test_same_seed_same_stream(self, train_images):
        a = PatchSampler(train_images, patch=16, seed=3)
        b = PatchSampler(train_images, patch=16, seed=3)
        for _ in range(5):
            pa, pb = a.next_pair(), b.next_pair()
            np.testing.assert_array_equal(pa.hr.pixels, pb.hr.pixels)

    def test_pair_geometry(self, train_images):
        pair = next(sample_patch_pairs(train_images, patch=16, seed=0))
        assert pair.hr.pixels.shape == (16, 16, 3)
        assert pair.lr.pixels.shape == (4, 4, 3)
        np.testing.assert_array_equal(pair.lr.pixels, bicubic_downsample(pair.hr, 4).pixels)

    def test_single_image_of_patch_size(self, make_image):
        image = make_image(16, 16)
        pair = PatchSampler([image], patch=16, seed=9).next_pair()
        np.testing.assert_array_equal(pair.hr.pixels, image.pixels)

    def test_state_restores_position(self, train_images):
        sampler = PatchSampler(train_images, patch=16, seed=1, augment=True)
        sampler.next_batch(3)
        state = sampler.get_state()
        expected = sampler.next_batch(2)
        sampler.set_state(state)
        actual = sampler.next_batch(2)
        np.testing.assert_array_equal(actual[0], expected[0])
        np.testing.assert_array_equal(actual[1], expected[1])

    def test_batch_layout(self, train_images):
        lr, hr = PatchSampler(train_images, patch=16, seed=0).next_batch(2)
        assert lr.shape == (2, 3, 4, 4) and hr.shape == (2, 3, 16, 16)
        assert lr.dtype == np.float32

    def test_small_images_skipped(self, make_image, train_images):
        sampler = PatchSampler(train_images + [make_image(8, 8)], patch=16)
        assert len(sampler) == len(train_images)

    def test_empty_dataset(self, make_image):
        with pytest.raises(UsageError):
            PatchSampler([], patch=16)
        with pytest.raises(UsageError):
            PatchSampler([make_image(8, 8)], patch=16)
