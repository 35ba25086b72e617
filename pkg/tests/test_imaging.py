import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from vitiseg.errors import ConfigError, ImageIOError, UsageError
from vitiseg.imaging import (
    FN_COLOR,
    FP_COLOR,
    TP_COLOR,
    AugmentDraw,
    AugmentParams,
    apply_augment,
    augment,
    binarize_mask,
    derive_rng,
    load_image,
    load_mask,
    normalize,
    overlay,
    resize,
    save_image,
    save_mask,
)


def disk(size, radius, center=None):
    c = (size - 1) / 2 if center is None else center
    yy, xx = np.mgrid[:size, :size]
    return np.where((yy - c) ** 2 + (xx - c) ** 2 <= radius ** 2, 255, 0).astype(np.uint8)


class TestIO:
    def test_image_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (7, 9, 3), dtype=np.uint8)
        save_image(img, tmp_path / "a.png")
        np.testing.assert_array_equal(load_image(tmp_path / "a.png"), img)

    def test_mask_round_trip(self, tmp_path):
        mask = np.random.default_rng(1).integers(0, 256, (5, 4), dtype=np.uint8)
        save_mask(mask, tmp_path / "m.png")
        np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), mask)

    def test_save_is_deterministic(self, tmp_path):
        mask = disk(16, 5)
        save_mask(mask, tmp_path / "a.png")
        save_mask(mask, tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_sixteen_bit_rejected(self, tmp_path):
        path = tmp_path / "deep.png"
        Image.fromarray(np.full((4, 4), 1000, dtype=np.uint16)).save(path)
        with pytest.raises(ImageIOError, match="bit depth 16") as info:
            load_mask(path)
        assert str(path) in str(info.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageIOError, match="not found"):
            load_image(tmp_path / "nope.png")

    def test_malformed(self, tmp_path):
        good = tmp_path / "g.png"
        save_mask(disk(8, 3), good)
        bad = tmp_path / "bad.png"
        bad.write_bytes(good.read_bytes()[:40])
        with pytest.raises(ImageIOError):
            load_mask(bad)
        (tmp_path / "txt.png").write_text("hello")
        with pytest.raises(ImageIOError, match="not a PNG"):
            load_image(tmp_path / "txt.png")

    def test_mask_must_be_grayscale(self, tmp_path):
        save_image(np.zeros((3, 3, 3), np.uint8), tmp_path / "rgb.png")
        with pytest.raises(ImageIOError, match="mode"):
            load_mask(tmp_path / "rgb.png")

    def test_gray_mask_value_survives_until_binarized(self, tmp_path):
        save_mask(np.full((2, 2), 200, np.uint8), tmp_path / "m.png")
        raw = load_mask(tmp_path / "m.png")
        assert raw[0, 0] == 200
        assert binarize_mask(raw)[0, 0] == 255


def bilinear_oracle(img, w, h):
    in_h, in_w = img.shape[:2]
    out = np.zeros((h, w) + img.shape[2:])
    for y in range(h):
        sy = min(max((y + 0.5) * in_h / h - 0.5, 0), in_h - 1)
        for x in range(w):
            sx = min(max((x + 0.5) * in_w / w - 0.5, 0), in_w - 1)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, in_h - 1), min(x0 + 1, in_w - 1)
            ay, ax = sy - y0, sx - x0
            out[y, x] = ((1 - ay) * ((1 - ax) * img[y0, x0] + ax * img[y0, x1])
                         + ay * ((1 - ax) * img[y1, x0] + ax * img[y1, x1]))
    return out


class TestResize:
    def test_same_size_identity(self):
        img = np.random.default_rng(0).integers(0, 256, (6, 5, 3), dtype=np.uint8)
        np.testing.assert_array_equal(resize(img, 5, 6), img)

    def test_constant_stays_constant(self):
        img = np.full((7, 5, 3), 93, np.uint8)
        assert np.all(resize(img, 13, 4) == 93)

    def test_checkerboard_mask_block_replication(self):
        m = np.array([[255, 0], [0, 255]], np.uint8)
        expected = np.kron(m // 255, np.ones((2, 2), np.uint8)) * 255
        np.testing.assert_array_equal(resize(m, 4, 4), expected)

    @pytest.mark.parametrize("src,dst", [((5, 7), (9, 4)), ((8, 8), (3, 11)), ((2, 3), (6, 6))])
    def test_bilinear_matches_loop_oracle(self, src, dst):
        img = np.random.default_rng(1).random(src + (3,)) * 255
        np.testing.assert_allclose(resize(img, dst[1], dst[0]), bilinear_oracle(img, dst[1], dst[0]), atol=1e-10)

    def test_mask_stays_binary(self):
        assert set(np.unique(resize(disk(17, 6), 40, 23))) <= {0, 255}

    def test_bad_size(self):
        with pytest.raises(UsageError):
            resize(np.zeros((2, 2), np.uint8), 0, 3)


class TestNormalize:
    def test_constant_channel_is_zero(self):
        img = np.random.default_rng(0).integers(0, 256, (6, 6, 3)).astype(np.uint8)
        img[..., 1] = 42
        out = normalize(img)
        assert np.all(out[..., 1] == 0.0)

    def test_statistics(self):
        out = normalize(np.random.default_rng(1).integers(0, 256, (20, 30, 3)))
        assert np.all(np.abs(out.mean(axis=(0, 1))) < 1e-6)
        assert np.all(np.abs(out.std(axis=(0, 1)) - 1) < 1e-4)

    def test_two_valued_channel(self):
        ch = np.zeros((4, 4))
        ch[:2] = 255
        out = normalize(np.stack([ch] * 3, axis=-1))
        assert set(np.round(np.unique(out), 12)) == {-1.0, 1.0}

    def test_idempotent(self):
        once = normalize(np.random.default_rng(2).random((9, 9, 3)) * 255)
        np.testing.assert_allclose(normalize(once), once, atol=1e-6)


class TestBinarize:
    def test_boundary(self):
        np.testing.assert_array_equal(binarize_mask(np.array([0, 127, 128, 255])), [0, 0, 255, 255])

    def test_binary_unchanged(self):
        m = disk(9, 3)
        np.testing.assert_array_equal(binarize_mask(m), m)

    def test_blurred_mask_rebinarized(self):
        blurred = resize(disk(9, 3), 21, 21, method="bilinear")
        assert set(np.unique(binarize_mask(blurred))) <= {0, 255}


class TestAugment:
    def test_params_validated(self):
        with pytest.raises(ConfigError):
            AugmentParams(zoom_range=(1.1, 1.2))
        with pytest.raises(ConfigError):
            AugmentParams(shift_frac=0.5)

    def test_identity_params(self):
        rng = np.random.default_rng(0)
        img = rng.random((12, 10, 3)) * 255
        mask = disk(12, 4)[:, :10]
        out_img, out_mask = augment(img, mask, AugmentParams.identity(), rng)
        np.testing.assert_array_equal(out_img, img)
        np.testing.assert_array_equal(out_mask, mask)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_mask_always_binary(self, seed):
        rng = np.random.default_rng(seed)
        _, m = augment(rng.random((16, 16, 3)) * 255, disk(16, 5), AugmentParams(), rng)
        assert set(np.unique(m)) <= {0, 255}

    def test_fixed_seed_reproducible(self):
        img = np.random.default_rng(0).random((16, 16, 3)) * 255
        a = augment(img, disk(16, 5), AugmentParams(), derive_rng(7, "img_001", 3))
        b = augment(img, disk(16, 5), AugmentParams(), derive_rng(7, "img_001", 3))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_derived_streams_differ(self):
        draws = {derive_rng(7, i, e).integers(1 << 62) for i in ("a", "b") for e in (0, 1)}
        assert len(draws) == 4

    def test_pure_rotation_preserves_disk_area(self):
        mask = disk(64, 20)
        params = AugmentParams(shift_frac=0.0, h_flip=False, v_flip=False, zoom_range=(1, 1), brightness_range=(1, 1))
        for seed in range(20):
            _, out = augment(np.zeros((64, 64, 3)), mask, params, np.random.default_rng(seed))
            assert abs(np.count_nonzero(out) - np.count_nonzero(mask)) <= 0.02 * np.count_nonzero(mask)

    def test_geometry_shared_between_image_and_mask(self):
        mask = disk(32, 8, center=12)
        img = np.repeat(mask[..., None], 3, axis=-1).astype(float)
        for seed in range(10):
            out_img, out_mask = augment(img, mask, AugmentParams(brightness_range=(1, 1)), np.random.default_rng(seed))
            inner = (out_img[..., 0] > 250)
            assert np.all(out_mask[inner] == 255)

    def test_horizontal_flip_and_zero_fill(self):
        img = np.arange(12.0).reshape(3, 4)[..., None].repeat(3, axis=-1)
        mask = np.array([[255, 0, 0, 0]] * 3, np.uint8)
        flip = AugmentDraw(0.0, 0.0, 0.0, True, False, 1.0, 1.0)
        out_img, out_mask = apply_augment(img, mask, flip)
        np.testing.assert_allclose(out_img[..., 0], img[:, ::-1, 0], atol=1e-12)
        np.testing.assert_array_equal(out_mask, mask[:, ::-1])
        shift = AugmentDraw(0.0, 2.0, 0.0, False, False, 1.0, 1.0)
        out_img, out_mask = apply_augment(img, mask, shift)
        assert np.all(out_img[:, :2] == 0) and np.all(out_mask[:, :2] == 0)
        np.testing.assert_allclose(out_img[:, 2:, 0], img[:, :2, 0], atol=1e-12)

    def test_brightness_clamped_image_only(self):
        img = np.full((4, 4, 3), 220.0)
        mask = np.full((4, 4), 255, np.uint8)
        out_img, out_mask = apply_augment(img, mask, AugmentDraw(0.0, 0.0, 0.0, False, False, 1.0, 1.3))
        assert np.all(out_img == 255.0)
        np.testing.assert_array_equal(out_mask, mask)


class TestOverlay:
    def test_perfect_prediction_only_red(self):
        img = np.full((4, 4, 3), 100, np.uint8)
        m = disk(4, 1.5)
        out = overlay(img, m, m)
        tinted = np.any(out != img, axis=-1)
        np.testing.assert_array_equal(tinted, m > 0)
        assert np.all(out[m > 0] == [178, 50, 50])

    def test_empty_prediction_only_fn_tint(self):
        img = np.zeros((3, 3, 3), np.uint8)
        truth = np.full((3, 3), 255, np.uint8)
        out = overlay(img, truth, np.zeros_like(truth))
        assert np.all(out == [(c + 1) // 2 for c in FN_COLOR])

    def test_checker_against_case_oracle(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)
        truth = np.full((6, 6), 255, np.uint8)
        pred = (np.indices((6, 6)).sum(axis=0) % 2 * 255).astype(np.uint8)
        truth[0, 0] = 0  # one true negative, pred[0,0] is 0 there
        truth[0, 1] = 0  # one false positive
        out = overlay(img, truth, pred)
        for y in range(6):
            for x in range(6):
                t, p = truth[y, x] > 0, pred[y, x] > 0
                color = TP_COLOR if t and p else FP_COLOR if p else FN_COLOR if t else None
                want = img[y, x] if color is None else [math.floor(0.5 * v + 0.5 * c + 0.5) for v, c in zip(img[y, x], color)]
                assert list(out[y, x]) == list(want)

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            overlay(np.zeros((3, 3, 3), np.uint8), np.zeros((3, 3)), np.zeros((3, 4)))
