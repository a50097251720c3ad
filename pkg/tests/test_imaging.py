import math

import numpy as np
import pytest

from brailleocr import imaging
from brailleocr.geometry import Box
from brailleocr.imaging import AffineMap, GeometricTransform


class TestNormalize:
    def test_constant_image_is_all_zero(self):
        image = np.full((20, 30), 128, dtype=np.uint8)
        out = imaging.normalize(image)
        assert out.shape == image.shape and out.dtype == np.float32
        assert np.all(out == 0.0)

    def test_two_pixel_channel(self):
        image = np.array([[0, 255]], dtype=np.uint8)
        out = imaging.normalize(image)
        assert out[0, 0] == pytest.approx(-1.0 / 3.0, abs=1e-7)
        assert out[0, 1] == pytest.approx(1.0 / 3.0, abs=1e-7)

    def test_random_images_mean_zero_std_third(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            image = rng.integers(0, 256, size=(37, 53), dtype=np.uint8)
            out = imaging.normalize(image).astype(np.float64)
            assert abs(out.mean()) < 1e-6
            if image.astype(np.float64).std() >= 25.5:
                assert abs(out.std() - 1.0 / 3.0) < 1e-6

    def test_low_variance_uses_floor(self):
        image = np.full((10, 10), 100, dtype=np.uint8)
        image[0, 0] = 104  # std ~ 0.4, well under the 25.5 floor
        out = imaging.normalize(image).astype(np.float64)
        assert abs(out.mean()) < 1e-6
        expected = (104 - image.astype(np.float64).mean()) / (3 * 25.5)
        assert out[0, 0] == pytest.approx(expected, abs=1e-6)

    def test_rgb_per_channel(self):
        rng = np.random.default_rng(1)
        image = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        out = imaging.normalize(image).astype(np.float64)
        for c in range(3):
            assert abs(out[:, :, c].mean()) < 1e-6


class TestResize:
    def test_halving_a4(self):
        image = np.zeros((2300, 1728), dtype=np.uint8)
        out = imaging.resize(image, 864, 1150)
        assert out.shape == (1150, 864)

    def test_same_size_identity(self):
        rng = np.random.default_rng(2)
        image = rng.integers(0, 256, size=(23, 31), dtype=np.uint8)
        assert np.array_equal(imaging.resize(image, 31, 23), image)

    def test_checkerboard_average_rounds_half_up(self):
        image = np.array([[0, 255], [255, 0]], dtype=np.uint8)
        out = imaging.resize(image, 1, 1)
        assert out.shape == (1, 1)
        assert out[0, 0] == 128  # 127.5 rounded half-up

    def test_downscale_averages(self):
        image = np.array([[10, 30], [50, 70]], dtype=np.uint8)
        assert imaging.resize(image, 1, 1)[0, 0] == 40


class TestApplyTransform:
    def test_identity(self):
        rng = np.random.default_rng(3)
        image = rng.integers(0, 256, size=(40, 60), dtype=np.uint8)
        boxes = [Box(5, 5, 20, 30)]
        out, out_boxes = imaging.apply_transform(image, GeometricTransform(), boxes)
        assert np.array_equal(out, image)
        assert out_boxes == boxes

    def test_horizontal_mirror_box(self):
        image = np.zeros((50, 100), dtype=np.uint8)
        _, boxes = imaging.apply_transform(
            image, GeometricTransform(mirror=True), [Box(10, 10, 30, 42)]
        )
        assert boxes[0].as_tuple() == pytest.approx((70.0, 10.0, 90.0, 42.0))

    def test_rotation_matches_corner_oracle(self):
        w, h = 100, 80
        image = np.zeros((h, w), dtype=np.uint8)
        box = Box(20, 30, 50, 46)
        angle = 5.0
        _, boxes = imaging.apply_transform(image, GeometricTransform(rotation_deg=angle), [box])

        # Independent corner mapping: rotate the 4 corners about the centre.
        theta = math.radians(angle)
        cx, cy = w / 2.0, h / 2.0
        pts = []
        for x, y in [(box.left, box.top), (box.right, box.top),
                     (box.right, box.bottom), (box.left, box.bottom)]:
            dx, dy = x - cx, y - cy
            pts.append(
                (cx + dx * math.cos(theta) - dy * math.sin(theta),
                 cy + dx * math.sin(theta) + dy * math.cos(theta))
            )
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        expected = (min(xs), min(ys), max(xs), max(ys))
        assert boxes[0].as_tuple() == pytest.approx(expected, abs=1e-9)
        assert boxes[0].width > box.width and boxes[0].height > box.height

    def test_inverse_round_trips_box_centres(self):
        rng = np.random.default_rng(4)
        image = rng.integers(0, 256, size=(80, 120), dtype=np.uint8)
        for _ in range(25):
            transform = GeometricTransform(
                scale_x=rng.uniform(0.6, 1.6),
                scale_y=rng.uniform(0.6, 1.6),
                rotation_deg=rng.uniform(-5, 5),
                mirror=bool(rng.random() < 0.5),
            )
            boxes = [Box(30, 25, 30 + rng.uniform(5, 30), 25 + rng.uniform(5, 30))]
            warped, mapped = imaging.apply_transform(image, transform, boxes)
            _, back = imaging.apply_transform(
                warped, transform.inverse(image.shape[1], image.shape[0]), mapped
            )
            assert np.allclose(back[0].center(), boxes[0].center(), atol=1.0)

    def test_out_of_frame_error(self):
        image = np.zeros((20, 20), dtype=np.uint8)
        gone = AffineMap((1.0, 0.0, 1000.0, 0.0, 1.0, 1000.0), 20, 20)
        with pytest.raises(ValueError, match="out of frame"):
            imaging.apply_transform(image, gone)

    def test_mean_fill_outside(self):
        image = np.full((20, 20), 200, dtype=np.uint8)
        out, _ = imaging.apply_transform(image, GeometricTransform(rotation_deg=45.0))
        assert out[0, 0] == 200  # corners exposed by rotation take the mean


class TestCrop:
    def test_contained_box_shifts(self):
        image = np.zeros((50, 50), dtype=np.uint8)
        out, boxes = imaging.crop(image, (10, 5), 20, 20, [Box(12, 8, 20, 18)])
        assert out.shape == (20, 20)
        assert boxes[0].as_tuple() == (2.0, 3.0, 10.0, 13.0)

    def test_excluded_box_dropped(self):
        image = np.zeros((50, 50), dtype=np.uint8)
        _, boxes = imaging.crop(image, (0, 0), 10, 10, [Box(30, 30, 40, 40)])
        assert boxes == []

    def test_area_retention_rule(self):
        image = np.zeros((20, 20), dtype=np.uint8)
        forty = Box(6, 0, 16, 4)  # 40% inside [0,10)x[0,10)
        sixty = Box(4, 0, 14, 4)  # 60% inside
        _, boxes = imaging.crop(image, (0, 0), 10, 10, [forty, sixty])
        assert len(boxes) == 1
        assert boxes[0].as_tuple() == (4.0, 0.0, 10.0, 4.0)

    def test_padding_uses_mean(self):
        image = np.full((10, 10), 60, dtype=np.uint8)
        out, _ = imaging.crop(image, (5, 5), 10, 10)
        assert out.shape == (10, 10)
        assert out[0, 0] == 60 and out[9, 9] == 60

    def test_disjoint_window_rejected(self):
        image = np.zeros((10, 10), dtype=np.uint8)
        with pytest.raises(ValueError, match="does not intersect"):
            imaging.crop(image, (50, 50), 10, 10)


class TestTransformAndCrop:
    def test_matches_two_step_boxes(self):
        rng = np.random.default_rng(6)
        image = rng.integers(0, 256, size=(60, 90), dtype=np.uint8)
        boxes = [Box(10, 10, 30, 26), Box(50, 20, 70, 52), Box(2, 40, 20, 56)]
        transform = GeometricTransform(1.2, 1.1, 3.0, False)
        origin = (15, 9)
        fused, fused_boxes, indices = imaging.transform_and_crop(
            image, transform, origin, 48, 48, boxes
        )
        warped, mapped = imaging.apply_transform(image, transform, boxes)
        _, two_step = imaging.crop(warped, origin, 48, 48, mapped)
        assert fused.shape == (48, 48)
        assert len(fused_boxes) == len(two_step)
        for a, b in zip(fused_boxes, two_step):
            assert a.as_tuple() == pytest.approx(b.as_tuple(), abs=1e-9)
        assert all(0 <= i < len(boxes) for i in indices)


class TestPngIo:
    def test_round_trip_gray_and_rgb(self, tmp_path):
        rng = np.random.default_rng(7)
        gray = rng.integers(0, 256, size=(18, 25), dtype=np.uint8)
        rgb = rng.integers(0, 256, size=(18, 25, 3), dtype=np.uint8)
        imaging.write_image(tmp_path / "g.png", gray)
        imaging.write_image(tmp_path / "c.png", rgb)
        assert np.array_equal(imaging.read_image(tmp_path / "g.png"), gray)
        assert np.array_equal(imaging.read_image(tmp_path / "c.png"), rgb)

    def test_channel_conversion_on_read(self, tmp_path):
        rgb = np.zeros((8, 8, 3), dtype=np.uint8)
        imaging.write_image(tmp_path / "c.png", rgb)
        assert imaging.read_image(tmp_path / "c.png", channels=1).shape == (8, 8)


class TestPad:
    def test_pad_to_multiple(self):
        image = np.full((30, 45), 90, dtype=np.uint8)
        out = imaging.pad_to_multiple(image, 16)
        assert out.shape == (32, 48)
        assert np.array_equal(out[:30, :45], image)
        assert out[31, 47] == 90

    def test_already_multiple_passthrough(self):
        image = np.zeros((32, 48), dtype=np.uint8)
        assert imaging.pad_to_multiple(image, 16) is image
