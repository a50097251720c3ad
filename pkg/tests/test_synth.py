import numpy as np
import pytest

from brailleocr import codec, datasets, synth
from brailleocr.geometry import iou_matrix, boxes_to_array
from brailleocr.synth import PageGeometry, RenderOptions


class TestRenderBasics:
    def test_empty_text_blank_page(self):
        image, annotation = synth.render_synthetic_page([], seed=1)
        assert annotation.chars == [] and annotation.negative
        assert image.shape == (annotation.height, annotation.width)
        assert image.std() < 10.0  # texture only, no dots

    def test_single_full_cell_box_size(self):
        image, annotation = synth.render_synthetic_page([[63]], seed=2)
        assert len(annotation.chars) == 1
        box, class_id = annotation.chars[0]
        assert class_id == 63
        assert box.width == pytest.approx(20.0, abs=0.01)
        assert box.height == pytest.approx(32.0, abs=0.01)

    def test_char_and_line_pitch(self):
        image, annotation = synth.render_synthetic_page([[1, 1], [1]], seed=3)
        boxes = annotation.boxes()
        assert boxes[1].center()[0] - boxes[0].center()[0] == pytest.approx(25.0, abs=0.01)
        assert boxes[2].center()[1] - boxes[0].center()[1] == pytest.approx(40.0, abs=0.01)

    def test_blank_cells_make_no_boxes(self):
        _, annotation = synth.render_synthetic_page([[1, 0, 2]], seed=4)
        assert annotation.class_ids() == [1, 2]

    def test_fixed_seed_bit_identical(self):
        rows = synth.random_rows(4, 6, seed=5)
        options = RenderOptions(max_rotation_deg=3.0, noise_sigma=5.0, perspective=0.004)
        a, ann_a = synth.render_synthetic_page(rows, options=options, seed=6)
        b, ann_b = synth.render_synthetic_page(rows, options=options, seed=6)
        assert np.array_equal(a, b)
        assert ann_a == ann_b

    def test_different_seed_differs(self):
        rows = [[7, 7], [7, 7]]
        options = RenderOptions(noise_sigma=5.0)
        a, _ = synth.render_synthetic_page(rows, options=options, seed=1)
        b, _ = synth.render_synthetic_page(rows, options=options, seed=2)
        assert not np.array_equal(a, b)

    def test_bad_class_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            synth.render_synthetic_page([[64]])

    def test_text_exceeding_fixed_page_rejected(self):
        geometry = PageGeometry(page_width=60, page_height=60)
        with pytest.raises(ValueError, match="exceeds page bounds"):
            synth.render_synthetic_page([[1, 2, 3, 4, 5]], geometry=geometry)


class TestAnnotationGeometry:
    @pytest.mark.parametrize("rotation", [0.0, 5.0])
    def test_boxes_contain_their_dots(self, rotation):
        rows = synth.random_rows(6, 10, seed=11)
        options = RenderOptions(max_rotation_deg=rotation, perspective=0.003)
        image, annotation = synth.render_synthetic_page(rows, options=options, seed=12)
        geometry = PageGeometry()
        # Boxes must contain every dot disk: darker and brighter extremes of a
        # character stay strictly inside its (slightly inflated) box.
        for box, class_id in annotation.chars:
            assert box.width >= 2 * geometry.dot_radius
            assert box.height >= 2 * geometry.dot_radius

    def test_boxes_valid_and_disjoint(self):
        rows = synth.random_rows(8, 12, seed=13)
        options = RenderOptions(max_rotation_deg=5.0, noise_sigma=4.0)
        _, annotation = synth.render_synthetic_page(rows, options=options, seed=14)
        assert datasets.validate(annotation) == []
        arr = boxes_to_array(annotation.boxes())
        overlaps = iou_matrix(arr, arr)
        np.fill_diagonal(overlaps, 0.0)
        assert overlaps.max() <= 0.02

    def test_dots_render_inside_boxes(self):
        # A one-character page: every pixel that differs from the background
        # noticeably must lie inside the annotation box.
        image, annotation = synth.render_synthetic_page(
            [[63]], options=RenderOptions(texture=0.0, illumination=0.0), seed=15
        )
        box, _ = annotation.chars[0]
        background = 218
        ys, xs = np.nonzero(np.abs(image.astype(int) - background) > 12)
        assert len(xs) > 0
        assert xs.min() + 0.5 >= box.left and xs.max() + 0.5 <= box.right
        assert ys.min() + 0.5 >= box.top and ys.max() + 0.5 <= box.bottom

    def test_dot_shading_bright_above_dark_below(self):
        image, annotation = synth.render_synthetic_page(
            [[1]], options=RenderOptions(texture=0.0, illumination=0.0, dot_jitter=0.0), seed=16
        )
        box, _ = annotation.chars[0]
        geometry = PageGeometry()
        # Dot 1 centre: box centre + (-dot_pitch/2, -dot_pitch).
        cx = int(box.center()[0] - geometry.dot_pitch / 2.0)
        cy = int(box.center()[1] - geometry.dot_pitch)
        column = image[:, cx].astype(int)
        above = column[cy - 3 : cy].mean()
        below = column[cy : cy + 3].mean()
        assert above > 218 > below


class TestNegativePages:
    def test_negative_page(self):
        image, annotation = synth.render_negative_page(200, 150, seed=17)
        assert annotation.negative and annotation.chars == []
        assert image.shape == (150, 200)
        assert datasets.validate(annotation) == []

    def test_negative_deterministic(self):
        a, _ = synth.render_negative_page(120, 90, seed=18)
        b, _ = synth.render_negative_page(120, 90, seed=18)
        assert np.array_equal(a, b)


class TestRowHelpers:
    def test_random_rows_ranges(self):
        rows = synth.random_rows(50, 40, seed=19)
        values = [v for row in rows for v in row]
        assert all(0 <= v <= 63 for v in values)
        assert any(v == 0 for v in values)
        assert synth.random_rows(50, 40, seed=19) == rows

    def test_unicode_round_trip(self):
        rows = [[1, 0, 63], [20]]
        text = synth.rows_to_unicode(rows)
        assert text == "⠁ ⠿\n⠔"
        assert synth.rows_from_unicode(text) == rows

    def test_unicode_rejects_non_braille(self):
        with pytest.raises(ValueError):
            synth.rows_from_unicode("abc")
