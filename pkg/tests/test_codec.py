import pytest

from brailleocr import codec
from brailleocr.codec import DotPattern


def test_encode_known_values():
    assert codec.encode(DotPattern.from_dots([1])) == 1
    assert codec.encode(DotPattern.from_dots([1, 2, 3, 4, 5, 6])) == 63
    assert codec.encode(DotPattern.from_dots([1, 2])) == 3


def test_encode_empty_pattern_rejected():
    with pytest.raises(ValueError, match="no character"):
        codec.encode(DotPattern.from_dots([]))


def test_decode_known_values():
    assert codec.decode(63).dots == frozenset({1, 2, 3, 4, 5, 6})
    assert codec.decode(8).dots == frozenset({4})
    assert codec.decode(5).dots == frozenset({1, 3})


@pytest.mark.parametrize("bad", [0, -1, 64, 100])
def test_decode_out_of_range(bad):
    with pytest.raises(ValueError):
        codec.decode(bad)


def test_encode_decode_bijection_exhaustive():
    seen = set()
    for class_id in range(1, 64):
        pattern = codec.decode(class_id)
        assert codec.encode(pattern) == class_id
        seen.add(pattern.dots)
    assert len(seen) == 63


def test_mirror_known_values():
    assert codec.mirror(1) == 8
    assert codec.mirror(63) == 63
    assert codec.mirror(3) == 24


def test_mirror_involution_and_bijection():
    images = set()
    for class_id in range(1, 64):
        mirrored = codec.mirror(class_id)
        assert 1 <= mirrored <= 63
        assert codec.mirror(mirrored) == class_id
        images.add(mirrored)
        # Column swap on the dot pattern agrees with the bit formula.
        swapped = {d + 3 if d <= 3 else d - 3 for d in codec.decode(class_id).dots}
        assert codec.decode(mirrored).dots == frozenset(swapped)
    assert len(images) == 63


def test_encode_monotone_in_dots():
    for class_id in range(1, 64):
        dots = codec.decode(class_id).dots
        for extra in set(codec.DOT_NUMBERS) - dots:
            bigger = codec.encode(DotPattern.from_dots(dots | {extra}))
            assert bigger > class_id


def test_to_unicode():
    assert codec.to_unicode(1) == "⠁"  # dot 1
    assert codec.to_unicode(63) == "⠿"  # all six dots
    assert codec.to_unicode(20) == "⠔"  # dots 3 and 5


def test_unicode_mask_consistency_exhaustive():
    for class_id in range(1, 64):
        assert ord(codec.to_unicode(class_id)) - 0x2800 == class_id


def test_to_text_with_latin_table():
    table = codec.latin_alphabet()
    assert codec.to_text(1, table) == "a"
    assert codec.to_text(codec.encode(DotPattern.from_string("124")), table) == "f"


def test_to_text_fallbacks():
    table = codec.latin_alphabet()
    unmapped = 0b111111  # not a letter in the Latin table
    assert codec.to_text(unmapped, table) == codec.to_unicode(unmapped)
    assert codec.to_text(63, {}) == "⠿"
    assert codec.to_text(7, None) == codec.to_unicode(7)


def test_dot_pattern_string_round_trip():
    assert DotPattern.from_string("124").to_string() == "124"
    assert DotPattern.from_string("").dots == frozenset()
    with pytest.raises(ValueError):
        DotPattern.from_string("142")  # not ascending
    with pytest.raises(ValueError):
        DotPattern.from_string("17")


def test_load_alphabet(tmp_path):
    path = tmp_path / "table.tsv"
    path.write_text("# comment\n1\tx\n\n245\tyz\n", encoding="utf-8")
    table = codec.load_alphabet(path)
    assert table == {1: "x", codec.encode(DotPattern.from_string("245")): "yz"}
    bad = tmp_path / "bad.tsv"
    bad.write_text("1\tx\n1\ty\n", encoding="utf-8")
    with pytest.raises(ValueError, match="duplicate"):
        codec.load_alphabet(bad)
