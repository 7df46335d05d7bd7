import csv

import numpy as np
import pytest
from PIL import Image
from scipy import stats

from tonescope.data import (
    CellCounts,
    ImageCache,
    ImageRecord,
    MetadataError,
    generate_fixture,
    load_image,
    load_metadata,
    map_tone,
    normalize_fst,
    summarize,
    write_metadata,
)


def write_csv(path, rows, header=("isic_id", "diagnosis", "fitzpatrick_skin_type", "image_path")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


@pytest.mark.parametrize(
    "fst, tone",
    [("I", "light"), ("II", "light"), ("III", "dark"), ("IV", "dark"), ("V", None), ("VI", None),
     ("unknown", None), ("", None), (None, None), ("3", "dark"), ("fst ii", "light"), ("VII", None)],
)
def test_map_tone(fst, tone):
    assert map_tone(fst) == tone


def test_normalize_fst():
    assert normalize_fst(" iv ") == "IV"
    assert normalize_fst("FST1") == "I"
    assert normalize_fst("banana") == "unknown"


def test_load_metadata_examples(tmp_path):
    p = write_csv(tmp_path / "m.csv", [("i1", "malignant", "II", "a.png"), ("i2", "benign", "IV", "b.png"),
                                       ("i3", "Benign", "V", "/abs/c.png")])
    recs = load_metadata(p)
    assert [r.tone for r in recs] == ["light", "dark", None]
    assert recs[2].diagnosis == "benign" and recs[2].fst == "V"
    assert recs[0].image_path == tmp_path / "a.png"
    assert str(recs[2].image_path) == "/abs/c.png"
    assert [r.label for r in recs] == [1, 0, 0]


def test_missing_column_named(tmp_path):
    p = write_csv(tmp_path / "m.csv", [("i1", "benign", "a.png")], header=("isic_id", "diagnosis", "image_path"))
    with pytest.raises(MetadataError, match="fitzpatrick_skin_type"):
        load_metadata(p)


def test_unreadable_and_duplicate(tmp_path):
    with pytest.raises(MetadataError, match="cannot read"):
        load_metadata(tmp_path / "nope.csv")
    p = write_csv(tmp_path / "m.csv", [("i1", "benign", "I", "a.png"), ("i1", "benign", "II", "b.png")])
    with pytest.raises(MetadataError, match="duplicate id 'i1'"):
        load_metadata(p)


def test_malformed_rows_reported_not_dropped(tmp_path):
    rows = [("i1", "benign", "I", "a.png"), ("", "benign", "I", "b.png"), ("i3", "cyst", "I", "c.png"),
            ("i4", "malignant", "III", "")]
    p = write_csv(tmp_path / "m.csv", rows)
    errors = []
    recs = load_metadata(p, errors)
    assert [r.id for r in recs] == ["i1"]
    assert [n for n, _ in errors] == [3, 4, 5]
    with pytest.raises(MetadataError, match="3 malformed row"):
        load_metadata(p)


def test_metadata_round_trip(tmp_path):
    recs = [ImageRecord(f"r{i}", d, f, tmp_path / "img" / f"r{i}.png")
            for i, (d, f) in enumerate([("benign", "I"), ("malignant", "IV"), ("benign", "unknown"), ("malignant", "VI")])]
    write_metadata(recs, tmp_path / "metadata.csv")
    assert load_metadata(tmp_path / "metadata.csv") == recs
    assert "img/r0.png" in (tmp_path / "metadata.csv").read_text()


def test_load_image_uniform_gray(tmp_path):
    Image.new("RGB", (100, 100), (128, 128, 128)).save(tmp_path / "g.png")
    arr = load_image(tmp_path / "g.png", 32)
    assert arr.shape == (3, 32, 32) and arr.dtype == np.float32
    assert np.all(np.abs(arr - 0.5) <= 1 / 255)


def test_load_image_bilinear_gradient(tmp_path):
    im = Image.new("L", (2, 1))
    im.putpixel((0, 0), 0)
    im.putpixel((1, 0), 255)
    im.save(tmp_path / "bw.png")
    arr = load_image(tmp_path / "bw.png", 8)
    row = arr[0, 0]
    assert arr.min() >= 0 and arr.max() <= 1
    assert np.all(np.diff(row) >= 0) and row[-1] > row[0]
    # rows are identical since the source has one row
    assert np.array_equal(arr[:, 0], arr[:, -1])
    np.testing.assert_array_equal(load_image(tmp_path / "bw.png", 8), arr)


def test_load_image_jpeg_and_errors(tmp_path):
    Image.new("RGB", (20, 10), (255, 0, 0)).save(tmp_path / "r.jpg")
    arr = load_image(tmp_path / "r.jpg", 4)
    assert arr[0].mean() > 0.9 and arr[2].mean() < 0.1
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(ValueError, match="cannot decode"):
        load_image(tmp_path / "bad.png", 4)
    with pytest.raises(ValueError):
        load_image(tmp_path / "missing.png", 4)


def test_image_cache_stack(tmp_path):
    recs = generate_fixture(tmp_path, CellCounts(1, 1, 1, 1), side=12)
    cache = ImageCache(8)
    batch = cache.stack(recs)
    assert batch.shape == (4, 3, 8, 8) and batch.dtype == np.float32
    assert cache.get(recs[0]) is cache.get(recs[0])


def test_summarize_reference_totals():
    counts = {("benign", "light"): 2261, ("benign", "dark"): 446, ("malignant", "light"): 758, ("malignant", "dark"): 158}
    recs = []
    for (d, t), n in counts.items():
        fst = "I" if t == "light" else "III"
        recs += [ImageRecord(f"{d}{t}{i}", d, fst, "x") for i in range(n)]
    s = summarize(recs)
    assert s.total == 3623
    assert (s.by_diagnosis("benign"), s.by_diagnosis("malignant")) == (2707, 916)
    assert (s.by_tone("light"), s.by_tone("dark")) == (3019, 604)
    assert round(s.ratio(2707), 3) == 0.747 and round(s.ratio(604), 3) == 0.167
    rng = np.random.default_rng(0)
    assert summarize([recs[i] for i in rng.permutation(len(recs))]) == s


def test_summarize_edges():
    empty = summarize([])
    assert empty.total == 0 and set(empty.counts.values()) == {0}
    one_each = summarize([ImageRecord(str(i), d, f, "x") for i, (d, f) in
                          enumerate([("benign", "I"), ("benign", "IV"), ("malignant", "II"), ("malignant", "III")])])
    assert all(one_each.ratio(n) == 0.25 for n in one_each.counts.values())
    with pytest.raises(ValueError, match="no tone"):
        summarize([ImageRecord("a", "benign", "V", "x")])


def test_summary_dict_recomputes():
    s = summarize([ImageRecord(str(i), "benign", "I", "x") for i in range(3)] + [ImageRecord("m", "malignant", "IV", "x")])
    d = s.to_dict()
    assert d["total"] == 4 and sum(d["cells"].values()) == 4
    assert d["cells"]["benign_light"] == 3 and d["cell_ratios"]["malignant_dark"] == 0.25
    assert d["diagnosis"] == {"benign": 3, "malignant": 1}


def test_cell_counts_parse():
    assert CellCounts.parse("1,2,3,4") == CellCounts(1, 2, 3, 4)
    with pytest.raises(ValueError):
        CellCounts.parse("1,2")


def test_fixture_empty_has_header_only(tmp_path):
    assert generate_fixture(tmp_path, CellCounts()) == []
    assert (tmp_path / "metadata.csv").read_text() == "isic_id,diagnosis,fitzpatrick_skin_type,image_path\n"


def test_fixture_deterministic_and_round_trips(tmp_path):
    a = generate_fixture(tmp_path / "a", CellCounts(2, 2, 2, 2), "brightness_shift", "blob", seed=5, side=16)
    b = generate_fixture(tmp_path / "b", CellCounts(2, 2, 2, 2), "brightness_shift", "blob", seed=5, side=16)
    for ra, rb in zip(a, b):
        assert ra.image_path.read_bytes() == rb.image_path.read_bytes()
    loaded = load_metadata(tmp_path / "a" / "metadata.csv")
    assert loaded == a
    s = summarize(loaded)
    assert set(s.counts.values()) == {2}


def _mean_intensity(recs, tone):
    return np.array([load_image(r, 16).mean() for r in recs if r.tone == tone])


def test_fixture_without_tone_signal_is_indistinguishable(tmp_path):
    recs = generate_fixture(tmp_path, CellCounts(40, 40, 40, 40), "none", "blob", seed=1, side=16)
    p = stats.ks_2samp(_mean_intensity(recs, "light"), _mean_intensity(recs, "dark")).pvalue
    assert p > 0.01


def test_fixture_brightness_shift_separates_tones(tmp_path):
    recs = generate_fixture(tmp_path, CellCounts(20, 20, 0, 0), "brightness_shift", "none", seed=1, side=16)
    light, dark = _mean_intensity(recs, "light"), _mean_intensity(recs, "dark")
    assert light.min() > dark.max()


def test_fixture_rejects_bad_arguments(tmp_path):
    with pytest.raises(ValueError):
        generate_fixture(tmp_path, CellCounts(-1, 0, 0, 0))
    with pytest.raises(ValueError):
        generate_fixture(tmp_path, CellCounts(1, 0, 0, 0), tone_signal="hue")
