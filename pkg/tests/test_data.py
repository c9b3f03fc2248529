import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sigfuse.data import (LBP_BINS, AttributeTable, DataFormatError,
                          Dataset, FeatureBank, SyntheticSpec, ViewSpec,
                          bank_from_bytes, bank_to_bytes, format_attr_file,
                          format_split_file, lbp_dim, lbp_extract, load_bank,
                          parse_attr_file, parse_split_file, read_pgm,
                          rgb_to_gray, save_bank, split_dataset,
                          synth_generate, write_pgm)
from sigfuse.evaluate import average_precision
from sigfuse.nn import make_rng

# the 40 attribute names of the public face-attribute list convention
CELEBA_NAMES = (
    "5_o_Clock_Shadow Arched_Eyebrows Attractive Bags_Under_Eyes Bald Bangs "
    "Big_Lips Big_Nose Black_Hair Blond_Hair Blurry Brown_Hair Bushy_Eyebrows "
    "Chubby Double_Chin Eyeglasses Goatee Gray_Hair Heavy_Makeup High_Cheekbones "
    "Male Mouth_Slightly_Open Mustache Narrow_Eyes No_Beard Oval_Face Pale_Skin "
    "Pointy_Nose Receding_Hairline Rosy_Cheeks Sideburns Smiling Straight_Hair "
    "Wavy_Hair Wearing_Earrings Wearing_Hat Wearing_Lipstick Wearing_Necklace "
    "Wearing_Necktie Young"
)


class TestParseAttrFile:
    def test_toy_file(self):
        text = "2\nBald Male Young\nimg1.jpg 1 -1 1\nimg2.jpg -1 -1 -1\n"
        table = parse_attr_file(text)
        assert table.names == ["Bald", "Male", "Young"]
        np.testing.assert_array_equal(table.rows["img1.jpg"], [1, 0, 1])
        np.testing.assert_array_equal(table.rows["img2.jpg"], [0, 0, 0])

    def test_short_row_names_line_number(self):
        text = "1\nA B C\nimg1.jpg 1 -1\n"
        with pytest.raises(DataFormatError, match="line 3"):
            parse_attr_file(text)

    def test_non_pm_one_value(self):
        with pytest.raises(DataFormatError, match="-1 or 1"):
            parse_attr_file("1\nA\nimg1.jpg 2\n")

    def test_count_mismatch(self):
        with pytest.raises(DataFormatError, match="declares 3"):
            parse_attr_file("3\nA\nimg1.jpg 1\n")

    def test_celeba_header_declares_40_names(self):
        text = f"1\n{CELEBA_NAMES}\nimg1.jpg " + " ".join(["1"] * 40) + "\n"
        table = parse_attr_file(text)
        assert table.n_attributes == 40

    def test_format_roundtrip(self):
        text = "2\nA B\nx 1 -1\ny -1 1\n"
        table = parse_attr_file(text)
        assert parse_attr_file(format_attr_file(table)).rows.keys() == table.rows.keys()


class TestSplitFiles:
    def test_parse_and_format(self):
        splits = parse_split_file("a 0\nb 1\nc 2\n")
        assert splits == {"a": "train", "b": "val", "c": "test"}
        assert parse_split_file(format_split_file(splits)) == splits

    def test_bad_line(self):
        with pytest.raises(DataFormatError, match="line 1"):
            parse_split_file("a 3\n")


class TestSplitDataset:
    def _table(self, n=100):
        rows = {f"i{k}": np.array([k % 2], dtype=np.uint8) for k in range(n)}
        return AttributeTable(["A"], rows)

    def test_all_train(self):
        table = split_dataset(self._table(), (1.0, 0.0, 0.0), seed=0)
        assert len(table.ids_for("train")) == 100

    def test_deterministic_and_partitioning(self):
        a = split_dataset(self._table(), (0.6, 0.2, 0.2), seed=5)
        b = split_dataset(self._table(), (0.6, 0.2, 0.2), seed=5)
        assert a.splits == b.splits
        ids = set(a.ids_for("train")) | set(a.ids_for("val")) | set(a.ids_for("test"))
        assert len(ids) == 100
        assert len(a.ids_for("train")) == 60

    def test_explicit_split_honored(self):
        table = self._table(3)
        table.splits = parse_split_file("i0 0\ni1 1\ni2 2\n")
        assert table.ids_for("val") == ["i1"]

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            split_dataset(self._table(), (0.5, 0.2, 0.2), seed=0)


class TestFeatureBank:
    def test_empty_roundtrip(self):
        bank = FeatureBank("fv", 8, {})
        again = bank_from_bytes(bank_to_bytes(bank))
        assert again.kind_name == "fv" and again.dim == 8 and not again.entries

    def test_fuzz_roundtrip_bit_exact(self, tmp_path):
        rng = make_rng(77)
        bank = FeatureBank("cnn", 12, {})
        for i in range(1000):
            bank.add(f"img_{i:05d}", rng.standard_normal(12).astype(np.float32))
        path = tmp_path / "b.fbnk"
        save_bank(bank, path)
        again = load_bank(path)
        assert bank_to_bytes(again) == path.read_bytes()
        for img_id, vec in bank.entries.items():
            assert again.entries[img_id].tobytes() == vec.tobytes()

    def test_corrupt_magic_rejected(self):
        data = bytearray(bank_to_bytes(FeatureBank("fv", 2, {"a": np.zeros(2, np.float32)})))
        data[0] ^= 0xFF
        with pytest.raises(DataFormatError, match="magic"):
            bank_from_bytes(bytes(data))

    def test_truncation_rejected(self):
        data = bank_to_bytes(FeatureBank("fv", 2, {"a": np.zeros(2, np.float32)}))
        with pytest.raises(DataFormatError, match="truncated"):
            bank_from_bytes(data[:-1])

    def test_wrong_dim_entry_rejected(self):
        bank = FeatureBank("fv", 4, {})
        with pytest.raises(ValueError):
            bank.add("a", np.zeros(3))


class TestLbpExtract:
    def test_paper_scale_dimension(self):
        img = make_rng(1).integers(0, 256, size=(218, 178)).astype(np.uint8)
        desc = lbp_extract(img, 20)
        assert desc.shape == (4640,)
        assert lbp_dim(218, 178, 20) == 10 * 8 * 58

    def test_constant_image_one_hot_cells(self):
        img = np.full((60, 40), 77, dtype=np.uint8)
        desc = lbp_extract(img, 20).reshape(-1, LBP_BINS)
        for hist in desc:
            assert np.isclose(hist.sum(), 1.0)
            assert np.count_nonzero(hist) == 1

    def test_additive_shift_invariance(self):
        img = make_rng(2).integers(0, 240, size=(50, 50)).astype(np.uint8)
        a = lbp_extract(img, 10)
        b = lbp_extract(img + 10, 10)
        np.testing.assert_array_equal(a, b)

    def test_histograms_sum_to_one(self):
        img = make_rng(3).integers(0, 256, size=(45, 67)).astype(np.uint8)
        desc = lbp_extract(img, 11).reshape(-1, LBP_BINS)
        np.testing.assert_allclose(desc.sum(axis=1), 1.0)

    @given(st.integers(8, 64), st.integers(8, 64), st.integers(3, 20))
    @settings(max_examples=20, deadline=None)
    def test_dimension_formula(self, h, w, c):
        if h < c or w < c:
            return
        img = np.zeros((h, w), dtype=np.uint8)
        assert lbp_extract(img, c).shape == ((h // c) * (w // c) * LBP_BINS,)

    def test_too_small_image(self):
        with pytest.raises(ValueError, match="smaller"):
            lbp_extract(np.zeros((5, 5), dtype=np.uint8), 10)

    def test_rgb_converted_via_luma(self):
        rgb = make_rng(4).integers(0, 256, size=(30, 30, 3)).astype(np.uint8)
        np.testing.assert_array_equal(lbp_extract(rgb, 10),
                                      lbp_extract(rgb_to_gray(rgb), 10))


class TestPgm:
    def test_roundtrip(self, tmp_path):
        img = make_rng(5).integers(0, 256, size=(7, 9)).astype(np.uint8)
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        np.testing.assert_array_equal(read_pgm(path), img)

    def test_comment_handling(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n\x00\x01\x02\x03")
        np.testing.assert_array_equal(read_pgm(path), [[0, 1], [2, 3]])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P2\n2 2\n255\n....")
        with pytest.raises(DataFormatError):
            read_pgm(path)


def small_spec(**kw):
    base = dict(latent_dim=8,
                views=(ViewSpec("a", 16, 0.0), ViewSpec("b", 12, 0.3)),
                n_attributes=4, n_train=600, n_val=100, n_test=300, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


class TestSynthGenerate:
    def test_deterministic(self):
        t1, b1 = synth_generate(small_spec())
        t2, b2 = synth_generate(small_spec())
        assert all(np.array_equal(t1.rows[i], t2.rows[i]) for i in t1.rows)
        for name in b1:
            assert bank_to_bytes(b1[name]) == bank_to_bytes(b2[name])

    def test_base_rates_near_half(self):
        spec = small_spec(n_train=10000, n_val=0, n_test=0, n_attributes=6)
        table, _ = synth_generate(spec)
        labels = np.stack(list(table.rows.values()))
        rates = labels.mean(axis=0)
        assert np.all(np.abs(rates - 0.5) < 0.05)

    def test_noiseless_views_linearly_separable(self):
        table, banks = synth_generate(small_spec())
        dataset = Dataset(table, banks)
        ids, xs, y = dataset.arrays("train")
        tids, txs, ty = dataset.arrays("test")
        x = xs["a"]
        xa = np.hstack([x, np.ones((len(x), 1))])
        txa = np.hstack([txs["a"], np.ones((len(txs["a"]), 1))])
        aps = []
        for j in range(y.shape[1]):
            w, *_ = np.linalg.lstsq(xa, 2 * y[:, j] - 1, rcond=None)
            aps.append(average_precision(txa @ w, ty[:, j]))
        assert np.mean(aps) > 0.99

    def test_split_sizes(self):
        table, _ = synth_generate(small_spec())
        assert len(table.ids_for("train")) == 600
        assert len(table.ids_for("val")) == 100
        assert len(table.ids_for("test")) == 300

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            small_spec(views=(ViewSpec("a", 16, -0.1),))


class TestDatasetArrays:
    def test_missing_bank_entry_reported(self):
        table, banks = synth_generate(small_spec(n_train=10, n_val=2, n_test=2))
        some_id = next(iter(banks["a"].entries))
        del banks["a"].entries[some_id]
        with pytest.raises(ValueError, match="missing features"):
            Dataset(table, banks).arrays("train")

    def test_unknown_kind(self):
        table, banks = synth_generate(small_spec(n_train=10, n_val=2, n_test=2))
        with pytest.raises(ValueError, match="no feature bank"):
            Dataset(table, banks).arrays("train", kinds=["zz"])
