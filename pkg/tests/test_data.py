import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

import oracles
from hsanet.data import (
    LEVIR_CD_COUNTS,
    WHU_CD_COUNTS,
    BitemporalSample,
    Manifest,
    ManifestError,
    ManifestRecord,
    SplitCountError,
    SynthSpec,
    assign_splits,
    load_manifest,
    parse_counts,
    read_image,
    read_mask,
    render_error_map,
    stitch_tiles,
    synth_generate,
    synth_pair,
    tile_scene,
    write_image,
)


def scenes(h, w, rng=None, c=3):
    rng = rng or np.random.default_rng(0)
    return rng.random((c, h, w)).astype(np.float32), rng.random((c, h, w)).astype(np.float32), \
        (rng.random((h, w)) > 0.5).astype(np.uint8)


def write_manifest_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def rec(i, split="train", **kw):
    d = {"id": f"s{i}", "t1": "a.png", "t2": "b.png", "mask": "m.png", "split": split}
    d.update(kw)
    return d


class TestTiling:
    @pytest.mark.parametrize("h,w,n", [(512, 512, 4), (300, 300, 1), (1024, 768, 12), (256, 1000, 3)])
    def test_counts(self, h, w, n):
        assert len(tile_scene(*scenes(h, w))) == n

    def test_ids_follow_row_major_grid(self):
        tiles = tile_scene(*scenes(1024, 768))
        expect = [f"r{r:03d}_c{c:03d}" for r in range(4) for c in range(3)]
        assert [t.id for t in tiles] == expect

    def test_tile_content_matches_crop(self, rng):
        t1, t2, m = scenes(600, 520, rng)
        tiles = tile_scene(t1, t2, m)
        t = tiles[3]  # row 1, col 1 on a 2x2 grid
        assert t.id == "r001_c001"
        np.testing.assert_array_equal(t.t1, t1[:, 256:512, 256:512])
        np.testing.assert_array_equal(t.mask, m[256:512, 256:512])

    def test_too_small_warns_and_returns_empty(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert tile_scene(*scenes(100, 400)) == []
        assert "smaller than patch" in caplog.text

    def test_incongruent_rejected(self):
        t1, t2, m = scenes(512, 512)
        with pytest.raises(ValueError):
            tile_scene(t1, t2[:, :300], m)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 7), st.integers(0, 7))
    def test_stitch_inverts_tiling(self, rows, cols, extra_h, extra_w):
        patch = 8
        t1, t2, m = scenes(rows * patch + extra_h, cols * patch + extra_w)
        tiles = tile_scene(t1, t2, m, patch=patch)
        assert len(tiles) == rows * cols
        back = stitch_tiles(tiles, rows, cols)
        H, W = rows * patch, cols * patch
        np.testing.assert_array_equal(back.t1, t1[:, :H, :W])
        np.testing.assert_array_equal(back.t2, t2[:, :H, :W])
        np.testing.assert_array_equal(back.mask, m[:H, :W])


class TestSample:
    def test_mask_binarized(self):
        s = BitemporalSample("x", np.zeros((3, 2, 2)), np.zeros((3, 2, 2)), np.array([[0, 255], [7, 0]]))
        np.testing.assert_array_equal(s.mask, [[0, 1], [1, 0]])

    def test_incongruent(self):
        with pytest.raises(ValueError, match="congruent"):
            BitemporalSample("x", np.zeros((3, 2, 2)), np.zeros((3, 2, 2)), np.zeros((3, 3)))


class TestRasterIO:
    @pytest.mark.parametrize("hi", [1, 255, 128])
    def test_mask_binary_from_any_encoding(self, tmp_path, hi):
        arr = np.array([[0, hi], [hi, 0]], dtype=np.uint8)
        Image.fromarray(arr, mode="L").save(tmp_path / "m.png")
        m = read_mask(tmp_path / "m.png")
        np.testing.assert_array_equal(m, [[0, 1], [1, 0]])

    def test_image_roundtrip_normalized(self, tmp_path, rng):
        img = (rng.integers(0, 256, (3, 5, 4)) / 255.0).astype(np.float32)
        write_image(tmp_path / "x.png", img)
        back = read_image(tmp_path / "x.png")
        assert back.dtype == np.float32 and back.shape == (3, 5, 4)
        np.testing.assert_allclose(back, img, atol=1e-6)
        assert back.min() >= 0 and back.max() <= 1


class TestManifest:
    def test_empty(self, tmp_path):
        m = load_manifest(write_manifest_lines(tmp_path / "m.jsonl", []))
        assert m.records == [] and m.counts() == {"train": 0, "val": 0, "test": 0}

    def test_duplicate_names_line(self, tmp_path):
        p = write_manifest_lines(tmp_path / "m.jsonl", [rec(0), rec(1), rec(0)])
        with pytest.raises(ManifestError, match=r":3: duplicate id 's0'.*line 1"):
            load_manifest(p, check_files=False)

    def test_unknown_split_names_line(self, tmp_path):
        p = write_manifest_lines(tmp_path / "m.jsonl", [rec(0), rec(1, split="holdout")])
        with pytest.raises(ManifestError, match=r":2: unknown split"):
            load_manifest(p, check_files=False)

    def test_missing_file_names_line(self, tmp_path):
        p = write_manifest_lines(tmp_path / "m.jsonl", [rec(0)])
        with pytest.raises(ManifestError, match=r":1: missing file"):
            load_manifest(p)

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text(json.dumps(rec(0)) + "\n{not json\n")
        with pytest.raises(ManifestError, match=r":2: malformed"):
            load_manifest(p, check_files=False)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "nope.jsonl")

    def test_write_load_roundtrip(self, tmp_path):
        m = Manifest([ManifestRecord("a", "x", "y", "z", "val")], root=tmp_path)
        m.write(tmp_path / "m.jsonl")
        back = load_manifest(tmp_path / "m.jsonl", check_files=False)
        assert back.records == m.records

    @pytest.mark.parametrize("counts", [WHU_CD_COUNTS, LEVIR_CD_COUNTS])
    def test_published_counts_accepted(self, tmp_path, counts):
        splits = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
        p = write_manifest_lines(tmp_path / "m.jsonl", [rec(i, s) for i, s in enumerate(splits)])
        m = load_manifest(p, expect_counts=counts, check_files=False)
        assert tuple(m.counts().values()) == counts

    def test_count_mismatch_rejected(self, tmp_path):
        p = write_manifest_lines(tmp_path / "m.jsonl", [rec(0), rec(1, "val")])
        with pytest.raises(SplitCountError, match="1/1/0"):
            load_manifest(p, expect_counts=WHU_CD_COUNTS, check_files=False)

    def test_published_constants(self):
        assert WHU_CD_COUNTS == (4536, 504, 2760)
        assert LEVIR_CD_COUNTS == (7120, 1024, 2048)

    def test_parse_counts(self):
        assert parse_counts("4536, 504,2760") == (4536, 504, 2760)
        with pytest.raises(ValueError):
            parse_counts("1,2")


class TestSplits:
    def test_exact_quotas(self):
        s = assign_splits([f"id{i}" for i in range(92)])
        vals = list(s.values())
        assert (vals.count("train"), vals.count("val"), vals.count("test")) == (64, 9, 19)

    def test_independent_of_input_order(self):
        ids = [f"id{i}" for i in range(30)]
        assert assign_splits(ids) == assign_splits(list(reversed(ids)))


class TestSynth:
    def test_deterministic_bytes(self, tmp_path):
        spec = SynthSpec(seed=3, count=4, size=16)
        synth_generate(spec, tmp_path / "a")
        synth_generate(spec, tmp_path / "b")
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert len(names) == 13
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()

    def test_manifest_loads_with_binary_masks(self, tmp_path):
        synth_generate(SynthSpec(count=5, size=16), tmp_path)
        m = load_manifest(tmp_path / "manifest.jsonl")
        assert sum(m.counts().values()) == 5
        for s in m.load_split("train") + m.load_split("test") + m.load_split("val"):
            assert set(np.unique(s.mask)) <= {0, 1}
            assert s.t1.shape == (3, 16, 16)

    def test_zero_change(self):
        spec = SynthSpec(count=3, size=32, change_fraction=0.0, noise_sigma=0.01)
        for i in range(3):
            s = synth_pair(spec, i)
            assert not s.mask.any()
            assert np.abs(s.t2 - s.t1).max() < 10 * spec.noise_sigma

    def test_zero_change_zero_noise_identical(self):
        s = synth_pair(SynthSpec(change_fraction=0.0, noise_sigma=0.0), 0)
        np.testing.assert_array_equal(s.t1, s.t2)

    @pytest.mark.parametrize("frac", [0.05, 0.15, 0.3])
    def test_change_fraction_on_average(self, frac):
        spec = SynthSpec(seed=1, count=10, size=32, change_fraction=frac)
        mean = np.mean([synth_pair(spec, i).mask.mean() for i in range(10)])
        assert 0.5 * frac <= mean <= 1.5 * frac

    def test_mask_is_exact_edit_set_without_noise(self):
        spec = SynthSpec(seed=2, count=1, size=32, noise_sigma=0.0)
        s = synth_pair(spec, 0)
        diff = np.any(s.t1 != s.t2, axis=0)
        # every differing pixel is marked; marked pixels may coincide in value only by chance
        assert np.all(s.mask[diff] == 1)
        assert diff.sum() >= 0.9 * s.mask.sum()

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SynthSpec(change_fraction=1.5)

    def test_unwritable_dir(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="not writable"):
            synth_generate(SynthSpec(count=1), blocker / "sub")


class TestRender:
    def test_all_white(self):
        out = render_error_map(np.ones((4, 4)), np.ones((4, 4)))
        assert out.dtype == np.uint8 and out.shape == (3, 4, 4)
        assert np.all(out == 255)

    def test_all_red(self):
        out = render_error_map(np.ones((2, 3)), np.zeros((2, 3)))
        assert np.all(out[0] == 255) and not out[1:].any()

    def test_random_pair_matches_lookup(self, rng):
        p, g = (rng.random((2, 16, 16)) > 0.5).astype(np.uint8)
        out = render_error_map(p, g)
        np.testing.assert_array_equal(out, oracles.error_map_lookup(p, g))
        colors = {tuple(out[:, i, j]) for i in range(16) for j in range(16)}
        assert colors <= set(oracles.ERROR_COLORS.values())

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            render_error_map(np.array([[2]]), np.array([[1]]))
