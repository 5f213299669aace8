import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from ropnet.data import (
    ImageRecord,
    Manifest,
    augment,
    augment_dataset,
    clean_manifest,
    decode_ppm,
    encode_ppm,
    load_ppm,
    normalize,
    read_manifest,
    resize_bilinear,
    save_ppm,
    split,
    synth_generate,
    to_uint8,
    weighted_sampler,
    write_manifest,
)
from ropnet.errors import FormatError, ParameterError, ShapeError, SplitError, ValidationError


def resize_oracle(t, out_h, out_w):
    """Per-pixel bilinear interpolation at pixel-centre-aligned sample points."""
    in_h, in_w, c = t.shape
    out = np.zeros((out_h, out_w, c))
    for i in range(out_h):
        y = min(max((i + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1)
        y0 = int(math.floor(y))
        y1 = min(y0 + 1, in_h - 1)
        for j in range(out_w):
            x = min(max((j + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1)
            x0 = int(math.floor(x))
            x1 = min(x0 + 1, in_w - 1)
            fy, fx = y - y0, x - x0
            out[i, j] = ((1 - fy) * (1 - fx) * t[y0, x0] + (1 - fy) * fx * t[y0, x1]
                         + fy * (1 - fx) * t[y1, x0] + fy * fx * t[y1, x1])
    return out


def make_manifest(tmp_path, groups, images_per_group, quality="high", shape=(4, 4)):
    """Write small random images for ``groups`` (patient, eye) pairs."""
    rng = np.random.default_rng(0)
    tmp_path.mkdir(parents=True, exist_ok=True)
    records = []
    for g in range(groups):
        pid, eye = f"P{g // 2:03d}", "LR"[g % 2]
        for k in range(images_per_group):
            path = tmp_path / f"{pid}_{eye}_{k}.ppm"
            save_ppm(rng.integers(0, 256, (*shape, 3), dtype=np.uint8), path)
            records.append(ImageRecord(path.resolve(), pid, eye, g % 2, quality))
    return Manifest(records)


class TestPpm:
    def test_single_red_pixel(self):
        img = decode_ppm(b"P6\n1 1\n255\n\xff\x00\x00")
        assert img.shape == (1, 1, 3) and img.dtype == np.uint8
        np.testing.assert_array_equal(normalize(img)[0, 0], [1.0, 0.0, 0.0])

    def test_roundtrip(self, tmp_path):
        img = np.random.default_rng(1).integers(0, 256, (7, 5, 3), dtype=np.uint8)
        save_ppm(img, tmp_path / "a.ppm")
        np.testing.assert_array_equal(load_ppm(tmp_path / "a.ppm"), img)
        assert encode_ppm(img).startswith(b"P6\n5 7\n255\n")

    def test_comments_in_header(self):
        img = decode_ppm(b"P6\n# made by hand\n2 1\n# max\n255\n" + bytes(range(6)))
        np.testing.assert_array_equal(img.reshape(-1), np.arange(6))

    def test_rejects_p5(self):
        with pytest.raises(FormatError):
            decode_ppm(b"P5\n1 1\n255\n\x00")

    def test_truncated_payload_reports_offset(self):
        with pytest.raises(FormatError) as info:
            decode_ppm(b"P6\n2 2\n255\n" + bytes(5))
        assert info.value.offset is not None

    def test_rejects_16_bit(self):
        with pytest.raises(FormatError):
            decode_ppm(b"P6\n1 1\n65535\n" + bytes(6))


class TestNormalize:
    def test_endpoints(self):
        img = np.array([[[0, 128, 255]]], dtype=np.uint8)
        out = normalize(img)
        assert out.dtype == np.float32
        np.testing.assert_allclose(out[0, 0], [0.0, 128 / 255, 1.0], atol=1e-7)

    @given(arrays(np.uint8, (3, 4, 3)))
    def test_roundtrip_within_half_step(self, img):
        back = normalize(img).astype(np.float64) * 255
        assert np.max(np.abs(back - img)) <= 255 / 510
        np.testing.assert_array_equal(to_uint8(normalize(img)), img)

    def test_requires_uint8(self):
        with pytest.raises(ShapeError):
            normalize(np.zeros((2, 2, 3), dtype=np.float32))


class TestResize:
    def test_identity(self):
        t = np.random.default_rng(0).random((5, 7, 3)).astype(np.float32)
        np.testing.assert_array_equal(resize_bilinear(t, 5, 7), t)

    def test_constant_image(self):
        t = np.full((9, 13, 3), 0.25, dtype=np.float32)
        np.testing.assert_allclose(resize_bilinear(t, 4, 6), 0.25, atol=1e-7)

    def test_upsample_2x2_against_oracle(self):
        t = np.array([[[0.0], [1.0]], [[2.0], [3.0]]])
        out = resize_bilinear(t, 4, 4)
        np.testing.assert_allclose(out, resize_oracle(t, 4, 4), atol=1e-12)
        np.testing.assert_allclose(out[0, :, 0], [0.0, 0.25, 0.75, 1.0])

    @pytest.mark.parametrize("shape,target", [((6, 8, 3), (3, 3)), ((5, 5, 2), (11, 7)), ((12, 16, 3), (64, 64))])
    def test_matches_oracle(self, shape, target):
        t = np.random.default_rng(2).random(shape)
        np.testing.assert_allclose(resize_bilinear(t, *target), resize_oracle(t, *target), atol=1e-12)

    def test_bad_target(self):
        with pytest.raises(ParameterError):
            resize_bilinear(np.zeros((2, 2, 3)), 0, 4)


image_strategy = arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3)))


class TestAugment:
    @settings(max_examples=50)
    @given(image_strategy)
    def test_group_laws(self, img):
        r = img
        for _ in range(4):
            r = augment(r, "rot90")
        np.testing.assert_array_equal(r, img)
        np.testing.assert_array_equal(augment(augment(img, "flip_h"), "flip_h"), img)
        np.testing.assert_array_equal(augment(augment(img, "flip_v"), "flip_v"), img)
        np.testing.assert_array_equal(augment(augment(img, "flip_v"), "flip_h"), augment(img, "rot180"))
        np.testing.assert_array_equal(augment(augment(img, "rot90"), "rot180"), augment(img, "rot270"))

    def test_rot90_is_clockwise(self):
        img = np.arange(6, dtype=np.uint8).reshape(2, 3, 1)
        out = augment(img, "rot90")
        assert out.shape == (3, 2, 1)
        for i in range(2):
            for j in range(3):
                assert out[j, 1 - i, 0] == img[i, j, 0]

    def test_flip_h_rot90_composition(self):
        img = np.random.default_rng(0).integers(0, 256, (3, 5, 3), dtype=np.uint8)
        np.testing.assert_array_equal(augment(img, "flip_h_rot90"), augment(augment(img, "flip_h"), "rot90"))

    def test_contrast_near_identity_on_full_range(self):
        t = np.tile(np.linspace(0, 1, 1001)[:, None, None], (1, 4, 3))
        out = augment(t, "contrast")
        assert np.max(np.abs(out - t)) <= 0.05

    def test_contrast_flat_channel_unchanged(self):
        t = np.full((4, 4, 3), 0.3)
        np.testing.assert_array_equal(augment(t, "contrast"), t)

    def test_unknown_op(self):
        with pytest.raises(ParameterError):
            augment(np.zeros((2, 2, 3), np.uint8), "shear")


class TestManifestIO:
    def test_roundtrip_relative_paths(self, tmp_path):
        m = make_manifest(tmp_path, 2, 2)
        out = write_manifest(m, tmp_path / "m.csv")
        text = out.read_bytes()
        assert b"\r\n" not in text
        assert text.splitlines()[0] == b"path,patient_id,eye,label,quality,split"
        assert b"/" not in text.splitlines()[1].split(b",")[0]
        back = read_manifest(out)
        assert back.records == m.records

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("file,label\n")
        with pytest.raises(FormatError):
            read_manifest(tmp_path / "m.csv")

    def test_duplicate_path_rejected(self, tmp_path):
        m = make_manifest(tmp_path, 1, 1)
        with pytest.raises(ValidationError):
            Manifest(m.records * 2)


class TestAugmentDataset:
    def test_counts_and_inheritance(self, tmp_path):
        m = make_manifest(tmp_path / "src", 10, 1)
        ops = ["rot90", "flip_h", "contrast"]
        out = augment_dataset(m, ops, tmp_path / "aug")
        assert len(out) == 40
        assert out.provenance == "augmented"
        for new in out.records[10:]:
            base = out.bases[new.path]
            orig = next(r for r in m.records if r.path == base)
            assert (new.label, new.patient_id, new.eye, new.quality) == (orig.label, orig.patient_id, orig.eye,
                                                                         orig.quality)

    def test_disjoint_output_dirs(self, tmp_path):
        m = make_manifest(tmp_path / "src", 2, 1)
        a = augment_dataset(m, ["flip_v"], tmp_path / "a")
        b = augment_dataset(m, ["flip_v"], tmp_path / "b")
        assert not {r.path for r in a.records[2:]} & {r.path for r in b.records[2:]}

    def test_manifest_roundtrip_keeps_bases(self, tmp_path):
        m = make_manifest(tmp_path / "src", 2, 1)
        out = augment_dataset(m, ["rot180"], tmp_path / "aug")
        write_manifest(out, tmp_path / "aug" / "manifest.csv")
        back = read_manifest(tmp_path / "aug" / "manifest.csv")
        assert back.bases == out.bases and back.provenance == "augmented"

    def test_unknown_op(self, tmp_path):
        m = make_manifest(tmp_path, 1, 1)
        with pytest.raises(ParameterError):
            augment_dataset(m, ["blur"], tmp_path / "aug")


class TestClean:
    @pytest.fixture
    def tier_manifest(self, tmp_path):
        return make_manifest(tmp_path, 2, 2, shape=(480, 640))

    def test_clean_input_untouched(self, tier_manifest):
        cleaned, report = clean_manifest(tier_manifest)
        assert cleaned.records == tier_manifest.records and report == []

    def test_rejections(self, tier_manifest, tmp_path):
        recs = list(tier_manifest.records)
        Path(recs[0].path).write_bytes(Path(recs[0].path).read_bytes()[:1000])
        dup = tmp_path / "dup.ppm"
        dup.write_bytes(Path(recs[1].path).read_bytes())
        small = tmp_path / "small.ppm"
        save_ppm(np.zeros((10, 10, 3), np.uint8), small)
        extra = [
            replace(recs[1], path=dup.resolve()),
            replace(recs[1], path=small.resolve()),
            replace(recs[1], path=(tmp_path / "missing.ppm").resolve()),
        ]
        m = Manifest(recs + extra)
        m = m.with_records([replace(r, label=2) if r is recs[3] else r for r in m.records])
        cleaned, report = clean_manifest(m)
        reasons = {Path(r.path).name: r.reason for r in report}
        assert reasons[Path(recs[0].path).name] == "corrupt"
        assert reasons["dup.ppm"] == "duplicate"
        assert reasons["small.ppm"] == "dimensions"
        assert reasons["missing.ppm"] == "unreadable"
        assert reasons[Path(recs[3].path).name] == "label"
        assert [r.path for r in cleaned.records] == [recs[1].path, recs[2].path]

    def test_idempotent(self, tier_manifest):
        recs = tier_manifest.records
        m = tier_manifest.with_records([replace(recs[0], quality="medium")] + recs[1:])
        once, _ = clean_manifest(m)
        twice, report = clean_manifest(once)
        assert twice.records == once.records and report == []


class TestSplit:
    @pytest.fixture
    def grouped(self, tmp_path):
        return make_manifest(tmp_path, 10, 4)

    def test_exact_fraction(self, grouped):
        out = split(grouped, 0.2, seed=0)
        assert len(out.subset("test")) == 8
        assert len(out.subset("train")) == 32

    def test_deterministic(self, grouped):
        assert split(grouped, 0.3, seed=5).records == split(grouped, 0.3, seed=5).records

    @pytest.mark.parametrize("fraction", [0.2, 0.3])
    def test_no_group_straddles(self, grouped, fraction):
        for seed in range(50):
            out = split(grouped, fraction, seed)
            sides = {}
            for r in out.records:
                sides.setdefault(r.group, set()).add(r.split)
            assert all(len(s) == 1 for s in sides.values())
            assert abs(len(out.subset("test")) - fraction * len(out)) <= 4

    def test_single_group(self, tmp_path):
        with pytest.raises(SplitError):
            split(make_manifest(tmp_path, 1, 3), 0.2, 0)

    def test_bad_fraction(self, grouped):
        with pytest.raises(ParameterError):
            split(grouped, 1.0, 0)


def tier_records(n_low, n_high):
    return ([ImageRecord(Path(f"/l{i}"), "p", "L", 0, "low") for i in range(n_low)]
            + [ImageRecord(Path(f"/h{i}"), "p", "L", 0, "high") for i in range(n_high)])


class TestSampler:
    def test_two_to_one_ratio(self):
        records = tier_records(50, 50)
        stream = weighted_sampler(records, 2, 1, seed=0)
        draws = np.array([next(stream) for _ in range(100_000)])
        low_freq = np.mean(draws < 50)
        assert abs(low_freq - 2 / 3) <= 0.01
        counts = np.bincount(draws, minlength=100)
        expected = np.array([2 / 150] * 50 + [1 / 150] * 50) * len(draws)
        assert stats.chisquare(counts, expected).pvalue > 0.01

    def test_uniform_when_single_tier(self):
        draws = [next(s) for s in [weighted_sampler(tier_records(0, 4), seed=1)] for _ in range(20_000)]
        freq = np.bincount(draws) / len(draws)
        np.testing.assert_allclose(freq, 0.25, atol=0.015)

    def test_deterministic(self):
        a, b = weighted_sampler(tier_records(3, 3), seed=9), weighted_sampler(tier_records(3, 3), seed=9)
        assert [next(a) for _ in range(50)] == [next(b) for _ in range(50)]

    @pytest.mark.parametrize("low,high", [(0, 1), (1, -1)])
    def test_weights_positive(self, low, high):
        with pytest.raises(ParameterError):
            weighted_sampler(tier_records(1, 1), low, high)


class TestSynth:
    def test_counts_and_labels(self, tmp_path):
        m = synth_generate(5, 3, 0.5, 0.0, 1, tmp_path)
        assert len(m) == 30 and m.provenance == "synthetic"
        for (pid, eye) in {r.group for r in m.records}:
            labels = {r.label for r in m.records if r.group == (pid, eye)}
            assert len(labels) == 1
        assert load_ppm(m.records[0].path).shape == (480, 640, 3)
        assert (tmp_path / "manifest.csv").exists()

    def test_no_positives(self, tmp_path):
        m = synth_generate(2, 1, 0.0, 0.0, 3, tmp_path)
        assert all(r.label == 0 for r in m.records)

    def test_low_tier_shape_and_palette(self, tmp_path):
        m = synth_generate(1, 1, 1.0, 1.0, 2, tmp_path)
        img = load_ppm(m.records[0].path)
        assert img.shape == (1200, 1600, 3)
        assert len(np.unique(img)) <= 8

    def test_byte_identical_per_seed(self, tmp_path):
        a = synth_generate(1, 2, 0.5, 0.5, 4, tmp_path / "a")
        b = synth_generate(1, 2, 0.5, 0.5, 4, tmp_path / "b")
        for ra, rb in zip(a.records, b.records):
            assert Path(ra.path).read_bytes() == Path(rb.path).read_bytes()
        assert (tmp_path / "a/manifest.csv").read_bytes() == (tmp_path / "b/manifest.csv").read_bytes()

    def test_positive_eye_is_brighter_in_periphery(self, tmp_path):
        from ropnet.data.synth import latent_eye
        pos = latent_eye(np.random.default_rng(0), True, size=128)
        neg = latent_eye(np.random.default_rng(0), False, size=128)
        assert pos.sum() > neg.sum()

    def test_bad_args(self, tmp_path):
        with pytest.raises(ParameterError):
            synth_generate(0, 1, 0.5, 0.5, 0, tmp_path)
        with pytest.raises(ParameterError):
            synth_generate(1, 1, 1.5, 0.5, 0, tmp_path)
