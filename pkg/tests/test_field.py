"""Dense field container, chart transforms, perturbation and file formats."""

import struct

import numpy as np
import pytest

from depi import (
    DenseField,
    UvTransform,
    ValidationError,
    apply_uv_transform,
    load_field,
    perturb_field,
    save_field,
)
from depi.exceptions import MaskMismatchError
from depi.field import (
    FORMAT_VERSION,
    MAGIC,
    PART_MISMATCH_PENALTY,
    field_l1,
    foreground_parts,
    foreground_pixels,
    foreground_uv,
    load_field_csv,
    save_field_csv,
)


def _tiny_field():
    """3x3 field with a three-pixel L-shaped mask and two parts."""
    fg = np.zeros((3, 3), dtype=bool)
    fg[0, 1] = fg[1, 1] = fg[1, 2] = True
    part = np.zeros((3, 3), dtype=np.uint8)
    part[1, 2] = 1
    uv = np.zeros((3, 3, 2))
    uv[0, 1] = (0.2, 0.3)
    uv[1, 1] = (0.5, 0.5)
    uv[1, 2] = (0.9, 0.1)
    return DenseField(fg, part, uv, num_parts=2)


class TestDenseField:
    def test_basic_accessors(self):
        f = _tiny_field()
        assert (f.height, f.width) == (3, 3)
        assert f.n_foreground == 3
        assert np.allclose(f.uv_at(1, 0), (0.2, 0.3))
        assert f.part_at(2, 1) == 1

    def test_background_query_raises(self):
        f = _tiny_field()
        with pytest.raises(ValidationError):
            f.uv_at(0, 0)
        with pytest.raises(ValidationError):
            f.part_at(2, 2)

    def test_constructor_coerces_dtypes(self):
        f = DenseField(
            np.ones((2, 2), dtype=np.int32),
            np.zeros((2, 2), dtype=np.int64),
            np.full((2, 2, 2), 0.5, dtype=np.float32),
            num_parts=1,
        )
        assert f.foreground.dtype == bool
        assert f.part.dtype == np.uint8
        assert f.uv.dtype == np.float64

    def test_copy_is_deep(self):
        f = _tiny_field()
        g = f.copy()
        g.uv[1, 1] = (0.0, 0.0)
        g.foreground[0, 1] = False
        assert np.allclose(f.uv_at(1, 1), (0.5, 0.5))
        assert f.foreground[0, 1]

    def test_with_uv_row_major(self):
        f = _tiny_field()
        new = np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])
        g = f.with_uv(new)
        # row-major: (1,0) then (1,1) then (2,1)
        assert np.allclose(g.uv_at(1, 0), (0.1, 0.2))
        assert np.allclose(g.uv_at(1, 1), (0.3, 0.4))
        assert np.allclose(g.uv_at(2, 1), (0.5, 0.6))
        assert np.all(g.uv[~g.foreground] == 0.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            DenseField(np.zeros((3, 3), bool), np.zeros((2, 2), np.uint8),
                       np.zeros((3, 3, 2)))
        with pytest.raises(ValidationError):
            DenseField(np.zeros((3, 3), bool), np.zeros((3, 3), np.uint8),
                       np.zeros((3, 3)))

    def test_part_bound_enforced(self):
        fg = np.ones((2, 2), dtype=bool)
        part = np.full((2, 2), 3, dtype=np.uint8)
        with pytest.raises(ValidationError):
            DenseField(fg, part, np.zeros((2, 2, 2)), num_parts=2)

    def test_dirty_background_rejected(self):
        fg = np.zeros((2, 2), dtype=bool)
        fg[0, 0] = True
        uv = np.zeros((2, 2, 2))
        uv[1, 1] = (0.5, 0.5)
        with pytest.raises(ValidationError):
            DenseField(fg, np.zeros((2, 2), np.uint8), uv)

    def test_nonfinite_foreground_uv_rejected(self):
        fg = np.ones((1, 2), dtype=bool)
        uv = np.zeros((1, 2, 2))
        uv[0, 1, 0] = np.nan
        with pytest.raises(ValidationError):
            DenseField(fg, np.zeros((1, 2), np.uint8), uv)


class TestForegroundEnumeration:
    def test_row_major_order(self):
        f = _tiny_field()
        px = foreground_pixels(f)
        assert px.dtype == np.int64
        assert px.tolist() == [[1, 0], [1, 1], [2, 1]]

    def test_part_filter(self):
        f = _tiny_field()
        assert foreground_pixels(f, part=1).tolist() == [[2, 1]]
        assert foreground_pixels(f, part=0).tolist() == [[1, 0], [1, 1]]

    def test_uv_and_parts_align_with_pixels(self):
        f = _tiny_field()
        uv = foreground_uv(f)
        parts = foreground_parts(f)
        for (x, y), val, p in zip(foreground_pixels(f), uv, parts):
            assert np.allclose(f.uv_at(x, y), val)
            assert f.part_at(x, y) == p

    def test_foreground_uv_is_a_copy(self):
        f = _tiny_field()
        uv = foreground_uv(f)
        uv[:] = -1.0
        assert np.allclose(f.uv_at(1, 1), (0.5, 0.5))


class TestUvTransform:
    def test_identity(self):
        t = UvTransform.identity()
        pts = np.random.default_rng(0).random((10, 2))
        assert np.allclose(t.apply(pts), pts)

    def test_quarter_turn_about_center(self):
        t = UvTransform.rotation(np.pi / 2.0)
        assert np.allclose(t.apply((0.5, 0.5)), (0.5, 0.5))
        assert np.allclose(t.apply((1.0, 0.5)), (0.5, 1.0))
        assert np.allclose(t.apply((0.5, 0.0)), (1.0, 0.5))

    def test_rotation_preserves_distances(self):
        t = UvTransform.rotation(0.7, center=(0.2, 0.9))
        rng = np.random.default_rng(1)
        a, b = rng.random((2, 50, 2))
        d0 = np.linalg.norm(a - b, axis=1)
        d1 = np.linalg.norm(t.apply(a) - t.apply(b), axis=1)
        assert np.allclose(d0, d1)

    def test_singular_matrix_rejected(self):
        with pytest.raises(ValidationError):
            UvTransform(A=[[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(ValidationError):
            UvTransform(A=[[1e-7, 0.0], [0.0, 1e-7]])

    def test_compose_order(self):
        s = UvTransform(A=[[2.0, 0.0], [0.0, 1.0]], b=[0.1, 0.0])
        t = UvTransform.rotation(0.3)
        u = np.array([0.4, 0.7])
        assert np.allclose(s.compose(t).apply(u), s.apply(t.apply(u)))

    def test_frozen(self):
        t = UvTransform.identity()
        with pytest.raises(Exception):
            t.A = np.eye(2) * 2.0


class TestApplyTransform:
    def test_translation_shifts_foreground_only(self):
        f = _tiny_field()
        t = UvTransform(b=[0.05, -0.02])
        g = apply_uv_transform(f, t)
        assert np.allclose(g.uv_at(1, 1), (0.55, 0.48))
        assert np.all(g.uv[~g.foreground] == 0.0)
        assert np.array_equal(g.part, f.part)
        # original untouched
        assert np.allclose(f.uv_at(1, 1), (0.5, 0.5))

    def test_out_of_range_values_allowed(self):
        f = _tiny_field()
        g = apply_uv_transform(f, UvTransform(b=[5.0, 5.0]))
        assert foreground_uv(g).min() > 1.0


class TestPerturb:
    def test_zero_stddev_is_identity(self):
        f = _tiny_field()
        g = perturb_field(f, 0.0, seed=4)
        assert np.array_equal(g.uv, f.uv)

    def test_seed_determinism(self):
        f = _tiny_field()
        a = perturb_field(f, 0.03, seed=11)
        b = perturb_field(f, 0.03, seed=11)
        c = perturb_field(f, 0.03, seed=12)
        assert np.array_equal(a.uv, b.uv)
        assert not np.array_equal(a.uv, c.uv)

    def test_noise_scale(self):
        # 0.5-centered so the [0,1] clamp never engages at stddev 0.02
        fg = np.ones((100, 100), dtype=bool)
        uv = np.full((100, 100, 2), 0.5)
        f = DenseField(fg, np.zeros((100, 100), np.uint8), uv, num_parts=1)
        g = perturb_field(f, 0.02, seed=5)
        noise = (g.uv - 0.5).ravel()
        assert abs(noise.std() - 0.02) < 0.001
        assert abs(noise.mean()) < 0.001

    def test_clamped_to_unit_range(self):
        fg = np.ones((50, 50), dtype=bool)
        uv = np.full((50, 50, 2), 0.99)
        f = DenseField(fg, np.zeros((50, 50), np.uint8), uv, num_parts=1)
        g = perturb_field(f, 0.5, seed=6)
        vals = foreground_uv(g)
        assert vals.max() <= 1.0 and vals.min() >= 0.0

    def test_negative_stddev_rejected(self):
        with pytest.raises(ValidationError):
            perturb_field(_tiny_field(), -0.1, seed=0)


class TestFieldL1:
    def test_identical_is_zero(self):
        f = _tiny_field()
        assert field_l1(f, f) == 0.0

    def test_summed_not_averaged(self):
        f = _tiny_field()
        uv = foreground_uv(f)
        uv[:, 0] += 0.1
        g = f.with_uv(uv)
        # three foreground pixels, 0.1 each in u
        assert abs(field_l1(f, g) - 0.3) < 1e-12

    def test_part_mismatch_charges_diameter(self):
        f = _tiny_field()
        g = f.copy()
        g.part[1, 2] = 0
        g = DenseField(g.foreground, g.part, g.uv, g.num_parts)
        expected = PART_MISMATCH_PENALTY  # that pixel's uv diff is ignored
        assert abs(field_l1(f, g) - expected) < 1e-12

    def test_mask_mismatch_raises(self):
        f = _tiny_field()
        fg = f.foreground.copy()
        fg[2, 2] = True
        uv = f.uv.copy()
        uv[2, 2] = (0.5, 0.5)
        g = DenseField(fg, f.part.copy(), uv, f.num_parts)
        with pytest.raises(MaskMismatchError):
            field_l1(f, g)


class TestBinaryFormat:
    def test_roundtrip(self, tmp_path, gt2):
        path = tmp_path / "f.depi"
        save_field(path, gt2[0])
        back = load_field(path)
        assert np.array_equal(back.foreground, gt2[0].foreground)
        assert np.array_equal(back.part, gt2[0].part)
        assert back.num_parts == gt2[0].num_parts
        # uv is stored as float32
        assert np.allclose(back.uv, gt2[0].uv, atol=1e-6)

    def test_header_layout(self, tmp_path):
        f = _tiny_field()
        path = tmp_path / "f.depi"
        save_field(path, f)
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        version, w, h, parts = struct.unpack("<IIII", raw[4:20])
        assert (version, w, h, parts) == (FORMAT_VERSION, 3, 3, 2)
        assert len(raw) == 20 + 3 * 3 * 10

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.depi"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValidationError):
            load_field(path)

    def test_unknown_version_rejected(self, tmp_path):
        f = _tiny_field()
        path = tmp_path / "f.depi"
        save_field(path, f)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
        path.write_bytes(bytes(raw))
        with pytest.raises(ValidationError):
            load_field(path)

    def test_truncation_rejected(self, tmp_path):
        f = _tiny_field()
        path = tmp_path / "f.depi"
        save_field(path, f)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(ValidationError):
            load_field(path)

    def test_background_sanitized_on_load(self, tmp_path):
        # hand-build a dump whose single background record carries junk
        header = MAGIC + struct.pack("<IIII", FORMAT_VERSION, 2, 1, 3)
        rec_fg = struct.pack("<BBff", 1, 2, 0.25, 0.75)
        rec_bg = struct.pack("<BBff", 0, 7, 0.9, 0.9)
        path = tmp_path / "dirty.depi"
        path.write_bytes(header + rec_fg + rec_bg)
        f = load_field(path)
        assert f.part_at(0, 0) == 2
        assert f.part[0, 1] == 0
        assert np.all(f.uv[0, 1] == 0.0)


class TestCsvFormat:
    def test_roundtrip_exact(self, tmp_path):
        f = _tiny_field()
        g = f.with_uv(foreground_uv(f) + 1e-13)  # exercise repr precision
        path = tmp_path / "f.csv"
        save_field_csv(path, g)
        back = load_field_csv(path)
        assert np.array_equal(back.foreground, g.foreground)
        assert np.array_equal(back.part, g.part)
        assert np.array_equal(back.uv, g.uv)
        assert back.num_parts == g.num_parts

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y,part,u,v\n0,0,0,0.5,0.5\n")
        with pytest.raises(ValidationError):
            load_field_csv(path)

    def test_wrong_columns_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("# width=2 height=1 parts=1\nx,y,u,v\n")
        with pytest.raises(ValidationError):
            load_field_csv(path)
