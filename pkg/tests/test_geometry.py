import math

import numpy as np
import pytest

from trifuse.container import load_tensor, save_tensor
from trifuse.geometry import (
    DepthMap,
    EmptyOverlapError,
    NormalMap,
    angular_loss,
    decode_normal_png,
    depth_to_normals,
    encode_normal_png,
    load_normal_png,
    save_normal_png,
    depth_to_normals as d2n,
)


def full_valid(depth):
    depth = np.asarray(depth, dtype=np.float32)
    return DepthMap(depth, np.ones(depth.shape, dtype=bool))


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


class TestDepthMapType:
    def test_valid_pixels_must_be_positive_finite(self):
        with pytest.raises(ValueError, match="finite depth > 0"):
            DepthMap(np.array([[0.0]], dtype=np.float32), np.array([[True]]))
        with pytest.raises(ValueError, match="finite depth > 0"):
            DepthMap(np.array([[np.nan]], dtype=np.float32), np.array([[True]]))

    def test_from_array_masks_bad_pixels(self):
        d = DepthMap.from_array([[1.0, np.nan], [-2.0, 3.0]])
        assert d.valid.tolist() == [[True, False], [False, True]]

    def test_tensor_round_trip_with_nan_sentinel(self, tmp_path):
        d = DepthMap.from_array([[1.0, np.nan], [2.0, 3.0]])
        save_tensor(tmp_path / "d.ten", d.to_tensor())
        back = DepthMap.from_tensor(load_tensor(tmp_path / "d.ten"))
        assert np.array_equal(back.valid, d.valid)
        assert np.array_equal(back.depth[back.valid], d.depth[d.valid])


class TestDepthToNormals:
    def test_constant_plane_points_up(self):
        n = depth_to_normals(full_valid(np.full((5, 6), 7.0)))
        assert n.valid.all()
        expected = np.zeros((3, 5, 6), dtype=np.float32)
        expected[2] = 1.0
        np.testing.assert_allclose(n.normal, expected, atol=1e-6)

    def test_unit_ramp_exact(self):
        h, w = 4, 7
        depth = np.tile(np.arange(w, dtype=np.float32) + 1.0, (h, 1))
        n = depth_to_normals(full_valid(depth))
        assert n.valid.all()
        s = 1.0 / math.sqrt(2.0)
        # central differences are exact on linear functions, and so are the
        # one-sided fallbacks used at the borders
        np.testing.assert_allclose(n.normal[0], s, atol=1e-6)
        np.testing.assert_allclose(n.normal[1], 0.0, atol=1e-6)
        np.testing.assert_allclose(n.normal[2], s, atol=1e-6)

    def test_quadratic_hand_derivative(self):
        u = np.arange(8, dtype=np.float32)
        depth = np.tile(u * u + 1.0, (3, 1))  # +1 keeps depth positive
        n = depth_to_normals(full_valid(depth))
        got = n.normal[:, 1, 3]
        np.testing.assert_allclose(got, unit([6.0, 0.0, 1.0]), atol=1e-6)

    def test_one_sided_next_to_invalid_pixel(self):
        depth = np.tile(np.array([1.0, 2.0, 4.0, 8.0], dtype=np.float32), (5, 1))
        hole = np.ones((5, 4), dtype=bool)
        hole[2, 2] = False
        n = depth_to_normals(DepthMap(depth, hole))
        assert not n.valid[2, 2]
        # at (2,1) the right neighbor is the hole -> backward difference 2-1=1
        np.testing.assert_allclose(n.normal[:, 2, 1], unit([1.0, 0.0, 1.0]), atol=1e-6)
        # at (2,3) both u-neighbors are unusable (hole left, border right)
        assert not n.valid[2, 3]
        # at (1,2) the hole below forces a backward v-difference (= 0 here)
        np.testing.assert_allclose(n.normal[:, 1, 2], unit([3.0, 0.0, 1.0]), atol=1e-6)

    def test_single_column_has_no_u_difference(self):
        n = depth_to_normals(full_valid(np.ones((4, 1))))
        assert not n.valid.any()

    def test_isolated_pixel_invalid(self):
        valid = np.zeros((3, 3), dtype=bool)
        valid[1, 1] = True
        n = depth_to_normals(DepthMap(np.ones((3, 3), dtype=np.float32), valid))
        assert not n.valid.any()

    def test_unit_length_and_positive_z_property(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            depth = (rng.uniform(1.0, 50.0, size=(6, 7)) + rng.standard_normal((6, 7))).astype(np.float32)
            depth = np.abs(depth) + 0.5
            mask = rng.uniform(size=depth.shape) > 0.2
            n = depth_to_normals(DepthMap(np.where(mask, depth, 1.0).astype(np.float32), mask))
            if not n.valid.any():
                continue
            vecs = n.normal[:, n.valid].astype(np.float64)
            np.testing.assert_allclose(np.linalg.norm(vecs, axis=0), 1.0, atol=1e-6)
            assert (vecs[2] > 0).all()

    def test_constant_shift_leaves_output_bitwise_equal(self):
        # depths and shifts on a 1/256 grid keep every addition exact in
        # float32, so the stencil differences cancel the shift exactly
        rng = np.random.default_rng(1)
        base = rng.integers(128, 16384, size=(5, 8)).astype(np.float32) / 256.0
        mask = rng.uniform(size=base.shape) > 0.15
        for shift in (1.0, 256.0 / 256.0 * 7, 31.25):
            a = depth_to_normals(DepthMap(np.where(mask, base, 1.0).astype(np.float32), mask))
            b = depth_to_normals(DepthMap(np.where(mask, base + np.float32(shift), 1.0 + shift).astype(np.float32), mask))
            assert np.array_equal(a.valid, b.valid)
            assert np.array_equal(a.normal, b.normal)

    def test_depth_scaling_tilts_normal_monotonically(self):
        u = np.arange(6, dtype=np.float32)
        base = np.tile(0.5 * u + 1.0, (4, 1))
        angles = []
        for s in (0.5, 1.0, 2.0, 4.0, 8.0):
            n = depth_to_normals(full_valid(base * s))
            angles.append(math.acos(float(n.normal[2, 2, 2])))
        assert all(a < b for a, b in zip(angles, angles[1:]))


class TestAngularLoss:
    def flat(self, h=3, w=4):
        arr = np.zeros((3, h, w), dtype=np.float32)
        arr[2] = 1.0
        return NormalMap(arr, np.ones((h, w), dtype=bool))

    def tilted(self, h=3, w=4):
        arr = np.zeros((3, h, w), dtype=np.float32)
        arr[0] = 1.0 / math.sqrt(2.0)
        arr[2] = 1.0 / math.sqrt(2.0)
        return NormalMap(arr, np.ones((h, w), dtype=bool))

    def test_identical_maps_zero_loss(self):
        rng = np.random.default_rng(2)
        vecs = rng.standard_normal((3, 4, 5))
        vecs[2] = np.abs(vecs[2]) + 0.1
        vecs /= np.linalg.norm(vecs, axis=0, keepdims=True)
        n = NormalMap(vecs.astype(np.float32), np.ones((4, 5), dtype=bool))
        result = angular_loss(n, n)
        assert result.total == 0.0 and result.mean == 0.0

    def test_orthogonal_normals(self):
        side = np.zeros((3, 2, 2), dtype=np.float32)
        side[0] = 1.0
        side[2] = 1e-12  # n_z must stay positive
        side /= np.linalg.norm(side, axis=0, keepdims=True)
        side_map = NormalMap(side, np.ones((2, 2), dtype=bool))
        result = angular_loss(side_map, self.flat(2, 2))
        np.testing.assert_allclose(result.per_pixel, math.pi / 2, atol=1e-6)

    def test_hand_quarter_turn(self):
        result = angular_loss(self.tilted(1, 1), self.flat(1, 1))
        assert result.total == pytest.approx(math.pi / 4, abs=1e-6)
        assert result.count == 1

    def test_symmetric_bitwise(self):
        rng = np.random.default_rng(3)
        def random_map():
            vecs = rng.standard_normal((3, 5, 6))
            vecs[2] = np.abs(vecs[2]) + 0.05
            vecs /= np.linalg.norm(vecs, axis=0, keepdims=True)
            mask = rng.uniform(size=(5, 6)) > 0.3
            vecs[:, ~mask] = 0.0
            return NormalMap(vecs.astype(np.float32), mask)
        a, b = random_map(), random_map()
        ab, ba = angular_loss(a, b), angular_loss(b, a)
        assert ab.total == ba.total
        assert np.array_equal(ab.per_pixel, ba.per_pixel, equal_nan=True)

    def test_values_in_zero_pi(self):
        rng = np.random.default_rng(4)
        vecs = rng.standard_normal((3, 6, 6))
        vecs[2] = np.abs(vecs[2]) + 1e-3
        vecs /= np.linalg.norm(vecs, axis=0, keepdims=True)
        a = NormalMap(vecs.astype(np.float32), np.ones((6, 6), dtype=bool))
        result = angular_loss(a, self.flat(6, 6))
        vals = result.per_pixel[np.isfinite(result.per_pixel)]
        assert (vals >= 0).all() and (vals <= math.pi).all()
        assert result.mean * result.count == pytest.approx(result.total, rel=1e-9)

    def test_empty_overlap_raises(self):
        top = self.flat(2, 2)
        nothing = NormalMap(np.zeros((3, 2, 2), dtype=np.float32), np.zeros((2, 2), dtype=bool))
        with pytest.raises(EmptyOverlapError):
            angular_loss(top, nothing)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="disagree in shape"):
            angular_loss(self.flat(2, 2), self.flat(3, 3))


class TestNormalPng:
    def test_up_normal_encodes_to_midpoint_pixel(self):
        arr = np.zeros((3, 1, 1), dtype=np.float32)
        arr[2] = 1.0
        img = encode_normal_png(NormalMap(arr, np.ones((1, 1), dtype=bool)))
        assert img[0, 0].tolist() == [128, 128, 255]

    def test_extreme_component_maps_to_zero(self):
        # u-component near -1 exercises the bottom of the byte range
        v = unit([-0.99995, 0.0, 0.01]).astype(np.float32).reshape(3, 1, 1)
        img = encode_normal_png(NormalMap(v, np.ones((1, 1), dtype=bool)))
        assert img[0, 0, 0] == 0 and img[0, 0, 1] == 128

    def test_invalid_encodes_black_and_decodes_invalid(self):
        arr = np.zeros((3, 2, 2), dtype=np.float32)
        arr[2] = 1.0
        valid = np.array([[True, False], [True, True]])
        arr[:, ~valid] = 0.0
        img = encode_normal_png(NormalMap(arr, valid))
        assert img[0, 1].tolist() == [0, 0, 0]
        back = decode_normal_png(img)
        assert np.array_equal(back.valid, valid)

    def test_round_trip_angular_error(self):
        rng = np.random.default_rng(5)
        vecs = rng.standard_normal((3, 20, 20))
        vecs[2] = np.abs(vecs[2]) + 0.05
        vecs /= np.linalg.norm(vecs, axis=0, keepdims=True)
        n = NormalMap(vecs.astype(np.float32), np.ones((20, 20), dtype=bool))
        back = decode_normal_png(encode_normal_png(n))
        assert back.valid.all()
        dots = np.clip((back.normal.astype(np.float64) * vecs).sum(axis=0), -1, 1)
        assert np.arccos(dots).max() < 0.01

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        vecs = rng.standard_normal((3, 4, 6))
        vecs[2] = np.abs(vecs[2]) + 0.1
        vecs /= np.linalg.norm(vecs, axis=0, keepdims=True)
        n = NormalMap(vecs.astype(np.float32), np.ones((4, 6), dtype=bool))
        save_normal_png(tmp_path / "n.png", n)
        back = load_normal_png(tmp_path / "n.png")
        dots = np.clip((back.normal.astype(np.float64) * vecs).sum(axis=0), -1, 1)
        assert np.arccos(dots).max() < 0.01

    def test_malformed_image_rejected(self):
        with pytest.raises(ValueError, match="malformed normal image"):
            decode_normal_png(np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(ValueError, match="malformed normal image"):
            decode_normal_png(np.zeros((4, 4, 3), dtype=np.float32))

    def test_decode_rejects_downward_z(self):
        img = np.full((1, 1, 3), 10, dtype=np.uint8)  # blue 10 -> n_z < 0
        back = decode_normal_png(img)
        assert not back.valid.any()


def test_normal_map_invariants_enforced():
    bad = np.zeros((3, 1, 1), dtype=np.float32)
    bad[2] = 2.0
    with pytest.raises(ValueError, match="unit length"):
        NormalMap(bad, np.ones((1, 1), dtype=bool))
    down = np.zeros((3, 1, 1), dtype=np.float32)
    down[2] = -1.0
    with pytest.raises(ValueError, match="n_z > 0"):
        NormalMap(down, np.ones((1, 1), dtype=bool))


def test_normal_tensor_round_trip(tmp_path):
    n = depth_to_normals(full_valid(np.tile(np.arange(5, dtype=np.float32) + 1, (4, 1))))
    save_tensor(tmp_path / "n.ten", n.to_tensor())
    back = NormalMap.from_tensor(load_tensor(tmp_path / "n.ten"))
    assert np.array_equal(back.valid, n.valid)
    assert np.array_equal(back.normal, n.normal)
