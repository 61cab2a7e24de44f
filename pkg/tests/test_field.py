"""Decoder behavior, activation ranges, and checkpoint round-trips."""

import numpy as np
import pytest

from trislam.field import Mlp, SceneField, load_checkpoint, save_checkpoint
from trislam.planes import FeaturePlaneSet


def make_field(rng, dtype=np.float64, **kw):
    ps = FeaturePlaneSet(
        (0, 0, 0), (1, 1, 1), channels=2, coarse_res=0.5, fine_geo_res=0.25,
        fine_app_res=0.25, dtype=dtype, **kw,
    )
    ps.randomize(rng)
    return SceneField.create(ps, rng)


class TestDecode:
    def test_zero_network_outputs(self):
        rng = np.random.default_rng(0)
        field = make_field(rng)
        for arr in field.planes.arrays:
            arr[...] = 0
        for mlp in (field.decoder_g, field.decoder_a):
            for p in mlp.params:
                p[...] = 0
        tsdf, color = field.decode(np.array([[0.5, 0.5, 0.5]]))
        assert tsdf[0] == 0.0  # tanh(0)
        np.testing.assert_allclose(color[0], [0.5, 0.5, 0.5])  # sigmoid(0)

    def test_known_tiny_network_matches_hand_computed_chain(self):
        rng = np.random.default_rng(1)
        field = make_field(rng)
        pts = rng.uniform(0.1, 0.9, (10, 3))
        feat_g = field.geometry_feature(pts)
        feat_a = field.appearance_feature(pts)
        # hand-rolled affine + relu + affine + activation
        g = field.decoder_g
        expected_tsdf = np.tanh(
            np.maximum(feat_g @ g.w1 + g.b1, 0) @ g.w2 + g.b2
        )[:, 0]
        a = field.decoder_a
        pre = np.maximum(feat_a @ a.w1 + a.b1, 0) @ a.w2 + a.b2
        expected_color = 1 / (1 + np.exp(-pre))
        tsdf, color = field.decode(pts)
        np.testing.assert_allclose(tsdf, expected_tsdf, rtol=1e-12)
        np.testing.assert_allclose(color, expected_color, rtol=1e-12)

    def test_activation_ranges_for_wild_weights(self):
        # tanh/sigmoid saturate to the closed interval in float64 once the
        # pre-activation passes ~19/37, so extreme weights assert <=.
        rng = np.random.default_rng(2)
        field = make_field(rng)
        for arr in field.planes.arrays:
            arr *= 100
        for mlp in (field.decoder_g, field.decoder_a):
            for p in mlp.params:
                p[...] = rng.standard_normal(p.shape) * 50
        tsdf, color = field.decode(rng.uniform(0, 1, (200, 3)))
        assert np.all(np.abs(tsdf) <= 1.0)
        assert np.all((color >= 0) & (color <= 1))

    def test_activation_ranges_strict_for_moderate_weights(self):
        rng = np.random.default_rng(20)
        field = make_field(rng)
        for arr in field.planes.arrays:
            arr[...] = rng.uniform(-1, 1, arr.shape)
        tsdf, color = field.decode(rng.uniform(0, 1, (500, 3)))
        assert np.all(np.abs(tsdf) < 1.0)
        assert np.all((color > 0) & (color < 1))

    def test_combine_sum_changes_input_dim(self):
        rng = np.random.default_rng(3)
        field = make_field(rng, combine="sum")
        assert field.decoder_g.w1.shape[0] == 2
        tsdf, _ = field.decode(np.array([[0.4, 0.6, 0.2]]))
        assert -1 < tsdf[0] < 1

    def test_mlp_backward_matches_fd(self):
        rng = np.random.default_rng(4)
        mlp = Mlp.create(4, 2, rng, dtype=np.float64)
        x = rng.standard_normal((6, 4))
        gout = rng.standard_normal((6, 2))

        out, h = mlp.forward(x)
        gx, grads = mlp.backward(x, h, gout)
        loss = np.sum(out * gout)

        eps = 1e-6
        for arr, g in zip(mlp.params, grads):
            idx = (0,) * arr.ndim
            orig = arr[idx]
            arr[idx] = orig + eps
            lp = np.sum(mlp.forward(x)[0] * gout)
            arr[idx] = orig - eps
            lm = np.sum(mlp.forward(x)[0] * gout)
            arr[idx] = orig
            np.testing.assert_allclose(g[idx], (lp - lm) / (2 * eps), rtol=1e-5)
        x2 = x.copy()
        x2[0, 0] += eps
        lp = np.sum(mlp.forward(x2)[0] * gout)
        x2[0, 0] -= 2 * eps
        lm = np.sum(mlp.forward(x2)[0] * gout)
        np.testing.assert_allclose(gx[0, 0], (lp - lm) / (2 * eps), rtol=1e-5)
        assert loss == pytest.approx(np.sum(out * gout))


class TestCheckpoint:
    def test_round_trip_bit_exact_f32(self, tmp_path):
        rng = np.random.default_rng(5)
        field = make_field(rng, dtype=np.float32)
        kf = [(0, 0.0, np.array([1.0, 0, 0, 0]), np.zeros(3)),
              (4, 4 / 30, np.array([0.9, 0.1, 0, 0]), np.array([1.0, 2.0, 3.0]))]
        p1 = tmp_path / "a.bin"
        p2 = tmp_path / "b.bin"
        save_checkpoint(p1, field, kf)
        loaded, kf2 = load_checkpoint(p1)
        save_checkpoint(p2, loaded, kf2)
        assert p1.read_bytes() == p2.read_bytes()
        for a, b in zip(field.planes.arrays, loaded.planes.arrays):
            np.testing.assert_array_equal(a, b)
        for m1, m2 in zip(
            (field.decoder_g, field.decoder_a), (loaded.decoder_g, loaded.decoder_a)
        ):
            for pa, pb in zip(m1.params, m2.params):
                np.testing.assert_array_equal(pa, pb)
        assert loaded.log_beta[0] == field.log_beta[0]
        assert len(kf2) == 2 and kf2[1][0] == 4

    def test_round_trip_preserves_values_f64(self, tmp_path):
        rng = np.random.default_rng(6)
        field = make_field(rng, dtype=np.float64)
        p1 = tmp_path / "a.bin"
        p2 = tmp_path / "b.bin"
        save_checkpoint(p1, field, [])
        loaded, _ = load_checkpoint(p1)
        save_checkpoint(p2, loaded, [])
        assert p1.read_bytes() == p2.read_bytes()

    def test_flags_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        field = make_field(rng, dtype=np.float32, shared_planes=True, combine="sum")
        save_checkpoint(tmp_path / "c.bin", field)
        loaded, _ = load_checkpoint(tmp_path / "c.bin")
        assert loaded.planes.shared_planes
        assert loaded.planes.combine == "sum"
        assert len(loaded.planes.arrays) == 6

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)
