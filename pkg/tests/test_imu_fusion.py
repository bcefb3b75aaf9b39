import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specfuse.errors import ContractError, DimensionError
from specfuse.imu_fusion import (
    ComplementaryFilterParams,
    GRAV_KERNEL,
    GYRO_KERNEL,
    ImuFusionBlock,
    complementary_filter,
    complementary_filter_expanded,
    grav_to_angles,
    imu_fusion_forward,
)
from specfuse.numerics import Tensor, backward

from conftest import assert_grads_close


class TestParams:
    def test_alpha_formula(self):
        p = ComplementaryFilterParams(tau=0.98, T=0.02)
        assert p.alpha == pytest.approx(0.98)

    def test_alpha_open_interval(self):
        for tau, T in [(1e-9, 1.0), (1.0, 1e-9), (5.0, 0.01)]:
            a = ComplementaryFilterParams(tau=tau, T=T).alpha
            assert 0.0 < a < 1.0

    @pytest.mark.parametrize("tau,T", [(0.0, 0.1), (-1.0, 0.1), (1.0, 0.0),
                                       (1.0, -0.5)])
    def test_rejects_nonpositive(self, tau, T):
        with pytest.raises(ContractError):
            ComplementaryFilterParams(tau=tau, T=T)


class TestComplementaryFilter:
    def test_alpha_to_zero_tracks_gravimeter(self):
        rng = np.random.default_rng(0)
        grav = rng.standard_normal((2, 30))
        gyro = rng.standard_normal((2, 30))
        p = ComplementaryFilterParams(tau=1e-14, T=1.0)
        att = complementary_filter(grav, gyro, p)
        assert np.allclose(att[:, 1:], grav[:, 1:], atol=1e-10)

    def test_alpha_to_one_pure_integration(self):
        rng = np.random.default_rng(1)
        grav = rng.standard_normal((2, 30))
        gyro = rng.standard_normal((2, 30))
        T = 0.02
        p = ComplementaryFilterParams(tau=1e12, T=T)
        att = complementary_filter(grav, gyro, p)
        gy = gyro.copy()
        gy[:, 0] = 0.0                 # the recursion never consumes gyro(0)
        expect = grav[:, :1] + T * np.cumsum(gy, axis=1)
        assert np.allclose(att, expect, atol=1e-8)

    def test_recursive_matches_expanded_20_steps(self):
        rng = np.random.default_rng(2)
        grav = rng.standard_normal((3, 20))
        gyro = rng.standard_normal((3, 20))
        p = ComplementaryFilterParams(tau=0.5, T=0.05)
        a = complementary_filter(grav, gyro, p)
        b = complementary_filter_expanded(grav, gyro, p)
        assert np.max(np.abs(a - b)) < 1e-10

    @settings(max_examples=40, deadline=None)
    @given(length=st.integers(min_value=1, max_value=100),
           tau=st.floats(min_value=0.01, max_value=100.0),
           T=st.floats(min_value=0.001, max_value=1.0),
           seed=st.integers(min_value=0, max_value=2**31))
    def test_equivalence_property(self, length, tau, T, seed):
        rng = np.random.default_rng(seed)
        grav = rng.standard_normal((2, length))
        gyro = rng.standard_normal((2, length))
        p = ComplementaryFilterParams(tau=tau, T=T)
        a = complementary_filter(grav, gyro, p)
        b = complementary_filter_expanded(grav, gyro, p)
        assert np.max(np.abs(a - b)) < 1e-10

    def test_initial_state_is_first_angle(self):
        grav = np.array([[3.0, 0.0], [-1.0, 0.0]])
        gyro = np.ones((2, 2))
        p = ComplementaryFilterParams(tau=1.0, T=0.1)
        att = complementary_filter(grav, gyro, p)
        assert np.array_equal(att[:, 0], grav[:, 0])

    def test_length_mismatch(self):
        p = ComplementaryFilterParams(tau=1.0, T=0.1)
        with pytest.raises(DimensionError):
            complementary_filter(np.zeros((2, 5)), np.zeros((2, 6)), p)


class TestGravToAngles:
    def test_reference_pose(self):
        g = np.array([[0.0], [0.0], [9.81]])
        ang = grav_to_angles(g)
        assert ang[0, 0] == pytest.approx(0.0)
        assert ang[1, 0] == pytest.approx(0.0)

    def test_y_axis_gives_quarter_roll(self):
        g = np.array([[0.0], [9.81], [0.0]])
        ang = grav_to_angles(g)
        assert ang[0, 0] == pytest.approx(np.pi / 2)

    def test_x_axis_gives_negative_quarter_pitch(self):
        g = np.array([[9.81], [0.0], [0.0]])
        ang = grav_to_angles(g)
        assert ang[1, 0] == pytest.approx(-np.pi / 2)

    def test_tilt_roundtrip(self):
        # vectors built with the rotated-g convention recover their angles
        rng = np.random.default_rng(3)
        roll = rng.uniform(-1.2, 1.2, 50)
        pitch = rng.uniform(-1.2, 1.2, 50)
        g = 9.81 * np.stack([-np.sin(pitch),
                             np.sin(roll) * np.cos(pitch),
                             np.cos(roll) * np.cos(pitch)])
        ang = grav_to_angles(g)
        assert np.allclose(ang[0], roll, atol=1e-12)
        assert np.allclose(ang[1], pitch, atol=1e-12)

    def test_zero_vector_rejected(self):
        g = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
        with pytest.raises(ContractError):
            grav_to_angles(g)

    def test_shape_checked(self):
        with pytest.raises(DimensionError):
            grav_to_angles(np.zeros((2, 4)))


def _random_streams(rng, L=16, batch=None):
    shape = (3, L) if batch is None else (batch, 3, L)
    return (rng.standard_normal(shape), rng.standard_normal(shape),
            rng.standard_normal(shape))


class TestFusionForward:
    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        block = ImuFusionBlock(rng)
        grav, gyro, lacc = _random_streams(rng, L=20)
        _, _, attn = imu_fusion_forward(grav, gyro, lacc, block)
        sums = attn.data.sum(axis=0)
        assert np.allclose(sums, 1.0, atol=1e-12)

    def test_identical_branches_split_evenly(self):
        rng = np.random.default_rng(5)
        block = ImuFusionBlock(rng)
        # align the wider grav kernel so both branches compute the same map:
        # grav tap w sees x[t - 11 + 1 + w], gyro tap w sees x[t - 10 + 1 + w]
        kg = np.zeros_like(block.grav_kernel.data)
        kg[:, :, 1:] = block.gyro_kernel.data
        block.grav_kernel.data = kg
        block.grav_bias.data = block.gyro_bias.data.copy()
        x = rng.standard_normal((3, 24))
        _, _, attn = imu_fusion_forward(x, x, x, block)
        assert np.allclose(attn.data, 0.5, atol=1e-12)

    def test_compositional_oracle(self):
        rng = np.random.default_rng(6)
        block = ImuFusionBlock(rng)
        grav, gyro, lacc = _random_streams(rng, L=16)

        def np_causal(x, k, b):
            W = k.shape[2]
            xp = np.concatenate([np.zeros((x.shape[0], W - 1)), x], axis=1)
            out = np.zeros((k.shape[0], x.shape[1]))
            for w in range(W):
                out += k[:, :, w] @ xp[:, w:w + x.shape[1]]
            return out + b[:, None]

        vg = np_causal(grav, block.grav_kernel.data, block.grav_bias.data)
        vy = np_causal(gyro, block.gyro_kernel.data, block.gyro_bias.data)
        mo = np_causal(lacc, block.lacc_kernel.data, block.lacc_bias.data)
        W0, b0 = block.attn_weight.data, block.attn_bias.data
        mu = np.stack([np.tanh(W0 @ vg + b0[:, None])[0],
                       np.tanh(W0 @ vy + b0[:, None])[0]])     # [2, L]
        e = np.exp(mu - mu.max(axis=0, keepdims=True))
        attn = e / e.sum(axis=0, keepdims=True)
        post = attn[0][None, :] * vg + attn[1][None, :] * vy

        posture, motion, attn_log = imu_fusion_forward(grav, gyro, lacc, block)
        assert np.max(np.abs(posture.data - post)) < 1e-12
        assert np.max(np.abs(motion.data - mo)) < 1e-12
        assert np.max(np.abs(attn_log.data - attn)) < 1e-12

    def test_causality(self):
        rng = np.random.default_rng(7)
        block = ImuFusionBlock(rng)
        grav, gyro, lacc = _random_streams(rng, L=30)
        p0, m0, _ = imu_fusion_forward(grav, gyro, lacc, block)
        t0 = 12
        for which in range(3):
            bumped = [s.copy() for s in (grav, gyro, lacc)]
            bumped[which][:, t0:] += rng.standard_normal(
                (3, 30 - t0)) * 5.0
            p1, m1, _ = imu_fusion_forward(*bumped, block)
            assert np.array_equal(p0.data[:, :t0], p1.data[:, :t0])
            assert np.array_equal(m0.data[:, :t0], m1.data[:, :t0])

    def test_batched_matches_single(self):
        rng = np.random.default_rng(8)
        block = ImuFusionBlock(rng)
        grav, gyro, lacc = _random_streams(rng, L=12, batch=3)
        pb, mb, ab = imu_fusion_forward(grav, gyro, lacc, block)
        for i in range(3):
            ps, ms, asr = imu_fusion_forward(grav[i], gyro[i], lacc[i], block)
            assert np.allclose(pb.data[i], ps.data, atol=1e-14)
            assert np.allclose(mb.data[i], ms.data, atol=1e-14)
            assert np.allclose(ab.data[i], asr.data, atol=1e-14)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(9)
        block = ImuFusionBlock(rng)
        with pytest.raises(DimensionError):
            imu_fusion_forward(np.zeros((3, 10)), np.zeros((3, 11)),
                               np.zeros((3, 10)), block)
        with pytest.raises(DimensionError):
            imu_fusion_forward(np.zeros((4, 10)), np.zeros((4, 10)),
                               np.zeros((4, 10)), block)

    def test_gradients_flow_to_all_parameters(self):
        rng = np.random.default_rng(10)
        block = ImuFusionBlock(rng, channels=6)
        grav, gyro, lacc = _random_streams(rng, L=8)
        posture, motion, _ = imu_fusion_forward(grav, gyro, lacc, block)
        loss = (posture * posture).sum() + (motion * motion).sum()
        backward(loss)
        for p in block.parameters():
            assert p.tensor.grad is not None, p.name
            assert np.any(p.tensor.grad != 0.0), p.name

    def test_finite_difference_attention_path(self):
        rng = np.random.default_rng(11)
        block = ImuFusionBlock(rng, channels=5)
        grav, gyro, lacc = _random_streams(rng, L=6)

        def loss_fn():
            posture, motion, _ = imu_fusion_forward(grav, gyro, lacc, block)
            return ((posture * posture).mean()
                    + (motion * motion).mean()).item()

        posture, motion, _ = imu_fusion_forward(grav, gyro, lacc, block)
        loss = (posture * posture).mean() + (motion * motion).mean()
        backward(loss)
        assert_grads_close(
            loss_fn,
            [block.attn_weight.tensor, block.grav_kernel.tensor,
             block.attn_bias.tensor],
            tol=1e-4)
