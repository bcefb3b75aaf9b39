"""Posture/motion fusion for a single IMU.

Two pieces live here. The classical complementary filter blends gravimeter
angles with integrated gyroscope rates through a first-order recursion; it
serves as the reference behaviour the learned block is measured against.
The learned block runs wide causal convolutions over the three sensor
streams and combines the two posture branches (gravimeter, gyroscope) with
a per-timestamp softmax attention, while linear acceleration passes through
its own branch untouched by attention.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import (
    Parameter,
    Tensor,
    causal_conv1d,
    concat,
    he_normal,
    linear,
    softmax,
    tanh,
)

GRAV_KERNEL = 11
GYRO_KERNEL = 10
LACC_KERNEL = 11
FUSED_CHANNELS = 64


@dataclass(frozen=True)
class ComplementaryFilterParams:
    """First-order blend: alpha weights the integrated-rate path."""

    tau: float
    T: float

    def __post_init__(self):
        if not (self.tau > 0 and self.T > 0):
            raise ContractError(
                f"need tau > 0 and T > 0, got tau={self.tau} T={self.T}")

    @property
    def alpha(self) -> float:
        return self.tau / (self.tau + self.T)


def _check_pair(grav_ang, gyro):
    grav_ang = np.asarray(grav_ang, dtype=np.float64)
    gyro = np.asarray(gyro, dtype=np.float64)
    if grav_ang.shape != gyro.shape or grav_ang.ndim != 2:
        raise DimensionError(
            f"angle/rate arrays must share an [A, T] shape, got "
            f"{grav_ang.shape} vs {gyro.shape}")
    return grav_ang, gyro


def complementary_filter(grav_ang, gyro, params: ComplementaryFilterParams):
    """Recursive form: att(t) = a*(att(t-1) + gyro(t)*T) + (1-a)*grav_ang(t).

    att(0) is the first gravimeter angle; gyro(0) is never consumed.
    """
    grav_ang, gyro = _check_pair(grav_ang, gyro)
    a = params.alpha
    att = np.empty_like(grav_ang)
    att[:, 0] = grav_ang[:, 0]
    for t in range(1, grav_ang.shape[1]):
        att[:, t] = a * (att[:, t - 1] + gyro[:, t] * params.T) \
            + (1.0 - a) * grav_ang[:, t]
    return att


def complementary_filter_expanded(grav_ang, gyro,
                                  params: ComplementaryFilterParams):
    """Closed form of the same filter, written without the recursion.

    att(t) = a^t * grav_ang(0)
           + sum_{s=1..t} a^(t-s) * (a*T*gyro(s) + (1-a)*grav_ang(s))

    Kept independent of complementary_filter so the two can check each
    other; this one assembles explicit power weights per output step.
    """
    grav_ang, gyro = _check_pair(grav_ang, gyro)
    a = params.alpha
    A, T_len = grav_ang.shape
    drive = a * params.T * gyro + (1.0 - a) * grav_ang   # s >= 1 terms
    out = np.empty_like(grav_ang)
    out[:, 0] = grav_ang[:, 0]
    for t in range(1, T_len):
        powers = a ** np.arange(t - 1, -1, -1, dtype=np.float64)  # a^(t-s)
        out[:, t] = (a ** t) * grav_ang[:, 0] + drive[:, 1:t + 1] @ powers
    return out


def grav_to_angles(gravity):
    """Roll/pitch from a gravity vector stream [3, T] -> [2, T].

    roll = atan2(g_y, g_z); pitch = atan2(-g_x, sqrt(g_y^2 + g_z^2)).
    """
    gravity = np.asarray(gravity, dtype=np.float64)
    if gravity.ndim != 2 or gravity.shape[0] != 3:
        raise DimensionError(f"expected [3, T] gravity, got {gravity.shape}")
    norms = np.linalg.norm(gravity, axis=0)
    if np.any(norms == 0.0):
        t = int(np.argmax(norms == 0.0))
        raise ContractError(f"zero gravity vector at timestamp {t}")
    gx, gy, gz = gravity
    roll = np.arctan2(gy, gz)
    pitch = np.arctan2(-gx, np.hypot(gy, gz))
    return np.stack([roll, pitch])


class ImuFusionBlock:
    """Per-IMU fusion: three causal conv branches + posture attention.

    The gravimeter kernel is one tap wider than the gyroscope kernel, so the
    slower posture stream sees a slightly longer history. A single 64 -> 1
    projection scores both posture branches at every timestamp; the softmax
    over the two scores gives the convex blend weights.
    """

    def __init__(self, rng, in_channels: int = 3,
                 channels: int = FUSED_CHANNELS):
        if GRAV_KERNEL != GYRO_KERNEL + 1:
            raise ContractError("gravimeter kernel must be one wider than gyro")
        self.in_channels = in_channels
        self.channels = channels
        c, ci = channels, in_channels

        def conv_pair(width, tag):
            k = Parameter(he_normal(rng, (c, ci, width), ci * width),
                          name=f"imu.{tag}.kernel")
            b = Parameter(np.zeros(c), name=f"imu.{tag}.bias")
            return k, b

        self.grav_kernel, self.grav_bias = conv_pair(GRAV_KERNEL, "grav")
        self.gyro_kernel, self.gyro_bias = conv_pair(GYRO_KERNEL, "gyro")
        self.lacc_kernel, self.lacc_bias = conv_pair(LACC_KERNEL, "lacc")
        # small scorer init keeps early gating near uniform; the positive
        # bias starts both scores in tanh's concave region, so each source
        # is trusted by default and any disturbance its branch picks up
        # pulls the score down. The softmax is insensitive to the common
        # level, so training preserves the trusting operating point.
        self.attn_weight = Parameter(he_normal(rng, (1, c), 4 * c),
                                     name="imu.attn.weight")
        self.attn_bias = Parameter(np.full(1, 1.0), name="imu.attn.bias")

    def parameters(self):
        return [self.grav_kernel, self.grav_bias,
                self.gyro_kernel, self.gyro_bias,
                self.lacc_kernel, self.lacc_bias,
                self.attn_weight, self.attn_bias]

    def __call__(self, grav, gyro, lacc):
        return imu_fusion_forward(grav, gyro, lacc, self)


def imu_fusion_forward(grav, gyro, lacc, block: ImuFusionBlock,
                       fixed_attention=False):
    """Run one IMU through the fusion block.

    Accepts [C, L] single samples or [B, C, L] batches; returns
    (posture [.., channels, L], motion [.., channels, L],
    attn_log [.., 2, L]) with attention rows ordered (grav, gyro).
    With fixed_attention the learned weighting is replaced by a constant
    0.5/0.5 average (the fusion-disabled ablation).
    """
    single = False
    tensors = []
    for name, x in (("grav", grav), ("gyro", gyro), ("lacc", lacc)):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        if x.data.ndim == 2:
            x = x.reshape((1,) + x.data.shape)
            single = True
        if x.data.ndim != 3 or x.data.shape[1] != block.in_channels:
            raise DimensionError(
                f"{name} stream must be [{block.in_channels}, L] or "
                f"[B, {block.in_channels}, L], got {x.data.shape}")
        tensors.append(x)
    grav, gyro, lacc = tensors
    L = grav.data.shape[-1]
    if gyro.data.shape != grav.data.shape or lacc.data.shape != grav.data.shape:
        raise DimensionError(
            f"sensor streams disagree: {grav.data.shape} vs "
            f"{gyro.data.shape} vs {lacc.data.shape}")

    v_grav = causal_conv1d(grav, block.grav_kernel.tensor, block.grav_bias.tensor)
    v_gyro = causal_conv1d(gyro, block.gyro_kernel.tensor, block.gyro_bias.tensor)
    motion = causal_conv1d(lacc, block.lacc_kernel.tensor, block.lacc_bias.tensor)

    vg_t = v_grav.transpose(0, 2, 1)                    # [B, L, C]
    vy_t = v_gyro.transpose(0, 2, 1)
    if fixed_attention:
        attn = Tensor(np.full(grav.data.shape[:1] + (L, 2), 0.5))
    else:
        mu_g = tanh(linear(vg_t, block.attn_weight.tensor, block.attn_bias.tensor))
        mu_y = tanh(linear(vy_t, block.attn_weight.tensor, block.attn_bias.tensor))
        scores = concat([mu_g, mu_y], axis=2)           # [B, L, 2]
        attn = softmax(scores, axis=2)
    posture_t = attn[:, :, 0:1] * vg_t + attn[:, :, 1:2] * vy_t
    posture = posture_t.transpose(0, 2, 1)
    attn_log = attn.transpose(0, 2, 1)                  # [B, 2, L]

    if single:
        c = block.channels
        return (posture.reshape((c, L)), motion.reshape((c, L)),
                attn_log.reshape((2, L)))
    return posture, motion, attn_log
