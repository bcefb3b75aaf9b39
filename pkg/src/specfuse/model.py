"""Full network assembly: IMU fusion -> node projection -> temporal fusion.

Node layout convention used everywhere downstream (edge labeling included):
with P IMUs the graph sees N = 2P nodes, indices 0..P-1 are the posture
nodes in IMU order and P..2P-1 the motion nodes. Parameters are shared
across IMU positions (one causal stack, one projection per node kind), so
the parameter count does not depend on P.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .imu_fusion import GRAV_KERNEL, GYRO_KERNEL, LACC_KERNEL, \
    ImuFusionBlock, imu_fusion_forward
from .kvconfig import coerce, format_kv, parse_kv_text
from .numerics import Parameter, Tensor, concat, he_normal, linear
from .temporal_fusion import TemporalBlocks, temporal_pipeline

SENSOR_KINDS = 3          # grav, gyro, lacc
AXES = 3


@dataclasses.dataclass
class TsfConfig:
    """Every knob of the architecture and its training recipe.

    The causal kernel widths and the block depths are listed so config
    files are self-describing, but they are fixed by the published layout;
    validate() rejects any other value instead of silently building a
    different network.
    """
    window: int = 128
    classes: int = 4
    imus: int = 1
    imu_channels: int = 64
    node_channels: int = 96
    fused_channels: int = 128
    grav_kernel: int = 11
    gyro_kernel: int = 10
    lacc_kernel: int = 11
    local_kernel: int = 5
    graph_layers: int = 2
    attention_layers: int = 2
    heads: int = 4
    lr0: float = 0.0005
    lr_half_every: int = 5
    epochs: int = 30
    batch_size: int = 128
    mixup_alpha: float = 0.2
    tau_start: float = 1.0
    tau_end: float = 0.5
    seed: int = 0
    val_fraction: float = 0.1
    selection_mode: str = "adaptive"   # adaptive | low | high | none
    graph_mode: str = "adaptive"       # adaptive | mean
    attention_mode: str = "adaptive"   # adaptive | uniform
    imu_attention: bool = True         # False: fixed 0.5/0.5 sensor weighting

    def validate(self):
        counts = dict(window=self.window, classes=self.classes,
                      imus=self.imus, imu_channels=self.imu_channels,
                      node_channels=self.node_channels,
                      fused_channels=self.fused_channels, heads=self.heads,
                      lr_half_every=self.lr_half_every, epochs=self.epochs,
                      batch_size=self.batch_size)
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.window < 8:
            raise ConfigError(
                f"window must be >= 8 for three halvings, got {self.window}")
        if (self.grav_kernel, self.gyro_kernel, self.lacc_kernel) != \
                (GRAV_KERNEL, GYRO_KERNEL, LACC_KERNEL):
            raise ConfigError(
                "causal kernel widths are fixed at "
                f"{GRAV_KERNEL}/{GYRO_KERNEL}/{LACC_KERNEL}")
        if self.local_kernel < 1:
            raise ConfigError("local_kernel must be positive")
        if self.graph_layers != 2 or self.attention_layers != 2:
            raise ConfigError("block depths are fixed at 2")
        if self.fused_channels % self.heads != 0:
            raise ConfigError(
                f"fused_channels {self.fused_channels} not divisible by "
                f"{self.heads} heads")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.mixup_alpha < 0.0:
            raise ConfigError("mixup_alpha must be >= 0 (0 disables)")
        if self.lr0 <= 0 or self.tau_start <= 0 or self.tau_end <= 0:
            raise ConfigError("lr0 and temperatures must be positive")
        if self.selection_mode not in ("adaptive", "low", "high", "none"):
            raise ConfigError(f"bad selection_mode {self.selection_mode!r}")
        if self.graph_mode not in ("adaptive", "mean"):
            raise ConfigError(f"bad graph_mode {self.graph_mode!r}")
        if self.attention_mode not in ("adaptive", "uniform"):
            raise ConfigError(f"bad attention_mode {self.attention_mode!r}")
        return self

    def to_kv(self) -> dict:
        out = {}
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            out[field.name] = str(value)
        return out

    @classmethod
    def from_kv(cls, mapping: dict) -> "TsfConfig":
        defaults = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = coerce(raw, getattr(defaults, key))
        return cls(**values).validate()


def node_modality(node: int, imus: int) -> str:
    """Which sensor family a graph node carries under the fixed layout."""
    if not (0 <= node < 2 * imus):
        raise DimensionError(f"node {node} out of range for {imus} IMUs")
    return "posture" if node < imus else "motion"


class TsfModel:
    """Weights for the whole pipeline; forward lives in tsf_forward."""

    def __init__(self, config: TsfConfig, rng=None):
        config.validate()
        if rng is None:
            rng = np.random.default_rng(config.seed)
        self.config = config
        c, n, f = config.imu_channels, config.node_channels, \
            config.fused_channels
        self.imu_block = ImuFusionBlock(rng, channels=c)
        self.posture_proj = Parameter(he_normal(rng, (n, c), c),
                                      name="proj.posture.weight")
        self.posture_bias = Parameter(np.zeros(n), name="proj.posture.bias")
        self.motion_proj = Parameter(he_normal(rng, (n, c), c),
                                     name="proj.motion.weight")
        self.motion_bias = Parameter(np.zeros(n), name="proj.motion.bias")
        self.temporal = TemporalBlocks(
            rng, node_channels=n, fused_channels=f, heads=config.heads,
            selection_mode=config.selection_mode,
            graph_mode=config.graph_mode,
            attention_mode=config.attention_mode,
            local_width=config.local_kernel)
        # small head init: logits start near zero so the first updates see
        # the uniform-prediction loss, while gradients still reach the trunk
        self.cls_weight = Parameter(
            1e-3 * rng.standard_normal((config.classes, f)),
            name="cls.weight")
        self.cls_bias = Parameter(np.zeros(config.classes), name="cls.bias")

    def parameters(self):
        return (self.imu_block.parameters()
                + [self.posture_proj, self.posture_bias,
                   self.motion_proj, self.motion_bias]
                + self.temporal.parameters()
                + [self.cls_weight, self.cls_bias])

    def set_training(self, training: bool):
        self.temporal.set_training(training)

    def set_temperature(self, tau: float):
        self.temporal.set_temperature(tau)


def _project_node(features, weight, bias):
    # [B, C, L] -> [B, C', L] through a per-timestamp affine map
    return linear(features.transpose(0, 2, 1), weight.tensor,
                  bias.tensor).transpose(0, 2, 1)


def tsf_forward(batch, model: TsfModel, rng, with_diagnostics=False):
    """Logits for a batch of windows shaped [B, P, 3 kinds, 3 axes, L].

    A single [P, 3, 3, L] window is promoted and squeezed back. Returns
    (logits, diagnostics); diagnostics carries the per-IMU sensor
    attention [B, P, 2, L], per-sample route bits, and (when the dynamic
    graph is active) the per-timestamp adjacency. The model is agnostic
    to P at forward time: parameters are shared across IMU positions.
    """
    x = np.asarray(batch, dtype=np.float64)
    single = x.ndim == 4
    if single:
        x = x[None]
    if x.ndim != 5 or x.shape[2] != SENSOR_KINDS or x.shape[3] != AXES:
        raise DimensionError(
            f"expected [B, P, {SENSOR_KINDS}, {AXES}, L], got {x.shape}")
    B, P, _, _, L = x.shape
    cfg = model.config

    posture_nodes, motion_nodes, attn_rows = [], [], []
    for p in range(P):
        posture, motion, attn = imu_fusion_forward(
            Tensor(x[:, p, 0]), Tensor(x[:, p, 1]), Tensor(x[:, p, 2]),
            model.imu_block, fixed_attention=not cfg.imu_attention)
        posture_nodes.append(_project_node(
            posture, model.posture_proj, model.posture_bias))
        motion_nodes.append(_project_node(
            motion, model.motion_proj, model.motion_bias))
        attn_rows.append(attn.data)

    shape = (B, cfg.node_channels, 1, L)
    features = concat([node.reshape(shape)
                       for node in posture_nodes + motion_nodes], axis=2)
    pooled, routes, diag = temporal_pipeline(
        features, model.temporal, rng, with_diagnostics=True)
    logits = linear(pooled, model.cls_weight.tensor, model.cls_bias.tensor)

    diagnostics = {
        "attention": np.stack(attn_rows, axis=1),      # [B, P, 2, L]
        "routes": routes,
        "adjacency": diag.get("adjacency"),
        "masks": diag.get("masks"),
    }
    if single:
        logits = logits.reshape((cfg.classes,))
        diagnostics["attention"] = diagnostics["attention"][0]
    if with_diagnostics:
        return logits, diagnostics
    return logits


def mixup(batch_x, batch_y, alpha: float, rng):
    """Convex-combine a batch with a shuffled copy of itself.

    One lambda ~ Beta(alpha, alpha) per batch; labels must already be
    one-hot (or soft) rows and are mixed with the same lambda.
    """
    if alpha <= 0:
        raise ContractError(f"mixup needs alpha > 0, got {alpha}")
    x = np.asarray(batch_x, dtype=np.float64)
    y = np.asarray(batch_y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise DimensionError(
            f"batch mismatch: {x.shape[0]} inputs vs {y.shape[0]} labels")
    lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(x.shape[0])
    return lam * x + (1 - lam) * x[perm], lam * y + (1 - lam) * y[perm]


# ----------------------------------------------------------------------
# FLOP accounting

FLOP_CONVENTION = (
    "FLOP convention: one multiply-accumulate = 2 FLOPs. Counted: "
    "convolutions, affine/linear maps (with one add per bias element), "
    "attention score and mixing matmuls, graph propagation and layer "
    "matmuls, edge-scoring MLPs, and wavelet filtering at 8 taps per "
    "output sample. Excluded: activations, softmax, normalization, "
    "elementwise gating/residual adds, and pooling reductions.")


def linear_flops(d_in: int, d_out: int, length: int = 1) -> float:
    return float((2 * d_in * d_out + d_out) * length)


def conv_flops(c_in: int, c_out: int, width: int, length: int) -> float:
    return float((2 * c_in * c_out * width + c_out) * length)


def dwt_flops(rows: int, length: int) -> float:
    out = math.ceil(length / 2)
    return float(rows * 2 * (2 * 8 * out))     # two bands, 8 taps each


def attention_flops(length: int, d: int, uniform: bool = False) -> float:
    total = 2 * linear_flops(d, d, length)     # value + output projections
    total += linear_flops(d, 2 * d, length) + linear_flops(2 * d, d, length)
    total += 2.0 * length * length * d         # mixing matmul
    if not uniform:
        total += 2 * linear_flops(d, d, length)    # query + key projections
        total += 2.0 * length * length * d         # score matmul
    return total


def graph_stage_flops(n: int, c: int, length: int) -> float:
    hidden = c // 2
    edges = n * n * (linear_flops(c, hidden) + linear_flops(hidden, 1))
    layers = 2 * (2.0 * n * n * c + 2.0 * n * c * c)
    squeeze = n * linear_flops(3 * c, c)
    return float(length * (edges + layers + squeeze))


def flops_breakdown(config: TsfConfig, imus=None, window=None) -> dict:
    """Per-stage forward cost for one sample under FLOP_CONVENTION."""
    P = config.imus if imus is None else imus
    L = config.window if window is None else window
    c, nch, f = config.imu_channels, config.node_channels, \
        config.fused_channels
    N = 2 * P
    selective = config.selection_mode != "none"
    uniform = config.attention_mode == "uniform"

    def half(x):
        return math.ceil(x / 2)

    l1 = half(L) if selective else L
    l2 = half(l1) if selective else L
    l3 = half(l2) if selective else L

    stages = {}
    imu = P * (conv_flops(AXES, c, GRAV_KERNEL, L)
               + conv_flops(AXES, c, GYRO_KERNEL, L)
               + conv_flops(AXES, c, LACC_KERNEL, L))
    if config.imu_attention:
        imu += P * 2 * linear_flops(c, 1, L)
    stages["imu_fusion"] = imu
    stages["node_projection"] = 2 * P * linear_flops(c, nch, L)

    routing = 0.0
    if selective:
        routing += dwt_flops(nch * N, L) + linear_flops(2 * nch, 2)
        routing += dwt_flops(f * N, l1) + linear_flops(2 * f, 2)
        routing += dwt_flops(f, l2) + linear_flops(2 * f, 2)
    stages["frequency_routing"] = routing

    local = N * conv_flops(nch, f, config.local_kernel, l1)
    if selective:
        local += N * conv_flops(nch, f, 1, l1)     # secondary projection
    stages["local_fusion"] = local

    stages["graph_fusion"] = (graph_stage_flops(N, f, l2)
                              if config.graph_mode == "adaptive" else 0.0)
    stages["attention"] = (attention_flops(l2, f, uniform)
                           + attention_flops(l3, f, uniform))
    stages["classifier"] = linear_flops(f, config.classes)
    return stages


def count_flops(model: TsfModel, input_shape=None) -> float:
    """Total forward FLOPs for one sample; input_shape = (P, L) override."""
    imus = window = None
    if input_shape is not None:
        imus, window = int(input_shape[0]), int(input_shape[-1])
    return float(sum(flops_breakdown(model.config, imus, window).values()))


# ----------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: TsfModel, stats=None, class_names=None):
    """One .npz with weights (positional), config text and norm stats."""
    arrays = {}
    names = []
    for i, p in enumerate(model.parameters()):
        arrays[f"param_{i:04d}"] = p.data
        names.append(p.name)
    arrays["__config__"] = np.array(format_kv(model.config.to_kv()))
    arrays["__names__"] = np.array("\n".join(names))
    if class_names is not None:
        arrays["__classes__"] = np.array("\n".join(class_names))
    if stats is not None:
        arrays["__norm_mean__"] = np.asarray(stats.mean, dtype=np.float64)
        arrays["__norm_std__"] = np.asarray(stats.std, dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Rebuild (model, stats or None, class_names or None) from disk."""
    from .datapipe import ZNormStats

    with np.load(path, allow_pickle=False) as data:
        config = TsfConfig.from_kv(parse_kv_text(str(data["__config__"][()])))
        model = TsfModel(config)
        params = model.parameters()
        keys = sorted(k for k in data.files if k.startswith("param_"))
        if len(keys) != len(params):
            raise ContractError(
                f"checkpoint has {len(keys)} tensors, model needs "
                f"{len(params)}")
        for key, p in zip(keys, params):
            p.data = data[key]
        stats = None
        if "__norm_mean__" in data.files:
            stats = ZNormStats(mean=data["__norm_mean__"],
                               std=data["__norm_std__"])
        class_names = None
        if "__classes__" in data.files:
            text = str(data["__classes__"][()])
            class_names = text.split("\n") if text else []
    model.set_training(False)
    return model, stats, class_names
