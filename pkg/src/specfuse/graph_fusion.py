"""Signed-graph fusion across modality nodes.

Every IMU contributes two nodes (posture, motion). A small MLP scores each
node pair from the elementwise product of their features, so the learned
adjacency is symmetric by construction and signed: positive edges smooth
neighbours, negative edges sharpen their differences. Degrees are taken
from |A| so the propagation matrix stays real and its spectrum bounded;
low- and high-pass filters are complementary around the identity. The node
fusion block runs two propagation layers per timestamp and compresses
(input, layer1, layer2) down to one channel vector via a shared squeeze,
then averages over nodes.
"""

from collections import namedtuple

import numpy as np

from .errors import ContractError, DegenerateGraphError, DimensionError
from .numerics import (
    Parameter,
    Tensor,
    as_tensor,
    concat,
    he_normal,
    linear,
    relu,
    tanh,
)

DEGREE_EPS = 1e-8


class EdgeMlp:
    """Pair scorer: C -> C/2 (ReLU) -> 1, squashed by tanh into (-1, 1)."""

    def __init__(self, rng, channels: int):
        if channels < 2:
            raise ContractError(f"edge MLP needs >= 2 channels, got {channels}")
        hidden = channels // 2
        self.channels = channels
        self.w1 = Parameter(he_normal(rng, (hidden, channels), channels),
                            name="graph.edge.w1")
        self.b1 = Parameter(np.zeros(hidden), name="graph.edge.b1")
        self.w2 = Parameter(he_normal(rng, (1, hidden), hidden),
                            name="graph.edge.w2")
        self.b2 = Parameter(np.zeros(1), name="graph.edge.b2")

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(linear(x, self.w1.tensor, self.b1.tensor))
        return tanh(linear(h, self.w2.tensor, self.b2.tensor))


def build_dynamic_adjacency(X, mlp: EdgeMlp) -> Tensor:
    """Score all node pairs of X [.., N, C] -> signed adjacency [.., N, N].

    A_ij = tanh(mlp(x_i * x_j)); the elementwise product commutes, so the
    result is symmetric bit-for-bit. Self-edges are included.
    """
    X = as_tensor(X)
    if X.data.ndim < 2:
        raise DimensionError(f"expected [.., N, C], got {X.data.shape}")
    *batch, N, C = X.data.shape
    if N < 2:
        raise DegenerateGraphError(f"graph needs >= 2 nodes, got {N}")
    if C != mlp.channels:
        raise DimensionError(
            f"node features have {C} channels, edge MLP expects {mlp.channels}")
    xi = X.reshape(tuple(batch) + (N, 1, C))
    xj = X.reshape(tuple(batch) + (1, N, C))
    pair = xi * xj                                    # [.., N, N, C]
    return mlp(pair).reshape(tuple(batch) + (N, N))


def propagation_matrix(A_signed) -> Tensor:
    """D^{-1/2} A D^{-1/2} with D from |A| plus a small epsilon."""
    A = as_tensor(A_signed)
    *batch, N, M = A.data.shape
    if N != M:
        raise DimensionError(f"adjacency must be square, got {A.data.shape}")
    degree = A.abs().sum(axis=-1) + DEGREE_EPS        # [.., N]
    inv_sqrt = degree ** -0.5
    di = inv_sqrt.reshape(tuple(batch) + (N, 1))
    dj = inv_sqrt.reshape(tuple(batch) + (1, N))
    return di * A * dj


def graph_filters(A_signed):
    """Complementary low/high-pass filter pair around the identity.

    F_L = I + P_hat. F_H is assembled as the complement 2I - F_L rather
    than I - P_hat so that F_L + F_H == 2I holds bit-exactly (off-diagonal
    entries are exact negations; the diagonal complement rounds back to 2).
    """
    P = propagation_matrix(A_signed)
    N = P.data.shape[-1]
    eye = Tensor(np.broadcast_to(np.eye(N), P.data.shape).copy())
    two_eye = Tensor(2.0 * eye.data)
    F_L = eye + P
    F_H = two_eye - F_L
    return F_L, F_H


def adaptive_filter_layer(X, A_signed, weight) -> Tensor:
    """One propagation layer: relu((X + P_hat X) W), bias-free.

    The low/high mixing weights are folded into the sign of A itself, so
    there is no separate per-filter coefficient here.
    """
    X = as_tensor(X)
    W = as_tensor(weight)
    P = propagation_matrix(A_signed)
    if X.data.shape[-1] != W.data.shape[0]:
        raise DimensionError(
            f"features [{X.data.shape[-1]}] do not match weight "
            f"{W.data.shape}")
    return relu((X + P @ X) @ W)


class ModalityGraphBlock:
    """Two propagation layers + squeeze, shared across nodes and timestamps.

    Parameter count does not depend on the node count: the edge MLP and the
    layer transforms only see channel dimensions.
    """

    def __init__(self, rng, channels: int, out_channels=None):
        out_channels = channels if out_channels is None else out_channels
        self.channels = channels
        self.out_channels = out_channels
        self.edge_mlp = EdgeMlp(rng, channels)
        self.layer1_weight = Parameter(
            he_normal(rng, (channels, channels), channels),
            name="graph.layer1.weight")
        self.layer2_weight = Parameter(
            he_normal(rng, (channels, channels), channels),
            name="graph.layer2.weight")
        self.squeeze_weight = Parameter(
            he_normal(rng, (out_channels, 3 * channels), 3 * channels),
            name="graph.squeeze.weight")
        self.squeeze_bias = Parameter(np.zeros(out_channels),
                                      name="graph.squeeze.bias")

    def parameters(self):
        return self.edge_mlp.parameters() + [
            self.layer1_weight, self.layer2_weight,
            self.squeeze_weight, self.squeeze_bias]


def modality_node_fusion(X, block: ModalityGraphBlock):
    """Fuse node features [N, C, L'] (or [B, N, C, L']) -> [C_out, L'].

    Per timestamp: build the signed adjacency from the node features at
    that instant, propagate twice, squeeze concat(input, layer1, layer2)
    from 3C to C_out, then average over nodes. Timestamps never mix here.
    Returns (fused, adjacency) with adjacency [.., L', N, N] exposed for
    edge analysis.
    """
    X = as_tensor(X)
    single = X.data.ndim == 3
    if single:
        X = X.reshape((1,) + X.data.shape)
    if X.data.ndim != 4:
        raise DimensionError(
            f"expected [N, C, L'] or [B, N, C, L'], got {X.data.shape}")
    B, N, C, L = X.data.shape
    if N < 2:
        raise DegenerateGraphError(f"graph fusion needs >= 2 nodes, got {N}")
    if C != block.channels:
        raise DimensionError(
            f"features have {C} channels, block expects {block.channels}")

    Xt = X.transpose(0, 3, 1, 2)                      # [B, L', N, C]
    A = build_dynamic_adjacency(Xt, block.edge_mlp)   # [B, L', N, N]
    Y1 = adaptive_filter_layer(Xt, A, block.layer1_weight.tensor)
    Y2 = adaptive_filter_layer(Y1, A, block.layer2_weight.tensor)
    Z = linear(concat([Xt, Y1, Y2], axis=3),
               block.squeeze_weight.tensor, block.squeeze_bias.tensor)
    fused = Z.mean(axis=2).transpose(0, 2, 1)         # [B, C_out, L']
    if single:
        return fused.reshape(fused.data.shape[1:]), A.reshape(A.data.shape[1:])
    return fused, A


GftSpectrum = namedtuple("GftSpectrum", ["eigenvalues", "coefficients",
                                         "basis"])


def gft_analyze(A_signed, X) -> GftSpectrum:
    """Spectral view of node features: eigen-decompose I - P_hat.

    Analysis-only (numpy, no gradients). Returns ascending eigenvalues,
    the projected coefficients U^T X, and the eigenvector basis U so
    callers can reconstruct or apply spectral filters h(lambda).
    """
    A = np.asarray(A_signed, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"adjacency must be [N, N], got {A.shape}")
    if not np.array_equal(A, A.T):
        raise ContractError("adjacency must be symmetric")
    X = np.asarray(X, dtype=np.float64)
    degree = np.abs(A).sum(axis=1) + DEGREE_EPS
    inv_sqrt = degree ** -0.5
    P = inv_sqrt[:, None] * A * inv_sqrt[None, :]
    M = np.eye(A.shape[0]) - P
    eigenvalues, U = np.linalg.eigh(M)
    return GftSpectrum(eigenvalues, U.T @ X, U)
