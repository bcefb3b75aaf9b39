"""Frequency routing and temporal fusion.

A window is decomposed up to three times with the DB4 filter bank; after
each decomposition a tiny squeeze network looks at pooled low/high band
descriptors and picks one band to continue with (Gumbel straight-through
during training, plain argmax at inference). The discarded band is not
thrown away: it rides along as a residual into the next fusion layer.
Between selections sit a per-node 1x5 convolution, the cross-modality
graph block, and two pre-norm self-attention blocks; position encoding is
injected once, before the first attention block.
"""

import numpy as np

from .errors import ContractError, DimensionError
from .graph_fusion import ModalityGraphBlock, modality_node_fusion
from .numerics import (
    Parameter,
    Tensor,
    as_tensor,
    concat,
    he_normal,
    layer_norm,
    linear,
    relu,
    same_conv1d,
    softmax,
)

# DB4 scaling filter, frozen from a 60-digit spectral factorization of the
# Daubechies polynomial; the wavelet filter is its quadrature mirror.
DB4_LOW = np.array([
    -0.0105974017850690321,
    0.0328830116668851997,
    0.0308413818355607636,
    -0.1870348117190930841,
    -0.0279837694168598542,
    0.6308807679298589079,
    0.7148465705529156471,
    0.2303778133088965009,
])


class WaveletFilterPair:
    """DB4 analysis pair; orthonormality is checked at construction."""

    def __init__(self, low=None):
        low = DB4_LOW if low is None else np.asarray(low, dtype=np.float64)
        high = (-1.0) ** np.arange(low.size) * low[::-1]
        if abs(low.sum() - np.sqrt(2.0)) > 1e-10:
            raise ContractError("scaling filter does not sum to sqrt(2)")
        if abs(high.sum()) > 1e-10:
            raise ContractError("wavelet filter does not sum to 0")
        if abs((low * low).sum() - 1.0) > 1e-10:
            raise ContractError("scaling filter is not unit-norm")
        if abs((low * high).sum()) > 1e-10:
            raise ContractError("filter pair is not orthogonal")
        self.low = low
        self.high = high
        self.width = low.size
        self._matrices = {}

    def analysis_matrices(self, length: int):
        """Decimating analysis operators for an even input length.

        Row t of each matrix holds filter taps at wrapped positions
        (2t + 1 - w) mod length, so the stacked [low; high] matrix is
        orthogonal and the transform is exactly invertible by transpose.
        """
        if length % 2 != 0 or length < 2:
            raise ContractError(f"analysis length must be even >= 2, "
                                f"got {length}")
        if length not in self._matrices:
            half = length // 2
            m_low = np.zeros((half, length))
            m_high = np.zeros((half, length))
            for t in range(half):
                for w in range(self.width):
                    j = (2 * t + 1 - w) % length
                    m_low[t, j] += self.low[w]
                    m_high[t, j] += self.high[w]
            self._matrices[length] = (m_low, m_high)
        return self._matrices[length]


def dwt_step(x, filters: WaveletFilterPair):
    """One decomposition level along the last axis: [.., L] -> two [.., ceil(L/2)].

    Odd lengths are right-padded with one repeated sample first; the filter
    wraps periodically at the window edges.
    """
    x = as_tensor(x)
    L = x.data.shape[-1]
    if L < 2:
        raise DimensionError(f"need at least 2 samples to decompose, got {L}")
    if L % 2 == 1:
        last = x[..., L - 1:L]
        x = concat([x, last], axis=x.data.ndim - 1)
        L += 1
    m_low, m_high = filters.analysis_matrices(L)
    low = x @ Tensor(m_low.T)
    high = x @ Tensor(m_high.T)
    return low, high


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Standard sin/cos position table [length, dim]."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table


class FrequencySelector:
    """Band chooser: pooled (low, high) descriptors -> 2 logits.

    `temperature` is annealed by the trainer; `training` toggles between
    Gumbel straight-through sampling and deterministic argmax.
    """

    def __init__(self, rng, channels: int, name: str = "select"):
        self.channels = channels
        self.weight = Parameter(he_normal(rng, (2, 2 * channels), 2 * channels),
                                name=f"{name}.weight")
        self.bias = Parameter(np.zeros(2), name=f"{name}.bias")
        self.temperature = 1.0
        self.training = True

    def parameters(self):
        return [self.weight, self.bias]


def select_frequency(low, high, selector: FrequencySelector, rng,
                     batched: bool = False, force=None):
    """Choose one band per sample; the other becomes the residual.

    Inputs are [C, ...] single samples or [B, C, ...] batches (flag
    `batched`). Returns (primary, secondary, mask, route_bits): mask is the
    soft distribution during training and an exact one-hot at inference;
    the forward value of primary/secondary is always the hard selection,
    with gradients routed through the soft mask (straight-through).
    route_bits is int per sample: 0 = low band, 1 = high band.
    `force` ("low"/"high") bypasses the learned choice deterministically.
    """
    low = as_tensor(low)
    high = as_tensor(high)
    if low.data.shape != high.data.shape:
        raise DimensionError(
            f"band shapes differ: {low.data.shape} vs {high.data.shape}")
    single = not batched
    if single:
        low = low.reshape((1,) + low.data.shape)
        high = high.reshape((1,) + high.data.shape)
    B = low.data.shape[0]
    C = low.data.shape[1]
    if C != selector.channels:
        raise DimensionError(
            f"bands have {C} channels, selector expects {selector.channels}")
    rest_axes = tuple(range(2, low.data.ndim))

    if force is not None:
        if force not in ("low", "high"):
            raise ContractError(f"force must be 'low' or 'high', got {force!r}")
        idx = 0 if force == "low" else 1
        hard = np.zeros((B, 2))
        hard[:, idx] = 1.0
        mask = Tensor(hard)
        primary, secondary = (low, high) if idx == 0 else (high, low)
        bits = np.full(B, idx, dtype=np.int64)
        if single:
            return (primary.reshape(primary.data.shape[1:]),
                    secondary.reshape(secondary.data.shape[1:]),
                    mask.reshape((2,)), bits[0])
        return primary, secondary, mask, bits

    desc = concat([low.mean(axis=rest_axes), high.mean(axis=rest_axes)],
                  axis=1)                                    # [B, 2C]
    logits = linear(desc, selector.weight.tensor, selector.bias.tensor)

    if selector.training:
        u = np.clip(rng.uniform(size=(B, 2)), 1e-12, 1.0 - 1e-12)
        gumbel = -np.log(-np.log(u))
        soft = softmax((logits + Tensor(gumbel))
                       * (1.0 / selector.temperature), axis=1)
        choice = np.argmax(soft.data, axis=1)
        mask = soft
    else:
        choice = np.argmax(logits.data, axis=1)
        hard = np.zeros((B, 2))
        hard[np.arange(B), choice] = 1.0
        mask = Tensor(hard)

    hard = np.zeros((B, 2))
    hard[np.arange(B), choice] = 1.0
    if selector.training:
        # hard forward, soft backward: value is exactly the one-hot pick
        st = Tensor(hard) + (soft - soft.detach())
    else:
        st = mask
    shape = (B, 1) + (1,) * len(rest_axes)
    w_low = st[:, 0].reshape(shape)
    w_high = st[:, 1].reshape(shape)
    primary = w_low * low + w_high * high
    secondary = w_high * low + w_low * high
    bits = choice.astype(np.int64)
    if single:
        return (primary.reshape(primary.data.shape[1:]),
                secondary.reshape(secondary.data.shape[1:]),
                mask.reshape((2,)), bits[0])
    return primary, secondary, mask, bits


class LocalFusionBlock:
    """Per-node 1x5 same-length convolution plus a 1x1 residual projection."""

    def __init__(self, rng, in_channels: int, out_channels: int,
                 width: int = 5):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.width = width
        self.kernel = Parameter(
            he_normal(rng, (out_channels, in_channels, width),
                      in_channels * width),
            name="local.kernel")
        self.bias = Parameter(np.zeros(out_channels), name="local.bias")
        self.proj_kernel = Parameter(
            he_normal(rng, (out_channels, in_channels, 1), in_channels),
            name="local.proj.kernel")
        self.proj_bias = Parameter(np.zeros(out_channels),
                                   name="local.proj.bias")

    def parameters(self):
        return [self.kernel, self.bias, self.proj_kernel, self.proj_bias]


def _fold_nodes(x):
    """[B, C, N, L] -> ([B*N, C, L], (B, N))."""
    B, C, N, L = x.data.shape
    return x.transpose(0, 2, 1, 3).reshape((B * N, C, L)), (B, N)


def _unfold_nodes(x, dims):
    B, N = dims
    BN, C, L = x.data.shape
    return x.reshape((B, N, C, L)).transpose(0, 2, 1, 3)


def local_fusion(primary, secondary, block: LocalFusionBlock):
    """conv_1x5(primary) + project_1x1(secondary), per node.

    Accepts [C, N, L'] or [B, C, N, L']; secondary may be None (pure conv
    path, used when selection is disabled).
    """
    primary = as_tensor(primary)
    single = primary.data.ndim == 3
    if single:
        primary = primary.reshape((1,) + primary.data.shape)
    if primary.data.ndim != 4 or primary.data.shape[1] != block.in_channels:
        raise DimensionError(
            f"expected [.., {block.in_channels}, N, L], got "
            f"{primary.data.shape}")
    folded, dims = _fold_nodes(primary)
    out = same_conv1d(folded, block.kernel.tensor, block.bias.tensor)
    if secondary is not None:
        secondary = as_tensor(secondary)
        if single:
            secondary = secondary.reshape((1,) + secondary.data.shape)
        if secondary.data.shape != primary.data.shape:
            raise DimensionError(
                f"secondary shape {secondary.data.shape} does not match "
                f"primary {primary.data.shape}")
        sec_folded, _ = _fold_nodes(secondary)
        out = out + same_conv1d(sec_folded, block.proj_kernel.tensor,
                                block.proj_bias.tensor)
    out = _unfold_nodes(out, dims)
    if single:
        return out.reshape(out.data.shape[1:])
    return out


class AttentionBlock:
    """Pre-norm self-attention + feed-forward, both with residuals."""

    def __init__(self, rng, d_model: int = 128, heads: int = 4,
                 ff_mult: int = 2, add_position: bool = False,
                 name: str = "attn"):
        if d_model % heads != 0:
            raise ContractError(
                f"d_model {d_model} not divisible by {heads} heads")
        self.d_model = d_model
        self.heads = heads
        self.head_dim = d_model // heads
        self.add_position = add_position
        d, f = d_model, ff_mult * d_model

        def lin(dout, din, tag):
            w = Parameter(he_normal(rng, (dout, din), din),
                          name=f"{name}.{tag}.weight")
            b = Parameter(np.zeros(dout), name=f"{name}.{tag}.bias")
            return w, b

        self.ln1_gain = Parameter(np.ones(d), name=f"{name}.ln1.gain")
        self.ln1_shift = Parameter(np.zeros(d), name=f"{name}.ln1.shift")
        self.wq, self.bq = lin(d, d, "q")
        self.wk, self.bk = lin(d, d, "k")
        self.wv, self.bv = lin(d, d, "v")
        self.wo, self.bo = lin(d, d, "out")
        self.ln2_gain = Parameter(np.ones(d), name=f"{name}.ln2.gain")
        self.ln2_shift = Parameter(np.zeros(d), name=f"{name}.ln2.shift")
        self.w_ff1, self.b_ff1 = lin(f, d, "ff1")
        self.w_ff2, self.b_ff2 = lin(d, f, "ff2")

    def parameters(self):
        return [self.ln1_gain, self.ln1_shift,
                self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
                self.wo, self.bo, self.ln2_gain, self.ln2_shift,
                self.w_ff1, self.b_ff1, self.w_ff2, self.b_ff2]


def global_fusion(primary, secondary, block: AttentionBlock,
                  with_attention: bool = False, uniform_mix: bool = False):
    """Attention + feed-forward over time; secondary joins after the block.

    primary is [C, L''] or [B, C, L'']; position encoding is added first
    only if the block was built with add_position=True. uniform_mix swaps
    the learned mixing weights for a constant 1/L average (the pooling
    substitute) while keeping every parameter shape unchanged.
    """
    primary = as_tensor(primary)
    single = primary.data.ndim == 2
    if single:
        primary = primary.reshape((1,) + primary.data.shape)
    if primary.data.ndim != 3 or primary.data.shape[1] != block.d_model:
        raise DimensionError(
            f"expected [.., {block.d_model}, L], got {primary.data.shape}")
    B, d, L = primary.data.shape
    if L < 1:
        raise DimensionError("attention needs at least one timestamp")

    x = primary.transpose(0, 2, 1)                     # [B, L, d]
    if block.add_position:
        x = x + Tensor(sinusoidal_encoding(L, d))
    h = layer_norm(x, block.ln1_gain.tensor, block.ln1_shift.tensor)

    def heads_split(t):
        return t.reshape((B, L, block.heads, block.head_dim)) \
                .transpose(0, 2, 1, 3)                 # [B, H, L, dh]

    v = heads_split(linear(h, block.wv.tensor, block.bv.tensor))
    if uniform_mix:
        probs = Tensor(np.full((B, block.heads, L, L), 1.0 / L))
    else:
        q = heads_split(linear(h, block.wq.tensor, block.bq.tensor))
        k = heads_split(linear(h, block.wk.tensor, block.bk.tensor))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(block.head_dim))
        probs = softmax(scores, axis=3)                # [B, H, L, L]
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape((B, L, d))
    x = x + linear(ctx, block.wo.tensor, block.bo.tensor)

    h2 = layer_norm(x, block.ln2_gain.tensor, block.ln2_shift.tensor)
    ff = linear(relu(linear(h2, block.w_ff1.tensor, block.b_ff1.tensor)),
                block.w_ff2.tensor, block.b_ff2.tensor)
    x = x + ff

    out = x.transpose(0, 2, 1)                         # [B, d, L]
    if secondary is not None:
        secondary = as_tensor(secondary)
        if single:
            secondary = secondary.reshape((1,) + secondary.data.shape)
        if secondary.data.shape != out.data.shape:
            raise DimensionError(
                f"secondary shape {secondary.data.shape} does not match "
                f"block output {out.data.shape}")
        out = out + secondary
    if single:
        out = out.reshape(out.data.shape[1:])
    if with_attention:
        return out, probs
    return out


class TemporalBlocks:
    """Everything temporal_pipeline needs, bundled with its switches.

    selection_mode: "adaptive" (learned routing), "low"/"high" (forced
    band), or "none" (no decomposition at all — the full-length variant).
    graph_mode: "adaptive" (signed-graph fusion) or "mean" (plain node
    average). attention_mode: "adaptive" (learned mixing) or "uniform"
    (constant 1/L pooling substitute, parameter shapes unchanged).
    """

    def __init__(self, rng, node_channels: int = 96,
                 fused_channels: int = 128, heads: int = 4,
                 selection_mode: str = "adaptive",
                 graph_mode: str = "adaptive",
                 attention_mode: str = "adaptive",
                 local_width: int = 5):
        if selection_mode not in ("adaptive", "low", "high", "none"):
            raise ContractError(f"bad selection_mode {selection_mode!r}")
        if graph_mode not in ("adaptive", "mean"):
            raise ContractError(f"bad graph_mode {graph_mode!r}")
        if attention_mode not in ("adaptive", "uniform"):
            raise ContractError(f"bad attention_mode {attention_mode!r}")
        self.node_channels = node_channels
        self.fused_channels = fused_channels
        self.selection_mode = selection_mode
        self.graph_mode = graph_mode
        self.attention_mode = attention_mode
        self.wavelets = WaveletFilterPair()
        self.select1 = FrequencySelector(rng, node_channels, name="select1")
        self.select2 = FrequencySelector(rng, fused_channels, name="select2")
        self.select3 = FrequencySelector(rng, fused_channels, name="select3")
        self.local = LocalFusionBlock(rng, node_channels, fused_channels,
                                      width=local_width)
        self.graph = ModalityGraphBlock(rng, fused_channels)
        self.attn1 = AttentionBlock(rng, fused_channels, heads,
                                    add_position=True, name="attn1")
        self.attn2 = AttentionBlock(rng, fused_channels, heads,
                                    add_position=False, name="attn2")

    def parameters(self):
        params = []
        for part in (self.select1, self.select2, self.select3, self.local,
                     self.graph, self.attn1, self.attn2):
            params.extend(part.parameters())
        return params

    def set_training(self, training: bool):
        for sel in (self.select1, self.select2, self.select3):
            sel.training = training

    def set_temperature(self, tau: float):
        for sel in (self.select1, self.select2, self.select3):
            sel.temperature = tau


def _select(x, blocks, selector, rng):
    """One dwt + selection stage honoring the selection switch."""
    mode = blocks.selection_mode
    low, high = dwt_step(x, blocks.wavelets)
    force = mode if mode in ("low", "high") else None
    return select_frequency(low, high, selector, rng, batched=True,
                            force=force)


def temporal_pipeline(features, blocks: TemporalBlocks, rng,
                      with_diagnostics: bool = False):
    """Run the three-stage routed fusion; [.., C, N, L] -> [.., C_final].

    Returns (pooled, routes); routes is one int row per sample with the
    per-level band picks (empty when selection_mode == "none"). With
    diagnostics enabled, a third dict carries the per-timestamp adjacency
    and the selection masks for analysis tooling.
    """
    x = as_tensor(features)
    single = x.data.ndim == 3
    if single:
        x = x.reshape((1,) + x.data.shape)
    if x.data.ndim != 4 or x.data.shape[1] != blocks.node_channels:
        raise DimensionError(
            f"expected [.., {blocks.node_channels}, N, L], got "
            f"{x.data.shape}")
    B, C, N, L = x.data.shape
    if L < 8:
        raise DimensionError(f"window too short for three halvings: {L}")

    diag = {}
    no_selection = blocks.selection_mode == "none"
    if no_selection:
        routes = np.zeros((B, 0), dtype=np.int64)
        fused_local = local_fusion(x, None, blocks.local)
        graph_in, graph_sec = fused_local, None
    else:
        primary, secondary, mask1, bits1 = _select(x, blocks, blocks.select1,
                                                   rng)
        fused_local = local_fusion(primary, secondary, blocks.local)
        primary, graph_sec, mask2, bits2 = _select(fused_local, blocks,
                                                   blocks.select2, rng)
        graph_in = primary

    # node fusion: [B, C', N, L'] -> [B, C', L']
    nodes_first = graph_in.transpose(0, 2, 1, 3)       # [B, N, C', L']
    if blocks.graph_mode == "adaptive":
        fused_graph, adjacency = modality_node_fusion(nodes_first,
                                                      blocks.graph)
        diag["adjacency"] = adjacency
    else:
        fused_graph = nodes_first.mean(axis=1)
    if graph_sec is not None:
        fused_graph = fused_graph + graph_sec.mean(axis=2)  # node-mean, same C

    uniform = blocks.attention_mode == "uniform"
    attended = global_fusion(fused_graph, None, blocks.attn1,
                             uniform_mix=uniform)

    if no_selection:
        out = global_fusion(attended, None, blocks.attn2,
                            uniform_mix=uniform)
    else:
        primary, secondary, mask3, bits3 = _select(attended, blocks,
                                                   blocks.select3, rng)
        out = global_fusion(primary, secondary, blocks.attn2,
                            uniform_mix=uniform)
        routes = np.stack([bits1, bits2, bits3], axis=1)
        diag["masks"] = (mask1, mask2, mask3)

    pooled = out.mean(axis=2)                          # [B, C_final]
    if single:
        pooled = pooled.reshape(pooled.data.shape[1:])
        routes = routes[0]
    if with_diagnostics:
        return pooled, routes, diag
    return pooled, routes
