"""Five-stage sparse-voxel encoder and the upsample-skip segmentation decoder.

Stage l runs paired regular/shifted window-attention blocks on level l of the
hierarchy (an odd depth ends with one extra regular block) and KNN max-pooling
carries features to level l+1.  The decoder walks back up with nearest-parent
feature assignment, a width-matching linear map, and encoder skip additions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, make_attention_params, run_windows
from .autodiff import (
    Parameter,
    Tape,
    Var,
    _accum,
    add,
    batch_norm,
    gather_rows,
    layer_norm,
    linear,
    mlp_block,
    relu,
    truncated_normal,
)
from .config import BackboneConfig
from .pointcloud import PointCloud
from .tracker import NULL_TRACKER
from .voxelgrid import (
    SparseVoxelLevel,
    VoxelHierarchy,
    WindowPartition,
    build_hierarchy,
    partition_windows,
    voxelize,
)

MLP_RATIO = 4
KNN_POOL_K = 16
BN_MOMENTUM = 0.9

_CONV_OFFSETS = [
    (dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
]
CONV_CENTER_TAP = _CONV_OFFSETS.index((0, 0, 0))


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class EmbedParams:
    conv_w: Parameter  # (27, m, C1)
    bn_gamma: Parameter
    bn_beta: Parameter
    bn_mean: np.ndarray
    bn_var: np.ndarray

    def parameters(self):
        return [self.conv_w, self.bn_gamma, self.bn_beta]


@dataclass
class BlockParams:
    ln1_gamma: Parameter
    ln1_beta: Parameter
    attn: AttentionParams
    ln2_gamma: Parameter
    ln2_beta: Parameter
    mlp_w1: Parameter
    mlp_b1: Parameter
    mlp_w2: Parameter
    mlp_b2: Parameter

    def parameters(self):
        return (
            [self.ln1_gamma, self.ln1_beta]
            + self.attn.parameters()
            + [self.ln2_gamma, self.ln2_beta, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]
        )


@dataclass
class DownsampleParams:
    ln_gamma: Parameter
    ln_beta: Parameter
    fc_w: Parameter
    fc_b: Parameter

    def parameters(self):
        return [self.ln_gamma, self.ln_beta, self.fc_w, self.fc_b]


@dataclass
class BackboneParams:
    config: BackboneConfig
    num_signal_channels: int
    embed: EmbedParams
    stages: list  # list[list[BlockParams]]
    downs: list  # list[DownsampleParams], one per stage transition

    def parameters(self) -> list[Parameter]:
        out = list(self.embed.parameters())
        for blocks in self.stages:
            for block in blocks:
                out.extend(block.parameters())
        for down in self.downs:
            out.extend(down.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {"embed.bn_mean": self.embed.bn_mean, "embed.bn_var": self.embed.bn_var}


@dataclass
class DecoderParams:
    up_w: list  # transition l+1 -> l, (C_{l+1}, C_l)
    up_b: list
    head_w: Parameter
    head_b: Parameter
    interpolation: str = "nearest"  # or "idw"

    def parameters(self):
        return list(self.up_w) + list(self.up_b) + [self.head_w, self.head_b]


def build_backbone_params(
    config: BackboneConfig, m: int, rng: np.random.Generator, dtype=np.float64
) -> BackboneParams:
    c1 = config.channels[0]
    embed = EmbedParams(
        conv_w=Parameter(truncated_normal(rng, (27, m, c1)), name="embed.conv_w", dtype=dtype),
        bn_gamma=Parameter(np.ones(c1), name="embed.bn_gamma", dtype=dtype),
        bn_beta=Parameter(np.zeros(c1), name="embed.bn_beta", dtype=dtype),
        bn_mean=np.zeros(c1, dtype=dtype),
        bn_var=np.ones(c1, dtype=dtype),
    )
    stages = []
    for s in range(len(config.channels)):
        c = config.channels[s]
        blocks = []
        for b in range(config.depths[s]):
            prefix = f"stage{s + 1}.block{b}"
            attn = make_attention_params(
                c, config.heads[s], m, config.window_height_at(s), rng,
                name=f"{prefix}.attn", dtype=dtype,
            )
            blocks.append(
                BlockParams(
                    ln1_gamma=Parameter(np.ones(c), name=f"{prefix}.ln1_gamma", dtype=dtype),
                    ln1_beta=Parameter(np.zeros(c), name=f"{prefix}.ln1_beta", dtype=dtype),
                    attn=attn,
                    ln2_gamma=Parameter(np.ones(c), name=f"{prefix}.ln2_gamma", dtype=dtype),
                    ln2_beta=Parameter(np.zeros(c), name=f"{prefix}.ln2_beta", dtype=dtype),
                    mlp_w1=Parameter(
                        truncated_normal(rng, (c, MLP_RATIO * c)), name=f"{prefix}.mlp_w1", dtype=dtype
                    ),
                    mlp_b1=Parameter(np.zeros(MLP_RATIO * c), name=f"{prefix}.mlp_b1", dtype=dtype),
                    mlp_w2=Parameter(
                        truncated_normal(rng, (MLP_RATIO * c, c)), name=f"{prefix}.mlp_w2", dtype=dtype
                    ),
                    mlp_b2=Parameter(np.zeros(c), name=f"{prefix}.mlp_b2", dtype=dtype),
                )
            )
        stages.append(blocks)
    downs = []
    for s in range(len(config.channels) - 1):
        c_in, c_out = config.channels[s], config.channels[s + 1]
        downs.append(
            DownsampleParams(
                ln_gamma=Parameter(np.ones(c_in), name=f"down{s + 1}.ln_gamma", dtype=dtype),
                ln_beta=Parameter(np.zeros(c_in), name=f"down{s + 1}.ln_beta", dtype=dtype),
                fc_w=Parameter(truncated_normal(rng, (c_in, c_out)), name=f"down{s + 1}.fc_w", dtype=dtype),
                fc_b=Parameter(np.zeros(c_out), name=f"down{s + 1}.fc_b", dtype=dtype),
            )
        )
    return BackboneParams(config, m, embed, stages, downs)


def build_decoder_params(
    config: BackboneConfig,
    num_classes: int,
    rng: np.random.Generator,
    dtype=np.float64,
    interpolation: str = "nearest",
) -> DecoderParams:
    if interpolation not in ("nearest", "idw"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    up_w, up_b = [], []
    for l in range(len(config.channels) - 1, 0, -1):
        c_coarse, c_fine = config.channels[l], config.channels[l - 1]
        up_w.append(Parameter(truncated_normal(rng, (c_coarse, c_fine)), name=f"decoder.up{l}_w", dtype=dtype))
        up_b.append(Parameter(np.zeros(c_fine), name=f"decoder.up{l}_b", dtype=dtype))
    head_w = Parameter(
        truncated_normal(rng, (config.channels[0], num_classes)), name="decoder.head_w", dtype=dtype
    )
    head_b = Parameter(np.zeros(num_classes), name="decoder.head_b", dtype=dtype)
    return DecoderParams(up_w, up_b, head_w, head_b, interpolation)


def named_parameters(*param_groups) -> dict[str, Parameter]:
    out: dict[str, Parameter] = {}
    for group in param_groups:
        for p in group.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
    return out


# ---------------------------------------------------------------------------
# operations


def sparse_conv3(tape: Tape, x: Var, w: Parameter, level: SparseVoxelLevel) -> Var:
    """Submanifold 3x3x3 convolution: gathers existing neighbor voxels only."""
    cmap = level.coord_map()
    coords = level.coords
    pairs = []
    for tap, offset in enumerate(_CONV_OFFSETS):
        nbr = coords + np.array(offset, dtype=np.int64)
        dst, src = [], []
        for i in range(coords.shape[0]):
            j = cmap.get(tuple(nbr[i]))
            if j is not None:
                dst.append(i)
                src.append(j)
        if dst:
            pairs.append((tap, np.array(dst, dtype=np.int64), np.array(src, dtype=np.int64)))
    c_out = w.data.shape[2]
    out_data = np.zeros((coords.shape[0], c_out), dtype=x.data.dtype)
    for tap, dst, src in pairs:
        out_data[dst] += x.data[src] @ w.data[tap]
    out = Var(out_data)

    def bwd(grads):
        g = grads.get(out)
        if g is None:
            return
        dx = np.zeros_like(x.data)
        dw = np.zeros_like(w.data)
        for tap, dst, src in reversed(pairs):
            dx[src] += g[dst] @ w.data[tap].T
            dw[tap] += x.data[src].T @ g[dst]
        _accum(grads, x, dx)
        _accum(grads, w, dw)

    tape.record(bwd)
    return out


def embed_input_features(level: SparseVoxelLevel) -> np.ndarray:
    """Per-voxel raw input: positional offset to the cell center, then the
    non-positional signal components."""
    offsets = level.rep_points - level.centers()
    return np.concatenate([offsets, level.rep_signals[:, 3:]], axis=1)


def initial_embed(tape: Tape, level: SparseVoxelLevel, embed: EmbedParams, training: bool) -> Var:
    x = Var(embed_input_features(level).astype(embed.conv_w.data.dtype))
    h = sparse_conv3(tape, x, embed.conv_w, level)
    h = batch_norm(
        tape, h, embed.bn_gamma, embed.bn_beta, embed.bn_mean, embed.bn_var,
        training=training, momentum=BN_MOMENTUM,
    )
    return relu(tape, h)


def window_block(
    tape: Tape,
    x: Var,
    signals: np.ndarray,
    partition: WindowPartition,
    block: BlockParams,
    engine: str = "streaming",
    tracker=NULL_TRACKER,
    threads: int = 1,
) -> Var:
    """x + MSA(LN(x)) followed by x + MLP(LN(x)); signals pass through."""
    h = layer_norm(tape, x, block.ln1_gamma, block.ln1_beta)
    attn_out = run_windows(tape, h, signals, partition, block.attn, engine, tracker, threads)
    x = add(tape, x, attn_out)
    h2 = layer_norm(tape, x, block.ln2_gamma, block.ln2_beta)
    x = add(tape, x, mlp_block(tape, h2, block.mlp_w1, block.mlp_b1, block.mlp_w2, block.mlp_b2))
    return x


def knn_neighbor_sets(
    fine_coords: np.ndarray, fine_centers: np.ndarray, coarse_centers: np.ndarray, k: int
) -> list[np.ndarray]:
    """For each coarse voxel: up to k nearest fine voxels by center distance,
    distance ties broken by lexicographically smallest fine coordinate."""
    k = min(k, fine_centers.shape[0])
    sets = []
    for center in coarse_centers:
        d2 = ((fine_centers - center) ** 2).sum(axis=1)
        order = np.lexsort((fine_coords[:, 2], fine_coords[:, 1], fine_coords[:, 0], d2))
        sets.append(order[:k].astype(np.int64))
    return sets


def max_pool_sets(tape: Tape, x: Var, sets: list[np.ndarray]) -> Var:
    """Channelwise max over each row set; grads route to the argmax rows."""
    n_out = len(sets)
    width = x.data.shape[1]
    out_data = np.empty((n_out, width), dtype=x.data.dtype)
    arg_rows = np.empty((n_out, width), dtype=np.int64)
    cols = np.arange(width)
    for r, rows in enumerate(sets):
        block = x.data[rows]
        am = block.argmax(axis=0)
        out_data[r] = block[am, cols]
        arg_rows[r] = rows[am]
    out = Var(out_data)

    def bwd(grads):
        g = grads.get(out)
        if g is None:
            return
        dx = np.zeros_like(x.data)
        np.add.at(dx, (arg_rows.ravel(), np.tile(cols, n_out)), g.ravel())
        _accum(grads, x, dx)

    tape.record(bwd)
    return out


def knn_pool_downsample(
    tape: Tape,
    fine_features: Var,
    fine_level: SparseVoxelLevel,
    coarse_level: SparseVoxelLevel,
    down: DownsampleParams,
    k: int = KNN_POOL_K,
) -> Var:
    """LayerNorm + FC lift, then per coarse voxel a channelwise max over the
    lifted features of its k nearest fine voxels (all of them if fewer)."""
    if fine_level.num_voxels == 0:
        raise ValueError("cannot downsample from an empty level")
    lifted = linear(tape, layer_norm(tape, fine_features, down.ln_gamma, down.ln_beta),
                    down.fc_w, down.fc_b)
    sets = knn_neighbor_sets(fine_level.coords, fine_level.centers(), coarse_level.centers(), k)
    return max_pool_sets(tape, lifted, sets)


# ---------------------------------------------------------------------------
# encoder / decoder


@dataclass
class StageState:
    level: SparseVoxelLevel
    features: Var
    signals: np.ndarray


@dataclass
class PreparedScene:
    hierarchy: VoxelHierarchy
    partitions: list  # per level: (regular, shifted) WindowPartition pair


def prepare_scene(pc: PointCloud, config: BackboneConfig, seed: int) -> PreparedScene:
    base = voxelize(pc, config.finest_voxel_size, seed)
    hierarchy = build_hierarchy(base, len(config.channels), config.strides)
    partitions = [
        (
            partition_windows(level, config.window_sizes[s], shifted=False),
            partition_windows(level, config.window_sizes[s], shifted=True),
        )
        for s, level in enumerate(hierarchy.levels)
    ]
    return PreparedScene(hierarchy, partitions)


def encode_prepared(
    tape: Tape,
    prep: PreparedScene,
    params: BackboneParams,
    engine: str = "streaming",
    tracker=NULL_TRACKER,
    threads: int = 1,
    training: bool = True,
) -> list[StageState]:
    states: list[StageState] = []
    x = initial_embed(tape, prep.hierarchy.levels[0], params.embed, training)
    for s, blocks in enumerate(params.stages):
        level = prep.hierarchy.levels[s]
        regular, shifted = prep.partitions[s]
        signals = level.rep_signals
        if s > 0:
            x = knn_pool_downsample(tape, states[-1].features, prep.hierarchy.levels[s - 1],
                                    level, params.downs[s - 1])
        for b, block in enumerate(blocks):
            partition = shifted if b % 2 == 1 else regular
            x = window_block(tape, x, signals, partition, block, engine, tracker, threads)
        states.append(StageState(level, x, signals))
    return states


def encode(
    tape: Tape,
    pc: PointCloud,
    config: BackboneConfig,
    params: BackboneParams,
    seed: int,
    engine: str = "streaming",
    tracker=NULL_TRACKER,
    threads: int = 1,
    training: bool = True,
) -> list[StageState]:
    """Voxelize, build the hierarchy, and run all five stages."""
    prep = prepare_scene(pc, config, seed)
    return encode_prepared(tape, prep, params, engine, tracker, threads, training)


def _parent_rows(fine_level: SparseVoxelLevel, coarse_level: SparseVoxelLevel, stride: int) -> np.ndarray:
    cmap = coarse_level.coord_map()
    parents = np.floor_divide(fine_level.coords, stride)
    return np.array([cmap[tuple(p)] for p in parents], dtype=np.int64)


def _idw_gather(tape: Tape, x: Var, idx: np.ndarray, weights: np.ndarray) -> Var:
    out_data = np.zeros((idx.shape[0], x.data.shape[1]), dtype=x.data.dtype)
    for col in range(idx.shape[1]):
        out_data += weights[:, col:col + 1] * x.data[idx[:, col]]
    out = Var(out_data)

    def bwd(grads):
        g = grads.get(out)
        if g is None:
            return
        dx = np.zeros_like(x.data)
        for col in range(idx.shape[1]):
            np.add.at(dx, idx[:, col], weights[:, col:col + 1] * g)
        _accum(grads, x, dx)

    tape.record(bwd)
    return out


def decode_segmentation(
    tape: Tape,
    states: list[StageState],
    decoder: DecoderParams,
    strides,
    idw_neighbors: int = 3,
) -> Var:
    """Walk coarse-to-fine, adding encoder skips; returns finest-level logits."""
    x = states[-1].features
    for step, l in enumerate(range(len(states) - 1, 0, -1)):
        fine = states[l - 1]
        coarse = states[l]
        if decoder.interpolation == "nearest":
            rows = _parent_rows(fine.level, coarse.level, strides[l - 1])
            up = gather_rows(tape, x, rows)
        else:
            fine_centers = fine.level.centers()
            coarse_centers = coarse.level.centers()
            k = min(idw_neighbors, coarse.level.num_voxels)
            idx = np.empty((fine.level.num_voxels, k), dtype=np.int64)
            wts = np.empty((fine.level.num_voxels, k), dtype=np.float64)
            for r, center in enumerate(fine_centers):
                d = np.sqrt(((coarse_centers - center) ** 2).sum(axis=1))
                order = np.argsort(d)[:k]
                idx[r] = order
                w = 1.0 / (d[order] + 1e-8)
                wts[r] = w / w.sum()
            up = _idw_gather(tape, x, idx, wts.astype(x.data.dtype))
        projected = linear(tape, up, decoder.up_w[step], decoder.up_b[step])
        x = add(tape, projected, fine.features)
    return linear(tape, x, decoder.head_w, decoder.head_b)
