"""Windowed multi-head self-attention with contextual relative signal encoding.

Two interchangeable engines compute the same function:

* ``vanilla`` materializes the full (N, N, heads) coefficient array, the
  reference for equivalence and memory accounting;
* ``streaming`` accumulates each query's softmax numerator and denominator in
  a single pass over keys (after a first pass for the row max) and stores only
  per-row (max, denominator) for the backward pass, which recomputes each
  exponential on the fly.

Pairwise signal differences index per-channel learnable look-up tables; the
quantizer spans twice the window height for position channels and [-2, 2] for
color/normal channels.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .autodiff import Parameter, ShapeError, Tape, Var, _accum, truncated_normal
from .tracker import NULL_TRACKER, TAG_COEFF, TAG_PROJ, TAG_STREAM

CHANNEL_POSITION = "position"
CHANNEL_COLOR = "color"
CHANNEL_NORMAL = "normal"

DEFAULT_POSITION_TABLE_LENGTH = 4
DEFAULT_SIGNAL_TABLE_LENGTH = 16

ENGINES = ("vanilla", "streaming")


def channel_kinds(m: int) -> list[str]:
    """Signal layout: 3 position channels, 3 color, optionally 3 normal."""
    if m == 6:
        return [CHANNEL_POSITION] * 3 + [CHANNEL_COLOR] * 3
    if m == 9:
        return [CHANNEL_POSITION] * 3 + [CHANNEL_COLOR] * 3 + [CHANNEL_NORMAL] * 3
    raise ValueError(f"unsupported signal width m={m}")


class CrseTables:
    """Packed per-channel look-up tables for the Q/K/V bias and value offsets.

    Channel l occupies rows ``offsets[l] : offsets[l] + lengths[l]`` of each
    packed (total_rows, heads, head_dim) table tensor.
    """

    def __init__(self, kinds, lengths, quat, minquat, q_tab, k_tab, v_tab):
        self.kinds = list(kinds)
        self.lengths = np.asarray(lengths, dtype=np.int64)
        self.offsets = np.concatenate(([0], np.cumsum(self.lengths)))[:-1].astype(np.int64)
        self.quat = np.asarray(quat, dtype=np.float64)
        self.minquat = np.asarray(minquat, dtype=np.float64)
        self.q_tab = q_tab
        self.k_tab = k_tab
        self.v_tab = v_tab

    @property
    def num_channels(self) -> int:
        return len(self.kinds)

    @property
    def num_heads(self) -> int:
        return self.q_tab.data.shape[1]

    @property
    def head_dim(self) -> int:
        return self.q_tab.data.shape[2]

    @property
    def param_count(self) -> int:
        return self.q_tab.data.size + self.k_tab.data.size + self.v_tab.data.size

    def quantize_index(self, delta: float, channel: int) -> int:
        """Table index for one signal-difference component, clamped in range."""
        length = int(self.lengths[channel])
        idx = int(np.floor((delta - self.minquat[channel]) * length / self.quat[channel]))
        return min(max(idx, 0), length - 1)

    def embed(self, delta_sig, head: int, which: str) -> np.ndarray:
        """Sum of the indexed table rows over all signal channels."""
        tab = {"Q": self.q_tab, "K": self.k_tab, "V": self.v_tab}[which].data
        out = np.zeros(tab.shape[2], dtype=tab.dtype)
        for l, delta in enumerate(np.asarray(delta_sig, dtype=np.float64)):
            row = self.offsets[l] + self.quantize_index(float(delta), l)
            out += tab[row, head]
        return out

    def parameters(self) -> list[Parameter]:
        return [self.q_tab, self.k_tab, self.v_tab]


def make_crse_tables(
    m: int,
    num_heads: int,
    head_dim: int,
    window_height: float,
    *,
    name: str = "tables",
    dtype=np.float64,
    position_length: int = DEFAULT_POSITION_TABLE_LENGTH,
    signal_length: int = DEFAULT_SIGNAL_TABLE_LENGTH,
) -> CrseTables:
    """Zero-initialized tables (cRSE starts inert) with per-channel quantizers."""
    kinds = channel_kinds(m)
    lengths = [position_length if k == CHANNEL_POSITION else signal_length for k in kinds]
    quat = [2.0 * window_height if k == CHANNEL_POSITION else 2.0 for k in kinds]
    minquat = [-window_height if k == CHANNEL_POSITION else -1.0 for k in kinds]
    total = int(np.sum(lengths))
    shape = (total, num_heads, head_dim)
    return CrseTables(
        kinds,
        lengths,
        quat,
        minquat,
        Parameter(np.zeros(shape), name=f"{name}.q", dtype=dtype),
        Parameter(np.zeros(shape), name=f"{name}.k", dtype=dtype),
        Parameter(np.zeros(shape), name=f"{name}.v", dtype=dtype),
    )


@dataclass
class AttentionParams:
    q: Parameter  # (C, C)
    k: Parameter
    v: Parameter
    tables: CrseTables
    num_heads: int

    @property
    def channels(self) -> int:
        return self.q.data.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads

    def parameters(self) -> list[Parameter]:
        return [self.q, self.k, self.v] + self.tables.parameters()


def make_attention_params(
    channels: int,
    num_heads: int,
    m: int,
    window_height: float,
    rng: np.random.Generator,
    *,
    name: str = "attn",
    dtype=np.float64,
) -> AttentionParams:
    if channels % num_heads != 0:
        raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
    head_dim = channels // num_heads
    def proj(tag):
        return Parameter(truncated_normal(rng, (channels, channels)), name=f"{name}.{tag}", dtype=dtype)
    tables = make_crse_tables(m, num_heads, head_dim, window_height, name=f"{name}.tables", dtype=dtype)
    return AttentionParams(proj("q"), proj("k"), proj("v"), tables, num_heads)


@dataclass(frozen=True)
class WindowBatch:
    """One window's feature rows and the matching representative signals."""

    features: np.ndarray  # (N, C)
    signals: np.ndarray  # (N, m)

    def __post_init__(self):
        if self.features.ndim != 2 or self.signals.ndim != 2:
            raise ShapeError("window features and signals must be rank-2")
        if self.features.shape[0] != self.signals.shape[0]:
            raise ShapeError("feature/signal row counts disagree")
        if self.features.shape[0] == 0:
            raise ValueError("window is empty")


class AttentionContext:
    """Buffers retained between an engine's forward and backward pass."""

    def __init__(self, batch, params, engine, tracker, q, k, v, out_heads,
                 coeff=None, rowmax=None, rowden=None):
        self.batch = batch
        self.params = params
        self.engine = engine
        self.tracker = tracker
        self.q = q
        self.k = k
        self.v = v
        self.out_heads = out_heads
        self.coeff = coeff
        self.rowmax = rowmax
        self.rowden = rowden
        self.released = False

    def release(self):
        if self.released:
            return
        for buf in (self.q, self.k, self.v, self.coeff, self.rowmax, self.rowden):
            if buf is not None:
                self.tracker.release(buf)
        self.released = True


@dataclass
class AttentionGrads:
    d_features: np.ndarray
    d_q: np.ndarray
    d_k: np.ndarray
    d_v: np.ndarray
    d_q_tab: np.ndarray
    d_k_tab: np.ndarray
    d_v_tab: np.ndarray


def softmax_rows_inplace(coeff: np.ndarray) -> None:
    """Row-stabilized softmax over the key axis of an (N, N, heads) array."""
    coeff -= coeff.max(axis=1, keepdims=True)
    np.exp(coeff, out=coeff)
    coeff /= coeff.sum(axis=1, keepdims=True)


def _table_args(tables: CrseTables):
    return (tables.quat, tables.minquat, tables.lengths, tables.offsets)


def attention_forward(
    batch: WindowBatch,
    params: AttentionParams,
    engine: str = "streaming",
    tracker=NULL_TRACKER,
) -> tuple[np.ndarray, AttentionContext]:
    """Run one window; returns the (N, C) output and the backward context."""
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}; expected one of {ENGINES}")
    n = batch.features.shape[0]
    nh = params.num_heads
    d = params.head_dim
    dtype = params.q.data.dtype
    f = np.ascontiguousarray(batch.features, dtype=dtype)
    sig = np.ascontiguousarray(batch.signals, dtype=dtype)
    tables = params.tables
    inv_sqrt_d = 1.0 / np.sqrt(d)

    q = tracker.alloc(TAG_PROJ, (n, nh, d), dtype)
    k = tracker.alloc(TAG_PROJ, (n, nh, d), dtype)
    v = tracker.alloc(TAG_PROJ, (n, nh, d), dtype)
    q[...] = (f @ params.q.data).reshape(n, nh, d)
    k[...] = (f @ params.k.data).reshape(n, nh, d)
    v[...] = (f @ params.v.data).reshape(n, nh, d)

    out_heads = np.zeros((n, nh, d), dtype=dtype)
    if engine == "vanilla":
        coeff = tracker.alloc(TAG_COEFF, (n, n, nh), dtype)
        _kernels.fill_logits(
            q, k, sig, tables.q_tab.data, tables.k_tab.data,
            *_table_args(tables), inv_sqrt_d, coeff,
        )
        softmax_rows_inplace(coeff)
        _kernels.vanilla_output(coeff, v, sig, tables.v_tab.data, *_table_args(tables), out_heads)
        ctx = AttentionContext(batch, params, engine, tracker, q, k, v, out_heads, coeff=coeff)
    else:
        rowmax = tracker.alloc(TAG_STREAM, (n, nh), dtype)
        rowden = tracker.alloc(TAG_STREAM, (n, nh), dtype)
        _kernels.stream_forward(
            q, k, v, sig, tables.q_tab.data, tables.k_tab.data, tables.v_tab.data,
            *_table_args(tables), inv_sqrt_d, out_heads, rowmax, rowden,
        )
        ctx = AttentionContext(batch, params, engine, tracker, q, k, v, out_heads,
                               rowmax=rowmax, rowden=rowden)
    return out_heads.reshape(n, nh * d), ctx


def attention_backward_ctx(ctx: AttentionContext, grad_out: np.ndarray) -> AttentionGrads:
    """Analytic gradients for features, projections, and all three table families."""
    if ctx.released:
        raise RuntimeError("attention backward called without a live forward context")
    params = ctx.params
    tables = params.tables
    n = ctx.q.shape[0]
    nh = params.num_heads
    d = params.head_dim
    dtype = ctx.q.dtype
    f = np.ascontiguousarray(ctx.batch.features, dtype=dtype)
    sig = np.ascontiguousarray(ctx.batch.signals, dtype=dtype)
    g = np.ascontiguousarray(grad_out, dtype=dtype).reshape(n, nh, d)
    inv_sqrt_d = 1.0 / np.sqrt(d)

    dq = np.zeros((n, nh, d), dtype=dtype)
    dk = np.zeros((n, nh, d), dtype=dtype)
    dv = np.zeros((n, nh, d), dtype=dtype)
    dtq = np.zeros_like(tables.q_tab.data)
    dtk = np.zeros_like(tables.k_tab.data)
    dtv = np.zeros_like(tables.v_tab.data)

    if ctx.engine == "vanilla":
        _kernels.vanilla_backward(
            ctx.coeff, ctx.q, ctx.k, ctx.v, sig,
            tables.q_tab.data, tables.k_tab.data, tables.v_tab.data,
            *_table_args(tables), inv_sqrt_d, ctx.out_heads, g,
            dq, dk, dv, dtq, dtk, dtv,
        )
    else:
        _kernels.stream_backward(
            ctx.q, ctx.k, ctx.v, sig,
            tables.q_tab.data, tables.k_tab.data, tables.v_tab.data,
            *_table_args(tables), inv_sqrt_d, ctx.rowmax, ctx.rowden, ctx.out_heads, g,
            dq, dk, dv, dtq, dtk, dtv,
        )

    dq2 = dq.reshape(n, nh * d)
    dk2 = dk.reshape(n, nh * d)
    dv2 = dv.reshape(n, nh * d)
    d_features = dq2 @ params.q.data.T + dk2 @ params.k.data.T + dv2 @ params.v.data.T
    return AttentionGrads(
        d_features=d_features,
        d_q=f.T @ dq2,
        d_k=f.T @ dk2,
        d_v=f.T @ dv2,
        d_q_tab=dtq,
        d_k_tab=dtk,
        d_v_tab=dtv,
    )


def attention_vanilla(batch: WindowBatch, params: AttentionParams, tracker=NULL_TRACKER) -> np.ndarray:
    out, ctx = attention_forward(batch, params, engine="vanilla", tracker=tracker)
    ctx.release()
    return out


def attention_streaming(batch: WindowBatch, params: AttentionParams, tracker=NULL_TRACKER) -> np.ndarray:
    out, ctx = attention_forward(batch, params, engine="streaming", tracker=tracker)
    ctx.release()
    return out


def attention_backward(
    batch: WindowBatch,
    params: AttentionParams,
    upstream_grad: np.ndarray,
    engine: str = "streaming",
    tracker=NULL_TRACKER,
) -> AttentionGrads:
    _, ctx = attention_forward(batch, params, engine=engine, tracker=tracker)
    grads = attention_backward_ctx(ctx, upstream_grad)
    ctx.release()
    return grads


def _accum_param_grads(grads, params: AttentionParams, ag: AttentionGrads):
    _accum(grads, params.q, ag.d_q)
    _accum(grads, params.k, ag.d_k)
    _accum(grads, params.v, ag.d_v)
    _accum(grads, params.tables.q_tab, ag.d_q_tab)
    _accum(grads, params.tables.k_tab, ag.d_k_tab)
    _accum(grads, params.tables.v_tab, ag.d_v_tab)


def window_attention(
    tape: Tape,
    features: Var,
    signals: np.ndarray,
    params: AttentionParams,
    engine: str = "streaming",
    tracker=NULL_TRACKER,
) -> Var:
    """Tape op: attention over a single window."""
    batch = WindowBatch(features.data, np.asarray(signals))
    out_data, ctx = attention_forward(batch, params, engine=engine, tracker=tracker)
    out = Var(out_data)

    def bwd(grads):
        g = grads.get(out)
        try:
            if g is None:
                return
            ag = attention_backward_ctx(ctx, g)
            _accum(grads, features, ag.d_features)
            _accum_param_grads(grads, params, ag)
        finally:
            ctx.release()

    tape.record(bwd)
    return out


def run_windows(
    tape: Tape,
    features: Var,
    signals: np.ndarray,
    partition,
    params: AttentionParams,
    engine: str = "streaming",
    tracker=NULL_TRACKER,
    threads: int = 1,
) -> Var:
    """Apply the engine independently per window and scatter results back.

    Windows are processed in sorted window-coordinate order; backward runs the
    same order reversed, so gradient accumulation is deterministic.  Forward
    may fan out over a thread pool (window outputs land in disjoint rows).
    """
    signals = np.asarray(signals)
    items = sorted(partition.windows.items())
    idx_lists = [idx for _, idx in items]

    def fwd(idx):
        batch = WindowBatch(features.data[idx], signals[idx])
        return attention_forward(batch, params, engine=engine, tracker=tracker)

    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fwd, idx_lists))
    else:
        results = [fwd(idx) for idx in idx_lists]

    out_data = np.zeros_like(features.data)
    for idx, (out_w, _) in zip(idx_lists, results):
        out_data[idx] = out_w
    out = Var(out_data)
    contexts = [ctx for _, ctx in results]

    def bwd(grads):
        g = grads.get(out)
        try:
            if g is None:
                return
            df = np.zeros_like(features.data)
            for idx, ctx in zip(reversed(idx_lists), reversed(contexts)):
                ag = attention_backward_ctx(ctx, g[idx])
                df[idx] += ag.d_features
                _accum_param_grads(grads, params, ag)
            _accum(grads, features, df)
        finally:
            for ctx in contexts:
                ctx.release()

    tape.record(bwd)
    return out
