"""Runtime invariant suite behind ``voxwin selfcheck``.

Four property groups: engine equivalence, gradient checks against central
finite differences, window-partition coverage, and the kNN-pooling neighbor
oracle.  Every check prints a deterministic worst-case value for its seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import WindowBatch, attention_backward, attention_streaming, attention_vanilla, make_attention_params
from .autodiff import (
    Parameter,
    Tape,
    Var,
    finite_difference_gradient,
    layer_norm,
    mlp_block,
    relative_error,
)
from .backbone import knn_neighbor_sets
from .streams import substream_rng
from .voxelgrid import SparseVoxelLevel, partition_windows

EQUIVALENCE_TOL = 1e-10
GRADIENT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _random_level(rng: np.random.Generator, max_extent: int = 12, max_voxels: int = 120) -> SparseVoxelLevel:
    n = int(rng.integers(1, max_voxels))
    coords = np.unique(rng.integers(-max_extent, max_extent, size=(n, 3)), axis=0)
    k = coords.shape[0]
    size = 0.04
    reps = (coords + rng.uniform(0.0, 1.0, size=(k, 3))) * size
    signals = np.concatenate([reps, rng.uniform(-1, 1, size=(k, 3))], axis=1)
    return SparseVoxelLevel(
        level=1, voxel_size=size, coords=coords, rep_points=reps,
        rep_signals=signals, rep_indices=np.arange(k, dtype=np.int64),
    )


def _random_window(rng, n, c, nh, m, height):
    params = make_attention_params(c, nh, m, height, rng)
    for t in params.tables.parameters():
        t.data[...] = rng.normal(0.0, 0.2, t.data.shape)
    f = rng.normal(0.0, 1.0, (n, c))
    pos = rng.uniform(0.0, height, (n, 3))
    rest = rng.uniform(-1.0, 1.0, (n, m - 3))
    return WindowBatch(f, np.concatenate([pos, rest], axis=1)), params


def check_engine_equivalence(seed: int, cases: int = 25) -> CheckResult:
    rng = substream_rng(seed, "selfcheck-equivalence")
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(1, 33))
        nh = int(rng.choice([1, 2, 4]))
        c = nh * int(rng.choice([4, 8]))
        m = int(rng.choice([6, 9]))
        batch, params = _random_window(rng, n, c, nh, m, height=0.2)
        worst = max(worst, relative_error(attention_vanilla(batch, params),
                                          attention_streaming(batch, params)))
    passed = worst < EQUIVALENCE_TOL
    return CheckResult("engine-equivalence", passed,
                       f"max rel err {worst:.3e} over {cases} windows (tol {EQUIVALENCE_TOL:.0e})")


def check_gradients(seed: int, inject_fault: bool = False) -> CheckResult:
    rng = substream_rng(seed, "selfcheck-gradients")
    worst = 0.0

    # attention: every parameter family
    batch, params = _random_window(rng, n=5, c=8, nh=2, m=6, height=0.2)
    g = rng.normal(0.0, 1.0, (5, 8))
    grads = attention_backward(batch, params, g, engine="streaming")
    if inject_fault:
        grads.d_k_tab[0, 0, 0] += 0.5
    pairs = [
        (params.q.data, grads.d_q), (params.k.data, grads.d_k), (params.v.data, grads.d_v),
        (params.tables.q_tab.data, grads.d_q_tab),
        (params.tables.k_tab.data, grads.d_k_tab),
        (params.tables.v_tab.data, grads.d_v_tab),
    ]
    for target, analytic in pairs:
        orig = target.copy()

        def loss(arr, target=target):
            target[...] = arr
            value = float((attention_streaming(batch, params) * g).sum())
            return value

        fd = finite_difference_gradient(loss, orig.copy())
        target[...] = orig
        worst = max(worst, relative_error(analytic, fd))

    # layer norm
    x = Var(rng.normal(0.0, 1.0, (6, 10)))
    gamma = Parameter(rng.normal(1.0, 0.1, 10), name="g")
    beta = Parameter(rng.normal(0.0, 0.1, 10), name="b")
    up = rng.normal(0.0, 1.0, (6, 10))

    def ln_loss(arr):
        gamma.data[...] = arr
        tape = Tape()
        return float((layer_norm(tape, x, gamma, beta).data * up).sum())

    orig = gamma.data.copy()
    fd = finite_difference_gradient(ln_loss, orig.copy())
    gamma.data[...] = orig
    tape = Tape()
    out = layer_norm(tape, x, gamma, beta)
    gamma.zero_grad()
    tape.backward(out, up)
    worst = max(worst, relative_error(gamma.grad, fd))

    # mlp
    w1 = Parameter(rng.normal(0.0, 0.3, (6, 12)), name="w1")
    b1 = Parameter(np.zeros(12), name="b1")
    w2 = Parameter(rng.normal(0.0, 0.3, (12, 6)), name="w2")
    b2 = Parameter(np.zeros(6), name="b2")
    xin = Var(rng.normal(0.0, 1.0, (4, 6)))
    upm = rng.normal(0.0, 1.0, (4, 6))

    def mlp_loss(arr):
        w1.data[...] = arr
        tape = Tape()
        return float((mlp_block(tape, xin, w1, b1, w2, b2).data * upm).sum())

    orig = w1.data.copy()
    fd = finite_difference_gradient(mlp_loss, orig.copy())
    w1.data[...] = orig
    tape = Tape()
    out = mlp_block(tape, xin, w1, b1, w2, b2)
    w1.zero_grad()
    tape.backward(out, upm)
    worst = max(worst, relative_error(w1.grad, fd))

    passed = worst < GRADIENT_TOL
    return CheckResult("gradient-check", passed,
                       f"max rel err {worst:.3e} vs central differences (tol {GRADIENT_TOL:.0e})")


def check_partition_coverage(seed: int, grids: int = 50) -> CheckResult:
    rng = substream_rng(seed, "selfcheck-partition")
    for _ in range(grids):
        level = _random_level(rng)
        m = int(rng.integers(1, 9))
        for shifted in (False, True):
            part = partition_windows(level, m, shifted)
            rows = np.concatenate([idx for idx in part.windows.values()])
            if sorted(rows.tolist()) != list(range(level.num_voxels)):
                return CheckResult("partition-coverage", False,
                                   f"voxel covered != exactly once (M={m}, shifted={shifted})")
    return CheckResult("partition-coverage", True,
                       f"{grids} random grids x 2 partitions cover each voxel exactly once")


def check_knn_oracle(seed: int, cases: int = 10) -> CheckResult:
    rng = substream_rng(seed, "selfcheck-knn")
    for _ in range(cases):
        fine = _random_level(rng)
        coarse_centers = rng.uniform(fine.centers().min(), fine.centers().max(), size=(6, 3))
        k = int(rng.integers(1, 20))
        sets = knn_neighbor_sets(fine.coords, fine.centers(), coarse_centers, k)
        centers = fine.centers()
        for c_row, got in enumerate(sets):
            keyed = sorted(
                range(fine.num_voxels),
                key=lambda r: (
                    float(((centers[r] - coarse_centers[c_row]) ** 2).sum()),
                    tuple(fine.coords[r]),
                ),
            )
            want = keyed[: min(k, fine.num_voxels)]
            if list(got) != want:
                return CheckResult("knn-oracle", False,
                                   f"neighbor set mismatch for coarse row {c_row}")
    return CheckResult("knn-oracle", True, f"{cases} random levels match the brute-force sort")


def run_all(seed: int, cases: int = 25, inject_fault: bool = False) -> list[CheckResult]:
    return [
        check_engine_equivalence(seed, cases=cases),
        check_gradients(seed, inject_fault=inject_fault),
        check_partition_coverage(seed, grids=max(10, cases)),
        check_knn_oracle(seed, cases=max(5, cases // 3)),
    ]
