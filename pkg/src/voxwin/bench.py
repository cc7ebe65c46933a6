"""Memory/time scaling benchmarks: vanilla vs streaming attention.

Sweeps run a stack of window-attention blocks (forward and backward) over a
synthetic surface-like scene with the instrumented allocator active.  Peak
workspace bytes are exact and reproducible; wall-clock time is reported but
never asserted.  Both engines see identical parameter seeds so their outputs
are comparable, and they are checked against each other as a correctness
piggyback.
"""

from __future__ import annotations

import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import DEFAULT_SEED
from .attention import make_attention_params
from .autodiff import Parameter, Tape, Var, relative_error, truncated_normal
from .backbone import MLP_RATIO, BlockParams, window_block
from .pointcloud import PointCloud
from .streams import substream_seed
from .tracker import TAG_COEFF, WorkspaceTracker
from .voxelgrid import partition_windows, voxelize

SWEEP_VARIABLES = ("width-ratio", "depth", "heads", "window-size")
ENGINE_NAMES = ("vanilla", "streaming")

CSV_HEADER = "variable,value,engine,rep,peak_bytes,alloc_count,time_ms,voxels,windows"


class SweepSpecError(ValueError):
    """Invalid sweep specification; message names the offending field."""


@dataclass(frozen=True)
class SceneSampler:
    """Surface-like occupancy: points near randomly oriented planar patches."""

    extent: float = 1.6  # meters per axis
    num_patches: int = 6
    patch_size: float = 1.2  # patch edge length, meters
    thickness: float = 0.004  # out-of-plane jitter, meters
    mode: str = "surface"  # or "uniform" (volume-filling contrast mode)
    seed: int = DEFAULT_SEED
    num_channels: int = 6


def sample_scene(sampler: SceneSampler, n_points: int) -> PointCloud:
    """Deterministic per sampler seed."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(sampler.seed)
    if sampler.mode == "uniform":
        pos = rng.uniform(0.0, sampler.extent, size=(n_points, 3))
    elif sampler.mode == "surface":
        centers = rng.uniform(0.2 * sampler.extent, 0.8 * sampler.extent,
                              size=(sampler.num_patches, 3))
        normals = rng.normal(size=(sampler.num_patches, 3))
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        # per-patch in-plane basis
        helper = np.where(np.abs(normals[:, :1]) < 0.9,
                          np.tile([1.0, 0.0, 0.0], (sampler.num_patches, 1)),
                          np.tile([0.0, 1.0, 0.0], (sampler.num_patches, 1)))
        u = np.cross(normals, helper)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        v = np.cross(normals, u)
        which = rng.integers(0, sampler.num_patches, size=n_points)
        a = rng.uniform(-0.5, 0.5, size=(n_points, 1)) * sampler.patch_size
        b = rng.uniform(-0.5, 0.5, size=(n_points, 1)) * sampler.patch_size
        w = rng.normal(0.0, sampler.thickness, size=(n_points, 1))
        pos = centers[which] + a * u[which] + b * v[which] + w * normals[which]
    else:
        raise ValueError(f"unknown sampler mode {sampler.mode!r}")
    color = rng.uniform(-1.0, 1.0, size=(n_points, 3))
    parts = [pos, color]
    if sampler.num_channels == 9:
        nrm = rng.normal(size=(n_points, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        parts.append(nrm)
    return PointCloud(np.concatenate(parts, axis=1))


def mean_window_occupancy(pc: PointCloud, voxel_size: float, window_size: int, seed: int) -> float:
    """Mean non-empty voxel count over the non-empty regular windows."""
    level = voxelize(pc, voxel_size, seed)
    part = partition_windows(level, window_size, shifted=False)
    sizes = [len(idx) for idx in part.windows.values()]
    return float(np.mean(sizes))


def occupancy_slope(sampler: SceneSampler, n_points: int, voxel_size: float, window_sizes) -> float:
    """Log-log slope of mean in-window occupancy versus window size."""
    pc = sample_scene(sampler, n_points)
    occ = [mean_window_occupancy(pc, voxel_size, m, sampler.seed) for m in window_sizes]
    slope, _ = np.polyfit(np.log(np.asarray(window_sizes, dtype=float)), np.log(occ), 1)
    return float(slope)


@dataclass(frozen=True)
class BenchBase:
    """Fixed part of a sweep: one level, a stack of attention blocks."""

    channels: int = 64
    heads: int = 4
    depth: int = 2
    window_size: int = 7
    voxel_size: float = 0.02
    n_points: int = 6000
    extent: float = 1.6
    num_patches: int = 6
    num_channels: int = 6
    dtype: str = "float64"  # "float32" enables the single-precision bench mode


@dataclass(frozen=True)
class SweepSpec:
    variable: str
    values: tuple
    base: BenchBase = field(default_factory=BenchBase)
    repetitions: int = 1
    engines: tuple = ENGINE_NAMES
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise SweepSpecError(f"variable: {self.variable!r} not in {SWEEP_VARIABLES}")
        if len(self.values) == 0:
            raise SweepSpecError("values: must be nonempty")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise SweepSpecError("values: must be strictly increasing")
        if self.repetitions < 1:
            raise SweepSpecError("repetitions: must be >= 1")
        bad = [e for e in self.engines if e not in ENGINE_NAMES]
        if bad or not self.engines:
            raise SweepSpecError(f"engines: must be a nonempty subset of {ENGINE_NAMES}")
        if self.base.dtype not in ("float64", "float32"):
            raise SweepSpecError("dtype: must be float64 or float32")
        for v in self.values:
            self.apply_value(v)  # raises on inconsistent derived configs

    def apply_value(self, value) -> BenchBase:
        base = self.base
        if self.variable == "width-ratio":
            channels = base.channels * value
            if abs(channels - round(channels)) > 1e-9:
                raise SweepSpecError(f"values: width ratio {value} gives non-integer channels")
            channels = int(round(channels))
            if channels % base.heads != 0:
                raise SweepSpecError(
                    f"values: width ratio {value} gives channels {channels} not divisible by heads {base.heads}"
                )
            return replace(base, channels=channels)
        if self.variable == "depth":
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise SweepSpecError(f"values: depth {value!r} must be a positive integer")
            return replace(base, depth=int(value))
        if self.variable == "heads":
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise SweepSpecError(f"values: head count {value!r} must be a positive integer")
            if base.channels % int(value) != 0:
                raise SweepSpecError(
                    f"values: head count {value} does not divide channels {base.channels}"
                )
            return replace(base, heads=int(value))
        if not isinstance(value, (int, np.integer)) or value < 1:
            raise SweepSpecError(f"values: window size {value!r} must be a positive integer")
        return replace(base, window_size=int(value))


@dataclass
class BenchRecord:
    variable: str
    value: float
    engine: str
    rep: int
    peak_bytes: int
    alloc_count: int
    time_ms: float | None
    voxels: int
    windows: int
    coeff_scalars: int = 0
    flagged: bool = False

    def csv_tuple(self):
        t = "" if self.time_ms is None else f"{self.time_ms:.3f}"
        return (self.variable, _fmt_value(self.value), self.engine, str(self.rep),
                str(self.peak_bytes), str(self.alloc_count), t,
                str(self.voxels), str(self.windows))


def _fmt_value(v) -> str:
    if float(v) == int(float(v)):
        return str(int(float(v)))
    return f"{float(v):.6g}"


def _build_stack(cfg: BenchBase, m: int, window_height: float, seed: int, dtype) -> list[BlockParams]:
    rng = np.random.default_rng(seed)
    blocks = []
    for b in range(cfg.depth):
        c = cfg.channels
        attn = make_attention_params(c, cfg.heads, m, window_height, rng,
                                     name=f"bench.block{b}.attn", dtype=dtype)
        blocks.append(BlockParams(
            ln1_gamma=Parameter(np.ones(c), name=f"bench.block{b}.ln1_gamma", dtype=dtype),
            ln1_beta=Parameter(np.zeros(c), name=f"bench.block{b}.ln1_beta", dtype=dtype),
            attn=attn,
            ln2_gamma=Parameter(np.ones(c), name=f"bench.block{b}.ln2_gamma", dtype=dtype),
            ln2_beta=Parameter(np.zeros(c), name=f"bench.block{b}.ln2_beta", dtype=dtype),
            mlp_w1=Parameter(truncated_normal(rng, (c, MLP_RATIO * c)), name=f"bench.block{b}.mlp_w1", dtype=dtype),
            mlp_b1=Parameter(np.zeros(MLP_RATIO * c), name=f"bench.block{b}.mlp_b1", dtype=dtype),
            mlp_w2=Parameter(truncated_normal(rng, (MLP_RATIO * c, c)), name=f"bench.block{b}.mlp_w2", dtype=dtype),
            mlp_b2=Parameter(np.zeros(c), name=f"bench.block{b}.mlp_b2", dtype=dtype),
        ))
    return blocks


@dataclass
class _RunOutput:
    out: np.ndarray
    peak_bytes: int
    alloc_count: int
    coeff_scalars: int
    elapsed_ms: float
    voxels: int
    windows: int


def _run_stack_once(cfg: BenchBase, engine: str, scene_seed: int, voxel_seed: int,
                    param_seed: int) -> _RunOutput:
    dtype = np.float64 if cfg.dtype == "float64" else np.float32
    sampler = SceneSampler(extent=cfg.extent, num_patches=cfg.num_patches,
                           seed=scene_seed, num_channels=cfg.num_channels)
    pc = sample_scene(sampler, cfg.n_points)
    level = voxelize(pc, cfg.voxel_size, voxel_seed)
    regular = partition_windows(level, cfg.window_size, shifted=False)
    shifted = partition_windows(level, cfg.window_size, shifted=True)
    height = cfg.window_size * cfg.voxel_size
    blocks = _build_stack(cfg, cfg.num_channels, height, param_seed, dtype)
    rng = np.random.default_rng(param_seed + 1)
    features = Var(rng.normal(0.0, 1.0, (level.num_voxels, cfg.channels)), dtype=dtype)
    signals = level.rep_signals.astype(dtype)

    tracker = WorkspaceTracker()
    tape = Tape()
    start = time.perf_counter()
    x = features
    for b, block in enumerate(blocks):
        partition = shifted if b % 2 == 1 else regular
        x = window_block(tape, x, signals, partition, block, engine=engine, tracker=tracker)
    tape.backward(x)
    elapsed_ms = (time.perf_counter() - start) * 1000.0
    return _RunOutput(
        out=x.data.copy(),
        peak_bytes=tracker.peak_bytes,
        alloc_count=tracker.alloc_count,
        coeff_scalars=tracker.total_scalars_for(TAG_COEFF),
        elapsed_ms=elapsed_ms,
        voxels=level.num_voxels,
        windows=regular.num_windows,
    )


def run_sweep(spec: SweepSpec, parallel: bool = False, progress=None) -> list[BenchRecord]:
    """All value x engine x repetition combinations, warm-up excluded from timing.

    ``parallel`` fans repetitions out over threads and drops wall-clock fields
    (memory counters stay exact).
    """
    tol = 1e-10 if spec.base.dtype == "float64" else 1e-4
    jobs = []
    for value in spec.values:
        cfg = spec.apply_value(value)
        for rep in range(spec.repetitions):
            jobs.append((value, cfg, rep))

    def run_job(job):
        value, cfg, rep = job
        scene_seed = substream_seed(spec.seed, "sampler") + rep
        voxel_seed = substream_seed(spec.seed, "voxelize")
        param_seed = substream_seed(spec.seed, "init")
        records = []
        outputs = {}
        for engine in spec.engines:
            if not parallel:
                _run_stack_once(cfg, engine, scene_seed, voxel_seed, param_seed)  # warm-up
            run = _run_stack_once(cfg, engine, scene_seed, voxel_seed, param_seed)
            outputs[engine] = run.out
            flagged = not np.isfinite(run.out).all()
            records.append(BenchRecord(
                variable=spec.variable,
                value=float(value),
                engine=engine,
                rep=rep,
                peak_bytes=run.peak_bytes,
                alloc_count=run.alloc_count,
                time_ms=None if parallel else run.elapsed_ms,
                voxels=run.voxels,
                windows=run.windows,
                coeff_scalars=run.coeff_scalars,
                flagged=flagged,
            ))
        if len(outputs) == 2:
            err = relative_error(outputs["vanilla"], outputs["streaming"])
            if err > tol:
                for rec in records:
                    rec.flagged = True
        return records

    if parallel:
        with ThreadPoolExecutor() as pool:
            grouped = list(pool.map(run_job, jobs))
    else:
        grouped = []
        for job in jobs:
            grouped.append(run_job(job))
            if progress is not None:
                progress(job[0], job[2])
    return [rec for group in grouped for rec in group]


_BASE_FIELDS = {
    "channels": int, "heads": int, "depth": int, "window_size": int,
    "voxel_size": float, "n_points": int, "extent": float,
    "num_patches": int, "m": int, "dtype": str,
}


def sweep_spec_from_mapping(mapping: dict, seed_override: int | None = None) -> SweepSpec:
    """Build a SweepSpec from a parsed key/value mapping, naming bad fields."""
    mapping = dict(mapping)
    if "variable" not in mapping:
        raise SweepSpecError("variable: field is required")
    variable = mapping.pop("variable")
    if "values" not in mapping:
        raise SweepSpecError("values: field is required")
    raw_values = mapping.pop("values")
    values = tuple(raw_values if isinstance(raw_values, list) else [raw_values])
    for v in values:
        if not isinstance(v, (int, float)):
            raise SweepSpecError(f"values: expected numbers, got {v!r}")
    repetitions = mapping.pop("repetitions", 1)
    if not isinstance(repetitions, int):
        raise SweepSpecError(f"repetitions: expected an integer, got {repetitions!r}")
    raw_engines = mapping.pop("engines", list(ENGINE_NAMES))
    engines = tuple(raw_engines if isinstance(raw_engines, list) else [raw_engines])
    seed = mapping.pop("seed", DEFAULT_SEED)
    if not isinstance(seed, int):
        raise SweepSpecError(f"seed: expected an integer, got {seed!r}")
    if seed_override is not None:
        seed = seed_override
    base_kwargs = {}
    for key, caster in _BASE_FIELDS.items():
        if key in mapping:
            value = mapping.pop(key)
            field_name = "num_channels" if key == "m" else key
            if caster in (int, float) and not isinstance(value, (int, float)):
                raise SweepSpecError(f"{key}: expected a number, got {value!r}")
            base_kwargs[field_name] = caster(value)
    if mapping:
        raise SweepSpecError(f"unknown fields: {sorted(mapping)}")
    return SweepSpec(variable=variable, values=values, base=BenchBase(**base_kwargs),
                     repetitions=repetitions, engines=engines, seed=seed)


def load_sweep_spec(path, seed_override: int | None = None) -> SweepSpec:
    from .config import ConfigError, parse_keyval

    with open(path, "r", encoding="utf-8") as fh:
        try:
            mapping = parse_keyval(fh.read())
        except ConfigError as exc:
            raise SweepSpecError(str(exc)) from None
    return sweep_spec_from_mapping(mapping, seed_override)


def records_to_csv(records: list[BenchRecord]) -> str:
    if not records:
        raise ValueError("no benchmark records to report")
    lines = [CSV_HEADER]
    for rec in records:
        lines.append(",".join(rec.csv_tuple()))
    return "\n".join(lines) + "\n"


def records_from_csv(text: str) -> list[BenchRecord]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError("missing or unexpected CSV header")
    records = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 9:
            raise ValueError(f"expected 9 columns, got {len(parts)}: {line!r}")
        records.append(BenchRecord(
            variable=parts[0],
            value=float(parts[1]),
            engine=parts[2],
            rep=int(parts[3]),
            peak_bytes=int(parts[4]),
            alloc_count=int(parts[5]),
            time_ms=None if parts[6] == "" else float(parts[6]),
            voxels=int(parts[7]),
            windows=int(parts[8]),
        ))
    return records


def summarize(records: list[BenchRecord]) -> str:
    """Per-value means and the vanilla/streaming peak-memory ratio."""
    if not records:
        raise ValueError("no benchmark records to report")
    out = io.StringIO()
    variable = records[0].variable
    out.write(f"sweep over {variable}\n")
    values = sorted({rec.value for rec in records})
    for value in values:
        at_value = [r for r in records if r.value == value]
        line = [f"{variable}={_fmt_value(value)}"]
        peaks = {}
        for engine in ENGINE_NAMES:
            rows = [r for r in at_value if r.engine == engine]
            if not rows:
                continue
            peak = float(np.mean([r.peak_bytes for r in rows]))
            peaks[engine] = peak
            times = [r.time_ms for r in rows if r.time_ms is not None]
            tpart = f", mean time {np.mean(times):.1f} ms" if times else ""
            line.append(f"{engine}: mean peak {peak:.0f} B{tpart}")
        if len(peaks) == 2:
            line.append(f"peak ratio vanilla/streaming = {peaks['vanilla'] / peaks['streaming']:.3f}")
        flagged = sum(1 for r in at_value if r.flagged)
        if flagged:
            line.append(f"FLAGGED x{flagged}")
        out.write("  " + "; ".join(line) + "\n")
    return out.getvalue()


def emit_report(records: list[BenchRecord]) -> tuple[str, str]:
    """CSV text plus a human-oriented summary."""
    return records_to_csv(records), summarize(records)


def write_plot_data(records: list[BenchRecord], directory) -> list[str]:
    """Two-column ``value mean_peak_bytes`` files, one per engine."""
    import os

    paths = []
    for engine in ENGINE_NAMES:
        rows = [r for r in records if r.engine == engine]
        if not rows:
            continue
        path = os.path.join(str(directory), f"peak_bytes_{engine}.dat")
        values = sorted({r.value for r in rows})
        with open(path, "w", encoding="utf-8") as fh:
            for value in values:
                mean_peak = np.mean([r.peak_bytes for r in rows if r.value == value])
                fh.write(f"{_fmt_value(value)} {mean_peak:.0f}\n")
        paths.append(path)
    return paths
