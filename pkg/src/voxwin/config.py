"""Backbone configuration: presets, validation, and the key/value file format.

Config files are plain text, one ``key = value`` per line; list values are
comma separated and ``#`` starts a comment:

    channels = 48, 96, 192, 384, 384
    heads = 6, 6, 12, 24, 24
    depths = 2, 4, 9, 4, 4
    window_sizes = 5, 7, 7, 7, 7
    strides = 3, 2, 2, 2
    finest_voxel_size = 0.02

An odd stage depth alternates regular/shifted in pairs and ends with one
extra regular-window block.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

NUM_STAGES = 5


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...]
    heads: tuple[int, ...]
    depths: tuple[int, ...]
    window_sizes: tuple[int, ...]
    strides: tuple[int, ...]
    finest_voxel_size: float

    def __post_init__(self):
        for name, want in (("channels", NUM_STAGES), ("heads", NUM_STAGES),
                           ("depths", NUM_STAGES), ("window_sizes", NUM_STAGES),
                           ("strides", NUM_STAGES - 1)):
            got = getattr(self, name)
            if len(got) != want:
                raise ConfigError(f"{name}: expected {want} entries, got {len(got)}")
        for c, h in zip(self.channels, self.heads):
            if c % h != 0:
                raise ConfigError(f"channels: {c} not divisible by head count {h}")
        if any(d < 1 for d in self.depths):
            raise ConfigError("depths: every stage needs at least one block")
        if any(w < 1 for w in self.window_sizes):
            raise ConfigError("window_sizes: must be >= 1")
        if any(s < 1 for s in self.strides):
            raise ConfigError("strides: must be >= 1")
        if self.finest_voxel_size <= 0:
            raise ConfigError("finest_voxel_size: must be positive")

    def voxel_size_at(self, stage: int) -> float:
        """Voxel edge length of the level the given 0-based stage runs on."""
        size = self.finest_voxel_size
        for s in self.strides[:stage]:
            size *= s
        return size

    def window_height_at(self, stage: int) -> float:
        return self.window_sizes[stage] * self.voxel_size_at(stage)


PRESETS: dict[str, BackboneConfig] = {
    "swin3d-s": BackboneConfig(
        channels=(48, 96, 192, 384, 384),
        heads=(6, 6, 12, 24, 24),
        depths=(2, 4, 9, 4, 4),
        window_sizes=(5, 7, 7, 7, 7),
        strides=(3, 2, 2, 2),
        finest_voxel_size=0.02,
    ),
    "swin3d-l": BackboneConfig(
        channels=(80, 160, 320, 640, 640),
        heads=(10, 10, 20, 40, 40),
        depths=(2, 4, 9, 4, 4),
        window_sizes=(5, 7, 7, 7, 7),
        strides=(3, 2, 2, 2),
        finest_voxel_size=0.02,
    ),
    "toy": BackboneConfig(
        channels=(8, 16, 16, 16, 16),
        heads=(2, 2, 2, 2, 2),
        depths=(2, 2, 2, 2, 2),
        window_sizes=(5, 5, 5, 5, 5),
        strides=(3, 2, 2, 2),
        finest_voxel_size=0.05,
    ),
}


def parse_keyval(text: str) -> dict:
    """Parse ``key = value`` lines; comma-separated values become lists."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        parts = [p.strip() for p in value.split(",")]
        parsed = [_parse_scalar(p) for p in parts if p != ""]
        if not parsed:
            raise ConfigError(f"line {lineno}: no value for key {key!r}")
        out[key] = parsed[0] if len(parsed) == 1 else parsed
    return out


def _parse_scalar(token: str):
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return token


def _as_int_tuple(field: str, value) -> tuple[int, ...]:
    items = value if isinstance(value, list) else [value]
    out = []
    for v in items:
        if not isinstance(v, int):
            raise ConfigError(f"{field}: expected integers, got {v!r}")
        out.append(v)
    return tuple(out)


def config_from_mapping(mapping: dict, base: BackboneConfig | None = None) -> BackboneConfig:
    base = base if base is not None else PRESETS["toy"]
    kwargs = {}
    mapping = dict(mapping)
    for field in ("channels", "heads", "depths", "window_sizes", "strides"):
        if field in mapping:
            kwargs[field] = _as_int_tuple(field, mapping.pop(field))
    if "finest_voxel_size" in mapping:
        v = mapping.pop("finest_voxel_size")
        if not isinstance(v, (int, float)):
            raise ConfigError(f"finest_voxel_size: expected a number, got {v!r}")
        kwargs["finest_voxel_size"] = float(v)
    if mapping:
        raise ConfigError(f"unknown config keys: {sorted(mapping)}")
    return replace(base, **kwargs)


def load_config(path_or_preset: str) -> BackboneConfig:
    """Accept a bundled preset name or a key/value config file path."""
    if path_or_preset in PRESETS:
        return PRESETS[path_or_preset]
    with open(path_or_preset, "r", encoding="utf-8") as fh:
        return config_from_mapping(parse_keyval(fh.read()))
