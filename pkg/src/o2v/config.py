"""Mapping configuration: defaults and the key=value config-file dialect.

Config files are plain text, one ``key = value`` per line, with ``#``
comments and blank lines ignored. Every key matches a MapConfig field;
unknown keys are errors so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

__all__ = ["MapConfig", "parse_config", "load_config", "config_to_text"]


@dataclass(frozen=True)
class MapConfig:
    """Every tunable knob of the mapping pipeline, with its default."""

    # voxel field
    voxel_edge: float = 0.16
    depth_dim: int = 16
    color_dim: int = 16
    lang_dim: int = 32

    # rendering and training
    n_strat: int = 32
    n_surf: int = 8
    near: float = 0.1
    far: float = 6.0  # 0 means: derive from scene bounds diagonal
    lambda_c: float = 0.2
    n_pixels: int = 1024
    optimizer: str = "adam"  # "adam" or "sgd" (plain per-group descent)
    lr_feat: float = 0.1  # sgd step sizes; the adam trainer has its own
    lr_mlp: float = 1e-3
    steps_per_frame: int = 200
    seed: int = 0

    # language fusion and retrieval
    tau_same: float = 0.95
    tau_split: float = 0.85
    q_max: int = 8
    alpha: float = 2.0
    tau_rel: float = 0.5
    voting: bool = True
    splitting: bool = True

    def replace(self, **kw) -> "MapConfig":
        return replace(self, **kw)

    def __post_init__(self):
        if self.voxel_edge <= 0:
            raise ValueError("voxel_edge must be positive")
        if self.n_strat < 1 or self.n_surf < 0:
            raise ValueError("sample counts out of range")
        if not 0 < self.tau_rel <= 1:
            raise ValueError("tau_rel must be in (0, 1]")
        if self.q_max < 1:
            raise ValueError("q_max must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


_FIELD_TYPES = {f.name: f.type for f in fields(MapConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {key!r}: {raw!r} is not a boolean")
    if kind == "int":
        return int(raw)
    if kind == "str":
        return raw
    return float(raw)


def parse_config(text: str, base: MapConfig | None = None) -> MapConfig:
    """Parse key=value text on top of a base config (defaults if omitted)."""
    cfg = base if base is not None else MapConfig()
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected key=value, "
                             f"got {line.strip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            updates[key] = _coerce(key, raw)
        except ValueError as e:
            raise ValueError(f"config line {lineno}: {e}") from None
    return cfg.replace(**updates)


def load_config(path, base: MapConfig | None = None) -> MapConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read(), base)


def config_to_text(cfg: MapConfig) -> str:
    """Render a config as the same key=value dialect parse_config reads."""
    lines = []
    for f in fields(MapConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
