"""Model configuration, named presets, and the key-value config file format.

Config files are plain text, one ``key = value`` per line. ``#`` starts a
comment. Tuples are comma separated. A ``preset = <name>`` line seeds all
fields from a named preset; later keys override it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class HiViTConfig:
    img_size: int = 224
    unit_size: int = 16
    inner_patch: int = 4
    depths: tuple[int, int, int] = (2, 2, 20)
    dims: tuple[int, int, int] = (128, 256, 512)
    heads: int = 8
    mlp_ratio_main: float = 4.0
    mlp_ratio_replace: float = 3.0
    use_rpe: bool = True
    use_abs_pos: bool = True
    drop_path_rate: float = 0.0
    num_classes: int = 0
    in_chans: int = 3
    # ablation: plain patch embedding of whole units straight to the main width
    hierarchical: bool = True
    # decoder geometry for MIM
    dec_depth: int = 6
    dec_dim: int = 512
    dec_heads: int = 16
    norm_eps: float = 1e-6
    # negative control only: leaks information across neighbouring units in stage 1
    debug_cross_unit_mix: bool = False
    name: str = "custom"

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.dims = tuple(int(d) for d in self.dims)

    # -- derived geometry ---------------------------------------------------
    @property
    def grid(self) -> int:
        """Units per image side."""
        return self.img_size // self.unit_size

    @property
    def num_units(self) -> int:
        return self.grid ** 2

    @property
    def tokens_per_side(self) -> int:
        """Stage-1 tokens per unit side."""
        return self.unit_size // self.inner_patch if self.hierarchical else 1

    @property
    def embed_patch(self) -> int:
        return self.inner_patch if self.hierarchical else self.unit_size

    @property
    def embed_dim(self) -> int:
        return self.dims[0] if self.hierarchical else self.dims[2]

    @property
    def early_depths(self) -> tuple[int, int]:
        return (self.depths[0], self.depths[1]) if self.hierarchical else (0, 0)

    @property
    def total_blocks(self) -> int:
        return sum(self.early_depths) + self.depths[2]

    @property
    def pixels_per_unit(self) -> int:
        return self.unit_size ** 2 * self.in_chans

    def validate(self) -> "HiViTConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(f"invalid config {self.name!r}: {msg}")

        need(self.img_size > 0 and self.unit_size > 0 and self.inner_patch > 0, "sizes must be positive")
        need(self.img_size % self.unit_size == 0, "img_size divisible by unit_size")
        need(len(self.depths) == 3 and len(self.dims) == 3, "three stages of depths and dims")
        need(all(d >= 0 for d in self.depths) and self.depths[2] >= 1, "depths non-negative, main depth >= 1")
        if self.hierarchical:
            need(self.unit_size % self.inner_patch == 0 and self.unit_size // self.inner_patch == 4,
                 "unit_size / inner_patch = 4")
            need(self.dims[2] == 4 * self.dims[0] and self.dims[2] == 2 * self.dims[1], "D3 = 4*D1 = 2*D2")
        need(self.heads >= 1 and self.dims[2] % self.heads == 0, "main dim divisible by heads")
        need(self.dec_heads >= 1 and self.dec_dim % self.dec_heads == 0, "decoder dim divisible by heads")
        need(0.0 <= self.drop_path_rate < 1.0, "drop_path_rate in [0, 1)")
        need(self.mlp_ratio_main > 0 and self.mlp_ratio_replace > 0, "mlp ratios positive")
        need(self.num_classes >= 0, "num_classes >= 0")
        need(self.norm_eps > 0, "norm_eps > 0")
        return self

    def replace(self, **kw) -> "HiViTConfig":
        return dataclasses.replace(self, **kw).validate()

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


PRESETS: dict[str, dict] = {
    # Table 1 variants; drop path rates from the supervised recipe
    "T": dict(depths=(1, 1, 10), dims=(96, 192, 384), heads=6, drop_path_rate=0.05, num_classes=1000),
    "S": dict(depths=(2, 2, 20), dims=(96, 192, 384), heads=6, drop_path_rate=0.3, num_classes=1000),
    "B": dict(depths=(2, 2, 20), dims=(128, 256, 512), heads=8, drop_path_rate=0.5, num_classes=1000),
    "toy": dict(img_size=32, unit_size=8, inner_patch=2, depths=(1, 1, 4), dims=(16, 32, 64), heads=4,
                dec_depth=2, dec_dim=32, dec_heads=4, num_classes=0),
    "small": dict(img_size=64, unit_size=16, inner_patch=4, depths=(1, 1, 2), dims=(32, 64, 128), heads=4,
                  dec_depth=1, dec_dim=64, dec_heads=4, num_classes=0),
    "bench-medium": dict(img_size=128, unit_size=16, inner_patch=4, depths=(1, 1, 8), dims=(48, 96, 192),
                         heads=6, dec_depth=1, dec_dim=96, dec_heads=6, num_classes=0),
}
_ALIASES = {"hivit-t": "T", "hivit-s": "S", "hivit-b": "B", "t": "T", "s": "S", "b": "B",
            "tiny": "T", "base": "B"}


def make_config(preset: str = "custom", **overrides) -> HiViTConfig:
    """Build a validated config from a preset name plus explicit overrides."""
    key = _ALIASES.get(preset.lower(), preset) if preset != "custom" else "custom"
    if key != "custom" and key not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)} or 'custom'")
    base = dict(PRESETS.get(key, {}))
    base.update(overrides)
    base.setdefault("name", key)
    return HiViTConfig(**base).validate()


# -- text format ------------------------------------------------------------
def _coerce(ftype, raw: str):
    s = raw.strip()
    t = str(ftype)
    if "tuple" in t:
        return tuple(int(v) for v in s.replace("(", "").replace(")", "").split(",") if v.strip())
    if t in ("bool", "<class 'bool'>"):
        low = s.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {s!r}")
    if t in ("int", "<class 'int'>"):
        return int(s)
    if t in ("float", "<class 'float'>"):
        return float(s)
    return s


def parse_kv(text: str, source: str = "<string>") -> list[tuple[int, str, str]]:
    """Split key-value text into ``(line_no, key, value)`` triples."""
    out = []
    for no, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {line.strip()!r}")
        k, v = body.split("=", 1)
        k = k.strip()
        if not k:
            raise ConfigError(f"{source}:{no}: empty key")
        out.append((no, k, v.strip()))
    return out


def parse_config(text: str, source: str = "<string>") -> HiViTConfig:
    types = {f.name: f.type for f in fields(HiViTConfig)}
    preset = "custom"
    values: dict = {}
    for no, key, raw in parse_kv(text, source):
        if key == "preset":
            preset = raw
            continue
        if key not in types:
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        try:
            values[key] = _coerce(types[key], raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{no}: bad value for {key}: {exc}") from None
    return make_config(preset, **values)


def dump_config(cfg: HiViTConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def load_config(spec: str) -> HiViTConfig:
    """Resolve a preset name, a config path, or a path without ``.cfg``."""
    p = Path(spec)
    for cand in (p, p.with_suffix(".cfg") if p.suffix != ".cfg" else p):
        if cand.is_file():
            return parse_config(cand.read_text(), str(cand))
    stem = p.name.lower()
    if stem in _ALIASES or p.name in PRESETS:
        return make_config(p.name)
    raise ConfigError(f"no config file or preset named {spec!r}")


def sincos_2d(dim: int, coords: np.ndarray, temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2-D sine-cosine embedding for integer (row, col) coords ``[.., 2]``."""
    if dim % 4:
        raise ConfigError(f"sin-cos embedding needs dim divisible by 4, got {dim}")
    q = dim // 4
    omega = 1.0 / temperature ** (np.arange(q, dtype=np.float64) / q)
    r = coords[..., 0:1].astype(np.float64) * omega
    c = coords[..., 1:2].astype(np.float64) * omega
    return np.concatenate([np.sin(r), np.cos(r), np.sin(c), np.cos(c)], axis=-1)


def unit_coords(grid: int) -> np.ndarray:
    """(row, col) for each unit index in row-major order, shape ``[grid*grid, 2]``."""
    r, c = np.divmod(np.arange(grid * grid), grid)
    return np.stack([r, c], axis=-1)
