"""HiViT encoder: per-unit early stages, in-unit patch merging, global main stage.

Token layout through stages 1-2 is unit-major, ``[B, M, k, k, D]``, so
keeping or dropping a masking unit is a gather along axis 1 and every
early-stage op is a slice-local op on that layout.
"""

from __future__ import annotations

import numpy as np

from .config import HiViTConfig, sincos_2d, unit_coords
from .nn import Attention, LayerNorm, Linear, Mlp, Module, Parameter, drop_path, trunc_normal
from .tensor import Tensor, embedding_gather, gather_units


def patchify(images, cfg: HiViTConfig) -> Tensor:
    """``[B, C, H, W] -> [B, M, k, k, C*p*p]`` with p the embedding patch size."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    B, C, H, W = x.shape
    if H != cfg.img_size or W != cfg.img_size or C != cfg.in_chans:
        raise ValueError(f"expected images [B, {cfg.in_chans}, {cfg.img_size}, {cfg.img_size}], got {x.shape}")
    G, k, p = cfg.grid, cfg.tokens_per_side, cfg.embed_patch
    x = x.reshape(B, C, G, k, p, G, k, p).transpose(0, 2, 5, 3, 6, 1, 4, 7)
    return x.reshape(B, G * G, k, k, C * p * p)


def unit_pixels(images: np.ndarray, cfg: HiViTConfig) -> np.ndarray:
    """Raw pixels per unit, ``[B, M, u*u*C]`` in (row, col, channel) order."""
    B, C, H, W = images.shape
    G, u = cfg.grid, cfg.unit_size
    x = images.reshape(B, C, G, u, G, u).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(B, G * G, u * u * C)


def _rows(idx: np.ndarray) -> np.ndarray:
    """Collapse a batch-shared ``[1, M']`` plan to a flat index list."""
    idx = np.asarray(idx)
    return idx[0] if idx.ndim == 2 and idx.shape[0] == 1 else idx


class PatchEmbed(Module):
    def __init__(self, cfg: HiViTConfig, rng):
        p = cfg.embed_patch
        self.proj = Linear(cfg.in_chans * p * p, cfg.embed_dim, rng)
        self.norm = LayerNorm(cfg.embed_dim, cfg.norm_eps)

    def __call__(self, patches: Tensor) -> Tensor:
        return self.norm(self.proj(patches))


class EarlyBlock(Module):
    """Two per-token MLP sub-blocks; the first stands in for window attention."""

    def __init__(self, dim: int, ratio_replace: float, ratio_main: float, drop_path: float, rng,
                 eps: float = 1e-6):
        self.norm1 = LayerNorm(dim, eps)
        self.mlp1 = Mlp(dim, int(dim * ratio_replace), rng)
        self.norm2 = LayerNorm(dim, eps)
        self.mlp2 = Mlp(dim, int(dim * ratio_main), rng)
        self.drop_path = drop_path
        self.rng = None

    def __call__(self, x: Tensor) -> Tensor:
        x = x + drop_path(self.mlp1(self.norm1(x)), self.drop_path, self.training, self.rng)
        return x + drop_path(self.mlp2(self.norm2(x)), self.drop_path, self.training, self.rng)


class PatchMerge(Module):
    """Concatenate each 2x2 token neighbourhood inside a unit and project 4D -> 2D."""

    def __init__(self, dim: int, rng, eps: float = 1e-6):
        self.norm = LayerNorm(4 * dim, eps)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        B, M, k, k2, D = x.shape
        if k != k2 or k % 2:
            raise ValueError(f"patch merge needs an even square token grid per unit, got {k}x{k2}")
        h = k // 2
        x = x.reshape(B, M, h, 2, h, 2, D).transpose(0, 1, 2, 4, 3, 5, 6).reshape(B, M, h, h, 4 * D)
        return self.reduction(self.norm(x))


class RelPosBias(Module):
    """Learnable per-head bias indexed by the 2-D offset between two units."""

    def __init__(self, grid: int, heads: int, rng):
        self.grid = grid
        self.heads = heads
        self.table = Parameter(trunc_normal(rng, ((2 * grid - 1) ** 2, heads)))

    def index(self, coords: np.ndarray) -> np.ndarray:
        """Table row for every ordered token pair, shape ``[.., N, N]``."""
        coords = np.asarray(coords)
        off = coords[..., :, None, :] - coords[..., None, :, :] + (self.grid - 1)
        return off[..., 0] * (2 * self.grid - 1) + off[..., 1]

    def __call__(self, coords: np.ndarray) -> Tensor:
        idx = self.index(coords)
        bias = embedding_gather(self.table, idx)  # [.., N, N, H]
        if bias.ndim == 3:
            return bias.transpose(2, 0, 1)
        return bias.transpose(0, 3, 1, 2)


class MainBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, drop_path: float, rng,
                 rpe_grid: int | None = None, eps: float = 1e-6):
        self.norm1 = LayerNorm(dim, eps)
        self.attn = Attention(dim, heads, rng)
        self.rpe = RelPosBias(rpe_grid, heads, rng) if rpe_grid else None
        self.norm2 = LayerNorm(dim, eps)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)
        self.drop_path = drop_path
        self.rng = None

    def __call__(self, x: Tensor, coords: np.ndarray | None = None) -> Tensor:
        bias = None
        if self.rpe is not None:
            if coords is None:
                raise ValueError("relative position bias needs token coords")
            bias = self.rpe(coords)
        x = x + drop_path(self.attn(self.norm1(x), bias), self.drop_path, self.training, self.rng)
        return x + drop_path(self.mlp(self.norm2(x)), self.drop_path, self.training, self.rng)


class HiViT(Module):
    def __init__(self, cfg: HiViTConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d1, d2 = cfg.early_depths
        d3 = cfg.depths[2]
        L = cfg.total_blocks
        rates = np.linspace(0.0, cfg.drop_path_rate, L) if L > 1 else np.zeros(L)
        self.patch_embed = PatchEmbed(cfg, rng)
        D1, D2, D3 = cfg.dims
        self.early_blocks = [
            EarlyBlock(D1 if i < d1 else D2, cfg.mlp_ratio_replace, cfg.mlp_ratio_main, float(rates[i]),
                       rng, cfg.norm_eps)
            for i in range(d1 + d2)
        ]
        self.merges = [PatchMerge(D1, rng, cfg.norm_eps), PatchMerge(D2, rng, cfg.norm_eps)] \
            if cfg.hierarchical else []
        self.main_blocks = [
            MainBlock(D3, cfg.heads, cfg.mlp_ratio_main, float(rates[d1 + d2 + j]), rng,
                      cfg.grid if cfg.use_rpe else None, cfg.norm_eps)
            for j in range(d3)
        ]
        self.norm = LayerNorm(D3, cfg.norm_eps)
        self.head = Linear(D3, cfg.num_classes, rng) if cfg.num_classes > 0 else None
        self._coords = unit_coords(cfg.grid)
        self._pos = sincos_2d(D3, self._coords) if cfg.use_abs_pos else None

    # -- randomness for drop path ------------------------------------------
    def set_rng(self, rng: np.random.Generator | None) -> None:
        for blk in self.early_blocks + self.main_blocks:
            blk.rng = rng

    # -- pipeline pieces ----------------------------------------------------
    def coords_of(self, idx=None) -> np.ndarray:
        return self._coords if idx is None else self._coords[_rows(idx)]

    def embed(self, images, idx=None) -> Tensor:
        """Patch-embed only the units in ``idx`` (all units when None)."""
        patches = patchify(images, self.cfg)
        if idx is not None:
            patches = gather_units(patches, _rows(idx))
        return self.patch_embed(patches)

    def forward_early(self, x: Tensor) -> Tensor:
        """Stages 1-2 on unit-major tokens, returning ``[B, N, D3]``."""
        cfg = self.cfg
        d1 = cfg.early_depths[0]
        if cfg.hierarchical:
            for blk in self.early_blocks[:d1]:
                x = blk(x)
            if cfg.debug_cross_unit_mix:
                n = x.shape[1]
                x = x + gather_units(x, np.roll(np.arange(n), 1)) * 0.5
            x = self.merges[0](x)
            for blk in self.early_blocks[d1:]:
                x = blk(x)
            x = self.merges[1](x)
        B, N = x.shape[:2]
        return x.reshape(B, N, cfg.dims[2])

    def forward_main(self, x: Tensor, coords: np.ndarray) -> Tensor:
        if coords.shape[-2] != x.shape[1]:
            raise ValueError(f"coords for {coords.shape[-2]} tokens, input has {x.shape[1]}")
        if self._pos is not None:
            pos = sincos_2d(self.cfg.dims[2], coords)
            x = x + (pos[None] if pos.ndim == 2 else pos)
        for blk in self.main_blocks:
            x = blk(x, coords)
        return self.norm(x)

    # -- full passes --------------------------------------------------------
    def forward_dense(self, images) -> Tensor:
        return self.forward_main(self.forward_early(self.embed(images)), self._coords)

    def forward_sparse(self, images, visible_idx) -> Tensor:
        """Encode only the units listed in ``visible_idx`` (shared or per-sample)."""
        idx = _rows(visible_idx)
        x = self.forward_early(self.embed(images, idx))
        return self.forward_main(x, self.coords_of(idx))

    def forward_logits(self, images) -> Tensor:
        if self.head is None:
            raise ValueError("classifier forward on a headless config (num_classes = 0)")
        feats = self.forward_dense(images).mean(axis=1)
        return self.head(feats)


def encoder_forward_dense(images, cfg: HiViTConfig, model: HiViT) -> Tensor:
    if model.cfg != cfg:
        raise ValueError("model was built for a different config")
    return model.forward_dense(images)
