"""Masked image modeling: mask plans, sparse encoding, decoding, loss, and the dense oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, HiViTConfig, sincos_2d, unit_coords
from .model import HiViT, MainBlock, _rows, unit_pixels
from .nn import LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import Tensor, concat, gather_units, no_grad, square
from .tensor import GELU_CUBIC, GELU_SQRT_2_OVER_PI


class VerificationError(AssertionError):
    pass


def num_visible(M: int, ratio: float) -> int:
    """Visible units for a mask ratio: round((1 - ratio) M), kept within [1, M - 1]."""
    return int(min(max(math.floor((1.0 - ratio) * M + 0.5), 1), M - 1))


@dataclass
class MaskPlan:
    """Visible/masked unit indices for a batch.

    ``visible_idx`` is ``[P, M']`` with each row sorted; P is 1 for a plan
    shared by the whole batch, else the batch size.
    """

    num_units: int
    mask_ratio: float
    seed: int
    visible_idx: np.ndarray
    masked_idx: np.ndarray = field(default=None)

    def __post_init__(self):
        vis = np.atleast_2d(np.asarray(self.visible_idx, dtype=np.int64))
        self.visible_idx = vis
        if self.masked_idx is None:
            full = np.arange(self.num_units)
            self.masked_idx = np.stack([np.setdiff1d(full, row) for row in vis]).astype(np.int64) \
                if vis.shape[1] < self.num_units else np.zeros((vis.shape[0], 0), np.int64)
        self.masked_idx = np.atleast_2d(np.asarray(self.masked_idx, dtype=np.int64))
        both = np.concatenate([vis, self.masked_idx], axis=1)
        if vis.shape[1] < 1:
            raise ConfigError("a mask plan needs at least one visible unit")
        if both.shape[1] != self.num_units or np.any(np.sort(both, axis=1) != np.arange(self.num_units)):
            raise ConfigError("visible and masked indices must partition 0..M-1")

    @property
    def num_visible(self) -> int:
        return self.visible_idx.shape[1]

    @property
    def num_masked(self) -> int:
        return self.masked_idx.shape[1]

    @property
    def shared(self) -> bool:
        return self.visible_idx.shape[0] == 1

    def coords(self, grid: int) -> np.ndarray:
        return unit_coords(grid)[self.visible_idx]

    def rows(self, batch: int, which: str = "visible") -> np.ndarray:
        idx = self.visible_idx if which == "visible" else self.masked_idx
        if idx.shape[0] == 1:
            return np.broadcast_to(idx, (batch, idx.shape[1]))
        if idx.shape[0] != batch:
            raise ValueError(f"plan has {idx.shape[0]} rows for a batch of {batch}")
        return idx

    @classmethod
    def full(cls, M: int) -> "MaskPlan":
        """Degenerate plan with every unit visible."""
        return cls(M, 0.0, -1, np.arange(M)[None])

    def to_line(self) -> str:
        rows = ";".join(",".join(str(int(i)) for i in row) for row in self.visible_idx)
        return f"M={self.num_units} ratio={self.mask_ratio!r} seed={self.seed} visible={rows}"

    @classmethod
    def from_line(cls, line: str) -> "MaskPlan":
        kv = dict(tok.split("=", 1) for tok in line.split())
        rows = [[int(v) for v in r.split(",")] for r in kv["visible"].split(";")]
        return cls(int(kv["M"]), float(kv["ratio"]), int(kv["seed"]), np.array(rows))


def sample_mask(M: int, ratio: float, seed: int, batch: int = 1, shared: bool = False) -> MaskPlan:
    """Uniform random visible subsets, one per sample unless ``shared``."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    if M < 2:
        raise ConfigError(f"need at least 2 units to mask, got {M}")
    rng = np.random.default_rng(seed)
    keep = num_visible(M, ratio)
    n = 1 if shared else batch
    vis = np.stack([np.sort(rng.permutation(M)[:keep]) for _ in range(n)])
    return MaskPlan(M, ratio, seed, vis)


# -- decoder ----------------------------------------------------------------
class Decoder(Module):
    def __init__(self, cfg: HiViTConfig, rng):
        D = cfg.dec_dim
        self.grid = cfg.grid
        self.embed = Linear(cfg.dims[2], D, rng)
        self.mask_token = Parameter(trunc_normal(rng, (D,)))
        self.blocks = [MainBlock(D, cfg.dec_heads, 4.0, 0.0, rng, None, cfg.norm_eps)
                       for _ in range(cfg.dec_depth)]
        self.norm = LayerNorm(D, cfg.norm_eps)
        self.pred = Linear(D, cfg.pixels_per_unit, rng)
        self._pos = sincos_2d(D, unit_coords(cfg.grid))

    def _cast_buffers(self, dtype) -> None:
        self._pos = self._pos.astype(dtype)

    def run_full_grid(self, x: Tensor) -> Tensor:
        """Positional add, transformer blocks, and pixel head over all M slots."""
        x = x + self._pos[None]
        for blk in self.blocks:
            x = blk(x)
        return self.pred(self.norm(x))

    def __call__(self, latent: Tensor, plan: MaskPlan) -> Tensor:
        B, n_vis, _ = latent.shape
        if n_vis != plan.num_visible:
            raise ValueError(f"latent has {n_vis} tokens, plan has {plan.num_visible} visible units")
        x = self.embed(latent)
        if plan.num_masked:
            D = x.shape[-1]
            fill = self.mask_token.reshape(1, 1, D) + np.zeros((B, plan.num_masked, D), x.dtype)
            x = concat([x, fill], axis=1)
            order = np.concatenate([plan.rows(B), plan.rows(B, "masked")], axis=1)
            x = gather_units(x, np.argsort(order, axis=1))
        return self.run_full_grid(x)


def decode(latent: Tensor, plan: MaskPlan, dec: Decoder) -> Tensor:
    return dec(latent, plan)


# -- loss -------------------------------------------------------------------
def unit_targets(images: np.ndarray, cfg: HiViTConfig, normalize: bool, eps: float = 1e-6) -> np.ndarray:
    t = unit_pixels(images, cfg)
    if normalize:
        mu = t.mean(axis=-1, keepdims=True)
        var = t.var(axis=-1, keepdims=True)
        t = (t - mu) / np.sqrt(var + eps)
    return t


def reconstruction_loss(pred: Tensor, images, plan: MaskPlan, cfg: HiViTConfig,
                        normalize: bool = True) -> Tensor:
    """Mean squared error over masked units only.

    Targets are raw unit pixels or, with ``normalize``, pixels standardised
    per unit. Targets are constants: gradients reach the input only through
    the encoder.
    """
    imgs = images.data if isinstance(images, Tensor) else np.asarray(images)
    B = pred.shape[0]
    masked = plan.rows(B, "masked")
    target = unit_targets(imgs, cfg, normalize).astype(pred.dtype)
    target = np.take_along_axis(target, masked[..., None], axis=1)
    diff = gather_units(pred, masked) - target
    return square(diff).mean()


# -- full models ------------------------------------------------------------
class MaskedAutoencoder(Module):
    """Sparse MIM model: encoder sees visible units only."""

    def __init__(self, cfg: HiViTConfig, seed: int = 0):
        self.cfg = cfg
        self.encoder = HiViT(cfg.replace(num_classes=0), seed)
        self.decoder = Decoder(cfg, np.random.default_rng([seed, 1]))

    def set_rng(self, rng) -> None:
        self.encoder.set_rng(rng)

    def encode_sparse(self, images, plan: MaskPlan) -> Tensor:
        if plan.num_units != self.cfg.num_units:
            raise ValueError(f"plan covers {plan.num_units} units, config has {self.cfg.num_units}")
        return self.encoder.forward_sparse(images, plan.visible_idx)

    def forward(self, images, plan: MaskPlan) -> Tensor:
        return self.decoder(self.encode_sparse(images, plan), plan)

    def loss(self, images, plan: MaskPlan, normalize: bool = True) -> Tensor:
        return reconstruction_loss(self.forward(images, plan), images, plan, self.cfg, normalize)


class DenseMaskedModel(Module):
    """Mask-token baseline: every unit is carried through all encoder stages.

    Masked units' patch embeddings are replaced by a learnable token at the
    input; the decoder then runs on the full token grid.
    """

    def __init__(self, mae: MaskedAutoencoder, seed: int = 0):
        self.cfg = mae.cfg
        self.encoder = mae.encoder
        self.decoder = mae.decoder
        self.mask_token = Parameter(trunc_normal(np.random.default_rng([seed, 2]), (self.cfg.embed_dim,)))

    def set_rng(self, rng) -> None:
        self.encoder.set_rng(rng)

    def forward(self, images, plan: MaskPlan) -> Tensor:
        enc = self.encoder
        x = enc.embed(images)
        B, M = x.shape[:2]
        keep = np.zeros((B, M), x.dtype)
        np.put_along_axis(keep, plan.rows(B), 1.0, axis=1)
        keep = keep.reshape(B, M, 1, 1, 1)
        x = x * keep + self.mask_token * (1.0 - keep)
        z = enc.forward_main(enc.forward_early(x), enc.coords_of())
        return self.decoder.run_full_grid(self.decoder.embed(z))

    def loss(self, images, plan: MaskPlan, normalize: bool = True) -> Tensor:
        return reconstruction_loss(self.forward(images, plan), images, plan, self.cfg, normalize)


def encode_sparse(images, plan: MaskPlan, cfg: HiViTConfig, model: HiViT) -> Tensor:
    if plan.num_units != cfg.num_units:
        raise ValueError(f"plan covers {plan.num_units} units, config has {cfg.num_units}")
    return model.forward_sparse(images, plan.visible_idx)


# -- dense oracle -----------------------------------------------------------
def _np_layer_norm(x, ln: LayerNorm):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * ln.weight.data + ln.bias.data


def _np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x ** 3)))


def _np_linear(x, lin: Linear):
    y = np.einsum("...i,io->...o", x, lin.weight.data)
    return y if lin.bias is None else y + lin.bias.data


def reference_main_stage(model: HiViT, x: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Main stage written directly in numpy, one sample and one head at a time.

    ``x`` is ``[B, N, D3]`` laid out densely over exactly the tokens whose
    grid positions are ``coords`` (``[N, 2]`` or ``[B, N, 2]``).
    """
    cfg = model.cfg
    B, N, D = x.shape
    coords = np.broadcast_to(coords, (B, N, 2)) if coords.ndim == 2 else coords
    out = np.empty_like(x)
    for b in range(B):
        h = x[b].copy()
        if cfg.use_abs_pos:
            h = h + sincos_2d(D, coords[b]).astype(x.dtype)
        for blk in model.main_blocks:
            a = blk.attn
            y = _np_layer_norm(h, blk.norm1)
            qkv = _np_linear(y, a.qkv)
            q, k, v = qkv[:, :D], qkv[:, D:2 * D], qkv[:, 2 * D:]
            heads = []
            for hh in range(a.heads):
                sl = slice(hh * a.head_dim, (hh + 1) * a.head_dim)
                logits = np.einsum("nd,md->nm", q[:, sl], k[:, sl]) / np.sqrt(a.head_dim).astype(x.dtype)
                if blk.rpe is not None:
                    g = blk.rpe.grid
                    dr = coords[b][:, None, 0] - coords[b][None, :, 0] + g - 1
                    dc = coords[b][:, None, 1] - coords[b][None, :, 1] + g - 1
                    logits = logits + blk.rpe.table.data[dr * (2 * g - 1) + dc, hh]
                w = np.exp(logits - logits.max(axis=1, keepdims=True))
                w /= w.sum(axis=1, keepdims=True)
                heads.append(w @ v[:, sl])
            h = h + _np_linear(np.concatenate(heads, axis=1), a.proj)
            y = _np_layer_norm(h, blk.norm2)
            h = h + _np_linear(_np_gelu(_np_linear(y, blk.mlp.fc1)), blk.mlp.fc2)
        out[b] = _np_layer_norm(h, model.norm)
    return out


def rel_err(a: np.ndarray, ref: np.ndarray) -> tuple[float, tuple]:
    """Normwise relative error ``max|a - ref| / max|ref|`` and the worst index."""
    diff = np.abs(np.asarray(a, np.float64) - np.asarray(ref, np.float64))
    scale = max(float(np.abs(ref).max()), np.finfo(np.float64).tiny)
    worst = np.unravel_index(int(diff.argmax()), diff.shape) if diff.size else ()
    return float(diff.max()) / scale if diff.size else 0.0, tuple(int(i) for i in worst)


@dataclass
class OracleReport:
    err_stage12: float
    err_main: float
    worst_stage12: tuple
    worst_main: tuple
    tol_stage12: float
    tol_main: float

    @property
    def passed(self) -> bool:
        return self.err_stage12 < self.tol_stage12 and self.err_main < self.tol_main


def oracle_check(images, plan: MaskPlan, model: HiViT, tol=1e-5, raise_on_fail: bool = True) -> OracleReport:
    """Compare the sparse encoder against two dense computations.

    Stage 1-2 check: run the full image densely through stage 2, then keep
    the visible units; compare with the gather-first sparse pipeline.
    Main-stage check: run a plain numpy main stage over only the visible
    units laid out densely, with the same positions; compare with the
    sparse encoder output. ``tol`` is one value or a (stage12, main) pair.
    """
    tol_a, tol_b = (tol, tol) if np.isscalar(tol) else tol
    imgs = images.data if isinstance(images, Tensor) else np.asarray(images)
    if model.training and any(b.drop_path > 0 for b in model.early_blocks + model.main_blocks):
        raise ValueError("oracle_check needs deterministic mode (eval or drop_path 0)")
    B = imgs.shape[0]
    vis = plan.rows(B)
    with no_grad():
        dense_pre = model.forward_early(model.embed(imgs)).data
        dense_vis = np.take_along_axis(dense_pre, vis[..., None], axis=1)
        sparse_pre = model.forward_early(model.embed(imgs, plan.visible_idx)).data
        sparse_out = model.forward_sparse(imgs, plan.visible_idx).data
    coords = model.coords_of(vis)
    ref_out = reference_main_stage(model, dense_vis, coords)
    ea, wa = rel_err(sparse_pre, dense_vis)
    eb, wb = rel_err(sparse_out, ref_out)
    rep = OracleReport(ea, eb, wa, wb, tol_a, tol_b)
    if raise_on_fail and not rep.passed:
        if not ea < tol_a:
            raise VerificationError(f"stage 1-2 oracle failed: rel err {ea:.3e} >= {tol_a:g} "
                                    f"at (sample, unit, channel) {wa}")
        raise VerificationError(f"main-stage oracle failed: rel err {eb:.3e} >= {tol_b:g} "
                                f"at (sample, unit, channel) {wb}")
    return rep
