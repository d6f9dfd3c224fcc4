"""AdamW, LARS, warmup-cosine schedule, and layer-wise lr decay."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .config import HiViTConfig


@dataclass
class Schedule:
    base_lr: float
    warmup_epochs: float
    total_epochs: float
    min_lr: float = 0.0


def lr_at(schedule: Schedule, epoch: float) -> float:
    """Linear warmup 0 -> base, then half-cosine base -> min_lr at ``total_epochs``."""
    s = schedule
    if epoch < s.warmup_epochs:
        return s.base_lr * epoch / s.warmup_epochs
    span = s.total_epochs - s.warmup_epochs
    if span <= 0:
        return s.base_lr
    t = min(max((epoch - s.warmup_epochs) / span, 0.0), 1.0)
    return s.min_lr + (s.base_lr - s.min_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


def default_no_decay(name: str, arr: np.ndarray) -> bool:
    """Biases, norm affines, tokens and position tables are not decayed."""
    return arr.ndim <= 1 or name.endswith(".table")


class AdamW:
    """Adam with decoupled weight decay.

    Update order per parameter: ``p -= lr * wd * p``, then the Adam moment
    update with bias correction. ``lr`` is the scheduled lr times the
    parameter's ``lr_scale``.
    """

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05, lr_scale: dict | None = None, no_decay=default_no_decay):
        self.params = dict(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scale = dict(lr_scale or {})
        self.decay = {n: not no_decay(n, p.data) for n, p in self.params.items()}
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, grads: dict | None = None) -> None:
        grads = grads if grads is not None else {n: p.grad for n, p in self.params.items()}
        for n, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {n!r}; step aborted")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for n, p in self.params.items():
            g = grads.get(n)
            if g is None:
                continue
            lr = self.lr * self.lr_scale.get(n, 1.0)
            if self.decay[n] and self.weight_decay:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            m = self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            v = self.v[n] = b2 * self.v[n] + (1.0 - b2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - lr * upd).astype(p.dtype, copy=False)

    def state_arrays(self) -> dict:
        out = {}
        for n in self.params:
            out[f"adamw.m.{n}"] = self.m[n]
            out[f"adamw.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int) -> None:
        for n in self.params:
            self.m[n] = np.array(arrays[f"adamw.m.{n}"])
            self.v[n] = np.array(arrays[f"adamw.v.{n}"])
        self.step_count = step_count


class LARS:
    """SGD with momentum and a per-layer trust ratio.

    For weights (ndim >= 2) the update is ``g + wd * w`` scaled by
    ``||w|| / (||g|| + wd ||w|| + eps)``; a zero weight gives ratio 0.
    1-D parameters get neither weight decay nor the trust ratio.
    """

    def __init__(self, params: dict, lr: float = 0.1, momentum: float = 0.9, weight_decay: float = 0.0,
                 eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.mu = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def trust_ratio(self, w: np.ndarray, g: np.ndarray) -> float:
        wn = float(np.linalg.norm(w))
        gn = float(np.linalg.norm(g))
        return wn / (gn + self.weight_decay * wn + self.eps)

    def step(self, grads: dict | None = None) -> None:
        grads = grads if grads is not None else {n: p.grad for n, p in self.params.items()}
        for n, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {n!r}; step aborted")
        self.step_count += 1
        for n, p in self.params.items():
            g = grads.get(n)
            if g is None:
                continue
            if p.data.ndim >= 2:
                q = self.trust_ratio(p.data, g)
                u = q * (g + self.weight_decay * p.data)
            else:
                u = g
            self.mu[n] = self.momentum * self.mu[n] + u
            p.data = (p.data - self.lr * self.mu[n]).astype(p.dtype, copy=False)

    def state_arrays(self) -> dict:
        return {f"lars.mu.{n}": v for n, v in self.mu.items()}

    def load_state_arrays(self, arrays: dict, step_count: int) -> None:
        for n in self.params:
            self.mu[n] = np.array(arrays[f"lars.mu.{n}"])
        self.step_count = step_count


def layer_index(name: str, cfg: HiViTConfig) -> int:
    """Depth index of a parameter: embedding -1, blocks 0..L-1, everything after L."""
    d1, d2 = cfg.early_depths
    L = cfg.total_blocks
    name = re.sub(r"^encoder\.", "", name)
    if name.startswith("patch_embed."):
        return -1
    m = re.match(r"early_blocks\.(\d+)\.", name)
    if m:
        return int(m.group(1))
    m = re.match(r"merges\.(\d+)\.", name)
    if m:
        # a merge feeds the first block of the next stage
        return d1 if m.group(1) == "0" else d1 + d2
    m = re.match(r"main_blocks\.(\d+)\.", name)
    if m:
        return d1 + d2 + int(m.group(1))
    return L


def layerwise_multipliers(cfg: HiViTConfig, decay: float, names) -> dict[str, float]:
    """lr scale ``decay ** (L - index)`` per parameter name; the head gets 1."""
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"layer decay must lie in (0, 1], got {decay}")
    L = cfg.total_blocks
    return {n: decay ** (L - layer_index(n, cfg)) for n in names}
