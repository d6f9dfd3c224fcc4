"""Wall-clock comparison of sparse (drop masked units) vs dense (mask tokens) MIM steps."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .config import HiViTConfig
from .mim import DenseMaskedModel, MaskedAutoencoder, sample_mask
from .profile import count_params_flops
from .tensor import backward, count_macs, no_grad

WARMUP = 3


@dataclass
class BenchReport:
    config: str
    mask_ratio: float
    batch: int
    repeats: int
    visible_units: int
    total_units: int
    sparse_ms: float
    dense_ms: float
    wall_ratio: float
    speedup: float
    flop_ratio_encoder: float
    flop_ratio_attention: float
    flop_ratio_token: float
    traced_flop_ratio_encoder: float

    def to_dict(self) -> dict:
        return asdict(self)

    def metrics_rows(self) -> list[dict]:
        """One metrics-stream row per timed variant."""
        rows = []
        for split, ms in (("bench-sparse", self.sparse_ms), ("bench-dense", self.dense_ms)):
            rows.append({"step": self.repeats, "epoch": None, "split": split, "loss": None, "lr": None,
                         "throughput_img_s": self.batch / (ms / 1e3), "wall_ms": ms,
                         "config": self.config, "mask_ratio": self.mask_ratio})
        return rows

    def summary(self) -> str:
        return (f"{self.config}: ratio {self.mask_ratio} ({self.visible_units}/{self.total_units} visible), "
                f"batch {self.batch}, median of {self.repeats}\n"
                f"  sparse step {self.sparse_ms:9.1f} ms\n"
                f"  dense  step {self.dense_ms:9.1f} ms\n"
                f"  sparse/dense wall {self.wall_ratio:.3f}  (speedup {self.speedup:.2f}x)\n"
                f"  analytic FLOP ratio: encoder {self.flop_ratio_encoder:.4f}, "
                f"attention {self.flop_ratio_attention:.4f}, per-token {self.flop_ratio_token:.4f}\n"
                f"  traced encoder FLOP ratio {self.traced_flop_ratio_encoder:.4f}")


def _time_step(model, images, plan, repeats: int) -> float:
    def step():
        model.zero_grad()
        backward(model.loss(images, plan))

    for _ in range(WARMUP):
        step()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        step()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def analytic_ratios(cfg: HiViTConfig, ratio: float) -> dict:
    rep = count_params_flops(cfg.replace(num_classes=0), ratio)
    att = [i for i in rep.items if i.kind == "attention"]
    tok = [i for i in rep.items if i.kind == "token" and i.macs]
    return {
        "encoder": rep.total_flops_sparse / rep.total_flops,
        "attention": sum(rep.sparse_item_flops(i) for i in att) / sum(i.macs for i in att),
        "token": sum(rep.sparse_item_flops(i) for i in tok) / sum(i.macs for i in tok),
    }


def traced_encoder_ratio(mae: MaskedAutoencoder, images, plan) -> float:
    enc = mae.encoder
    with no_grad():
        with count_macs() as dense:
            enc.forward_dense(images)
        with count_macs() as sparse:
            enc.forward_sparse(images, plan.visible_idx)
    return sparse[0] / dense[0]


def run_bench(cfg: HiViTConfig, ratio: float = 0.75, batch: int = 8, repeats: int = 5, seed: int = 0) -> BenchReport:
    mae = MaskedAutoencoder(cfg, seed=seed)
    dense = DenseMaskedModel(mae, seed=seed)
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((batch, cfg.in_chans, cfg.img_size, cfg.img_size)).astype(np.float32)
    plan = sample_mask(cfg.num_units, ratio, seed, batch=batch)
    t_sparse = _time_step(mae, images, plan, repeats)
    t_dense = _time_step(dense, images, plan, repeats)
    an = analytic_ratios(cfg, ratio)
    return BenchReport(
        config=cfg.name, mask_ratio=ratio, batch=batch, repeats=repeats,
        visible_units=plan.num_visible, total_units=cfg.num_units,
        sparse_ms=t_sparse * 1e3, dense_ms=t_dense * 1e3,
        wall_ratio=t_sparse / t_dense, speedup=t_dense / t_sparse,
        flop_ratio_encoder=an["encoder"], flop_ratio_attention=an["attention"], flop_ratio_token=an["token"],
        traced_flop_ratio_encoder=traced_encoder_ratio(mae, images[:1], sample_mask(cfg.num_units, ratio, seed)),
    )
