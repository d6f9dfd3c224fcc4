"""Training loops for MIM pre-training, fine-tuning, and linear probing.

All randomness in a step (batch order, augmentation, mask plans, drop
path) is drawn from generators keyed on ``(seed, epoch)`` or
``(seed, step)``, so the training state is fully described by the
parameters, optimizer moments, and the step counter. Resuming from a
checkpoint therefore replays the next step bit-identically.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import IO

import numpy as np

from .config import ConfigError, HiViTConfig, _coerce, parse_kv
from .data import Corpus, load_checkpoint, metrics_append, save_checkpoint
from .mim import MaskedAutoencoder, sample_mask
from .model import HiViT
from .nn import Module
from .optim import LARS, AdamW, Schedule, layerwise_multipliers, lr_at
from .tensor import Tensor, backward, cross_entropy, no_grad

log = logging.getLogger(__name__)


@dataclass
class Recipe:
    mode: str = "pretrain"
    epochs: int = 1
    warmup: float = 0.0
    base_lr: float = 1e-3
    min_lr: float = 0.0
    wd: float = 0.05
    mask_ratio: float = 0.75
    lwd: float = 1.0
    drop_path: float = 0.0
    seed: int = 0
    batch_size: int = 32
    ckpt_every: int = 0  # epochs between checkpoints; 0 = final only
    max_steps: int = 0  # 0 = run all epochs
    norm_pix: bool = True
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    eval_every: int = 1
    # reference values of the full-scale recipe; documentation only
    reference_epochs: int = 0
    reference_batch_size: int = 0
    reference_base_lr: float = 0.0

    def validate(self) -> "Recipe":
        if self.mode not in ("pretrain", "finetune", "linprobe"):
            raise ConfigError(f"unknown recipe mode {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in (0, 1)")
        if not 0.0 < self.lwd <= 1.0:
            raise ConfigError("lwd must lie in (0, 1]")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


RECIPES = {
    "pretrain": Recipe(mode="pretrain", epochs=300, warmup=40, base_lr=1.5e-4, wd=0.05, beta2=0.95,
                       reference_epochs=300, reference_batch_size=4096, reference_base_lr=1.5e-4),
    "finetune": Recipe(mode="finetune", epochs=100, warmup=5, base_lr=5e-4, wd=0.05, lwd=0.65, drop_path=0.1,
                       augment=False, reference_epochs=100, reference_batch_size=1024, reference_base_lr=5e-4),
    "supervised": Recipe(mode="finetune", epochs=300, warmup=20, base_lr=1e-3, wd=0.05, augment=False,
                         reference_epochs=300, reference_batch_size=1024, reference_base_lr=1e-3),
    "linprobe": Recipe(mode="linprobe", epochs=100, warmup=10, base_lr=0.1, wd=0.0, augment=False,
                       reference_epochs=100, reference_batch_size=16384, reference_base_lr=0.1),
}


def parse_recipe(text: str, source: str = "<string>") -> Recipe:
    types = {f.name: f.type for f in fields(Recipe)}
    base = None
    vals = {}
    for no, key, raw in parse_kv(text, source):
        if key == "preset":
            if raw not in RECIPES:
                raise ConfigError(f"{source}:{no}: unknown recipe preset {raw!r}")
            base = RECIPES[raw]
            continue
        if key not in types:
            raise ConfigError(f"{source}:{no}: unknown recipe key {key!r}")
        try:
            vals[key] = _coerce(types[key], raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{no}: bad value for {key}: {exc}") from None
    rec = dataclasses.replace(base, **vals) if base else Recipe(**vals)
    return rec.validate()


def load_recipe(spec: str) -> Recipe:
    p = Path(spec)
    if p.is_file():
        return parse_recipe(p.read_text(), str(p))
    if spec in RECIPES:
        return RECIPES[spec]
    raise ConfigError(f"no recipe file or preset named {spec!r}")


# -- augmentation -----------------------------------------------------------
def random_resized_crop(images: np.ndarray, rng: np.random.Generator, scale=(0.2, 1.0),
                        ratio=(3 / 4, 4 / 3), flip: bool = True) -> np.ndarray:
    """Per-image random crop resized back to the input size (bilinear), plus h-flip."""
    B, C, H, W = images.shape
    out = np.empty_like(images)
    for b in range(B):
        area = H * W
        for _ in range(10):
            a = area * rng.uniform(*scale)
            r = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
            w, h = int(round(np.sqrt(a * r))), int(round(np.sqrt(a / r)))
            if 0 < w <= W and 0 < h <= H:
                break
        else:
            w, h = W, H
        y0, x0 = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
        ys = y0 + (np.arange(H) + 0.5) * h / H - 0.5
        xs = x0 + (np.arange(W) + 0.5) * w / W - 0.5
        ys, xs = np.clip(ys, 0, H - 1), np.clip(xs, 0, W - 1)
        yi, xi = np.minimum(ys.astype(int), H - 2), np.minimum(xs.astype(int), W - 2)
        fy, fx = (ys - yi)[:, None], (xs - xi)[None, :]
        img = images[b]
        top = img[:, yi][:, :, xi] * (1 - fx) + img[:, yi][:, :, xi + 1] * fx
        bot = img[:, yi + 1][:, :, xi] * (1 - fx) + img[:, yi + 1][:, :, xi + 1] * fx
        res = top * (1 - fy) + bot * fy
        if flip and rng.random() < 0.5:
            res = res[:, :, ::-1]
        out[b] = res
    return out


def horizontal_flip(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flips = rng.random(images.shape[0]) < 0.5
    out = images.copy()
    out[flips] = out[flips][..., ::-1]
    return out


# -- state ------------------------------------------------------------------
@dataclass
class TrainState:
    cfg: HiViTConfig
    recipe: Recipe
    model: Module
    optimizer: object
    schedule: Schedule
    lr_scale: dict
    step: int = 0
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)

    @property
    def wd(self) -> float:
        return self.recipe.wd

    @property
    def drop_path_active(self) -> bool:
        return self.recipe.drop_path > 0

    def trainable(self) -> dict:
        return self.optimizer.params

    def meta(self) -> dict:
        opt = self.optimizer
        return {
            "format": "hivit-train",
            "mode": self.recipe.mode,
            "config": self.cfg.to_dict(),
            "recipe": self.recipe.to_dict(),
            "step": self.step,
            "rng": {"kind": "counter", "seed": self.recipe.seed, "step": self.step},
            "optimizer": {"kind": type(opt).__name__, "step_count": opt.step_count},
        }

    def arrays(self) -> dict:
        out = {f"param.{n}": p.data for n, p in self.model.named_parameters()}
        out.update(self.optimizer.state_arrays())
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.meta(), self.arrays())

    def restore(self, path) -> None:
        meta, arrays = load_checkpoint(path)
        if meta.get("mode") != self.recipe.mode:
            raise ConfigError(f"checkpoint mode {meta.get('mode')!r} does not match {self.recipe.mode!r}")
        params = {k[6:]: v for k, v in arrays.items() if k.startswith("param.")}
        self.model.load_state_dict(params)
        self.optimizer.load_state_arrays(arrays, meta["optimizer"]["step_count"])
        self.step = int(meta["step"])


def _cfg_with_drop_path(cfg: HiViTConfig, recipe: Recipe) -> HiViTConfig:
    return cfg.replace(drop_path_rate=recipe.drop_path)


def _load_encoder_weights(encoder: HiViT, path) -> None:
    """Copy ``encoder.*`` (or bare) parameters from a checkpoint into ``encoder``."""
    _, arrays = load_checkpoint(path)
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param.")}
    src = {k[8:]: v for k, v in params.items() if k.startswith("encoder.")} or params
    own = dict(encoder.named_parameters())
    wanted = {k: v for k, v in src.items() if k in own}
    missing = sorted(k for k in own if k not in wanted and not k.startswith("head."))
    if missing:
        raise KeyError(f"checkpoint lacks encoder parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    encoder.load_state_dict(wanted, strict=False)


def build_state(cfg: HiViTConfig, recipe: Recipe, init_from=None, num_classes: int | None = None) -> TrainState:
    recipe.validate()
    cfg = _cfg_with_drop_path(cfg, recipe)
    sched = Schedule(recipe.base_lr, recipe.warmup, recipe.epochs, recipe.min_lr)
    if recipe.mode == "pretrain":
        model = MaskedAutoencoder(cfg.replace(num_classes=0), seed=recipe.seed)
        params = dict(model.named_parameters())
        opt = AdamW(params, recipe.base_lr, (recipe.beta1, recipe.beta2), weight_decay=recipe.wd)
        scale = {}
    else:
        nc = num_classes if num_classes is not None else cfg.num_classes
        if nc < 1:
            raise ConfigError("fine-tuning and linear probing need num_classes > 0")
        model = HiViT(cfg.replace(num_classes=nc), seed=recipe.seed)
        if init_from:
            _load_encoder_weights(model, init_from)
        if recipe.mode == "finetune":
            params = dict(model.named_parameters())
            scale = layerwise_multipliers(model.cfg, recipe.lwd, params)
            opt = AdamW(params, recipe.base_lr, (recipe.beta1, recipe.beta2), weight_decay=recipe.wd,
                        lr_scale=scale)
        else:
            params = {f"head.{k}": v for k, v in model.head.named_parameters()}
            opt = LARS(params, recipe.base_lr, recipe.momentum, recipe.wd)
            scale = {}
    return TrainState(model.cfg if hasattr(model, "cfg") else cfg, recipe, model, opt, sched, scale)


# -- steps ------------------------------------------------------------------
def supervised_forward(images, cfg: HiViTConfig, model: HiViT) -> Tensor:
    if cfg.num_classes < 1 or model.head is None:
        raise ValueError("supervised forward needs num_classes > 0")
    return model.forward_logits(images)


def _step_rng(recipe: Recipe, step: int) -> np.random.Generator:
    return np.random.default_rng([recipe.seed, 7919, step])


def _pretrain_step(state: TrainState, imgs: np.ndarray, labels, rng) -> dict:
    model: MaskedAutoencoder = state.model
    r = state.recipe
    if r.augment:
        imgs = random_resized_crop(imgs, rng)
    plan = sample_mask(state.cfg.num_units, r.mask_ratio, int(rng.integers(2 ** 31)), batch=imgs.shape[0])
    model.set_rng(rng if r.drop_path > 0 else None)
    model.zero_grad()
    loss = model.loss(imgs, plan, normalize=r.norm_pix)
    backward(loss)
    return {"loss": loss.item()}


def _finetune_step(state: TrainState, imgs, labels, rng) -> dict:
    model: HiViT = state.model
    if state.recipe.augment:
        imgs = horizontal_flip(imgs, rng)
    model.set_rng(rng if state.recipe.drop_path > 0 else None)
    model.zero_grad()
    logits = model.forward_logits(imgs)
    loss = cross_entropy(logits, labels)
    backward(loss)
    return {"loss": loss.item(), "correct": int((logits.data.argmax(-1) == labels).sum())}


def _linprobe_step(state: TrainState, imgs, labels, rng) -> dict:
    model: HiViT = state.model
    if state.recipe.augment:
        imgs = horizontal_flip(imgs, rng)
    with no_grad():
        model.eval()
        feats = model.forward_dense(imgs).data.mean(axis=1)
    model.train()
    model.zero_grad()
    logits = model.head(Tensor(feats))
    loss = cross_entropy(logits, labels)
    backward(loss)
    return {"loss": loss.item(), "correct": int((logits.data.argmax(-1) == labels).sum())}


def evaluate_accuracy(model: HiViT, corpus: Corpus, batch_size: int = 64) -> float:
    was = model.training
    model.eval()
    correct = 0
    with no_grad():
        for s in range(0, len(corpus), batch_size):
            idx = np.arange(s, min(s + batch_size, len(corpus)))
            x, y = corpus.batch(idx, dtype=model.patch_embed.proj.weight.dtype)
            correct += int((model.forward_logits(x).data.argmax(-1) == y).sum())
    model.train(was)
    return correct / len(corpus)


_STEPS = {"pretrain": _pretrain_step, "finetune": _finetune_step, "linprobe": _linprobe_step}


def train(state: TrainState, corpus: Corpus, metrics: IO[str] | None = None, out_dir=None,
          stop_at: int | None = None) -> TrainState:
    """Run (or continue) the epoch loop until the recipe, ``max_steps``, or ``stop_at`` ends it."""
    r = state.recipe
    cfg = state.cfg
    if corpus.height != cfg.img_size or corpus.width != cfg.img_size or corpus.channels != cfg.in_chans:
        raise ConfigError(f"corpus images {corpus.height}x{corpus.width}x{corpus.channels} do not match "
                          f"config img_size {cfg.img_size} with {cfg.in_chans} channels")
    if r.mode != "pretrain" and not corpus.has_labels:
        raise ConfigError(f"{r.mode} needs a labeled corpus")
    n = len(corpus)
    bs = min(r.batch_size, n)
    spe = n // bs
    total = r.epochs * spe
    if r.max_steps:
        total = min(total, r.max_steps)
    if stop_at is not None:
        total = min(total, stop_at)
    step_fn = _STEPS[r.mode]
    dtype = state.model.parameters()[0].dtype
    state.model.train()
    ep_loss, ep_correct, ep_seen, ep_t0 = 0.0, 0, 0, time.perf_counter()
    while state.step < total:
        epoch, pos = divmod(state.step, spe)
        perm = np.random.default_rng([r.seed, 104729, epoch]).permutation(n)
        idx = perm[pos * bs:(pos + 1) * bs]
        imgs, labels = corpus.batch(idx, dtype=dtype)
        state.optimizer.lr = lr_at(state.schedule, state.step / spe)
        out = step_fn(state, imgs, labels, _step_rng(r, state.step))
        state.optimizer.step()
        state.step += 1
        state.step_losses.append(out["loss"])
        ep_loss += out["loss"] * len(idx)
        ep_correct += out.get("correct", 0)
        ep_seen += len(idx)
        end_of_epoch = state.step % spe == 0
        if end_of_epoch or state.step == total:
            wall = (time.perf_counter() - ep_t0) * 1e3
            row = {"step": state.step, "epoch": state.step / spe, "split": "train",
                   "loss": ep_loss / ep_seen, "lr": state.optimizer.lr,
                   "throughput_img_s": ep_seen / (wall / 1e3), "wall_ms": wall}
            if r.mode != "pretrain":
                row["acc_running"] = ep_correct / ep_seen
                ep_no = state.step // spe
                if r.eval_every and (ep_no % r.eval_every == 0 or state.step == total):
                    row["acc"] = evaluate_accuracy(state.model, corpus)
            state.history.append(row)
            if metrics is not None:
                metrics_append(metrics, row)
            log.info("step %d epoch %.2f loss %.4f", state.step, row["epoch"], row["loss"])
            if out_dir is not None and (state.step == total or (
                    r.ckpt_every and end_of_epoch and (state.step // spe) % r.ckpt_every == 0)):
                state.save(Path(out_dir) / "checkpoint.hvck")
            ep_loss, ep_correct, ep_seen, ep_t0 = 0.0, 0, 0, time.perf_counter()
    return state


def _run(mode, corpus, cfg, recipe, out_dir=None, init_from=None, resume=None, num_classes=None,
         dtype=np.float32) -> TrainState:
    if recipe.mode != mode:
        recipe = dataclasses.replace(recipe, mode=mode)
    state = build_state(cfg, recipe, init_from=init_from, num_classes=num_classes)
    if dtype != np.float32:
        state.model.to(dtype)
    if resume:
        state.restore(resume)
    metrics = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        metrics = open(Path(out_dir) / "metrics.jsonl", "a", buffering=1)
    try:
        return train(state, corpus, metrics, out_dir)
    finally:
        if metrics is not None:
            metrics.close()


def run_pretrain(corpus, cfg, recipe, out_dir=None, resume=None) -> TrainState:
    return _run("pretrain", corpus, cfg, recipe, out_dir, resume=resume)


def run_finetune(corpus, cfg, recipe, out_dir=None, init_from=None, resume=None, num_classes=None) -> TrainState:
    return _run("finetune", corpus, cfg, recipe, out_dir, init_from, resume, num_classes)


def run_linprobe(corpus, cfg, recipe, out_dir=None, init_from=None, resume=None, num_classes=None) -> TrainState:
    return _run("linprobe", corpus, cfg, recipe, out_dir, init_from, resume, num_classes)
