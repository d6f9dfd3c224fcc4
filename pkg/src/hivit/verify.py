"""Invariant suite behind ``hivit verify``.

Each check returns a :class:`CheckResult`; none of them raise on failure so
the CLI can print every line before choosing an exit code.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import HiViTConfig
from .data import decode_checkpoint, encode_checkpoint, synth_corpus
from .mim import MaskedAutoencoder, oracle_check, sample_mask
from .model import HiViT
from .optim import LARS, AdamW
from .tensor import backward, no_grad
from .train import Recipe, build_state, train

# default tolerances (stage 1-2 oracle, main-stage oracle) per precision
DEFAULT_TOL = {np.float32: (1e-6, 1e-5), np.float64: (1e-12, 1e-12)}
GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float = 0.0
    detail: str = ""
    extra: dict = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name:<22} {self.value:.3e}  {self.detail}"


def _images(rng, cfg: HiViTConfig, batch: int, dtype) -> np.ndarray:
    return rng.standard_normal((batch, cfg.in_chans, cfg.img_size, cfg.img_size)).astype(dtype)


def check_oracle(cfg: HiViTConfig, trials: int = 10, seed: int = 0, dtype=np.float32, tol=None,
                 batch: int = 2, ratio: float = 0.75) -> CheckResult:
    """Sparse encoder vs dense-then-gather (stages 1-2) and vs a numpy main stage."""
    tol = DEFAULT_TOL[dtype] if tol is None else tol
    tol = (tol, tol) if np.isscalar(tol) else tuple(tol)
    worst_a = worst_b = 0.0
    failures = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        model = HiViT(cfg, seed=int(rng.integers(2 ** 31))).to(dtype).eval()
        images = _images(rng, cfg, batch, dtype)
        r = float(rng.uniform(0.1, 0.9)) if ratio is None else ratio
        plan = sample_mask(cfg.num_units, r, int(rng.integers(2 ** 31)), batch=batch)
        rep = oracle_check(images, plan, model, tol, raise_on_fail=False)
        worst_a, worst_b = max(worst_a, rep.err_stage12), max(worst_b, rep.err_main)
        if not rep.passed:
            failures.append(t)
    name = f"oracle[{np.dtype(dtype).name}]"
    detail = (f"A(stage1-2) max {worst_a:.2e} tol {tol[0]:g}; B(main) max {worst_b:.2e} tol {tol[1]:g}; "
              f"{trials} trials")
    if failures:
        detail += f"; failing trials {failures[:5]}"
    return CheckResult(name, not failures, max(worst_a, worst_b), detail,
                       {"err_stage12": worst_a, "err_main": worst_b, "tol": tol})


def check_locality(cfg: HiViTConfig, trials: int = 50, seed: int = 0, batch: int = 1) -> CheckResult:
    """Perturb every pixel of one unit; all other units must be bit-identical before the main stage."""
    cfg = cfg.replace(drop_path_rate=0.0)
    model = HiViT(cfg, seed=seed).eval()
    u, C, G = cfg.unit_size, cfg.in_chans, cfg.grid
    bad = []
    for t in range(trials):
        rng = np.random.default_rng([seed, 31, t])
        images = _images(rng, cfg, batch, np.float32)
        j = int(rng.integers(cfg.num_units))
        gy, gx = divmod(j, G)
        pert = images.copy()
        pert[:, :, gy * u:(gy + 1) * u, gx * u:(gx + 1) * u] = rng.standard_normal((batch, C, u, u))
        with no_grad():
            outs = []
            for im in (images, pert):
                emb = model.embed(im)
                outs.append((emb.data, model.forward_early(emb).data))
        keep = np.arange(cfg.num_units) != j
        same = all(np.array_equal(a[:, keep], b[:, keep]) for a, b in zip(*outs))
        if not same:
            bad.append(t)
    return CheckResult("unit-locality", not bad, float(len(bad)),
                       f"{trials - len(bad)}/{trials} trials bit-identical outside the perturbed unit")


def check_grad(cfg: HiViTConfig, n_params: int = 20, seed: int = 0, h: float = 1e-5,
               tol: float = GRAD_TOL, ratio: float = 0.75) -> CheckResult:
    """Pre-train loss gradient vs central differences on random parameter entries, 64-bit.

    The error is normwise over the sampled entries, ``||g - fd|| / ||fd||``,
    so an entry whose true gradient is near zero cannot dominate.
    """
    cfg = cfg.replace(drop_path_rate=0.0)
    mae = MaskedAutoencoder(cfg, seed=seed).to(np.float64)
    rng = np.random.default_rng([seed, 17])
    images = _images(rng, cfg, 2, np.float64)
    plan = sample_mask(cfg.num_units, ratio, seed, batch=2)
    mae.zero_grad()
    backward(mae.loss(images, plan))
    params = list(mae.named_parameters())
    sizes = np.array([p.data.size for _, p in params], dtype=np.float64)
    picks = rng.choice(len(params), size=n_params, p=sizes / sizes.sum())
    g, fd = [], []
    for k in picks:
        name, p = params[k]
        flat = p.data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        vals = []
        for s in (+h, -h):
            flat[i] = orig + s
            with no_grad():
                vals.append(mae.loss(images, plan).item())
        flat[i] = orig
        g.append(p.grad.reshape(-1)[i])
        fd.append((vals[0] - vals[1]) / (2 * h))
    g, fd = np.array(g), np.array(fd)
    err = float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300))
    return CheckResult("grad-check", err < tol, err, f"{n_params} entries, h={h:g}, tol {tol:g}")


def check_optimizer_purity(seed: int = 0) -> CheckResult:
    """Equal (state, grads) give equal updates, and grads are not modified."""
    from .nn import Parameter

    rng = np.random.default_rng(seed)
    shapes = {"w": (6, 5), "b": (5,), "rpe.table": (9, 2)}
    init = {n: rng.standard_normal(s) for n, s in shapes.items()}
    grads = [{n: rng.standard_normal(s) for n, s in shapes.items()} for _ in range(3)]
    frozen = [{n: g.copy() for n, g in gs.items()} for gs in grads]
    problems = []
    for make in (lambda p: AdamW(p, 1e-2, weight_decay=0.1), lambda p: LARS(p, 0.1, weight_decay=1e-3)):
        runs = []
        for _ in range(2):
            params = {n: Parameter(v.copy(), n) for n, v in init.items()}
            opt = make(params)
            for gs in grads:
                opt.step(gs)
            runs.append(({n: p.data for n, p in params.items()}, opt.state_arrays()))
        kind = type(opt).__name__
        if any(not np.array_equal(runs[0][0][n], runs[1][0][n]) for n in shapes):
            problems.append(f"{kind} params differ")
        if any(not np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1]):
            problems.append(f"{kind} moments differ")
    if any(not np.array_equal(g[n], f[n]) for g, f in zip(grads, frozen) for n in shapes):
        problems.append("gradients modified in place")
    return CheckResult("optimizer-purity", not problems, float(len(problems)), "; ".join(problems) or
                       "AdamW and LARS deterministic, inputs untouched")


def _flat_params(model) -> dict:
    return {n: p.data.copy() for n, p in model.named_parameters()}


def check_checkpoint(cfg: HiViTConfig, seed: int = 0, workdir=None) -> CheckResult:
    """save -> load -> save gives identical bytes; a resumed run matches the uninterrupted next step."""
    recipe = Recipe(mode="pretrain", epochs=2, warmup=1, base_lr=1e-3, seed=seed, batch_size=4,
                    augment=True, drop_path=0.1)
    cfg = cfg.replace(num_classes=0)
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        tmp = Path(tmp)
        corpus = synth_corpus(tmp / "c.hvc", 8, cfg.img_size, "gaussian-blobs", seed)
        a = build_state(cfg, recipe)
        train(a, corpus, stop_at=1)
        blob = encode_checkpoint(a.meta(), a.arrays())
        meta, arrays = decode_checkpoint(blob)
        again = encode_checkpoint(meta, arrays)
        same_bytes = blob == again
        (tmp / "k.hvck").write_bytes(blob)
        b = build_state(cfg, recipe)
        b.restore(tmp / "k.hvck")
        train(a, corpus, stop_at=2)
        train(b, corpus, stop_at=2)
        pa, pb = _flat_params(a.model), _flat_params(b.model)
        same_step = all(np.array_equal(pa[n], pb[n]) for n in pa) and a.step_losses[-1] == b.step_losses[-1]
    detail = f"round-trip bytes {'identical' if same_bytes else 'DIFFER'}; " \
             f"resumed step {'bit-identical' if same_step else 'DIVERGES'} ({len(blob)} bytes)"
    return CheckResult("checkpoint", same_bytes and same_step, float(not (same_bytes and same_step)), detail)


def run_suite(cfg: HiViTConfig, seed: int = 0, tol=None, oracle_trials: int = 10,
              locality_trials: int = 50, grad_params: int = 20) -> list[CheckResult]:
    """All checks in order. ``tol`` overrides the 32-bit oracle tolerance (scalar or pair)."""
    results = [check_oracle(cfg, oracle_trials, seed, np.float32, tol)]
    if tol is None:
        results.append(check_oracle(cfg, max(1, oracle_trials // 2), seed, np.float64))
    results.append(check_locality(cfg, locality_trials, seed))
    results.append(check_grad(cfg.replace(debug_cross_unit_mix=False), grad_params, seed))
    results.append(check_optimizer_purity(seed))
    results.append(check_checkpoint(cfg.replace(debug_cross_unit_mix=False), seed))
    return results


__all__ = ["CheckResult", "check_oracle", "check_locality", "check_grad", "check_optimizer_purity",
           "check_checkpoint", "run_suite", "DEFAULT_TOL", "GRAD_TOL"]
