"""Closed-form parameter and FLOP accounting.

FLOPs are counted as multiply-accumulates of the matrix products (one
multiply-add = one FLOP), the convention under which published vision
transformer budgets are quoted. Norms, activations, softmax and bias adds
are not counted. ``flops_per_mac=2`` gives the strict arithmetic count.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .config import HiViTConfig

REPORT_VERSION = 1

# published (params M, FLOPs G) at 224^2
GOLDEN = {"T": (19.2, 4.6), "S": (37.5, 9.1), "B": (66.4, 15.9)}
PARAM_TOL = 0.01
FLOP_TOL = 0.05


@dataclass
class Item:
    name: str
    stage: int
    kind: str  # "token": scales with token count; "attention": with its square; "image": once per image
    params: int
    macs: int


@dataclass
class StageRow:
    stage: int
    blocks: int
    tokens: int
    params: int
    flops_dense: int
    flops_sparse: int
    flops_token: int
    flops_attention: int


@dataclass
class ProfileReport:
    config: dict
    mask_ratio: float
    visible_units: int
    total_units: int
    rows: list[StageRow]
    items: list[Item] = field(repr=False)
    flops_per_mac: int = 1
    version: int = REPORT_VERSION

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops_dense for r in self.rows)

    @property
    def total_flops_sparse(self) -> int:
        return sum(r.flops_sparse for r in self.rows)

    def sparse_item_flops(self, item: Item) -> float:
        f = self.visible_units / self.total_units
        scale = {"token": f, "attention": f * f, "image": 1.0}[item.kind]
        return item.macs * self.flops_per_mac * scale

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "config": self.config,
            "mask_ratio": self.mask_ratio,
            "visible_units": self.visible_units,
            "total_units": self.total_units,
            "flops_per_mac": self.flops_per_mac,
            "rows": [asdict(r) for r in self.rows],
            "items": [asdict(i) for i in self.items],
            "totals": {"params": self.total_params, "flops_dense": self.total_flops,
                       "flops_sparse": self.total_flops_sparse},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=list)

    def to_table(self) -> str:
        head = f"{'stage':>5} {'blocks':>6} {'tokens':>7} {'params(M)':>10} {'GFLOPs':>9} {'GFLOPs@sparse':>14}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.stage:>5} {r.blocks:>6} {r.tokens:>7} {r.params / 1e6:>10.3f} "
                         f"{r.flops_dense / 1e9:>9.3f} {r.flops_sparse / 1e9:>14.3f}")
        lines.append("-" * len(head))
        lines.append(f"{'total':>5} {'':>6} {'':>7} {self.total_params / 1e6:>10.3f} "
                     f"{self.total_flops / 1e9:>9.3f} {self.total_flops_sparse / 1e9:>14.3f}")
        lines.append(f"mask ratio {self.mask_ratio} -> {self.visible_units}/{self.total_units} units visible")
        return "\n".join(lines)


def _ln(d: int) -> int:
    return 2 * d


def _lin(i: int, o: int, bias: bool = True) -> int:
    return i * o + (o if bias else 0)


def mlp_macs(tokens: int, dim: int, ratio: float) -> int:
    h = int(dim * ratio)
    return tokens * 2 * dim * h


def attention_macs(tokens: int, dim: int) -> tuple[int, int]:
    """(projection MACs, token-interaction MACs) of one global attention layer."""
    return 4 * tokens * dim * dim, 2 * tokens * tokens * dim


def items_for(cfg: HiViTConfig) -> list[Item]:
    M = cfg.num_units
    k = cfg.tokens_per_side
    D1, D2, D3 = cfg.dims
    d1, d2 = cfg.early_depths
    items: list[Item] = []
    p = cfg.embed_patch
    n_in = cfg.in_chans * p * p
    E = cfg.embed_dim
    n1 = M * k * k
    items.append(Item("patch_embed", 1, "token", _lin(n_in, E) + _ln(E), n1 * n_in * E))

    def early(name, stage, D, n):
        h1, h2 = int(D * cfg.mlp_ratio_replace), int(D * cfg.mlp_ratio_main)
        params = _ln(D) + _lin(D, h1) + _lin(h1, D) + _ln(D) + _lin(D, h2) + _lin(h2, D)
        items.append(Item(name, stage, "token", params,
                          mlp_macs(n, D, cfg.mlp_ratio_replace) + mlp_macs(n, D, cfg.mlp_ratio_main)))

    if cfg.hierarchical:
        for i in range(d1):
            early(f"early_blocks.{i}", 1, D1, n1)
        n2 = n1 // 4
        items.append(Item("merges.0", 2, "token", _ln(4 * D1) + _lin(4 * D1, 2 * D1, False), n2 * 4 * D1 * 2 * D1))
        for i in range(d2):
            early(f"early_blocks.{d1 + i}", 2, D2, n2)
        n3 = n2 // 4
        items.append(Item("merges.1", 3, "token", _ln(4 * D2) + _lin(4 * D2, 2 * D2, False), n3 * 4 * D2 * 2 * D2))
    n3 = M
    G = cfg.grid
    for j in range(cfg.depths[2]):
        name = f"main_blocks.{j}"
        h = int(D3 * cfg.mlp_ratio_main)
        proj, inter = attention_macs(n3, D3)
        params = _ln(D3) + _lin(D3, 3 * D3) + _lin(D3, D3) + _ln(D3) + _lin(D3, h) + _lin(h, D3)
        items.append(Item(name, 3, "token", params, proj + mlp_macs(n3, D3, cfg.mlp_ratio_main)))
        items.append(Item(name + ".attn_interaction", 3, "attention", 0, inter))
        if cfg.use_rpe:
            items.append(Item(name + ".rpe", 3, "token", (2 * G - 1) ** 2 * cfg.heads, 0))
    items.append(Item("norm", 3, "token", _ln(D3), 0))
    if cfg.num_classes:
        items.append(Item("head", 3, "image", _lin(D3, cfg.num_classes), D3 * cfg.num_classes))
    return items


def count_params_flops(cfg: HiViTConfig, mask_ratio: float = 0.75, flops_per_mac: int = 1) -> ProfileReport:
    """Per-stage and total parameter/FLOP counts, dense and with units masked."""
    from .mim import num_visible

    cfg.validate()
    items = items_for(cfg)
    M = cfg.num_units
    vis = num_visible(M, mask_ratio) if 0 < mask_ratio < 1 else M
    rep = ProfileReport(cfg.to_dict(), mask_ratio, vis, M, [], items, flops_per_mac)
    k = cfg.tokens_per_side
    d1, d2 = cfg.early_depths
    tokens = {1: M * k * k, 2: M * k * k // 4, 3: M}
    blocks = {1: d1, 2: d2, 3: cfg.depths[2]}
    for s in (1, 2, 3):
        its = [i for i in items if i.stage == s]
        dense = sum(i.macs for i in its) * flops_per_mac
        sparse = sum(rep.sparse_item_flops(i) for i in its)
        rep.rows.append(StageRow(
            stage=s, blocks=blocks[s], tokens=tokens[s],
            params=sum(i.params for i in its),
            flops_dense=dense, flops_sparse=int(round(sparse)),
            flops_token=sum(i.macs for i in its if i.kind != "attention") * flops_per_mac,
            flops_attention=sum(i.macs for i in its if i.kind == "attention") * flops_per_mac,
        ))
    return rep


def check_golden(preset: str, rep: ProfileReport) -> list[str]:
    """Deviations from the published budget for a named preset (empty when within tolerance)."""
    if preset not in GOLDEN:
        return []
    params_m, flops_g = GOLDEN[preset]
    problems = []
    got_p = rep.total_params / 1e6
    got_f = rep.total_flops / 1e9
    if abs(got_p - params_m) > PARAM_TOL * params_m:
        problems.append(f"params {got_p:.2f}M vs {params_m}M (tol {PARAM_TOL:.0%})")
    if abs(got_f - flops_g) > FLOP_TOL * flops_g:
        problems.append(f"FLOPs {got_f:.2f}G vs {flops_g}G (tol {FLOP_TOL:.0%})")
    return problems
