"""Closed-form parameter and multiply-accumulate accounting, plus the design-space sweep.

MAC convention: one fused multiply-add counts 1. Every matrix product and
convolution is counted in full, including the two attention products
(scores and score-weighted values). Bilinear resampling costs 4 MACs per
output value (resizes) or per sampled point per channel (deformable
sampling). Element-wise ops, norms, softmax and reductions are free.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .config import BranchConfig, InteractionSpec, PiipConfig, unit_directions, unit_pairs
from .interaction import ffn_hidden


# Published (params, MACs) per module group for presets, used only for side-by-side display.
REFERENCE_COSTS = {
    "piip-b": {
        "branch_1": (59.6e6, 3.8e9),
        "branch_2": (15.1e6, 4.3e9),
        "branch_3": (4.0e6, 4.9e9),
        "interactions": (21.2e6, 5.1e9),
        "merge": (0.3e6, 0.2e9),
    },
}


@dataclass
class CostRow:
    name: str
    params: int = 0
    macs: int = 0


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)

    def row(self, name: str) -> CostRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def get(self, name: str) -> CostRow:
        try:
            return self.row(name)
        except KeyError:
            r = CostRow(name)
            self.rows.append(r)
            return r

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.rows]

    @property
    def params_total(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs_total(self) -> int:
        return sum(r.macs for r in self.rows)

    def _sum(self, prefix: str, attr: str) -> int:
        return sum(getattr(r, attr) for r in self.rows if r.name.startswith(prefix))

    @property
    def interaction_params(self) -> int:
        return self._sum("interaction_", "params")

    @property
    def interaction_macs(self) -> int:
        return self._sum("interaction_", "macs")

    def branch_params(self, j: int) -> int:
        """Parameters of branch ``j`` (1-based) including its position embedding."""
        return self.row(f"branch_{j}").params + self.row(f"pos_embed_{j}").params

    def group(self, key: str) -> tuple[int, int]:
        """``(params, macs)`` for ``branch_j`` (position embedding included), ``interactions`` or a plain row."""
        if key.startswith("branch_"):
            j = int(key.split("_")[1])
            return self.branch_params(j), self.row(key).macs
        if key == "interactions":
            return self.interaction_params, self.interaction_macs
        r = self.row(key)
        return r.params, r.macs

    def sorted(self) -> "CostReport":
        return CostReport(sorted(self.rows, key=lambda r: _row_order(r.name)))

    def table(self) -> str:
        lines = [f"{'module':<20}{'#params':>24}{'#MACs':>26}"]
        for r in self.sorted().rows:
            lines.append(f"{r.name:<20}{_fmt(r.params, 'M'):>24}{_fmt(r.macs, 'G'):>26}")
        lines.append(f"{'total':<20}{_fmt(self.params_total, 'M'):>24}{_fmt(self.macs_total, 'G'):>26}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "params", "macs"])
        for r in self.sorted().rows:
            w.writerow([r.name, r.params, r.macs])
        w.writerow(["total", self.params_total, self.macs_total])
        return buf.getvalue()


def _fmt(x: int, unit: str) -> str:
    scale = {"M": 1e6, "G": 1e9}[unit]
    return f"{x / scale:.3f}{unit} ({x})"


def _row_order(name: str):
    kinds = ["branch", "pos_embed", "interaction", "merge", "head"]
    for i, k in enumerate(kinds):
        if name.startswith(k):
            return (i, name)
    return (len(kinds), name)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _linear_params(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def vit_layer_params(dim: int, mlp_hidden: int) -> int:
    return (2 * dim + _linear_params(dim, 3 * dim) + _linear_params(dim, dim)
            + 2 * dim + _linear_params(dim, mlp_hidden) + _linear_params(mlp_hidden, dim))


def branch_body_params(b: BranchConfig) -> int:
    """Patch embedding, class token and layers; excludes the position embedding."""
    n = _linear_params(3 * b.patch * b.patch, b.dim)
    if b.use_cls_token:
        n += b.dim
    return n + b.depth * vit_layer_params(b.dim, b.mlp_hidden)


def pos_embed_params(b: BranchConfig) -> int:
    return (b.num_patches + int(b.use_cls_token)) * b.dim


def branch_param_count(b: BranchConfig) -> int:
    return branch_body_params(b) + pos_embed_params(b)


def _attention_params(dim: int, heads: int, spec: InteractionSpec) -> int:
    if spec.attention == "deformable":
        hk = heads * spec.sample_points
        return 2 * _linear_params(dim, dim) + _linear_params(dim, 2 * hk) + _linear_params(dim, hk)
    return 4 * _linear_params(dim, dim)


def half_params(q: BranchConfig, kv: BranchConfig, spec: InteractionSpec) -> int:
    d = q.dim
    hidden = ffn_hidden(d, spec.ffn_ratio)
    gate = 1 if spec.scalar_gates else d
    return (_linear_params(kv.dim, d) + 3 * 2 * d + _attention_params(d, q.heads, spec)
            + _linear_params(d, hidden) + _linear_params(hidden, d) + 2 * gate)


# ---------------------------------------------------------------------------
# multiply-accumulates
# ---------------------------------------------------------------------------

def tokens(b: BranchConfig) -> int:
    return b.num_patches + int(b.use_cls_token)


def vit_layer_macs(n: int, dim: int, mlp_hidden: int) -> int:
    """qkv + output projection + MLP + the two n x n attention products."""
    return 4 * n * dim * dim + 2 * n * dim * mlp_hidden + 2 * n * n * dim


def branch_macs(b: BranchConfig, image_side: int) -> int:
    m = 0 if b.resolution == image_side else 4 * 3 * b.resolution * b.resolution
    m += b.num_patches * 3 * b.patch * b.patch * b.dim
    return m + b.depth * vit_layer_macs(tokens(b), b.dim, b.mlp_hidden)


def half_macs(q: BranchConfig, kv: BranchConfig, spec: InteractionSpec) -> int:
    d = q.dim
    nq, nk = q.num_patches, kv.num_patches
    hidden = ffn_hidden(d, spec.ffn_ratio)
    m = nk * kv.dim * d  # FC
    if spec.attention == "deformable":
        k = spec.sample_points
        m += nk * d * d                        # value projection
        m += nq * d * (3 * q.heads * k)        # offsets + logits
        m += 4 * nq * k * d                    # bilinear sampling
        m += nq * k * d                        # weighted sum over points
        m += nq * d * d                        # output projection
    else:
        m += 2 * nq * d * d + 2 * nk * d * d   # q, output, k, v projections
        m += 2 * nq * nk * d                   # scores and weighted values
    return m + 2 * nq * d * hidden


def _merge_costs(cfg: PiipConfig) -> tuple[int, int]:
    d1 = cfg.branches[0].dim
    g_last = cfg.branches[-1].grid
    params = macs = 0
    for b, on in zip(cfg.branches, cfg.subset):
        if not on:
            continue
        g = b.grid
        if cfg.mode == "dense":
            params += (9 * b.dim * d1 + d1) + 2 * d1 + (9 * d1 * d1 + d1) + 2 * d1
            macs += g * g * d1 * 9 * (b.dim + d1)
        else:
            params += _linear_params(b.dim, d1) + 2 * d1
            macs += g * g * b.dim * d1
        if g != g_last:
            macs += 4 * d1 * g_last * g_last
    params += len(cfg.branches)  # scalar merge weights
    return params, macs


def _head_costs(cfg: PiipConfig) -> tuple[int, int]:
    k = cfg.num_classes
    if cfg.mode == "classify_finetune":
        dims = [b.dim for b in cfg.branches]
    elif cfg.mode == "classify_pretrain":
        dims = [cfg.branches[0].dim]
    else:
        return 0, 0
    return sum(2 * d + _linear_params(d, k) for d in dims), sum(d * k for d in dims)


def analyze(cfg: PiipConfig) -> CostReport:
    """Full per-module parameter and MAC report for a single image."""
    side = cfg.max_resolution
    rep = CostReport()
    for j, b in enumerate(cfg.branches, 1):
        rep.rows.append(CostRow(f"branch_{j}", branch_body_params(b), branch_macs(b, side)))
    for j, b in enumerate(cfg.branches, 1):
        rep.rows.append(CostRow(f"pos_embed_{j}", pos_embed_params(b), 0))
    spec = cfg.interactions
    if spec.count:
        halves = unit_directions(spec.direction)
        for a, b in unit_pairs(len(cfg.branches), spec.direction):
            ba, bb = cfg.branches[a], cfg.branches[b]
            p = m = 0
            if "a" in halves:
                p += half_params(ba, bb, spec)
                m += half_macs(ba, bb, spec)
            if "b" in halves:
                p += half_params(bb, ba, spec)
                m += half_macs(bb, ba, spec)
            rep.rows.append(CostRow(f"interaction_{a + 1}_{b + 1}", p * spec.count, m * spec.count))
    if cfg.mode != "classify_finetune":
        rep.rows.append(CostRow("merge", *_merge_costs(cfg)))
    if cfg.mode != "dense":
        rep.rows.append(CostRow("head", *_head_costs(cfg)))
    return rep


def count_params(cfg: PiipConfig) -> CostReport:
    """Closed-form report; the ``params`` column equals the built model's parameter count."""
    return analyze(cfg)


def count_macs(cfg: PiipConfig) -> CostReport:
    """Closed-form report; the ``macs`` column equals an instrumented forward on one image."""
    return analyze(cfg)


def instrumented_macs(model, image) -> CostReport:
    """Run one forward with the counting hook on and report MACs per scope and params per row."""
    from .model import forward, param_row
    from .numerics import counting_macs

    with counting_macs() as counter:
        forward(model, image)
    rep = CostReport()
    for name, p in model.named_parameters():
        rep.get(param_row(name)).params += p.size
    for name, macs in counter.rows.items():
        rep.get(name).macs += macs
    for name in analyze(model.cfg).names:
        rep.get(name)
    return rep.sorted()


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_COLUMNS_FIXED = ("config_id", "branch_dims", "branch_resolutions", "params_total", "macs_total")


def config_key(cfg: PiipConfig) -> str:
    from .config_io import model_to_dict

    return json.dumps(model_to_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_id(cfg: PiipConfig) -> str:
    dims = "-".join(str(b.dim) for b in cfg.branches)
    res = "-".join(str(b.resolution) for b in cfg.branches)
    return f"d{dims}_r{res}"


def _assignments(grid: Sequence[int], menu: Sequence[BranchConfig]) -> Iterable[tuple[int, ...]]:
    values = sorted(set(int(r) for r in grid))
    for combo in itertools.combinations(values, len(menu)):
        if all(r % b.patch == 0 for r, b in zip(combo, menu)):
            yield combo


def sweep(budget_macs: int, branch_menu: Sequence[BranchConfig], resolution_grid: Sequence[int],
          interactions: InteractionSpec | None = None, mode: str = "classify_finetune",
          num_classes: int = 1000, threads: int | None = None) -> list[tuple[PiipConfig, CostReport]]:
    """Enumerate monotone resolution assignments within ``budget_macs`` and rank them.

    ``branch_menu`` lists branch templates Branch 1 first (largest model);
    resolutions are assigned strictly increasing so larger models always get
    smaller images. Ranking: largest-image-branch resolution descending, then
    total MACs ascending, then the canonical config serialisation.
    """
    if not branch_menu or not resolution_grid:
        raise ValueError("sweep needs a non-empty branch menu and resolution grid")
    interactions = interactions or InteractionSpec()
    cls = mode == "classify_finetune"
    base = PiipConfig(branches=tuple(b.replace(use_cls_token=cls) for b in branch_menu),
                      interactions=interactions, mode=mode, num_classes=num_classes)

    def evaluate(res):
        cfg = base.with_resolutions(res)
        if cfg.problems():
            return None
        rep = analyze(cfg)
        return (cfg, rep) if rep.macs_total <= budget_macs else None

    if threads is None:
        threads = int(os.environ.get("PIIP_THREADS", "1") or 1)
    combos = list(_assignments(resolution_grid, branch_menu))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(evaluate, combos))
    else:
        results = [evaluate(c) for c in combos]
    feasible = [r for r in results if r is not None]
    feasible.sort(key=lambda cr: (-cr[0].branches[-1].resolution, cr[1].macs_total, config_key(cr[0])))
    return feasible


def sweep_columns(num_branches: int) -> list[str]:
    return (list(SWEEP_COLUMNS_FIXED) + [f"macs_branch_{j}" for j in range(1, num_branches + 1)]
            + ["macs_interactions", "macs_merge"])


def sweep_csv(results: Sequence[tuple[PiipConfig, CostReport]], num_branches: int) -> str:
    """CSV text; ``macs_merge`` covers branch merging and classification heads."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(sweep_columns(num_branches))
    for cfg, rep in results:
        merge = sum(r.macs for r in rep.rows if r.name in ("merge", "head"))
        w.writerow([config_id(cfg), "/".join(str(b.dim) for b in cfg.branches),
                    "/".join(str(b.resolution) for b in cfg.branches), rep.params_total, rep.macs_total]
                   + [rep.row(f"branch_{j}").macs for j in range(1, num_branches + 1)]
                   + [rep.interaction_macs, merge])
    return buf.getvalue()
