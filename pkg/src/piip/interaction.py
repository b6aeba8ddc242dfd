"""Cross-branch interaction units and the per-block scheduler.

A unit joins two branches ``a < b``. Each half of the unit updates one
branch from the other::

    F_hat   = F   + gamma * Attention(norm(F), norm(FC(F_other)))
    F_tilde = F_hat + tau * FFN(norm(F_hat))

``gamma`` and ``tau`` start at zero, so a freshly built unit is the identity.
Units return the residual increment ``F_tilde - F`` and the scheduler adds
all increments for a branch in a fixed canonical order, which makes the
result independent of the order in which units are evaluated.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import InteractionSpec, unit_directions, unit_pairs
from .errors import ConfigError, ContractError, SchedulingError
from .nn import Init, LayerNorm, Linear, Module, ModuleDict
from .numerics import Tensor, mac_scope
from .vit_branch import BranchFeature, multi_head_attention


def ffn_hidden(dim: int, ratio: float = 0.25) -> int:
    return max(1, math.ceil(ratio * dim - 1e-9))


def reference_points(grid: tuple[int, int], dtype=np.float64) -> np.ndarray:
    """Patch centres of a ``(gh, gw)`` grid as normalised ``(x, y)``, row-major, ``[gh*gw, 2]``."""
    gh, gw = grid
    ii, jj = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    return np.stack([(jj.ravel() + 0.5) / gw, (ii.ravel() + 0.5) / gh], axis=-1).astype(dtype)


class RegularCrossAttention(Module):
    """Dense multi-head cross-attention from query tokens to every key/value token."""

    def __init__(self, init: Init, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(init, dim, dim)
        self.k = Linear(init, dim, dim)
        self.v = Linear(init, dim, dim)
        self.proj = Linear(init, dim, dim)

    def __call__(self, query: Tensor, q_grid, kv: Tensor, kv_grid, return_weights: bool = False):
        res = multi_head_attention(self.q(query), self.k(kv), self.v(kv), self.heads, return_weights)
        if return_weights:
            out, w = res
            return self.proj(out), w
        return self.proj(res)


class DeformableCrossAttention(Module):
    """Sparse cross-attention sampling the key/value map at learned offsets around each query.

    Offsets are predicted in key/value pixel units and converted to normalised
    coordinates by dividing by the key/value grid size. Offset and logit
    projections start at zero, so each head initially samples its reference
    point ``K`` times with uniform weights.
    """

    def __init__(self, init: Init, dim: int, heads: int, points: int = 4):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.points = points
        self.value = Linear(init, dim, dim)
        self.offsets = Linear(init, dim, heads * points * 2, zero=True)
        self.logits = Linear(init, dim, heads * points, zero=True)
        self.proj = Linear(init, dim, dim)

    def sample(self, query: Tensor, q_grid, kv: Tensor, kv_grid):
        """Return head outputs ``[B, nq, D]`` before the output projection, and the weights."""
        bsz, nq, dim = query.shape
        nk = kv.shape[1]
        h, k = self.heads, self.points
        hd = dim // h
        kgh, kgw = kv_grid
        if nq != q_grid[0] * q_grid[1] or nk != kgh * kgw:
            raise ContractError("deformable attention needs spatial tokens matching their grids "
                                f"(query {nq} vs {q_grid}, kv {nk} vs {kv_grid}); strip class tokens first")
        value = nx.reshape(self.value(kv), (bsz, nk, h, hd))
        value = nx.reshape(nx.transpose(value, (0, 2, 3, 1)), (bsz * h, hd, kgh, kgw))

        ref = reference_points(q_grid, query.dtype).reshape(1, nq, 1, 1, 2)
        scale = np.array([kgw, kgh], dtype=query.dtype)
        off = nx.reshape(self.offsets(query), (bsz, nq, h, k, 2)) * (1.0 / scale)
        pts = off + ref
        pts = nx.reshape(nx.transpose(pts, (0, 2, 1, 3, 4)), (bsz * h, nq * k, 2))

        weights = nx.softmax(nx.reshape(self.logits(query), (bsz, nq, h, k)), axis=-1)
        samples = nx.reshape(nx.grid_sample_bilinear(value, pts), (bsz, h, nq, k, hd))
        w = nx.reshape(nx.transpose(weights, (0, 2, 1, 3)), (bsz, h, nq, 1, k))
        out = nx.reshape(nx.matmul(w, samples), (bsz, h, nq, hd))
        out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (bsz, nq, dim))
        return out, weights

    def __call__(self, query: Tensor, q_grid, kv: Tensor, kv_grid, return_weights: bool = False):
        out, weights = self.sample(query, q_grid, kv, kv_grid)
        out = self.proj(out)
        return (out, weights) if return_weights else out


def regular_cross_attention(query: BranchFeature, kv: BranchFeature, attn: RegularCrossAttention) -> Tensor:
    return attn(query.spatial(), query.grid, kv.spatial(), kv.grid)


def deformable_cross_attention(query: BranchFeature, kv: BranchFeature,
                               attn: DeformableCrossAttention) -> Tensor:
    if query.has_cls or kv.has_cls:
        raise ContractError("class tokens have no grid position; pass spatial features only")
    return attn(query.tokens, query.grid, kv.tokens, kv.grid)


class InteractionHalf(Module):
    """One direction of a unit: queries from one branch, keys/values from the other."""

    def __init__(self, init: Init, q_dim: int, kv_dim: int, heads: int, spec: InteractionSpec):
        super().__init__()
        self.fc = Linear(init, kv_dim, q_dim)
        self.q_norm = LayerNorm(init, q_dim)
        self.kv_norm = LayerNorm(init, q_dim)
        if spec.attention == "deformable":
            self.attn = DeformableCrossAttention(init, q_dim, heads, spec.sample_points)
        elif spec.attention == "regular":
            self.attn = RegularCrossAttention(init, q_dim, heads)
        else:
            raise ConfigError(f"unknown attention type {spec.attention!r}")
        gate = 1 if spec.scalar_gates else q_dim
        self.gamma = init.zeros(gate)
        self.ffn_norm = LayerNorm(init, q_dim)
        hidden = ffn_hidden(q_dim, spec.ffn_ratio)
        self.ffn_fc1 = Linear(init, q_dim, hidden)
        self.ffn_fc2 = Linear(init, hidden, q_dim)
        self.tau = init.zeros(gate)

    def increment(self, f: Tensor, f_grid, other: Tensor, other_grid) -> Tensor:
        """``F_tilde - F`` for spatial tokens ``f`` attending to ``other``."""
        kv = self.kv_norm(self.fc(other))
        attn = self.gamma * self.attn(self.q_norm(f), f_grid, kv, other_grid)
        ffn = self.ffn_fc2(nx.gelu(self.ffn_fc1(self.ffn_norm(f + attn))))
        return attn + self.tau * ffn


class InteractionUnit(Module):
    def __init__(self, init: Init, a: int, b: int, dims: Sequence[int], heads: Sequence[int],
                 spec: InteractionSpec, halves: Sequence[str]):
        super().__init__()
        self.a, self.b = a, b
        self.halves = tuple(halves)
        # "a": branch a queries branch b; "b": the reverse
        if "a" in halves:
            self.half_a = InteractionHalf(init, dims[a], dims[b], heads[a], spec)
        if "b" in halves:
            self.half_b = InteractionHalf(init, dims[b], dims[a], heads[b], spec)

    def increments(self, fa: BranchFeature, fb: BranchFeature) -> tuple[Tensor | None, Tensor | None]:
        sa, sb = fa.spatial(), fb.spatial()
        da = self.half_a.increment(sa, fa.grid, sb, fb.grid) if "a" in self.halves else None
        db = self.half_b.increment(sb, fb.grid, sa, fa.grid) if "b" in self.halves else None
        return da, db


def interaction_unit(f1: BranchFeature, f2: BranchFeature, unit: InteractionUnit
                     ) -> tuple[BranchFeature, BranchFeature]:
    """Apply both halves of ``unit`` to block outputs ``f1`` (branch a) and ``f2`` (branch b).

    Class tokens pass through untouched.
    """
    d1, d2 = unit.increments(f1, f2)
    out1 = f1 if d1 is None else f1.with_spatial(f1.spatial() + d1)
    out2 = f2 if d2 is None else f2.with_spatial(f2.spatial() + d2)
    return out1, out2


class InteractionPoint(Module):
    """All units that run after one block."""

    def __init__(self, init: Init, dims: Sequence[int], heads: Sequence[int], spec: InteractionSpec):
        super().__init__()
        self.spec = spec
        self.units = ModuleDict()
        halves = unit_directions(spec.direction)
        for a, b in unit_pairs(len(dims), spec.direction):
            self.units[f"{a + 1}_{b + 1}"] = InteractionUnit(init, a, b, dims, heads, spec, halves)

    def unit(self, a: int, b: int) -> InteractionUnit:
        key = f"{a + 1}_{b + 1}"
        if key not in self.units:
            raise SchedulingError(f"scheme {self.spec.direction} has no unit between branches {a + 1} and {b + 1}")
        return self.units[key]


def unit_row(a: int, b: int) -> str:
    return f"interaction_{a + 1}_{b + 1}"


def schedule_interactions(features: Sequence[BranchFeature], point: InteractionPoint,
                          order: Sequence[tuple[int, int]] | None = None) -> list[BranchFeature]:
    """Run every unit of ``point`` on block outputs ``features`` and return the updated features.

    ``order`` permutes unit evaluation; for the parallel schemes it does not
    affect the result because increments are summed in canonical unit order.
    ``chain_one_way`` is inherently sequential: each unit sees the branch
    already updated by the previous unit.
    """
    spec = point.spec
    pairs = [(u.a, u.b) for u in point.units._items.values()]
    if order is not None:
        if sorted(order) != sorted(pairs):
            raise SchedulingError(f"order {list(order)} is not a permutation of units {pairs}")
        pairs_run = list(order)
    else:
        pairs_run = pairs
    features = list(features)

    if spec.direction == "chain_one_way":
        for a, b in pairs_run:
            with mac_scope(unit_row(a, b)):
                _, db = point.unit(a, b).increments(features[a], features[b])
            features[b] = features[b].with_spatial(features[b].spatial() + db)
        return features

    results: dict[tuple[int, int], tuple] = {}
    for a, b in pairs_run:
        with mac_scope(unit_row(a, b)):
            results[(a, b)] = point.unit(a, b).increments(features[a], features[b])
    increments: dict[int, list[Tensor]] = {}
    for a, b in sorted(results):
        da, db = results[(a, b)]
        if da is not None:
            increments.setdefault(a, []).append(da)
        if db is not None:
            increments.setdefault(b, []).append(db)
    out = []
    for j, f in enumerate(features):
        if j not in increments:
            out.append(f)
            continue
        s = f.spatial()
        for d in increments[j]:
            s = s + d
        out.append(f.with_spatial(s))
    return out
