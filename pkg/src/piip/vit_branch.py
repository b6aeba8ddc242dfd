"""A single pyramid branch: patch embedding, position embedding and pre-norm ViT layers.

The layer stack is split into ``N`` equal blocks so the caller can run one
block at a time and interleave cross-branch interactions between them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import BranchConfig
from .errors import ConfigError, NumericError
from .nn import Init, LayerNorm, Linear, Module, ModuleList, Parameter
from .numerics import Tensor


@dataclass
class BranchFeature:
    """Token grid of one branch. ``tokens`` is ``[B, cls + gh*gw, D]``, class token first."""

    tokens: Tensor
    grid: tuple[int, int]
    has_cls: bool = False

    def __post_init__(self):
        gh, gw = self.grid
        expect = gh * gw + (1 if self.has_cls else 0)
        if self.tokens.ndim != 3 or self.tokens.shape[1] != expect:
            raise ConfigError(
                f"token tensor {self.tokens.shape} inconsistent with grid {self.grid} (cls={self.has_cls})")

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    def spatial(self) -> Tensor:
        return self.tokens[:, 1:] if self.has_cls else self.tokens

    def cls(self) -> Tensor | None:
        return self.tokens[:, :1] if self.has_cls else None

    def with_spatial(self, spatial: Tensor) -> "BranchFeature":
        tokens = nx.concat([self.cls(), spatial], axis=1) if self.has_cls else spatial
        return BranchFeature(tokens, self.grid, self.has_cls)

    def to_map(self) -> Tensor:
        """Spatial tokens as a channel-first map ``[B, D, gh, gw]``."""
        gh, gw = self.grid
        x = nx.transpose(self.spatial(), (0, 2, 1))
        return nx.reshape(x, (self.batch, self.dim, gh, gw))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         return_weights: bool = False):
    """Scaled dot-product attention over ``[B, n, D]`` projections split into ``heads``."""
    bsz, nq, dim = q.shape
    nk = k.shape[1]
    if dim % heads:
        raise ConfigError(f"dim {dim} not divisible by {heads} heads")
    hd = dim // heads

    def split(t, n):
        return nx.transpose(nx.reshape(t, (bsz, n, heads, hd)), (0, 2, 1, 3))

    qh = split(q, nq) * (1.0 / math.sqrt(hd))
    kh, vh = split(k, nk), split(v, nk)
    weights = nx.softmax(nx.matmul(qh, nx.swapaxes(kh, -1, -2)), axis=-1)
    out = nx.matmul(weights, vh)
    out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (bsz, nq, dim))
    return (out, weights) if return_weights else out


class VitLayer(Module):
    """Pre-norm transformer layer: ``x + MHSA(LN(x))`` then ``+ MLP(LN(.))``."""

    def __init__(self, init: Init, dim: int, heads: int, mlp_hidden: int):
        super().__init__()
        self.heads = heads
        self.norm1 = LayerNorm(init, dim)
        self.qkv = Linear(init, dim, 3 * dim)
        self.proj = Linear(init, dim, dim)
        self.norm2 = LayerNorm(init, dim)
        self.fc1 = Linear(init, dim, mlp_hidden)
        self.fc2 = Linear(init, mlp_hidden, dim)

    def attention(self, x: Tensor, return_weights: bool = False):
        bsz, n, dim = x.shape
        qkv = self.qkv(x)
        q, k, v = qkv[..., :dim], qkv[..., dim:2 * dim], qkv[..., 2 * dim:]
        res = multi_head_attention(q, k, v, self.heads, return_weights)
        if return_weights:
            out, w = res
            return self.proj(out), w
        return self.proj(res)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.fc2(nx.gelu(self.fc1(self.norm2(x))))


def vit_layer(x: BranchFeature, layer: VitLayer, index: int | None = None) -> BranchFeature:
    out = layer(x.tokens)
    if not np.isfinite(out.data).all():
        raise NumericError(f"non-finite activations after ViT layer {index}")
    return BranchFeature(out, x.grid, x.has_cls)


def interpolate_pos_embed(pos: Tensor, new_grid: tuple[int, int], has_cls: bool = False) -> Tensor:
    """Bilinearly resample a square-grid position embedding ``[cls + g0*g0, D]`` to ``new_grid``.

    A leading class-token row passes through unchanged.
    """
    cls = pos[:1] if has_cls else None
    grid_rows = pos[1:] if has_cls else pos
    n, dim = grid_rows.shape
    g0 = int(round(math.sqrt(n)))
    if g0 * g0 != n:
        raise ConfigError(f"position embedding with {n} grid rows is not a square grid")
    gh, gw = new_grid
    if (gh, gw) == (g0, g0):
        return pos
    m = nx.reshape(nx.transpose(grid_rows, (1, 0)), (dim, g0, g0))
    m = nx.bilinear_resize(m, gh, gw)
    rows = nx.transpose(nx.reshape(m, (dim, gh * gw)), (1, 0))
    return nx.concat([cls, rows], axis=0) if has_cls else rows


class VitBranch(Module):
    def __init__(self, init: Init, cfg: BranchConfig, num_blocks: int):
        super().__init__()
        if num_blocks < 1 or cfg.depth % num_blocks:
            raise ConfigError(f"depth {cfg.depth} cannot be split into {num_blocks} equal blocks")
        self.cfg = cfg
        self.num_blocks = num_blocks
        p, d = cfg.patch, cfg.dim
        self.patch_embed = Linear(init, 3 * p * p, d)
        if cfg.use_cls_token:
            self.cls_token = init.trunc_normal(1, d)
        self.pos_embed = init.trunc_normal(cfg.num_patches + int(cfg.use_cls_token), d)
        self.layers = ModuleList(VitLayer(init, d, cfg.heads, cfg.mlp_hidden) for _ in range(cfg.depth))

    @property
    def layers_per_block(self) -> int:
        return self.cfg.depth // self.num_blocks

    def embed(self, image: Tensor) -> BranchFeature:
        return patch_embed(image, self)

    def segment(self, x: BranchFeature, block_index: int) -> BranchFeature:
        return branch_forward_segment(self, x, block_index)

    def run(self, image: Tensor) -> BranchFeature:
        """Standalone forward over every layer (no interactions)."""
        x = self.embed(image)
        for i, layer in enumerate(self.layers):
            x = vit_layer(x, layer, i)
        return x


def patch_embed(image: Tensor, branch: VitBranch) -> BranchFeature:
    """Tokenise ``image`` [B, 3, H, W] (or [3, H, W]) into non-overlapping patches."""
    cfg = branch.cfg
    if image.ndim == 3:
        image = nx.reshape(image, (1,) + image.shape)
    bsz, c, h, w = image.shape
    if c != 3 or h != cfg.resolution or w != cfg.resolution:
        raise ConfigError(f"branch expects 3x{cfg.resolution}x{cfg.resolution} input, got {image.shape[1:]}")
    p, g = cfg.patch, cfg.grid
    x = nx.reshape(image, (bsz, c, g, p, g, p))
    x = nx.reshape(nx.transpose(x, (0, 2, 4, 1, 3, 5)), (bsz, g * g, c * p * p))
    tokens = branch.patch_embed(x)
    if cfg.use_cls_token:
        cls = nx.add(np.zeros((bsz, 1, cfg.dim), dtype=tokens.dtype), nx.reshape(branch.cls_token, (1, 1, cfg.dim)))
        tokens = nx.concat([cls, tokens], axis=1)
    tokens = tokens + branch.pos_embed
    return BranchFeature(tokens, (g, g), cfg.use_cls_token)


def branch_forward_segment(branch: VitBranch, x: BranchFeature, block_index: int) -> BranchFeature:
    """Apply layers ``[i*L, (i+1)*L)`` with ``L = depth / N`` to produce the block-``i`` output."""
    if not 0 <= block_index < branch.num_blocks:
        raise ConfigError(f"block index {block_index} outside [0, {branch.num_blocks})")
    per = branch.layers_per_block
    for li in range(block_index * per, (block_index + 1) * per):
        x = vit_layer(x, branch.layers[li], li)
    return x


def load_pos_embed(branch: VitBranch, pos: np.ndarray, has_cls: bool | None = None) -> None:
    """Import a stored embedding from another grid into ``branch``."""
    has_cls = branch.cfg.use_cls_token if has_cls is None else has_cls
    new = interpolate_pos_embed(Tensor(pos, dtype=branch.pos_embed.dtype), (branch.cfg.grid,) * 2, has_cls)
    data = new.data
    if has_cls and not branch.cfg.use_cls_token:
        data = data[1:]
    elif branch.cfg.use_cls_token and not has_cls:
        data = np.concatenate([branch.pos_embed.data[:1], data], axis=0)
    branch.pos_embed = Parameter(data, dtype=branch.pos_embed.dtype)
