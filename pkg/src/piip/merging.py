"""Branch merging and classification heads."""

from __future__ import annotations

from typing import Sequence

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .nn import Conv2d, GroupNorm, Init, LayerNorm, Linear, Module, ModuleDict, num_groups
from .numerics import Tensor
from .vit_branch import BranchFeature


class ProjDense(Module):
    """conv3x3 -> GroupNorm -> GELU -> conv3x3 -> GroupNorm, channel-first maps."""

    def __init__(self, init: Init, d_in: int, d_out: int):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        g = num_groups(d_out)
        self.conv1 = Conv2d(init, d_in, d_out, 3, padding=1)
        self.norm1 = GroupNorm(init, g, d_out)
        self.conv2 = Conv2d(init, d_out, d_out, 3, padding=1)
        self.norm2 = GroupNorm(init, g, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.d_in:
            raise ConfigError(f"dense projection expects {self.d_in} channels, got input {x.shape}")
        x = nx.gelu(self.norm1(self.conv1(x)))
        return self.norm2(self.conv2(x))


class ProjLinear(Module):
    """Per-token linear map followed by GroupNorm over channels (tokens act as spatial positions)."""

    def __init__(self, init: Init, d_in: int, d_out: int):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.fc = Linear(init, d_in, d_out)
        self.norm = GroupNorm(init, num_groups(d_out), d_out)

    def __call__(self, x: Tensor) -> Tensor:
        """``x``: ``[B, tokens, D_in]`` -> ``[B, tokens, D_out]``."""
        if x.ndim != 3 or x.shape[-1] != self.d_in:
            raise DimensionError(f"linear projection expects [B, n, {self.d_in}], got {x.shape}")
        y = nx.transpose(self.fc(x), (0, 2, 1))
        return nx.transpose(self.norm(y), (0, 2, 1))


def proj_dense(x: Tensor, proj: ProjDense) -> Tensor:
    return proj(x)


def proj_linear(x: Tensor, proj: ProjLinear) -> Tensor:
    return proj(x)


class BranchMerge(Module):
    """Projection of each selected branch to ``D_1`` plus one learnable scalar weight per branch."""

    def __init__(self, init: Init, dims: Sequence[int], subset: Sequence[bool], kind: str = "dense"):
        super().__init__()
        if len(subset) != len(dims):
            raise ConfigError("merge subset length must equal the branch count")
        if not any(subset):
            raise ConfigError("merge subset is empty")
        self.kind = kind
        self.subset = tuple(subset)
        self.out_dim = dims[0]
        self.projs = ModuleDict()
        for j, (d, on) in enumerate(zip(dims, subset)):
            if on:
                cls = ProjDense if kind == "dense" else ProjLinear
                self.projs[str(j + 1)] = cls(init, d, self.out_dim)
        self.weights = init.full(1.0 / len(dims), len(dims))


def branch_merge(features: Sequence[BranchFeature], merge: BranchMerge,
                 subset: Sequence[bool] | None = None) -> Tensor:
    """Weighted sum of projected, upsampled branch maps -> ``[B, D_1, G_h, G_w]``.

    The target grid is that of the last branch. ``subset`` defaults to the
    branches the merge module was built for and may only deselect further.
    """
    subset = merge.subset if subset is None else tuple(subset)
    if len(subset) != len(features):
        raise ConfigError("merge subset length must equal the number of branch features")
    if not any(subset):
        raise ConfigError("merge subset is empty")
    gh, gw = features[-1].grid
    out = None
    for j, (f, on) in enumerate(zip(features, subset)):
        if not on:
            continue
        if str(j + 1) not in merge.projs:
            raise ConfigError(f"branch {j + 1} has no merge projection")
        proj = merge.projs[str(j + 1)]
        if merge.kind == "dense":
            m = proj(f.to_map())
        else:
            y = proj(f.spatial())
            m = BranchFeature(y, f.grid, False).to_map()
        m = nx.bilinear_resize(m, gh, gw)
        term = m * merge.weights[j]
        out = term if out is None else out + term
    return out


class ClsHead(Module):
    """LayerNorm + linear classifier; the classifier starts at zero so untrained logits are flat."""

    def __init__(self, init: Init, dim: int, classes: int):
        super().__init__()
        self.norm = LayerNorm(init, dim)
        self.fc = Linear(init, dim, classes, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc(self.norm(x))


def cls_logits_average(per_branch_logits: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of per-branch logits ``[..., classes]``."""
    if not per_branch_logits:
        raise ConfigError("no logits to average")
    k = per_branch_logits[0].shape[-1]
    for t in per_branch_logits:
        if t.shape[-1] != k:
            raise ConfigError(f"class-count mismatch: {t.shape[-1]} vs {k}")
    if len(per_branch_logits) == 1:
        return per_branch_logits[0]
    acc = per_branch_logits[0]
    for t in per_branch_logits[1:]:
        acc = acc + t
    return acc * (1.0 / len(per_branch_logits))
