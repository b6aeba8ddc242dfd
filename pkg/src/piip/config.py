"""Architecture description types, validation rules and shipped presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

from .errors import ConfigError

ATTENTION_TYPES = ("deformable", "regular")
DIRECTIONS = (
    "adjacent_bidirectional",
    "adjacent_down_only",
    "adjacent_up_only",
    "chain_one_way",
    "all_pairs_bidirectional",
)
MODES = ("dense", "classify_pretrain", "classify_finetune")


@dataclass(frozen=True)
class BranchConfig:
    """One pyramid branch: a ViT of ``depth`` layers at input side ``resolution``."""

    depth: int
    dim: int
    heads: int
    patch: int = 16
    resolution: int = 224
    mlp_ratio: float = 4.0
    use_cls_token: bool = False

    @property
    def grid(self) -> int:
        return self.resolution // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    def problems(self) -> list[str]:
        out = []
        for name in ("depth", "dim", "heads", "patch", "resolution"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be positive")
        if out:
            return out
        if self.dim % self.heads:
            out.append(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.resolution % self.patch:
            out.append(f"resolution {self.resolution} not divisible by patch {self.patch}")
        if not self.mlp_ratio > 0:
            out.append("mlp_ratio must be positive")
        return out

    def replace(self, **kw) -> "BranchConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class InteractionSpec:
    count: int = 12
    attention: str = "deformable"
    direction: str = "adjacent_bidirectional"
    sample_points: int = 4
    ffn_ratio: float = 0.25
    scalar_gates: bool = False

    def problems(self) -> list[str]:
        out = []
        if self.count < 0:
            out.append("interaction count must be >= 0")
        if self.attention not in ATTENTION_TYPES:
            out.append(f"unknown attention type {self.attention!r}")
        if self.direction not in DIRECTIONS:
            out.append(f"unknown direction scheme {self.direction!r}")
        if self.sample_points < 1:
            out.append("sample_points must be >= 1")
        if not 0 < self.ffn_ratio <= 16:
            out.append("ffn_ratio must lie in (0, 16]")
        return out


@dataclass(frozen=True)
class PiipConfig:
    """Whole-model description; ``branches`` run Branch 1 (largest model, smallest image) to Branch M."""

    branches: tuple[BranchConfig, ...]
    interactions: InteractionSpec = field(default_factory=InteractionSpec)
    mode: str = "dense"
    merge_subset: tuple[bool, ...] | None = None
    num_classes: int = 1000
    ablation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        if self.merge_subset is not None:
            object.__setattr__(self, "merge_subset", tuple(bool(b) for b in self.merge_subset))

    @property
    def num_branches(self) -> int:
        return len(self.branches)

    @property
    def subset(self) -> tuple[bool, ...]:
        return self.merge_subset if self.merge_subset is not None else (True,) * len(self.branches)

    @property
    def uses_cls(self) -> bool:
        return self.mode == "classify_finetune"

    @property
    def max_resolution(self) -> int:
        return max(b.resolution for b in self.branches)

    def replace(self, **kw) -> "PiipConfig":
        return dataclasses.replace(self, **kw)

    def with_resolutions(self, resolutions: Sequence[int]) -> "PiipConfig":
        if len(resolutions) != len(self.branches):
            raise ConfigError("one resolution per branch required")
        return self.replace(branches=tuple(b.replace(resolution=int(r))
                                           for b, r in zip(self.branches, resolutions)))

    def problems(self) -> list[str]:
        from .cost import branch_param_count

        out = []
        if not self.branches:
            return ["at least one branch is required"]
        if self.mode not in MODES:
            out.append(f"unknown mode {self.mode!r}")
        if self.num_classes < 1:
            out.append("num_classes must be positive")
        for j, b in enumerate(self.branches, 1):
            out.extend(f"branch {j}: {p}" for p in b.problems())
        out.extend(self.interactions.problems())
        if out:
            return out
        n = self.interactions.count
        for j, b in enumerate(self.branches, 1):
            if n and b.depth % n:
                out.append(f"branch {j}: depth {b.depth} not divisible by interaction count {n}")
            if b.use_cls_token != self.uses_cls:
                want = "requires" if self.uses_cls else "forbids"
                out.append(f"branch {j}: mode {self.mode} {want} a class token")
        if len(self.subset) != len(self.branches):
            out.append("merge_subset length must equal the branch count")
        elif not any(self.subset):
            out.append("merge_subset must select at least one branch")
        if not self.ablation:
            params = [branch_param_count(b) for b in self.branches]
            res = [b.resolution for b in self.branches]
            for j in range(1, len(self.branches)):
                if not (params[j] < params[j - 1] and res[j] > res[j - 1]):
                    out.append(
                        "parameter-inverted ordering violated between branch "
                        f"{j} and {j + 1}: params {params[j - 1]} -> {params[j]}, "
                        f"resolution {res[j - 1]} -> {res[j]} (tag the config as an ablation to allow)"
                    )
        return out

    def validate(self) -> "PiipConfig":
        problems = self.problems()
        if problems:
            raise ConfigError("invalid configuration: " + "; ".join(problems))
        return self


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

VIT_T = BranchConfig(depth=12, dim=192, heads=3)
VIT_S = BranchConfig(depth=12, dim=384, heads=6)
VIT_B = BranchConfig(depth=12, dim=768, heads=12)
VIT_L = BranchConfig(depth=24, dim=1024, heads=16)

VIT_SIZES = {"T": VIT_T, "S": VIT_S, "B": VIT_B, "L": VIT_L}


def pyramid(letters: str, resolutions: Sequence[int], mode: str, **kw) -> PiipConfig:
    """Build a config from size letters listed Branch 1 first, e.g. ``pyramid("BST", (128, 192, 368), ...)``."""
    cls = mode == "classify_finetune"
    branches = tuple(VIT_SIZES[c].replace(resolution=r, use_cls_token=cls)
                     for c, r in zip(letters, resolutions))
    return PiipConfig(branches=branches, mode=mode, **kw)


def _micro() -> PiipConfig:
    branches = tuple(
        BranchConfig(depth=2, dim=d, heads=h, patch=4, resolution=r)
        for d, h, r in ((16, 2, 16), (8, 2, 32), (4, 1, 64))
    )
    return PiipConfig(branches=branches, interactions=InteractionSpec(count=2), mode="dense", num_classes=8)


def _piip_b() -> PiipConfig:
    branches = tuple(
        BranchConfig(depth=12, dim=d, heads=h, patch=16, resolution=r)
        for d, h, r in ((640, 8, 128), (320, 4, 256), (160, 2, 512))
    )
    return PiipConfig(branches=branches, mode="classify_pretrain")


PRESETS = {
    "piip-micro": _micro,
    "piip-b": _piip_b,
    "piip-tsb": lambda: pyramid("BST", (128, 192, 368), "classify_finetune"),
    "piip-sbl": lambda: pyramid("LBS", (96, 160, 320), "classify_finetune"),
    "piip-sbl-384": lambda: pyramid("LBS", (128, 192, 384), "classify_finetune"),
    "piip-tsb-det": lambda: pyramid("BST", (448, 896, 1120), "dense"),
    "piip-sbl-det": lambda: pyramid("LBS", (448, 896, 1344), "dense"),
    "piip-tsbl-det": lambda: pyramid("LBST", (448, 672, 1120, 1568), "dense"),
    "vit-b": lambda: pyramid("B", (224,), "classify_finetune"),
    "vit-l": lambda: pyramid("L", (224,), "classify_finetune"),
}


def preset(name: str) -> PiipConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None


# ---------------------------------------------------------------------------
# direction schemes
# ---------------------------------------------------------------------------

def unit_pairs(num_branches: int, direction: str) -> list[tuple[int, int]]:
    """Branch index pairs ``(a, b)`` with ``a < b`` that own an interaction unit."""
    if direction not in DIRECTIONS:
        raise ConfigError(f"unknown direction scheme {direction!r}")
    if direction == "all_pairs_bidirectional":
        return [(a, b) for a in range(num_branches) for b in range(a + 1, num_branches)]
    return [(a, a + 1) for a in range(num_branches - 1)]


def unit_directions(direction: str) -> tuple[str, ...]:
    """Which halves of a unit ``(a, b)`` exist.

    ``"a"`` is the half whose queries come from branch ``a`` (branch ``a`` is
    updated from branch ``b``); ``"b"`` is the opposite half. Downward flow
    means coarse, large-model features feeding the next higher-resolution
    branch, so only branch ``b`` is updated.
    """
    if direction in ("adjacent_bidirectional", "all_pairs_bidirectional"):
        return ("a", "b")
    if direction in ("adjacent_down_only", "chain_one_way"):
        return ("b",)
    if direction == "adjacent_up_only":
        return ("a",)
    raise ConfigError(f"unknown direction scheme {direction!r}")


def merge_masks(num_branches: int) -> list[tuple[bool, ...]]:
    """All non-empty branch subsets, smallest first (7 for three branches)."""
    masks = []
    for size in range(1, num_branches + 1):
        for bits in range(1, 2 ** num_branches):
            mask = tuple(bool(bits >> (num_branches - 1 - j) & 1) for j in range(num_branches))
            if sum(mask) == size:
                masks.append(mask)
    return masks
