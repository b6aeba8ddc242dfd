"""Whole-model assembly and forward orchestration."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .config import PiipConfig
from .errors import InputError
from .interaction import InteractionPoint, schedule_interactions
from .merging import BranchMerge, ClsHead, branch_merge, cls_logits_average
from .nn import Init, Module, ModuleList
from .numerics import Tensor, mac_scope
from .vit_branch import BranchFeature, VitBranch


def branch_row(j: int) -> str:
    return f"branch_{j + 1}"


class PiipModel(Module):
    def __init__(self, cfg: PiipConfig, init: Init):
        super().__init__()
        self.cfg = cfg
        n_blocks = max(cfg.interactions.count, 1)
        dims = [b.dim for b in cfg.branches]
        heads = [b.heads for b in cfg.branches]
        self.branches = ModuleList(VitBranch(init, b, n_blocks) for b in cfg.branches)
        self.interactions = ModuleList(
            InteractionPoint(init, dims, heads, cfg.interactions) for _ in range(cfg.interactions.count))
        if cfg.mode == "classify_finetune":
            self.heads = ModuleList(ClsHead(init, d, cfg.num_classes) for d in dims)
        else:
            kind = "dense" if cfg.mode == "dense" else "linear"
            self.merge = BranchMerge(init, dims, cfg.subset, kind)
            if cfg.mode == "classify_pretrain":
                self.head = ClsHead(init, dims[0], cfg.num_classes)

    @property
    def num_blocks(self) -> int:
        return max(self.cfg.interactions.count, 1)


def build_model(cfg: PiipConfig, seed: int = 0, dtype=np.float32, std: float = 0.02) -> PiipModel:
    """Validate ``cfg`` and initialise every weight deterministically from ``seed``.

    Gates, offset and logit projections start at zero; biases and norm shifts
    at zero, norm gains at one; merge weights at ``1/M``; everything else is
    drawn from a normal truncated at two standard deviations (``std``).
    """
    cfg.validate()
    return PiipModel(cfg, Init(seed, dtype, std))


def _prepare(model: PiipModel, image) -> Tensor:
    image = image if isinstance(image, Tensor) else Tensor(np.asarray(image), dtype=model.dtype)
    if image.ndim == 3:
        image = nx.reshape(image, (1,) + image.shape)
    side = model.cfg.max_resolution
    if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (side, side):
        raise InputError(f"expected image 3x{side}x{side}, got {tuple(image.shape[-3:])}")
    return image


def forward_features(model: PiipModel, image) -> list[BranchFeature]:
    """Final per-branch features after all blocks and interactions."""
    image = _prepare(model, image)
    feats = []
    for j, branch in enumerate(model.branches):
        r = branch.cfg.resolution
        with mac_scope(branch_row(j)):
            feats.append(branch.embed(nx.bilinear_resize(image, r, r)))
    for i in range(model.num_blocks):
        for j, branch in enumerate(model.branches):
            with mac_scope(branch_row(j)):
                feats[j] = branch.segment(feats[j], i)
        if model.cfg.interactions.count:
            feats = schedule_interactions(feats, model.interactions[i])
    return feats


def head_output(model: PiipModel, feats: list[BranchFeature]) -> Tensor:
    cfg = model.cfg
    if cfg.mode == "classify_finetune":
        with mac_scope("head"):
            logits = [h(f.cls()[:, 0]) for h, f in zip(model.heads, feats)]
            return cls_logits_average(logits)
    with mac_scope("merge"):
        merged = branch_merge(feats, model.merge)
    if cfg.mode == "dense":
        return merged
    with mac_scope("head"):
        pooled = nx.mean(merged, axis=(2, 3))
        return model.head(pooled)


def forward(model: PiipModel, image) -> Tensor:
    """Dense mode: merged map ``[B, D_1, G, G]``. Classification modes: logits ``[B, classes]``."""
    return head_output(model, forward_features(model, image))


def standalone_branch_features(model: PiipModel, image) -> list[BranchFeature]:
    """Each branch run alone on its resized input, with no interactions."""
    image = _prepare(model, image)
    out = []
    for branch in model.branches:
        r = branch.cfg.resolution
        out.append(branch.run(nx.bilinear_resize(image, r, r)))
    return out


def param_row(name: str) -> str:
    """Cost-report row owning the parameter called ``name``."""
    parts = name.split(".")
    if parts[0] == "branches":
        j = int(parts[1])
        return f"pos_embed_{j + 1}" if parts[2] == "pos_embed" else f"branch_{j + 1}"
    if parts[0] == "interactions":
        return "interaction_" + parts[3]
    if parts[0] == "merge":
        return "merge"
    return "head"
