"""Model-level finite-difference suite used by the CLI and the acceptance tests."""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import PiipConfig
from .model import build_model, forward
from .numerics import grad_check_detail
from .train import toy_config


@dataclass(frozen=True)
class SuiteCase:
    name: str
    attention: str
    classify: bool


CASES = (
    SuiteCase("deformable-dense", "deformable", False),
    SuiteCase("regular-dense", "regular", False),
    SuiteCase("deformable-classify", "deformable", True),
    SuiteCase("regular-classify", "regular", True),
)


def case_config(base: PiipConfig, case: SuiteCase) -> PiipConfig:
    cfg = base.replace(interactions=dataclasses.replace(base.interactions, attention=case.attention))
    if case.classify:
        return toy_config(cfg)
    return cfg.replace(mode="dense", branches=tuple(b.replace(use_cls_token=False) for b in cfg.branches))


def perturbed_model(cfg: PiipConfig, seed: int = 0):
    """Float64 model whose every weight is jittered, so zero-initialised gates,
    offsets and heads do not hide gradient paths."""
    model = build_model(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for _, p in model.named_parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    return model


def run_case(base: PiipConfig, case: SuiteCase, coords_per_tensor: int = 1, directions: int = 1,
             batch: int = 2, seed: int = 0, h: float = 1e-6) -> dict[str, float]:
    cfg = case_config(base, case)
    model = perturbed_model(cfg, seed)
    rng = np.random.default_rng(zlib.crc32(case.name.encode()))
    side = cfg.max_resolution
    image = nx.Tensor(rng.standard_normal((batch, 3, side, side)))
    if case.classify:
        labels = rng.integers(0, cfg.num_classes, batch)

        def loss():
            return nx.cross_entropy(forward(model, image), labels)
    else:
        probe = None

        def loss():
            nonlocal probe
            out = forward(model, image)
            if probe is None:
                probe = rng.standard_normal(out.shape)
            return nx.sum(out * nx.Tensor(probe))
    return grad_check_detail(loss, dict(model.named_parameters()), coords_per_tensor=coords_per_tensor,
                             seed=seed, directions_per_tensor=directions, h=h)


def run_suite(base: PiipConfig, coords_per_tensor: int = 1, directions: int = 1,
              log=None) -> dict[str, float]:
    """Worst relative error per case; every tensor gets ``directions`` whole-tensor
    probes plus ``coords_per_tensor`` single-coordinate probes."""
    out = {}
    for case in CASES:
        errs = run_case(base, case, coords_per_tensor, directions)
        out[case.name] = max(errs.values())
        if log:
            worst = max(errs, key=errs.get)
            log(f"{case.name}: max rel err {out[case.name]:.3e} ({len(errs)} tensors, worst {worst})")
    return out
