"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import ContractError, NumericError
from .tensor import GradTape, Tensor, no_record


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(f"param_{i}", p) for i, p in enumerate(params)]


def _loss_value(f: Callable[[], Tensor]) -> float:
    with no_record():
        val = f()
    if val.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {val.shape}")
    v = float(val.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError("non-finite loss during finite differencing")
    return v


def grad_check_detail(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    coords_per_tensor: int = 200,
    seed: int = 0,
    directions_per_tensor: int = 0,
) -> dict[str, float]:
    """Per-tensor maximum relative error between tape and central-difference gradients.

    The error for one probe is ``|a - n| / max(1, |a|, |n|)``. Tensors with
    more than ``coords_per_tensor`` entries are checked on a random sample of
    that many coordinates. Each of the ``directions_per_tensor`` extra probes
    perturbs the whole tensor along a random Gaussian direction ``v`` and
    compares ``<grad, v>`` with the directional difference quotient, which
    touches every entry for the price of two evaluations.
    """
    named = _named(params)
    for name, p in named:
        if p.dtype != np.float64:
            raise ContractError(f"grad_check requires float64 parameters; {name} is {p.dtype}")
        p.requires_grad = True
        p.grad = None

    with GradTape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss in grad_check")
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, p in named:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.data
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= coords_per_tensor else rng.choice(n, coords_per_tensor, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = _loss_value(f)
            flat[c] = orig - h
            fm = _loss_value(f)
            flat[c] = orig
            num = (fp - fm) / (2.0 * h)
            a = aflat[c]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
        for _ in range(directions_per_tensor):
            v = rng.standard_normal(p.shape)
            orig = p.data.copy()
            p.data = orig + h * v
            fp = _loss_value(f)
            p.data = orig - h * v
            fm = _loss_value(f)
            p.data = orig
            num = (fp - fm) / (2.0 * h)
            a = float((analytic * v).sum())
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
        errors[name] = worst
    return errors


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    coords_per_tensor: int = 200,
    seed: int = 0,
    directions_per_tensor: int = 0,
) -> float:
    """Maximum relative gradient error over all probes."""
    detail = grad_check_detail(f, params, h=h, coords_per_tensor=coords_per_tensor, seed=seed,
                               directions_per_tensor=directions_per_tensor)
    return max(detail.values(), default=0.0)
