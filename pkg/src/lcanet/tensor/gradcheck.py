"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import NumericError, Tape, Tensor


@dataclass
class GradcheckResult:
    max_rel_error: float
    n_checked: int
    worst_param: str | None
    worst_index: tuple[int, ...] | None


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _eval(f: Callable[[], Tensor]) -> float:
    val = f()
    v = float(np.asarray(val.data if isinstance(val, Tensor) else val).reshape(()))
    if not np.isfinite(v):
        raise NumericError("gradcheck: objective is not finite")
    return v


def gradcheck_detail(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                     n_coords: int = 100, rng: np.random.Generator | None = None) -> GradcheckResult:
    """Compare tape gradients with central differences on sampled coordinates.

    ``f`` is re-evaluated with one coordinate of one parameter nudged by
    ``+-h``; coordinates are drawn uniformly over the flattened union of all
    parameters (all of them when there are at most ``n_coords``).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
        if not np.all(np.isfinite(out.data)):
            raise NumericError("gradcheck: objective is not finite")
        tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else np.array(p.grad) for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    if total <= n_coords:
        flat = np.arange(total)
    else:
        flat = np.sort(rng.choice(total, size=n_coords, replace=False))
    bounds = np.cumsum(sizes)

    worst = (0.0, None, None)
    for g in flat:
        which = int(np.searchsorted(bounds, g, side="right"))
        local = int(g - (bounds[which - 1] if which else 0))
        p = params[which]
        orig = p.data
        idx = np.unravel_index(local, orig.shape)
        bumped = orig.copy()
        bumped[idx] = orig[idx] + h
        p.data = bumped
        fp = _eval(f)
        bumped = orig.copy()
        bumped[idx] = orig[idx] - h
        p.data = bumped
        fm = _eval(f)
        p.data = orig
        numeric = (fp - fm) / (2.0 * h)
        err = rel_error(float(analytic[which][idx]), numeric)
        if err > worst[0] or worst[1] is None:
            worst = (err, p.name or f"param{which}", tuple(int(i) for i in idx))
    return GradcheckResult(worst[0], len(flat), worst[1], worst[2])


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
              n_coords: int = 100, rng: np.random.Generator | None = None) -> float:
    """Maximum relative error |a - n| / max(|a|, |n|, 1e-8) over sampled coordinates."""
    return gradcheck_detail(f, params, h=h, n_coords=n_coords, rng=rng).max_rel_error
