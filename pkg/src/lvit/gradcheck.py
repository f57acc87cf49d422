"""End-to-end gradient check of the full network against central differences.

The analytic gradient comes from the autodiff engine at the requested
precision. The numeric reference is evaluated on a copy of the network in
``np.longdouble`` (80-bit extended on x86), whose rounding noise is small
enough that central differences resolve gradients down to ~1e-9.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import lv_loss, sup_loss
from .model import LViT, LViTConfig
from .seeding import stream
from .tensor import Tensor
from .text import parse_report

TOLERANCE = {"float64": 1e-6, "float32": 1e-3}

# 32-bit backward sums carry error relative to the summed terms, so heavily
# cancelled coordinates are skipped when sampling in that precision.
F32_MIN_FRACTION = 1e-2

_REPORTS = (
    "Bilateral pulmonary infection, two infected areas, upper left lung and upper right lung.",
    "Unilateral pulmonary infection, one infected area, middle left lung.",
)


@dataclass
class GroupResult:
    name: str
    size: int
    checked: int
    max_error: float
    passed: bool


def relative_error(analytic, numeric) -> float:
    return float(abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12))


def _batch(config: LViTConfig, seed: int):
    rng = stream(seed, "gradcheck-batch")
    n, s = len(_REPORTS), config.image_size
    image = rng.random((n, config.in_channels, s, s))
    target = (rng.random((n, config.num_classes, s, s)) > 0.6).astype(np.float64)
    contrast = (rng.random((n, config.num_classes, s, s)) > 0.5).astype(np.float64)
    tokens = np.array([parse_report(r, config.max_tokens).tokens for r in _REPORTS])
    return image, target, contrast, tokens


def _loss(model: LViT, batch, dtype) -> Tensor:
    image, target, contrast, tokens = batch
    p = model(Tensor(image.astype(dtype)), tokens)
    return sup_loss(p, target.astype(dtype)) + 0.1 * lv_loss(p, contrast.astype(dtype))


def check_model(
    precision: str = "float64",
    config: LViTConfig | None = None,
    per_group: int = 4,
    eps: float = 1e-6,
    seed: int = 0,
) -> list[GroupResult]:
    """Compare analytic and numeric gradients for sampled coordinates of every parameter."""
    if precision not in TOLERANCE:
        raise ValueError(f"precision must be one of {sorted(TOLERANCE)}, got {precision!r}")
    dtype = np.dtype(precision)
    config = config or LViTConfig.mini()
    batch = _batch(config, seed)

    model = LViT(config, seed=seed).astype(dtype)
    reference = LViT(config, seed=seed).astype(np.longdouble)
    for m in (model, reference):
        m.train()
        m.set_bn_update(False)
    for t, r in zip(model.state().values(), reference.state().values()):
        r.data[...] = t.data

    loss = _loss(model, batch, dtype)
    T.backward(loss, params=model.named_parameters().values())

    pick = stream(seed, "gradcheck-coords")
    tol = TOLERANCE[precision]
    results = []
    ref_params = reference.named_parameters()
    with T.no_grad():
        for name, p in model.named_parameters().items():
            analytic = p.grad.reshape(-1)
            flat = ref_params[name].data.reshape(-1)
            pool = np.arange(flat.size)
            if dtype == np.float32:
                mag = np.abs(analytic)
                pool = pool[mag >= F32_MIN_FRACTION * mag.max()] if mag.max() > 0 else pool
            idx = pick.choice(pool, min(per_group, pool.size), replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = _loss(reference, batch, np.longdouble).data[()]
                flat[i] = orig - eps
                down = _loss(reference, batch, np.longdouble).data[()]
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                worst = max(worst, relative_error(analytic[i], numeric))
            results.append(GroupResult(name, flat.size, len(idx), worst, worst < tol))
    return results


def format_table(results: list[GroupResult], precision: str) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'group':<{width}}  {'size':>6}  {'checked':>7}  {'max_rel_err':>11}  status"]
    for r in results:
        lines.append(
            f"{r.name:<{width}}  {r.size:>6}  {r.checked:>7}  {r.max_error:>11.3e}  {'ok' if r.passed else 'FAIL'}"
        )
    worst = max(r.max_error for r in results)
    ok = all(r.passed for r in results)
    lines.append(f"{precision}: max relative error {worst:.3e} (tolerance {TOLERANCE[precision]:g}) {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines)
