"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import torch


def bilinear_half_pixel(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Loop-based bilinear resampler on (H, W, C) with half-pixel centres and edge clamping."""
    h, w, c = img.shape
    out = np.zeros((out_h, out_w, c), dtype=np.float64)
    sy, sx = h / out_h, w / out_w
    for i in range(out_h):
        y = max((i + 0.5) * sy - 0.5, 0.0)
        y0 = min(int(math.floor(y)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(out_w):
            x = max((j + 0.5) * sx - 0.5, 0.0)
            x0 = min(int(math.floor(x)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


def auc_pairs(scores, is_recaptured) -> float:
    """Exhaustive pair counting: P(rec > gen) + 0.5 P(rec == gen)."""
    pos = [s for s, y in zip(scores, is_recaptured) if y]
    neg = [s for s, y in zip(scores, is_recaptured) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def eer_sweep(scores, is_recaptured):
    """Full threshold sweep in plain Python: -inf, every midpoint, +inf."""
    distinct = sorted(set(scores))
    cands = [-math.inf] + [(a + b) / 2 for a, b in zip(distinct, distinct[1:])] + [math.inf]
    neg = [s for s, y in zip(scores, is_recaptured) if not y]
    pos = [s for s, y in zip(scores, is_recaptured) if y]
    best = None
    for t in cands:
        fpr = Fraction(sum(s >= t for s in neg), len(neg))
        fnr = Fraction(sum(s < t for s in pos), len(pos))
        gap = abs(fpr - fnr)
        if best is None or gap < best[0]:
            best = (gap, (fpr + fnr) / 2, t)
    return float(best[1]), best[2]


def _central(loss_fn, data, pos, orig, h):
    with torch.no_grad():
        data[pos] = orig + h
        up = float(loss_fn())
        data[pos] = orig - h
        down = float(loss_fn())
        data[pos] = orig
    return (up - down) / (2 * h)


def finite_difference_check(loss_fn, params, n_samples=100, h=1e-5, seed=0, screen_kinks=False,
                            max_draws=None):
    """Compare autograd against central differences on ``n_samples`` random scalar parameters.

    ``params`` are float64 leaf tensors; ``loss_fn()`` recomputes the scalar
    loss from their current values. Returns (relative errors, screened count).

    With ``screen_kinks`` a draw is replaced when the difference quotient at
    h and at h/2 disagree (relative 1e-6): the loss then has a
    non-differentiable point (ReLU, clamp, abs) inside [x - h, x + h] and the
    central difference is not an estimate of the derivative there. Errors
    are always measured with step ``h``.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.array([p.numel() for p in params], dtype=np.float64)
    rng = np.random.default_rng(seed)
    errors, screened = [], 0
    max_draws = max_draws or 4 * n_samples
    while len(errors) < n_samples:
        if len(errors) + screened >= max_draws:
            raise AssertionError(f"{screened} of {len(errors) + screened} draws hit non-smooth points")
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        pos = tuple(int(i) for i in np.unravel_index(int(rng.integers(params[k].numel())), params[k].shape))
        data = params[k].data
        orig = data[pos].item()
        numeric = _central(loss_fn, data, pos, orig, h)
        if screen_kinks:
            half = _central(loss_fn, data, pos, orig, h / 2)
            if abs(half - numeric) > 1e-6 * max(abs(numeric), 1e-4):
                screened += 1
                continue
        analytic = float(grads[k][pos])
        scale = max(abs(numeric), abs(analytic))
        errors.append(0.0 if scale < 1e-10 else abs(numeric - analytic) / scale)
    return errors, screened
