"""Multi-scale LSGAN discriminators and the disentangle/synthesis losses.

Every expectation and norm is realized as a per-element mean, so the loss
weights do not depend on image resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BatchError, NumericError, ParamError, ShapeError

DISC_WIDTHS = (32, 64, 128, 256)
N_SCALES = 3


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_g: float = 1.0
    lambda_d: float = 1.0
    lambda_p: float = 10.0
    alpha_genuine: float = 10.0
    alpha_recaptured: float = 1e-4

    def __post_init__(self):
        for name, value in vars(self).items():
            if not (math.isfinite(value) and value >= 0):
                raise ParamError(f"{name} must be finite and >= 0, got {value}")


class ScaleDiscriminator(nn.Module):
    """8 conv layers, 3 of them stride 2; emits a 1-channel score map at side/8."""

    def __init__(self, widths=DISC_WIDTHS):
        super().__init__()
        w0, w1, w2, w3 = widths
        specs = [
            (3, w0, 1), (w0, w0, 1),
            (w0, w1, 2), (w1, w1, 1),
            (w1, w2, 2), (w2, w2, 1),
            (w2, w3, 2),
        ]
        layers = []
        for cin, cout, stride in specs:
            layers += [nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.score = nn.Conv2d(w3, 1, 3, padding=1)

    def forward(self, x):
        return self.score(self.features(x))


class DiscriminatorBank(nn.Module):
    """D_1, D_2, D_3 operating at side, side/2 and side/4."""

    def __init__(self, width_mult: float = 1.0, side: int = 224):
        super().__init__()
        widths = tuple(max(1, int(round(w * width_mult))) for w in DISC_WIDTHS)
        self.side = side
        self.members = nn.ModuleList([ScaleDiscriminator(widths) for _ in range(N_SCALES)])

    def forward(self, image: torch.Tensor) -> list:
        if image.ndim != 4 or image.shape[1] != 3 or image.shape[-2:] != (self.side, self.side):
            raise ShapeError(f"expected (B, 3, {self.side}, {self.side}), got {tuple(image.shape)}")
        maps = []
        for n, d in enumerate(self.members):
            x = image if n == 0 else F.interpolate(
                image, size=(self.side >> n, self.side >> n), mode="bilinear", align_corners=False)
            maps.append(d(x))
        return maps

    def zero_scores(self) -> None:
        for d in self.members:
            nn.init.zeros_(d.score.weight)
            nn.init.zeros_(d.score.bias)


def discriminate(bank: DiscriminatorBank, image: torch.Tensor) -> list:
    """Score maps for the three resolutions."""
    return bank(image)


def pixel_loss(pseudo: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pseudo.shape != target.shape:
        raise ShapeError(f"{tuple(pseudo.shape)} vs {tuple(target.shape)}")
    return (pseudo - target).abs().mean()


def regularizer_loss(trace_genuine: torch.Tensor, trace_recaptured: torch.Tensor,
                     w: LossWeights = LossWeights()) -> torch.Tensor:
    if trace_genuine.numel() == 0 or trace_recaptured.numel() == 0:
        raise BatchError("regularizer needs non-empty genuine and recaptured batches")
    return (w.alpha_genuine * trace_genuine.pow(2).mean()
            + w.alpha_recaptured * trace_recaptured.pow(2).mean())


def _check_scales(*groups):
    for maps in groups:
        if len(maps) != N_SCALES:
            raise ShapeError(f"expected {N_SCALES} score maps, got {len(maps)}")


def discriminator_loss(real_genuine, fake_genuine, real_recaptured, fake_recaptured) -> torch.Tensor:
    """Sum over scales of the four least-squares terms (reals -> 1, reconstructions -> 0)."""
    _check_scales(real_genuine, fake_genuine, real_recaptured, fake_recaptured)
    total = 0.0
    for rg, fg, rr, fr in zip(real_genuine, fake_genuine, real_recaptured, fake_recaptured):
        total = total + (rg - 1).pow(2).mean() + fg.pow(2).mean() + (rr - 1).pow(2).mean() + fr.pow(2).mean()
    return total


def generator_loss(fake_genuine, fake_recaptured) -> torch.Tensor:
    """Sum over scales of the reconstructions' distance to the real target."""
    _check_scales(fake_genuine, fake_recaptured)
    total = 0.0
    for fg, fr in zip(fake_genuine, fake_recaptured):
        total = total + (fg - 1).pow(2).mean() + (fr - 1).pow(2).mean()
    return total


def total_loss(l_r, l_g, l_d, l_p, w: LossWeights = LossWeights()):
    for name, v in (("L_R", l_r), ("L_G", l_g), ("L_D", l_d), ("L_P", l_p)):
        value = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(value):
            raise NumericError(f"{name} is not finite ({value})")
    return w.lambda_r * l_r + w.lambda_g * l_g + w.lambda_d * l_d + w.lambda_p * l_p
