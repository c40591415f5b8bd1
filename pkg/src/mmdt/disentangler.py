"""Trace disentanglement network: image -> (blur-content C, texture T, trace G)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


@dataclass(frozen=True)
class TraceShapes:
    side: int = 224          # N: patch and texture-trace side
    content_side: int = 56   # L: blur-content side
    latent_side: int = 28
    latent_channels: int = 96

    def __post_init__(self):
        if not self.side > self.content_side:
            raise ShapeError("trace side must exceed content side")
        if self.side % self.content_side:
            raise ShapeError("trace side must be divisible by content side")
        if self.latent_side * 8 != self.side:
            raise ShapeError("latent side must be side / 8")

    @classmethod
    def for_side(cls, side: int, latent_channels: int = 96) -> "TraceShapes":
        return cls(side, side // 4, side // 8, latent_channels)


@dataclass
class ForensicTrace:
    """Batched traces; all tensors are (B, 3, H, W)."""

    C: torch.Tensor
    T: torch.Tensor
    G: torch.Tensor

    def detach(self) -> "ForensicTrace":
        return ForensicTrace(self.C.detach(), self.T.detach(), self.G.detach())

    def __getitem__(self, idx) -> "ForensicTrace":
        return ForensicTrace(self.C[idx], self.T[idx], self.G[idx])


def resize_up(c: torch.Tensor, size: int = None) -> torch.Tensor:
    """Bilinear upsampling with half-pixel centres (default factor 4)."""
    squeeze = c.ndim == 3
    if squeeze:
        c = c.unsqueeze(0)
    if size is None:
        size = c.shape[-1] * 4
    out = F.interpolate(c, size=(size, size), mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


def conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(0.2),
    )


def up_block(cin, cout):
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(0.2),
    )


class Disentangler(nn.Module):
    """U-shaped encoder/decoder.

    Encoder: stem at full resolution, then three stride-2 stages
    (widths[1:] channels) down to the latent. The decoder mirrors it with
    transpose convolutions and concatenated skips; C is read out at the
    quarter-resolution stage, T at full resolution.
    """

    def __init__(self, widths=(12, 24, 48, 96), side: int = 224):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("widths must be (stem, stage1, stage2, latent)")
        self.shapes = TraceShapes.for_side(side, widths[3])
        w0, w1, w2, w3 = widths
        self.stem = conv_block(3, w0)
        self.down1 = conv_block(w0, w1, stride=2)
        self.down2 = conv_block(w1, w2, stride=2)
        self.down3 = conv_block(w2, w3, stride=2)
        self.up1 = up_block(w3, w2)
        self.fuse1 = conv_block(2 * w2, w2)
        self.up2 = up_block(w2, w1)
        self.fuse2 = conv_block(2 * w1, w1)
        self.up3 = up_block(w1, w0)
        self.fuse3 = conv_block(2 * w0, w0)
        self.c_head = nn.Conv2d(w2, 3, 3, padding=1)
        self.t_head = nn.Conv2d(w0, 3, 3, padding=1)

    def check_input(self, x: torch.Tensor) -> None:
        n = self.shapes.side
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != n or x.shape[3] != n:
            raise ShapeError(f"expected (B, 3, {n}, {n}) input, got {tuple(x.shape)}")

    def encode(self, x):
        e0 = self.stem(x)
        e1 = self.down1(e0)
        e2 = self.down2(e1)
        return e0, e1, e2, self.down3(e2)

    def forward(self, x: torch.Tensor) -> ForensicTrace:
        self.check_input(x)
        e0, e1, e2, latent = self.encode(x)
        d2 = self.fuse1(torch.cat([self.up1(latent), e2], 1))
        c = torch.tanh(self.c_head(d2))
        d1 = self.fuse2(torch.cat([self.up2(d2), e1], 1))
        d0 = self.fuse3(torch.cat([self.up3(d1), e0], 1))
        t = torch.tanh(self.t_head(d0))
        return ForensicTrace(c, t, resize_up(c, x.shape[-1]) + t)

    def zero_heads(self) -> None:
        for head in (self.c_head, self.t_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)


def disentangle(image: torch.Tensor, model: Disentangler) -> ForensicTrace:
    """Inference-mode forward pass (running BN statistics, no autograd)."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(image)
    finally:
        model.train(was_training)


def reconstruct_genuine(image: torch.Tensor, trace) -> torch.Tensor:
    """Remove the trace: clamp(I - G, 0, 1)."""
    g = trace.G if isinstance(trace, ForensicTrace) else trace
    if image.shape != g.shape:
        raise ShapeError(f"image {tuple(image.shape)} vs trace {tuple(g.shape)}")
    return torch.clamp(image - g, 0.0, 1.0)
