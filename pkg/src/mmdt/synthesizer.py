"""Synthesis network: retarget a recaptured trace onto genuine content."""

from __future__ import annotations

import torch
import torch.nn as nn

from .disentangler import ForensicTrace, conv_block, resize_up
from .errors import ParamError, ShapeError

ENCODER_WIDTHS = (32, 64, 128, 256)


def _scaled(widths, width_mult):
    return tuple(max(1, int(round(w * width_mult))) for w in widths)


class Encoder(nn.Module):
    """Two Conv-BN-LeakyReLU blocks per level, strided conv between levels."""

    def __init__(self, cin=3, widths=ENCODER_WIDTHS):
        super().__init__()
        layers = []
        prev = cin
        for i, w in enumerate(widths):
            if i > 0:
                layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            layers += [conv_block(prev if i == 0 else w, w), conv_block(w, w)]
            prev = w
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, widths=ENCODER_WIDTHS):
        super().__init__()
        rev = tuple(reversed(widths))
        layers = []
        for i, w in enumerate(rev):
            layers += [conv_block(w, w), conv_block(w, w)]
            if i + 1 < len(rev):
                layers += [
                    nn.ConvTranspose2d(w, rev[i + 1], 3, stride=2, padding=1, output_padding=1),
                    nn.LeakyReLU(0.2),
                ]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(ch),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch, ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(ch),
        )
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        return self.act(x + self.body(x))


class Synthesizer(nn.Module):
    """Image encoder + trace encoder -> 1x1 fusion -> residual blocks -> decoder -> 3x3 conv, tanh."""

    def __init__(self, width_mult: float = 1.0, n_res_blocks: int = 4):
        super().__init__()
        widths = _scaled(ENCODER_WIDTHS, width_mult)
        top = widths[-1]
        self.image_encoder = Encoder(3, widths)
        self.trace_encoder = Encoder(3, widths)
        self.fusion = nn.Sequential(nn.Conv2d(2 * top, top, 1), nn.LeakyReLU(0.2))
        self.res_blocks = nn.Sequential(*[ResBlock(top) for _ in range(n_res_blocks)])
        self.decoder = Decoder(widths)
        self.out_conv = nn.Conv2d(widths[0], 3, 3, padding=1)

    def encode(self, image, trace):
        return self.image_encoder(image), self.trace_encoder(trace)

    def forward(self, image: torch.Tensor, trace: torch.Tensor) -> torch.Tensor:
        if image.shape != trace.shape or image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"image {tuple(image.shape)} and trace {tuple(trace.shape)} must match")
        if image.shape[-1] % 8 or image.shape[-2] % 8:
            raise ShapeError("spatial sides must be divisible by 8")
        f_img, f_trace = self.encode(image, trace)
        h = self.res_blocks(self.fusion(torch.cat([f_img, f_trace], 1)))
        return torch.tanh(self.out_conv(self.decoder(h)))

    def zero_head(self) -> None:
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)


def synthesize_trace(image: torch.Tensor, trace: torch.Tensor, model: Synthesizer) -> torch.Tensor:
    """Inference-mode retargeting of ``trace`` onto ``image``."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(image, trace)
    finally:
        model.train(was_training)


def reconstruct_recaptured(image: torch.Tensor, g_hat: torch.Tensor) -> torch.Tensor:
    """clamp(I_G + G_hat, 0, 1)."""
    if image.shape != g_hat.shape:
        raise ShapeError(f"image {tuple(image.shape)} vs trace {tuple(g_hat.shape)}")
    return torch.clamp(image + g_hat, 0.0, 1.0)


def compose_partial_trace(trace: ForensicTrace, use_C: bool = True, use_T: bool = True) -> torch.Tensor:
    """Rebuild a trace from a subset of its components."""
    if not (use_C or use_T):
        raise ParamError("at least one of use_C / use_T must be set")
    if not use_C:
        return trace.T
    c = resize_up(trace.C, trace.T.shape[-1])
    return c + trace.T if use_T else c
