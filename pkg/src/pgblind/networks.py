"""Toy-scale denoiser and noise-estimator networks."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .revisible import LOGVAR_MAX, LOGVAR_MIN
from .tensor_core import ImageTensor

DOWNSAMPLE_FACTOR = 4  # two pooling stages


class _ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int) -> None:
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class DenoiserNet(nn.Module):
    """Small encoder-decoder with skip connections and two output heads.

    Two downsampling stages at feature widths 16/32/64; the mean and
    log-variance heads each match the input shape, and the log-variance
    output is clamped to the belief module's range. Parameter count is
    about 130k.
    """

    def __init__(self, channels: int = 1) -> None:
        super().__init__()
        self.channels = channels
        self.enc0 = _ConvBlock(channels, 16)
        self.enc1 = _ConvBlock(16, 32)
        self.mid = _ConvBlock(32, 64)
        self.pool = nn.MaxPool2d(2)
        self.up1 = nn.Conv2d(64, 32, 3, padding=1)
        self.dec1 = _ConvBlock(64, 32)
        self.up0 = nn.Conv2d(32, 16, 3, padding=1)
        self.dec0 = _ConvBlock(32, 16)
        self.head_mean = nn.Conv2d(16, channels, 3, padding=1)
        self.head_logvar = nn.Conv2d(16, channels, 3, padding=1)
        # start with a moderate predicted uncertainty instead of var ~ 1
        nn.init.constant_(self.head_logvar.bias, -4.0)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        s0 = self.enc0(x)
        s1 = self.enc1(self.pool(s0))
        m = self.mid(self.pool(s1))
        u1 = F.interpolate(m, scale_factor=2, mode="nearest")
        d1 = self.dec1(torch.cat([self.up1(u1), s1], dim=1))
        u0 = F.interpolate(d1, scale_factor=2, mode="nearest")
        d0 = self.dec0(torch.cat([self.up0(u0), s0], dim=1))
        mean = self.head_mean(d0)
        log_var = self.head_logvar(d0).clamp(LOGVAR_MIN, LOGVAR_MAX)
        return mean, log_var


class EstimatorNet(nn.Module):
    """Four-layer conv trunk with global pooling to (alpha, sigma1, sigma2).

    The three outputs pass through a softplus, so they are strictly
    positive for any weights.
    """

    def __init__(self, channels: int = 1) -> None:
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(channels, 32, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 32, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 32, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 3, 3, padding=1),
        )
        # softplus(-4) ~ 0.018, a plausible starting noise level
        nn.init.constant_(self.trunk[-1].bias, -4.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        raw = self.trunk(x).mean(dim=(2, 3))
        return F.softplus(raw)


def infer(net: DenoiserNet, y) -> ImageTensor | torch.Tensor:
    """Denoise with the visible-branch mean head only.

    No masking, no estimator, no RNG. Inputs whose sides are not divisible
    by the downsampling factor are reflect-padded and the output cropped
    back.
    """
    as_image = isinstance(y, ImageTensor)
    t = y.to_torch() if as_image else y
    if t.ndim == 2:
        t = t.unsqueeze(0)
    c, h, w = t.shape
    pad_h = (-h) % DOWNSAMPLE_FACTOR
    pad_w = (-w) % DOWNSAMPLE_FACTOR
    x = t.unsqueeze(0)
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
    was_training = net.training
    net.eval()
    with torch.no_grad():
        mean, _ = net(x)
    if was_training:
        net.train()
    out = mean[0, :, :h, :w]
    return ImageTensor.from_torch(out) if as_image else out
