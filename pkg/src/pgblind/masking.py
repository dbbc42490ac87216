"""Blind-spot masking: masked-copy volumes and the reassembly gather.

For cell size s, copy k hides the pixels at offset (k // s, k % s) of every
s x s cell, so the s^2 blindspot sets partition the pixel grid for any image
size. A network applied to every copy only ever predicts a pixel from inputs
that exclude it; the mapper gathers, per pixel, the output of the copy that
was blind there, producing one full prediction with the blind-spot property
everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .tensor_core import ImageTensor, SeededRng

FILL_MODES = ("neighbor_mean", "zero", "random_neighbor")

_NEIGHBOR_OFFSETS = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)
                     if (di, dj) != (0, 0)]


@dataclass
class MaskedVolume:
    """s^2 masked copies plus the per-pixel blind-copy index."""

    copies: torch.Tensor            # (s^2, C, H, W)
    index_map: torch.Tensor         # (H, W) long; which copy blinds the pixel
    cell_size: int
    fill: str = "neighbor_mean"
    blindspot_offsets: tuple[tuple[int, int], ...] = field(init=False)

    def __post_init__(self) -> None:
        s = self.cell_size
        self.blindspot_offsets = tuple((k // s, k % s) for k in range(s * s))

    @property
    def images(self) -> list[ImageTensor]:
        return [ImageTensor.from_torch(self.copies[k])
                for k in range(self.copies.shape[0])]


def blindspot_index_map(height: int, width: int, cell_size: int) -> torch.Tensor:
    """(H, W) map of which copy blinds each pixel: (i % s) * s + (j % s)."""
    if cell_size < 2:
        raise ValueError(f"cell_size must be >= 2, got {cell_size}")
    rows = torch.arange(height) % cell_size
    cols = torch.arange(width) % cell_size
    return rows[:, None] * cell_size + cols[None, :]


def _neighbor_mean(y: torch.Tensor) -> torch.Tensor:
    """Mean of the valid 8-neighbors of every pixel of a (C, H, W) tensor."""
    c, h, w = y.shape
    kernel = torch.ones(1, 1, 3, 3, dtype=y.dtype)
    kernel[0, 0, 1, 1] = 0.0
    sums = F.conv2d(y.unsqueeze(1), kernel, padding=1).squeeze(1)
    counts = F.conv2d(torch.ones(1, 1, h, w, dtype=y.dtype), kernel,
                      padding=1).squeeze(0)
    return sums / counts


def _random_neighbor(y: torch.Tensor, rng: SeededRng) -> torch.Tensor:
    """One uniformly random valid 8-neighbor per pixel."""
    c, h, w = y.shape
    arr = y.detach().cpu().numpy()
    vals = np.zeros((8, c, h, w), dtype=arr.dtype)
    mask = np.zeros((8, 1, h, w), dtype=bool)
    for n, (di, dj) in enumerate(_NEIGHBOR_OFFSETS):
        src_r = slice(max(0, -di), h - max(0, di))
        src_c = slice(max(0, -dj), w - max(0, dj))
        dst_r = slice(max(0, di), h - max(0, -di))
        dst_c = slice(max(0, dj), w - max(0, -dj))
        vals[n, :, dst_r, dst_c] = arr[:, src_r, src_c]
        mask[n, 0, dst_r, dst_c] = True
    counts = mask.sum(axis=0)
    pick = np.floor(rng.uniform((1, h, w)) * counts).astype(np.int64)
    pick = np.minimum(pick, counts - 1)
    cum = np.cumsum(mask, axis=0)
    sel = (cum == pick + 1) & mask
    return torch.from_numpy((vals * sel).sum(axis=0))


def build_masked_volume(y, cell_size: int = 4, fill: str = "neighbor_mean",
                        rng: SeededRng | None = None) -> MaskedVolume:
    """Build the s^2 masked copies of an image.

    Unmasked pixels equal the source exactly; each blindspot is replaced
    according to the fill mode (default: mean of its valid 8-neighbors in
    the source). random_neighbor requires an rng.
    """
    if fill not in FILL_MODES:
        raise ValueError(f"unknown fill {fill!r}, expected one of {FILL_MODES}")
    if isinstance(y, ImageTensor):
        t = y.to_torch()
    elif isinstance(y, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(y, dtype=np.float32))
    else:
        t = y
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if t.ndim != 3:
        raise ValueError(f"expected (C,H,W) or (H,W), got {t.ndim}-d")
    c, h, w = t.shape
    idx = blindspot_index_map(h, w, cell_size)
    if fill == "zero":
        fill_img = torch.zeros_like(t)
    elif fill == "random_neighbor":
        if rng is None:
            raise ValueError("random_neighbor fill requires an rng")
        fill_img = _random_neighbor(t, rng)
    else:
        fill_img = _neighbor_mean(t)
    k_range = torch.arange(cell_size * cell_size)
    blind = idx[None, None] == k_range[:, None, None, None]  # (s^2,1,H,W)
    copies = torch.where(blind, fill_img.unsqueeze(0), t.unsqueeze(0))
    return MaskedVolume(copies=copies, index_map=idx, cell_size=cell_size,
                        fill=fill)


def map_blindspots(volume_outputs, vol: MaskedVolume):
    """Gather each pixel from the copy in which it was a blindspot.

    Accepts a (s^2, C, H, W) tensor (torch in, torch out, gradients flow)
    or a sequence of ImageTensors (ImageTensor out). Routes means and
    variances alike; it is a pure index gather.
    """
    as_images = not isinstance(volume_outputs, torch.Tensor)
    if as_images:
        outs = torch.stack([o.to_torch() for o in volume_outputs])
    else:
        outs = volume_outputs
    k, c, h, w = outs.shape
    if k != vol.cell_size ** 2:
        raise ValueError(f"expected {vol.cell_size ** 2} copies, got {k}")
    if (h, w) != tuple(vol.index_map.shape):
        raise ValueError(f"output shape {h}x{w} does not match volume "
                         f"{tuple(vol.index_map.shape)}")
    idx = vol.index_map.to(torch.int64)[None, None].expand(1, c, h, w)
    gathered = outs.gather(0, idx).squeeze(0)
    return ImageTensor.from_torch(gathered) if as_images else gathered
