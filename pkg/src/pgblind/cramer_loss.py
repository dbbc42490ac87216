"""Noise-estimation losses built on the stabilized-variance statistic.

The baseline Gaussian loss penalizes the squared deviation of the
post-transform noise variance from 1. The fine-grained single-channel loss
adds the same penalty over four corner sub-blocks (three-quarter size), so
the parameters must stabilize every region, not just the full image on
average. The multi-channel loss constrains each channel's estimate to 1 and
all channels to each other.

Both a grid search and a descent fitter over (alpha, sigma) are provided;
they are what "blind" estimation means here: pick the parameters whose
transform best whitens the observed image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .noise_model import NoiseParams, _gat_core
from .tensor_core import ImageTensor
from .variance_estimator import PatchConfig, _estimate_sigma2_t

GRAIN_SETTINGS = ("cg", "fg1", "cg+fg1", "cg+fg2", "cg+fg1+fg2")


@dataclass(frozen=True)
class SubBlockSet:
    """Corner sub-blocks of an image, each ceil(3H/4) x ceil(3W/4)."""

    blocks: tuple
    anchors: tuple[tuple[int, int], ...]
    block_height: int
    block_width: int


def _coerce_chw(img) -> tuple[torch.Tensor, bool]:
    """Normalize to a (C, H, W) torch tensor; returns (tensor, was_torch)."""
    if isinstance(img, ImageTensor):
        return img.to_torch(), False
    if isinstance(img, torch.Tensor):
        t = img
        if t.ndim == 2:
            t = t.unsqueeze(0)
        if t.ndim != 3:
            raise ValueError(f"expected (C,H,W) or (H,W), got {t.ndim}-d")
        return t, True
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3:
        arr = np.transpose(arr, (2, 0, 1))
    else:
        raise ValueError(f"expected 2-d or 3-d array, got {arr.ndim}-d")
    return torch.from_numpy(np.ascontiguousarray(arr)), False


def _corner_geometry(h: int, w: int) -> tuple[int, int, tuple]:
    if h < 4 or w < 4:
        raise ValueError(f"image {h}x{w} too small for corner blocks")
    bh = (3 * h + 3) // 4
    bw = (3 * w + 3) // 4
    anchors = ((0, 0), (0, w - bw), (h - bh, 0), (h - bh, w - bw))
    return bh, bw, anchors


def crop_corner_blocks(img) -> SubBlockSet:
    """Four overlapping three-quarter-size blocks anchored at the corners."""
    if isinstance(img, ImageTensor):
        h, w = img.height, img.width
        bh, bw, anchors = _corner_geometry(h, w)
        blocks = tuple(ImageTensor(img.data[r:r + bh, c:c + bw, :])
                       for r, c in anchors)
        return SubBlockSet(blocks, anchors, bh, bw)
    t, _ = _coerce_chw(img)
    h, w = t.shape[-2:]
    bh, bw, anchors = _corner_geometry(h, w)
    blocks = tuple(t[..., r:r + bh, c:c + bw] for r, c in anchors)
    return SubBlockSet(blocks, anchors, bh, bw)


def _half_block_planes(plane: torch.Tensor) -> list[torch.Tensor]:
    """Nine half-size blocks on a 3x3 anchor grid (finer-grain option)."""
    h, w = plane.shape
    bh = (h + 1) // 2
    bw = (w + 1) // 2
    rows = (0, (h - bh) // 2, h - bh)
    cols = (0, (w - bw) // 2, w - bw)
    return [plane[r:r + bh, c:c + bw] for r in rows for c in cols]


def _sigma_for_gat(p: NoiseParams):
    return p.sigma_bar


def _unit_dev_sq(plane: torch.Tensor, alpha, sigma, cfg: PatchConfig):
    g = _gat_core(plane, alpha, sigma * sigma)
    return (_estimate_sigma2_t(g, cfg) - 1.0) ** 2


def gaussian_loss(y, p: NoiseParams, cfg: PatchConfig = PatchConfig()):
    """Squared deviation of the stabilized noise variance from 1.

    Multi-channel inputs apply the estimator per channel and average the
    squared deviations. torch input gives a differentiable torch scalar.
    """
    t, was_torch = _coerce_chw(y)
    terms = [_unit_dev_sq(t[c], p.alpha, _sigma_for_gat(p), cfg)
             for c in range(t.shape[0])]
    loss = torch.stack(terms).mean()
    return loss if was_torch else float(loss)


def _single_plane(t: torch.Tensor) -> torch.Tensor:
    if t.shape[0] != 1:
        raise ValueError(f"single-channel input required, got {t.shape[0]}")
    return t[0]


def _estimation_loss_t(plane: torch.Tensor, alpha, sigma, cfg: PatchConfig,
                       grain: str) -> torch.Tensor:
    if grain not in GRAIN_SETTINGS:
        raise ValueError(f"unknown grain {grain!r}, expected one of "
                         f"{GRAIN_SETTINGS}")
    parts = grain.split("+")
    terms = []
    if "cg" in parts:
        terms.append(_unit_dev_sq(plane, alpha, sigma, cfg))
    if "fg1" in parts:
        h, w = plane.shape
        bh, bw, anchors = _corner_geometry(h, w)
        for r, c in anchors:
            terms.append(_unit_dev_sq(plane[r:r + bh, c:c + bw],
                                      alpha, sigma, cfg))
    if "fg2" in parts:
        for b in _half_block_planes(plane):
            terms.append(_unit_dev_sq(b, alpha, sigma, cfg))
    return torch.stack(terms).sum()


def cramer_loss_single(y, p: NoiseParams, cfg: PatchConfig = PatchConfig(),
                       grain: str = "cg+fg1"):
    """Corner-block unit-variance terms plus the global term (summed).

    The default grain is the four corner blocks plus the global term;
    alternative grain settings select coarse-only, blocks-only, or add the
    nine half-size blocks.
    """
    t, was_torch = _coerce_chw(y)
    plane = _single_plane(t)
    loss = _estimation_loss_t(plane, p.alpha, _sigma_for_gat(p), cfg, grain)
    return loss if was_torch else float(loss)


def consistency_from_estimates(etas, literal: bool = False):
    """Cross-channel loss given per-channel variance estimates.

    Normalized reading (default): sum_j (eta_j - 1)^2 over channels plus
    sum over unordered pairs of (eta_j - eta_k)^2. The literal reading
    repeats each unit term c-1 times and each pair twice.
    """
    if isinstance(etas, torch.Tensor):
        e = etas
    elif len(etas) and isinstance(etas[0], torch.Tensor):
        e = torch.stack(list(etas))
    else:
        e = torch.as_tensor(list(etas), dtype=torch.float64)
    c = e.shape[0]
    if c < 2:
        raise ValueError(f"need >= 2 channels, got {c}")
    unit = ((e - 1.0) ** 2).sum()
    pair = torch.zeros((), dtype=e.dtype)
    for j in range(c):
        for k in range(j + 1, c):
            pair = pair + (e[j] - e[k]) ** 2
    if literal:
        return (c - 1) * unit + 2.0 * pair
    return unit + pair


def cramer_loss_multi(y, p: NoiseParams, cfg: PatchConfig = PatchConfig(),
                      literal: bool = False):
    """Per-channel unit-variance terms plus cross-channel agreement terms."""
    t, was_torch = _coerce_chw(y)
    if t.shape[0] < 2:
        raise ValueError("multi-channel loss requires >= 2 channels")
    sigma = _sigma_for_gat(p)
    etas = [_estimate_sigma2_t(_gat_core(t[c], p.alpha, sigma * sigma), cfg)
            for c in range(t.shape[0])]
    loss = consistency_from_estimates(torch.stack(etas), literal=literal)
    return loss if was_torch else float(loss)


@dataclass(frozen=True)
class FitResult:
    alpha: float
    sigma: float
    loss: float


def _fit_loss(t64: torch.Tensor, alpha, sigma, cfg: PatchConfig,
              method: str, grain: str) -> torch.Tensor:
    if method == "gaussian":
        terms = [_unit_dev_sq(t64[c], alpha, sigma, cfg)
                 for c in range(t64.shape[0])]
        return torch.stack(terms).mean()
    if method != "cramer":
        raise ValueError(f"unknown method {method!r}, expected gaussian|cramer")
    if t64.shape[0] == 1:
        return _estimation_loss_t(t64[0], alpha, sigma, cfg, grain)
    sig_sq = sigma * sigma
    etas = [_estimate_sigma2_t(_gat_core(t64[c], alpha, sig_sq), cfg)
            for c in range(t64.shape[0])]
    return consistency_from_estimates(torch.stack(etas))


def fit_noise_params_grid(y, method: str = "cramer",
                          cfg: PatchConfig = PatchConfig(),
                          alpha_grid=None, sigma_grid=None,
                          refine: bool = True,
                          grain: str = "cg+fg1") -> FitResult:
    """Two-stage grid search for the (alpha, sigma) minimizing the loss.

    The coarse stage covers alpha geometrically over [0.002, 0.3] and sigma
    linearly over [0, 0.08]; the refine stage re-grids around the coarse
    minimum. Deterministic and derivative-free.
    """
    t, _ = _coerce_chw(y)
    t64 = t.detach().to(torch.float64)
    if alpha_grid is None:
        alpha_grid = np.geomspace(0.002, 0.3, 12)
    if sigma_grid is None:
        sigma_grid = np.linspace(0.0, 0.08, 9)

    def sweep(alphas, sigmas, best):
        for a in alphas:
            for s in sigmas:
                with torch.no_grad():
                    loss = float(_fit_loss(t64, float(a), float(s), cfg,
                                           method, grain))
                if loss < best[2]:
                    best = (float(a), float(s), loss)
        return best

    best = sweep(alpha_grid, sigma_grid, (None, None, math.inf))
    if refine:
        a0, s0, _ = best
        step = (sigma_grid[-1] - sigma_grid[0]) / max(1, len(sigma_grid) - 1)
        best = sweep(np.geomspace(a0 * 0.55, a0 * 1.8, 7),
                     np.linspace(max(0.0, s0 - 1.1 * step), s0 + 1.1 * step, 8),
                     best)
    return FitResult(*best)


def _softplus_inv(x: float) -> float:
    return float(np.log(np.expm1(max(x, 1e-8))))


def fit_noise_params_descent(y, method: str = "cramer",
                             cfg: PatchConfig = PatchConfig(),
                             steps: int = 150, lr: float = 0.05,
                             init: tuple[float, float] = (0.02, 0.02),
                             grain: str = "cg+fg1") -> FitResult:
    """Adam descent on softplus-parameterized (alpha, sigma)."""
    t, _ = _coerce_chw(y)
    t64 = t.detach().to(torch.float64)
    raw = torch.tensor([_softplus_inv(init[0]), _softplus_inv(init[1])],
                       dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([raw], lr=lr)
    loss = None
    for _ in range(steps):
        opt.zero_grad()
        a, s = torch.nn.functional.softplus(raw)
        loss = _fit_loss(t64, a, s, cfg, method, grain)
        loss.backward()
        opt.step()
    with torch.no_grad():
        a, s = torch.nn.functional.softplus(raw)
        final = float(_fit_loss(t64, a, s, cfg, method, grain))
    return FitResult(float(a), float(s), final)
