"""Noise-variance estimation from patch-covariance eigenvalues.

The estimator eta(img) extracts overlapping patches, forms their sample
covariance, and averages the lower part of the eigenvalue spectrum: signal
structure concentrates in a few large eigenvalues while i.i.d. noise spreads
uniformly, so after discarding the large ones the mean of the remainder is
the noise variance. The truncation rule removes the largest eigenvalue while
mean > median * (1 + 1e-3); for a pure-noise tail mean and median agree.

The whole pipeline is differentiable in the input pixels with the truncation
set treated as a frozen selection: gradients flow through the covariance and
the kept eigenvalues (via the symmetric-eigenvalue backward rule), not
through the keep/drop decision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from numba import njit

from .tensor_core import ImageTensor

JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100
SYMMETRY_TOL = 1e-6
TRUNCATION_TOL = 1e-3


@dataclass(frozen=True)
class PatchConfig:
    patch_size: int = 8
    stride: int = 2

    def __post_init__(self) -> None:
        if self.patch_size < 4:
            raise ValueError(f"patch_size must be >= 4, got {self.patch_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


def _as_plane(img) -> tuple[torch.Tensor, bool]:
    """Coerce to a 2-d torch tensor; returns (plane, was_torch)."""
    if isinstance(img, ImageTensor):
        if img.channels != 1:
            raise ValueError("single-channel input required; pass one channel "
                             "at a time")
        return torch.from_numpy(img.data[:, :, 0].copy()), False
    if isinstance(img, torch.Tensor):
        t = img
        if t.ndim == 3:
            if t.shape[0] != 1:
                raise ValueError("single-channel input required")
            t = t[0]
        if t.ndim != 2:
            raise ValueError(f"expected 2-d input, got {t.ndim}-d")
        return t, True
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"expected 2-d input, got {arr.ndim}-d")
    return torch.from_numpy(np.ascontiguousarray(arr)), False


def extract_patches(img, cfg: PatchConfig = PatchConfig()):
    """Vectorized patches at stride over valid positions, one per row.

    Returns an (n_patches, patch_size^2) matrix of the same kind as the
    input (torch in, torch out; otherwise numpy).
    """
    plane, was_torch = _as_plane(img)
    out = _extract_patches_t(plane, cfg)
    return out if was_torch else out.numpy()


def _extract_patches_t(x: torch.Tensor, cfg: PatchConfig) -> torch.Tensor:
    h, w = x.shape
    p, s = cfg.patch_size, cfg.stride
    if h < p or w < p:
        raise ValueError(f"image {h}x{w} smaller than patch {p}")
    return x.unfold(0, p, s).unfold(1, p, s).reshape(-1, p * p)


def patch_covariance(patches):
    """Sample covariance of patch rows, divisor n-1, exactly symmetric."""
    was_torch = isinstance(patches, torch.Tensor)
    x = patches if was_torch else torch.from_numpy(np.ascontiguousarray(patches))
    out = _patch_covariance_t(x)
    return out if was_torch else out.numpy()


def _patch_covariance_t(x: torch.Tensor) -> torch.Tensor:
    if x.ndim != 2:
        raise ValueError(f"expected a 2-d patch matrix, got {x.ndim}-d")
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 patches, got {n}")
    xc = x - x.mean(dim=0, keepdim=True)
    c = (xc.T @ xc) / (n - 1)
    return 0.5 * (c + c.T)


@njit(cache=True)
def _jacobi_cyclic(a: np.ndarray, tol: float, max_sweeps: int):
    """Cyclic Jacobi diagonalization of a symmetric matrix, in place.

    Sweeps all (p, q) pairs row by row; stops when the off-diagonal
    Frobenius norm drops below tol or after max_sweeps sweeps. Returns
    (eigenvalues, eigenvector columns), unsorted.
    """
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                off += 2.0 * a[i, j] * a[i, j]
        if np.sqrt(off) < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    return w, v


class _SymEig(torch.autograd.Function):
    """Ascending eigenvalues of a symmetric matrix via cyclic Jacobi.

    Backward uses d lambda_i = v_i^T dA v_i, i.e. grad_A = V diag(g) V^T.
    """

    @staticmethod
    def forward(ctx, m: torch.Tensor) -> torch.Tensor:
        a = m.detach().cpu().numpy().astype(np.float64, copy=True)
        w, v = _jacobi_cyclic(a, JACOBI_TOL, JACOBI_MAX_SWEEPS)
        order = np.argsort(w, kind="stable")
        vt = torch.from_numpy(v[:, order].copy())
        ctx.save_for_backward(vt)
        ctx.in_dtype = m.dtype
        return torch.from_numpy(w[order].copy()).to(m.dtype)

    @staticmethod
    def backward(ctx, grad_w: torch.Tensor) -> torch.Tensor:
        (v,) = ctx.saved_tensors
        g = (v * grad_w.to(v.dtype).unsqueeze(0)) @ v.T
        return g.to(ctx.in_dtype)


def sym_eigenvalues(m):
    """All eigenvalues of a symmetric matrix, ascending.

    Rejects matrices whose asymmetry exceeds 1e-6. torch input gives a
    differentiable torch result; numpy input gives numpy.
    """
    was_torch = isinstance(m, torch.Tensor)
    t = m if was_torch else torch.from_numpy(np.ascontiguousarray(m))
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ValueError(f"expected a square matrix, got {tuple(t.shape)}")
    asym = float((t - t.T).abs().max().detach())
    if asym > SYMMETRY_TOL:
        raise ValueError(f"matrix not symmetric (max asymmetry {asym:.3g})")
    w = _SymEig.apply(t)
    return w if was_torch else w.numpy()


def _truncation_keep_count(ev: np.ndarray) -> int:
    keep = ev.size
    while keep > 1 and ev[:keep].mean() > np.median(ev[:keep]) * (1.0 + TRUNCATION_TOL):
        keep -= 1
    return keep


def estimate_sigma2(img, cfg: PatchConfig = PatchConfig()):
    """Eigenvalue-truncation noise-variance estimate of a single channel.

    Requires enough patches for a full-rank-capable covariance
    (n_patches >= patch_size^2). Returns 0 for a constant image. torch
    input gives a differentiable 0-dim torch result; otherwise a float.
    """
    plane, was_torch = _as_plane(img)
    est = _estimate_sigma2_t(plane, cfg)
    return est if was_torch else float(est)


def _estimate_sigma2_t(x: torch.Tensor, cfg: PatchConfig) -> torch.Tensor:
    patches = _extract_patches_t(x, cfg).to(torch.float64)
    d = cfg.patch_size ** 2
    n = patches.shape[0]
    if n < d:
        raise ValueError(
            f"too few patches ({n}) for a {d}x{d} covariance; need >= {d}")
    cov = _patch_covariance_t(patches)
    ev = _SymEig.apply(cov)
    keep = _truncation_keep_count(ev.detach().numpy())
    est = ev[:keep].mean().clamp(min=0.0)
    return est.to(x.dtype)
