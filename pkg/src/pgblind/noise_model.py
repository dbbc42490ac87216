"""Poisson-Gaussian noise synthesis and the generalized Anscombe transform.

The sensor model for a clean intensity x is

    y = alpha * P + n,   P ~ Poisson(x / alpha),   n ~ N(0, sigma^2)

so E[y] = x and Var[y] = alpha * x + sigma^2. The Gaussian approximation
draws y ~ N(x, alpha * x + sigma^2) directly. The generalized Anscombe
transform maps y to approximately unit-variance noise:

    G(y) = (2 / alpha) * sqrt(alpha * y + (3/8) * alpha^2 + sigma^2)

and the algebraic inverse solves that expression for y. The closed-form
inverse is exact as a function inverse; it is not the exact unbiased
inverse estimator of x, which is out of scope here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .tensor_core import ImageTensor, SeededRng


def _all_nonneg(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool((x >= 0).all())
    return bool(np.all(np.asarray(x) >= 0))


def _all_pos(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool((x > 0).all())
    return bool(np.all(np.asarray(x) > 0))


@dataclass(frozen=True)
class NoiseParams:
    """Poisson gain alpha and Gaussian levels for the two branches.

    Synthesis uses a single Gaussian level, so it requires sigma1 == sigma2;
    the mixture objective lets the two branch levels differ. Fields may be
    floats or torch scalars (the latter keep gradient flow).
    """

    alpha: float | torch.Tensor
    sigma1: float | torch.Tensor
    sigma2: float | torch.Tensor

    def __post_init__(self) -> None:
        if not _all_nonneg(self.alpha):
            raise ValueError("alpha must be >= 0")
        if not (_all_nonneg(self.sigma1) and _all_nonneg(self.sigma2)):
            raise ValueError("sigma levels must be >= 0")

    @classmethod
    def isotropic(cls, alpha: float, sigma: float) -> "NoiseParams":
        return cls(alpha, sigma, sigma)

    @property
    def sigma(self):
        """Common Gaussian level; only defined when the branches agree."""
        s1, s2 = self.sigma1, self.sigma2
        if isinstance(s1, torch.Tensor) or isinstance(s2, torch.Tensor):
            equal = bool((torch.as_tensor(s1) == torch.as_tensor(s2)).all())
        else:
            equal = bool(np.all(np.asarray(s1) == np.asarray(s2)))
        if not equal:
            raise ValueError("sigma1 != sigma2, no common level")
        return s1

    @property
    def sigma_bar(self):
        """RMS pooling of the branch levels, sqrt((s1^2 + s2^2) / 2)."""
        return (0.5 * (self.sigma1 ** 2 + self.sigma2 ** 2)) ** 0.5


# Standard synthetic noise levels used throughout the benchmarks.
PG_LEVELS: dict[str, tuple[float, float]] = {
    "pg1": (0.1, 0.02),
    "pg2": (0.1, 0.0002),
    "pg3": (0.05, 0.02),
    "pg4": (0.05, 0.0002),
    "pg5": (0.01, 0.02),
}


def pg_level(name: str) -> NoiseParams:
    key = name.lower()
    if key not in PG_LEVELS:
        raise ValueError(f"unknown noise level {name!r}, expected one of "
                         f"{sorted(PG_LEVELS)}")
    alpha, sigma = PG_LEVELS[key]
    return NoiseParams.isotropic(alpha, sigma)


def corrupt_exact(img: ImageTensor, p: NoiseParams, rng: SeededRng) -> ImageTensor:
    """Corrupt with an exact Poisson draw plus Gaussian read noise.

    Requires alpha > 0 (the pure-Gaussian limit has no Poisson component;
    use the Gaussian approximation for it). Negative clean values are
    treated as zero rate.
    """
    alpha = float(p.alpha)
    sigma = float(p.sigma)
    if alpha <= 0:
        raise ValueError("corrupt_exact requires alpha > 0")
    x = img.data.astype(np.float64)
    rate = np.clip(x, 0.0, None) / alpha
    y = alpha * rng.poisson(rate) + rng.normal(x.shape, 0.0, sigma)
    return ImageTensor(y)


def corrupt_gaussian_approx(img: ImageTensor, p: NoiseParams,
                            rng: SeededRng) -> ImageTensor:
    """Corrupt with the heteroscedastic Gaussian approximation.

    Draws y ~ N(x, alpha * x + sigma^2) elementwise; with alpha = sigma = 0
    this is the identity.
    """
    alpha = float(p.alpha)
    sigma = float(p.sigma)
    x = img.data.astype(np.float64)
    var = alpha * x + sigma * sigma
    if var.min() < 0:
        raise ValueError(f"negative per-pixel variance (min {var.min():.4g})")
    y = x + rng.normal(x.shape) * np.sqrt(var)
    return ImageTensor(y)


def _gat_core(y, alpha, sigma_sq):
    arg = alpha * y + 0.375 * (alpha * alpha) + sigma_sq
    return (arg.clip(min=0.0) ** 0.5) * (2.0 / alpha)


def _gat_inv_core(g, alpha, sigma_sq):
    return 0.25 * alpha * (g * g) - 0.375 * alpha - sigma_sq / alpha


def gat(img, p: NoiseParams):
    """Generalized Anscombe transform; the argument is clipped at zero.

    Accepts an ImageTensor (math in float64, result stored float32), a
    numpy array, or a torch tensor (gradients flow through values and
    through tensor-valued params).
    """
    if not _all_pos(p.alpha):
        raise ValueError("gat requires alpha > 0")
    sigma_sq = p.sigma ** 2
    if isinstance(img, ImageTensor):
        return ImageTensor(_gat_core(img.data.astype(np.float64), float(p.alpha),
                                     float(sigma_sq)))
    return _gat_core(img, p.alpha, sigma_sq)


def gat_inverse_algebraic(img, p: NoiseParams):
    """Closed-form inverse of :func:`gat` on its non-clipped domain."""
    if not _all_pos(p.alpha):
        raise ValueError("gat_inverse_algebraic requires alpha > 0")
    sigma_sq = p.sigma ** 2
    if isinstance(img, ImageTensor):
        return ImageTensor(_gat_inv_core(img.data.astype(np.float64),
                                         float(p.alpha), float(sigma_sq)))
    return _gat_inv_core(img, p.alpha, sigma_sq)
