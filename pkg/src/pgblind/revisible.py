"""The adaptive re-visible objective: two-branch beliefs, mixture NLL,
analytic gradients, and the non-adaptive baseline loss.

A denoiser emits per-pixel Gaussian beliefs (mean, diagonal variance) from
two views of the same noisy image: a masked branch (blind-spot inputs,
assembled by the mask mapper) and a visible branch (raw input). The two are
combined with weights pi1 = 1/(1+lambda), pi2 = lambda/(1+lambda) into a
single per-pixel Gaussian over the observation y, whose variance also
carries the sensed noise level. Minimizing the negative log-likelihood of y
drives the combined mean to y while the masked branch, which cannot see the
pixel it predicts, absorbs only the predictable (clean) component.

Variance variants for the combined belief:

  mo: combine the full per-branch marginals (Poisson + read noise added per
      branch before mixing).
  me: mix the network variances, then add the Poisson term at the combined
      mean and the pi-weighted read-noise terms (default).
  ms: like me but with the unweighted mean of the two read-noise variances.

Stop-gradient policy: the visible branch is treated as an independent
sample (no gradient) when iid is set, and the mean inside the Poisson
variance term is treated as data so the likelihood cannot cheat by
inflating its own variance; the noise parameters stay live so the NLL
trains the estimator jointly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .noise_model import NoiseParams
from .tensor_core import ImageTensor

VAR_FLOOR = 1e-6
LOGVAR_MIN = -14.0
LOGVAR_MAX = 6.0
VARIANTS = ("mo", "me", "ms")


def _to_tensor(x) -> torch.Tensor:
    if isinstance(x, ImageTensor):
        return x.to_torch()
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def normalize_variant(variant: str) -> str:
    v = variant.lower().replace("_", "")
    if v not in VARIANTS:
        raise ValueError(f"unknown noise-model variant {variant!r}, expected "
                         f"one of {VARIANTS}")
    return v


@dataclass
class BranchBelief:
    """Per-pixel Gaussian belief of one denoiser branch."""

    mean: torch.Tensor
    var: torch.Tensor

    def __post_init__(self) -> None:
        self.mean = _to_tensor(self.mean)
        self.var = _to_tensor(self.var).clamp(min=VAR_FLOOR)
        if self.mean.shape != self.var.shape:
            raise ValueError(f"mean shape {tuple(self.mean.shape)} != var "
                             f"shape {tuple(self.var.shape)}")

    @classmethod
    def from_heads(cls, mean: torch.Tensor, log_var: torch.Tensor) -> "BranchBelief":
        return cls(mean, log_var.clamp(LOGVAR_MIN, LOGVAR_MAX).exp())

    def detached(self) -> "BranchBelief":
        return BranchBelief(self.mean.detach(), self.var.detach())


@dataclass
class MixtureBelief:
    """Combined per-pixel Gaussian over the noisy observation."""

    mu: torch.Tensor
    var: torch.Tensor


@dataclass
class ReVisibleConfig:
    lambda_start: float = 3.0
    lambda_final: float = 11.0
    noise_model_variant: str = "me"
    iid: bool = True
    stop_grad_noise_term: bool = True
    estimator_loss_weight: float = 0.01

    def __post_init__(self) -> None:
        if self.lambda_start > self.lambda_final:
            raise ValueError("lambda_start must be <= lambda_final")
        self.noise_model_variant = normalize_variant(self.noise_model_variant)
        if self.estimator_loss_weight < 0:
            raise ValueError("estimator_loss_weight must be >= 0")

    def lambda_at(self, epoch: int, total_epochs: int) -> float:
        """Linear schedule hitting lambda_start at 0, lambda_final at the end."""
        if total_epochs <= 1:
            return self.lambda_start
        frac = min(max(epoch, 0), total_epochs - 1) / (total_epochs - 1)
        return self.lambda_start + (self.lambda_final - self.lambda_start) * frac


def mixture_weights(lam: float) -> tuple[float, float]:
    """(pi1, pi2) = (1, lambda) / (1 + lambda); they sum to 1."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return 1.0 / (1.0 + lam), lam / (1.0 + lam)


def branch_marginal(belief: BranchBelief, alpha, sigma) -> BranchBelief:
    """Add the sensed noise to a branch belief's variance.

    var' = var + alpha * max(mean, 0) + sigma^2; negative means carry no
    Poisson contribution.
    """
    var = belief.var + alpha * belief.mean.clamp(min=0) + sigma ** 2
    return BranchBelief(belief.mean, var)


def combine_mixture(masked: BranchBelief, visible: BranchBelief, lam: float,
                    variant: str = "me", p: NoiseParams | None = None,
                    stop_grad_noise_term: bool = True) -> MixtureBelief:
    """Combine the branch beliefs into one Gaussian over y."""
    if lam <= 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    variant = normalize_variant(variant)
    if p is None:
        p = NoiseParams(0.0, 0.0, 0.0)
    if masked.mean.shape != visible.mean.shape:
        raise ValueError("branch shapes differ")
    alpha, s1, s2 = p.alpha, p.sigma1, p.sigma2
    scale = (1.0 + lam) ** 2
    mu_y = (masked.mean + lam * visible.mean) / (1.0 + lam)
    if variant == "mo":
        mu_m = masked.mean.detach() if stop_grad_noise_term else masked.mean
        mu_v = visible.mean.detach() if stop_grad_noise_term else visible.mean
        vm = masked.var + alpha * mu_m.clamp(min=0) + s1 ** 2
        vv = visible.var + alpha * mu_v.clamp(min=0) + s2 ** 2
        var_y = (vm + lam ** 2 * vv) / scale
    else:
        base = (masked.var + lam ** 2 * visible.var) / scale
        mu_n = mu_y.detach() if stop_grad_noise_term else mu_y
        pois = alpha * mu_n.clamp(min=0)
        if variant == "me":
            pi1, pi2 = mixture_weights(lam)
            read = pi1 ** 2 * s1 ** 2 + pi2 ** 2 * s2 ** 2
        else:
            read = (s1 ** 2 + s2 ** 2) / 2.0
        var_y = base + pois + read
    return MixtureBelief(mu_y, var_y.clamp(min=VAR_FLOOR))


def nll(y, mix: MixtureBelief) -> torch.Tensor:
    """Mean over pixels of 0.5 * [(y - mu_y)^2 / var_y + ln var_y].

    This is the negative Gaussian log-density per pixel with the additive
    constant (ln 2 pi) / 2 dropped. Accumulation is in 64-bit.
    """
    yt = _to_tensor(y)
    if yt.shape != mix.mu.shape:
        raise ValueError(f"y shape {tuple(yt.shape)} != belief shape "
                         f"{tuple(mix.mu.shape)}")
    n = yt - mix.mu
    terms = 0.5 * ((n * n) / mix.var + mix.var.log())
    return terms.to(torch.float64).mean()


def nll_grad_mu_m(y, masked: BranchBelief, visible: BranchBelief, lam: float,
                  variant: str = "me", p: NoiseParams | None = None,
                  stop_grad_noise_term: bool = True) -> torch.Tensor:
    """Per-pixel gradient of the summed NLL w.r.t. the masked-branch mean.

    With the noise term detached (default) this is the closed form
    -(1/(1+lambda)) * (y - mu_y) / var_y. Without it, the exact gradient is
    obtained by differentiating the loss; both scale as the gradient of the
    per-pixel sum (the mean's 1/N is omitted).
    """
    yt = _to_tensor(y)
    if stop_grad_noise_term:
        mix = combine_mixture(masked, visible, lam, variant, p,
                              stop_grad_noise_term=True)
        return -(1.0 / (1.0 + lam)) * (yt - mix.mu) / mix.var
    mu_m = masked.mean.detach().clone().requires_grad_(True)
    m = BranchBelief(mu_m, masked.var.detach())
    v = visible.detached()
    mix = combine_mixture(m, v, lam, variant, p, stop_grad_noise_term=False)
    loss = nll(yt.detach(), mix)
    (grad,) = torch.autograd.grad(loss, mu_m)
    return grad * yt.numel()


def optimal_clean(masked_mean, visible_mean, lam: float):
    """x_tilde = (mu_m + lambda * mu_v) / (1 + lambda)."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if isinstance(masked_mean, ImageTensor):
        out = (masked_mean.data.astype(np.float64)
               + lam * visible_mean.data.astype(np.float64)) / (1.0 + lam)
        return ImageTensor(out)
    return (masked_mean + lam * visible_mean) / (1.0 + lam)


def b2u_loss(y, mapped_masked_mean, visible_mean, lam: float) -> torch.Tensor:
    """Non-adaptive re-visible baseline loss.

    Mean over pixels of (h + lambda * f_hat - (1 + lambda) * y)^2 where h is
    the mapped masked prediction and f_hat the visible prediction, which
    carries no gradient.
    """
    yt = _to_tensor(y)
    h = _to_tensor(mapped_masked_mean)
    f_hat = _to_tensor(visible_mean).detach()
    r = h + lam * f_hat - (1.0 + lam) * yt
    return (r * r).to(torch.float64).mean()


def revisible_loss(y, masked: BranchBelief, visible: BranchBelief, lam: float,
                   p: NoiseParams, cfg: ReVisibleConfig) -> tuple[torch.Tensor, MixtureBelief]:
    """Config-driven NLL: applies the iid stop-gradient to the visible branch."""
    if cfg.iid:
        visible = visible.detached()
    mix = combine_mixture(masked, visible, lam, cfg.noise_model_variant, p,
                          cfg.stop_grad_noise_term)
    return nll(y, mix), mix
