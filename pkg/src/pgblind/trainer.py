"""Joint training loop for the denoiser and the noise estimator."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cramer_loss import (
    GRAIN_SETTINGS,
    _estimation_loss_t,
    cramer_loss_multi,
    fit_noise_params_grid,
)
from .masking import FILL_MODES, build_masked_volume, map_blindspots
from .metrics import psnr
from .networks import DenoiserNet, EstimatorNet, infer
from .noise_model import NoiseParams, corrupt_exact, corrupt_gaussian_approx
from .revisible import BranchBelief, ReVisibleConfig, revisible_loss
from .tensor_core import ImageTensor, SeededRng, load_image, load_raw_tensor, save_raw_tensor
from .variance_estimator import PatchConfig

SCHEMES = ("t+j", "t+p", "t+f")
IMAGE_SUFFIXES = (".pgm", ".ppm", ".pgt")
# reserved top-level stream ids of the base seed
_VAL_STREAM = 0
_EPOCH_STREAM = 1
_PRETRAIN_STREAM = 2
MANIFEST_NAME = "manifest.txt"
METRICS_NAME = "metrics.tsv"
METRICS_COLUMNS = (
    "epoch",
    "lambda",
    "nll",
    "est_loss",
    "psnr_val",
    "alpha_hat",
    "sigma1_hat",
    "sigma2_hat",
)


class NonFiniteLossError(RuntimeError):
    """Raised when a loss term stops being finite, naming the term."""

    def __init__(self, term: str, value: float) -> None:
        super().__init__(f"non-finite training loss: {term} = {value!r}")
        self.term = term


@dataclass
class TrainConfig:
    """Desk-scale training settings.

    Defaults are sized so a full run finishes in minutes on one CPU core:
    a handful of small images, 64-pixel patches, 30 epochs.
    """

    epochs: int = 30
    batch_size: int = 4
    patch_size: int = 64
    patches_per_image: int = 2
    alpha: float = 0.01
    sigma: float = 0.02
    exact_noise: bool = True
    scheme: str = "t+j"
    cell_size: int = 4
    fill: str = "neighbor_mean"
    grain: str = "cg+fg1"
    lr_denoiser: float = 1e-3
    lr_estimator: float = 1e-4
    weight_decay: float = 1e-8
    lr_half_denoiser: int = 20
    lr_half_estimator: int = 10
    seed: int = 0
    val_count: int = 4
    channels: int = 1
    data_dir: str = ""
    revisible: ReVisibleConfig = field(default_factory=ReVisibleConfig)

    def __post_init__(self) -> None:
        self.scheme = self.scheme.lower()
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        self.fill = self.fill.lower()
        if self.fill not in FILL_MODES:
            raise ValueError(f"fill must be one of {FILL_MODES}, got {self.fill!r}")
        self.grain = self.grain.lower()
        if self.grain not in GRAIN_SETTINGS:
            raise ValueError(f"grain must be one of {GRAIN_SETTINGS}, got {self.grain!r}")
        for name in ("epochs", "batch_size", "patch_size", "patches_per_image",
                     "cell_size", "lr_half_denoiser", "lr_half_estimator"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.patch_size % 4 != 0:
            raise ValueError("patch_size must be divisible by 4")
        if self.alpha < 0.0 or self.sigma < 0.0:
            raise ValueError("alpha and sigma must be non-negative")
        for name in ("lr_denoiser", "lr_estimator"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")
        if self.val_count < 1:
            raise ValueError("val_count must be >= 1")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL_WORDS[text.strip().lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {text!r}") from None


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ValueError(f"config line {lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


_TYPE_CASTS = {"int": int, "float": float, "str": str, "bool": _parse_bool}


def train_config_from_dict(entries: dict[str, str]) -> TrainConfig:
    """Build a config from flat string entries; unknown keys are errors."""
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "revisible"}
    rev_fields = {f.name: f for f in dataclasses.fields(ReVisibleConfig)}
    train_kwargs: dict[str, object] = {}
    rev_kwargs: dict[str, object] = {}
    for key, value in entries.items():
        if key in train_fields:
            fld, target = train_fields[key], train_kwargs
        elif key in rev_fields:
            fld, target = rev_fields[key], rev_kwargs
        else:
            known = sorted(train_fields) + sorted(rev_fields)
            raise ValueError(f"unknown config key {key!r}; known keys: {', '.join(known)}")
        type_name = fld.type if isinstance(fld.type, str) else fld.type.__name__
        cast = _TYPE_CASTS.get(type_name)
        if cast is None:
            raise ValueError(f"config key {key!r} has unsupported type {type_name}")
        try:
            target[key] = cast(value)
        except ValueError as exc:
            raise ValueError(f"config key {key!r}: {exc}") from None
    return TrainConfig(revisible=ReVisibleConfig(**rev_kwargs), **train_kwargs)


def train_config_from_file(path: str | Path) -> TrainConfig:
    return train_config_from_dict(parse_config_text(Path(path).read_text()))


def config_to_entries(cfg: TrainConfig) -> dict[str, str]:
    """Flatten a config back to the textual key/value form."""
    out: dict[str, str] = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name == "revisible":
            continue
        out[f.name] = str(getattr(cfg, f.name))
    for f in dataclasses.fields(ReVisibleConfig):
        out[f.name] = str(getattr(cfg.revisible, f.name))
    return out


@dataclass
class TrainState:
    """Networks plus optimizers, advanced in place by train_step."""

    cfg: TrainConfig
    denoiser: DenoiserNet
    estimator: EstimatorNet
    opt_denoiser: torch.optim.Optimizer
    opt_estimator: torch.optim.Optimizer | None
    epoch: int = 0

    @classmethod
    def create(cls, cfg: TrainConfig) -> "TrainState":
        denoiser = DenoiserNet(cfg.channels)
        estimator = EstimatorNet(cfg.channels)
        opt_d = torch.optim.Adam(
            denoiser.parameters(), lr=cfg.lr_denoiser, weight_decay=cfg.weight_decay
        )
        opt_e = None
        if cfg.scheme == "t+j":
            opt_e = torch.optim.Adam(
                estimator.parameters(), lr=cfg.lr_estimator, weight_decay=cfg.weight_decay
            )
        return cls(cfg=cfg, denoiser=denoiser, estimator=estimator,
                   opt_denoiser=opt_d, opt_estimator=opt_e)

    def set_epoch(self, epoch: int) -> None:
        """Move to an epoch and apply the halving learning-rate schedule."""
        self.epoch = epoch
        cfg = self.cfg
        lr_d = cfg.lr_denoiser * 0.5 ** (epoch // cfg.lr_half_denoiser)
        for group in self.opt_denoiser.param_groups:
            group["lr"] = lr_d
        if self.opt_estimator is not None:
            lr_e = cfg.lr_estimator * 0.5 ** (epoch // cfg.lr_half_estimator)
            for group in self.opt_estimator.param_groups:
                group["lr"] = lr_e


def _check_finite(term: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value):
        raise NonFiniteLossError(term, float(value.detach()))


def _batch_tensor(batch) -> torch.Tensor:
    planes = []
    for item in batch:
        t = item.to_torch() if isinstance(item, ImageTensor) else item
        if t.ndim == 2:
            t = t.unsqueeze(0)
        planes.append(t)
    return torch.stack(planes)


def _noise_params_for_batch(
    state: TrainState, y: torch.Tensor
) -> tuple[NoiseParams, torch.Tensor]:
    """Per-sample (alpha, sigma1, sigma2) under the configured scheme."""
    cfg = state.cfg
    n = y.shape[0]
    if cfg.scheme == "t+f":
        raw = torch.tensor([cfg.alpha, cfg.sigma, cfg.sigma]).repeat(n, 1)
    elif cfg.scheme == "t+p":
        with torch.no_grad():
            raw = state.estimator(y)
    else:
        raw = state.estimator(y)
    alpha = raw[:, 0].view(n, 1, 1, 1)
    sigma1 = raw[:, 1].view(n, 1, 1, 1)
    sigma2 = raw[:, 2].view(n, 1, 1, 1)
    return NoiseParams(alpha=alpha, sigma1=sigma1, sigma2=sigma2), raw


def _estimation_loss_batch(y: torch.Tensor, raw: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    """Noise-level fit loss averaged over the batch.

    Each sample is scored at its own predicted parameters; two-component
    read noise enters through the quadratic-mean level, which is what the
    transform's variance argument expects.
    """
    pcfg = PatchConfig()
    terms = []
    for b in range(y.shape[0]):
        alpha, s1, s2 = raw[b, 0], raw[b, 1], raw[b, 2]
        sigma_bar = (0.5 * (s1 * s1 + s2 * s2)).sqrt()
        if y.shape[1] == 1:
            terms.append(_estimation_loss_t(y[b, 0], alpha, sigma_bar, pcfg, cfg.grain))
        else:
            p = NoiseParams(alpha=alpha, sigma1=sigma_bar, sigma2=sigma_bar)
            terms.append(cramer_loss_multi(y[b], p, pcfg))
    return torch.stack(terms).mean()


def train_step(batch, state: TrainState, lam: float | None = None) -> dict[str, float]:
    """One optimization step over a batch of noisy patches.

    The masked volume of every sample goes through the denoiser in a
    single forward pass; blind-spot predictions are then gathered back
    into one plane per sample. Returns the scalar loss terms.
    """
    cfg = state.cfg
    rcfg = cfg.revisible
    if lam is None:
        lam = rcfg.lambda_at(state.epoch, cfg.epochs)
    y = _batch_tensor(batch)
    n, c, h, w = y.shape

    vols = [build_masked_volume(y[b], cfg.cell_size, cfg.fill) for b in range(n)]
    stacked = torch.cat([vol.copies for vol in vols], dim=0)
    mean_all, logvar_all = state.denoiser(stacked)

    s2 = cfg.cell_size * cfg.cell_size
    mu_m, logv_m = [], []
    for b in range(n):
        sl = slice(b * s2, (b + 1) * s2)
        mu_m.append(map_blindspots(mean_all[sl], vols[b]))
        logv_m.append(map_blindspots(logvar_all[sl], vols[b]))
    masked = BranchBelief.from_heads(torch.stack(mu_m), torch.stack(logv_m))

    if rcfg.iid:
        with torch.no_grad():
            mean_v, logv_v = state.denoiser(y)
    else:
        mean_v, logv_v = state.denoiser(y)
    visible = BranchBelief.from_heads(mean_v, logv_v)

    params, raw = _noise_params_for_batch(state, y)
    loss_nll, _ = revisible_loss(y, masked, visible, lam, params, rcfg)
    _check_finite("nll", loss_nll)

    weight = rcfg.estimator_loss_weight
    if weight > 0.0 or state.opt_estimator is not None:
        loss_est = _estimation_loss_batch(y, raw, cfg)
        _check_finite("est_loss", loss_est)
    else:
        loss_est = torch.zeros(())
    total = loss_nll + weight * loss_est
    _check_finite("total", total)

    state.opt_denoiser.zero_grad(set_to_none=True)
    if state.opt_estimator is not None:
        state.opt_estimator.zero_grad(set_to_none=True)
    total.backward()
    state.opt_denoiser.step()
    if state.opt_estimator is not None:
        state.opt_estimator.step()
    return {
        "nll": float(loss_nll.detach()),
        "est_loss": float(loss_est.detach()),
        "total": float(total.detach()),
        "lambda": float(lam),
    }


def load_clean_images(dataset_dir: str | Path) -> list[tuple[str, ImageTensor]]:
    """Load every supported image under a directory, sorted by name."""
    root = Path(dataset_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    names = sorted(p.name for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not names:
        raise ValueError(f"no .pgm/.ppm/.pgt images in {root}")
    return [(name, load_image(root / name)) for name in names]


def _corrupt(img: ImageTensor, alpha: float, sigma: float, exact: bool,
             rng: SeededRng) -> ImageTensor:
    if exact and alpha > 0.0:
        return corrupt_exact(img, NoiseParams.isotropic(alpha, sigma), rng)
    return corrupt_gaussian_approx(img, NoiseParams.isotropic(alpha, sigma), rng)


def _random_patch(data: np.ndarray, size: int, rng: SeededRng) -> np.ndarray:
    h, w = data.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than patch size {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return data[top:top + size, left:left + size].copy()


def calibrate_estimator_constant(est: EstimatorNet, alpha: float,
                                 sigma1: float, sigma2: float) -> None:
    """Pin the estimator to a constant output, e.g. from a separate fit.

    Zeroing the last layer's weights and setting its bias to the softplus
    preimage makes the network emit the given triple for any input.
    """

    def softplus_inv(v: float) -> float:
        v = max(v, 1e-8)
        return float(v + np.log(-np.expm1(-v)))

    last = est.trunk[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.copy_(torch.tensor(
            [softplus_inv(alpha), softplus_inv(sigma1), softplus_inv(sigma2)]
        ))


@dataclass
class TrainResult:
    out_dir: Path
    metrics_path: Path
    history: list[dict[str, float]]
    noisy_psnr: float
    final_psnr: float
    best_psnr: float


def _mean_psnr(preds: list[ImageTensor], refs: list[ImageTensor]) -> float:
    vals = [psnr(p, r) for p, r in zip(preds, refs)]
    finite = [v for v in vals if v is not None]
    if not finite:
        return float("inf")
    return float(np.mean(finite))


def run_training(dataset_dir: str | Path, cfg: TrainConfig,
                 out_dir: str | Path, plot: bool = True) -> TrainResult:
    """Full desk-scale run: corrupt, train, validate, checkpoint.

    The last ``val_count`` images (by name order) are held out and
    corrupted once with a fixed stream, so the validation PSNR trace and
    the noisy-input baseline are comparable across epochs and runs.
    Training images are re-corrupted every epoch from per-epoch forks of
    the base stream. Metrics land in ``metrics.tsv`` (one row per epoch)
    next to the checkpoint files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    named = load_clean_images(dataset_dir)
    if len(named) <= cfg.val_count:
        raise ValueError(
            f"need more than val_count={cfg.val_count} images, found {len(named)}"
        )
    for _, img in named:
        if img.channels != cfg.channels:
            raise ValueError(
                f"dataset has {img.channels}-channel images, config says {cfg.channels}"
            )
    train_imgs = [img for _, img in named[:-cfg.val_count]]
    val_imgs = [img for _, img in named[-cfg.val_count:]]

    torch.manual_seed(cfg.seed)
    state = TrainState.create(cfg)
    base_rng = SeededRng(cfg.seed)
    if cfg.scheme == "t+p":
        # stand-in for a separately trained estimator: fit the first
        # training image once and freeze the net at that output
        probe_rng = base_rng.fork(_PRETRAIN_STREAM)
        noisy_probe = _corrupt(train_imgs[0], cfg.alpha, cfg.sigma, cfg.exact_noise, probe_rng)
        fit = fit_noise_params_grid(noisy_probe)
        calibrate_estimator_constant(state.estimator, fit.alpha, fit.sigma, fit.sigma)

    val_rng = base_rng.fork(_VAL_STREAM)
    noisy_val = [
        _corrupt(img, cfg.alpha, cfg.sigma, cfg.exact_noise, val_rng.fork(i))
        for i, img in enumerate(val_imgs)
    ]
    noisy_psnr = _mean_psnr(noisy_val, val_imgs)

    history: list[dict[str, float]] = []
    best_psnr = -float("inf")
    for epoch in range(cfg.epochs):
        state.set_epoch(epoch)
        lam = cfg.revisible.lambda_at(epoch, cfg.epochs)
        epoch_rng = base_rng.fork(_EPOCH_STREAM).fork(epoch)

        patches: list[torch.Tensor] = []
        for i, img in enumerate(train_imgs):
            img_rng = epoch_rng.fork(i)
            noisy = _corrupt(img, cfg.alpha, cfg.sigma, cfg.exact_noise, img_rng)
            for _ in range(cfg.patches_per_image):
                crop = _random_patch(noisy.data, cfg.patch_size, img_rng)
                patches.append(torch.from_numpy(np.ascontiguousarray(
                    np.moveaxis(crop, -1, 0))))
        order = np.argsort(epoch_rng.uniform(len(patches)), kind="stable")

        nll_sum = est_sum = 0.0
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [patches[j] for j in order[start:start + cfg.batch_size]]
            stats = train_step(batch, state, lam=lam)
            nll_sum += stats["nll"]
            est_sum += stats["est_loss"]
            steps += 1

        preds = [infer(state.denoiser, nv) for nv in noisy_val]
        psnr_val = _mean_psnr(preds, val_imgs)
        best_psnr = max(best_psnr, psnr_val)
        with torch.no_grad():
            est_out = torch.stack(
                [state.estimator(nv.to_torch().unsqueeze(0))[0] for nv in noisy_val]
            ).mean(dim=0)
        history.append({
            "epoch": float(epoch),
            "lambda": float(lam),
            "nll": nll_sum / max(steps, 1),
            "est_loss": est_sum / max(steps, 1),
            "psnr_val": psnr_val,
            "alpha_hat": float(est_out[0]),
            "sigma1_hat": float(est_out[1]),
            "sigma2_hat": float(est_out[2]),
        })

    metrics_path = out / METRICS_NAME
    lines = ["# " + "\t".join(METRICS_COLUMNS) + "\t(psnr on unclipped values)"]
    for row in history:
        lines.append("\t".join(
            str(int(row["epoch"])) if col == "epoch" else f"{row[col]:.6g}"
            for col in METRICS_COLUMNS
        ))
    metrics_path.write_text("\n".join(lines) + "\n")
    save_checkpoint(out, state.denoiser, state.estimator, cfg)
    if plot:
        from .reporting import render_training_curves
        render_training_curves(history, out / "metrics.png")
    return TrainResult(
        out_dir=out,
        metrics_path=metrics_path,
        history=history,
        noisy_psnr=noisy_psnr,
        final_psnr=history[-1]["psnr_val"],
        best_psnr=best_psnr,
    )


def save_checkpoint(out_dir: str | Path, denoiser: DenoiserNet,
                    estimator: EstimatorNet, cfg: TrainConfig) -> Path:
    """Write a manifest plus one raw-tensor file per parameter."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    idx = 0
    for prefix, net in (("denoiser", denoiser), ("estimator", estimator)):
        for name, tensor in net.state_dict().items():
            fname = f"param_{idx:04d}.pgt"
            flat = tensor.detach().to(torch.float32).reshape(1, -1, 1).numpy()
            save_raw_tensor(out / fname, flat)
            shape = ",".join(str(d) for d in tensor.shape) or "scalar"
            lines.append(f"param {prefix}.{name} {shape} float32 {fname}")
            idx += 1
    for key, value in config_to_entries(cfg).items():
        lines.append(f"config {key} = {value}")
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_checkpoint(ckpt_dir: str | Path) -> tuple[DenoiserNet, EstimatorNet, TrainConfig]:
    """Rebuild networks from a manifest directory."""
    root = Path(ckpt_dir)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    params: list[tuple[str, tuple[int, ...], str]] = []
    config_entries: dict[str, str] = {}
    for lineno, raw in enumerate(manifest.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        kind, rest = line.split(" ", 1)
        if kind == "param":
            name, shape_s, dtype, fname = rest.split(" ")
            if dtype != "float32":
                raise ValueError(f"manifest line {lineno}: unsupported dtype {dtype}")
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split(","))
            params.append((name, shape, fname))
        elif kind == "config":
            key, value = rest.split("=", 1)
            config_entries[key.strip()] = value.strip()
        else:
            raise ValueError(f"manifest line {lineno}: unknown entry kind {kind!r}")
    cfg = train_config_from_dict(config_entries)
    denoiser = DenoiserNet(cfg.channels)
    estimator = EstimatorNet(cfg.channels)
    states: dict[str, dict[str, torch.Tensor]] = {"denoiser": {}, "estimator": {}}
    for name, shape, fname in params:
        prefix, _, key = name.partition(".")
        if prefix not in states:
            raise ValueError(f"unknown network prefix {prefix!r} in manifest")
        flat = load_raw_tensor(root / fname)
        numel = int(np.prod(shape)) if shape else 1
        if flat.size != numel:
            raise ValueError(f"parameter {name}: file has {flat.size} values, expected {numel}")
        states[prefix][key] = torch.from_numpy(flat.reshape(shape).copy())
    denoiser.load_state_dict(states["denoiser"])
    estimator.load_state_dict(states["estimator"])
    return denoiser, estimator, cfg
