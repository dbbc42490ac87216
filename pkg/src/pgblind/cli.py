"""Command-line interface: synthesis, transforms, estimation, training."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .bench import bench_estimation, run_ablation, save_ablation_report, \
    save_estimation_report, toy_clean_images, ABLATION_AXES
from .cramer_loss import GRAIN_SETTINGS, fit_noise_params_descent, fit_noise_params_grid
from .metrics import psnr, ssim
from .networks import infer
from .noise_model import NoiseParams, corrupt_exact, corrupt_gaussian_approx, \
    gat, gat_inverse_algebraic
from .reporting import BenchReport, format_cell, render_bar_figure
from .tensor_core import ImageFormatError, SeededRng, load_image, save_image
from .trainer import IMAGE_SUFFIXES, TrainConfig, load_checkpoint, \
    load_clean_images, run_training, train_config_from_file


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgblind",
        description="Blind Poisson-Gaussian noise modeling and self-supervised denoising",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="corrupt clean images, or generate toy scenes")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--in", dest="in_dir", metavar="DIR", help="clean input directory")
    src.add_argument("--toy", type=int, metavar="N", help="generate N toy scenes instead")
    sp.add_argument("--out", required=True, metavar="DIR")
    sp.add_argument("--alpha", type=float, default=0.0, help="Poisson gain (0 = none)")
    sp.add_argument("--sigma", type=float, default=0.0, help="read-noise level (0 = none)")
    sp.add_argument("--seed", type=int, default=0)
    mode = sp.add_mutually_exclusive_group()
    mode.add_argument("--exact", action="store_true",
                      help="force exact Poisson sampling (requires alpha > 0)")
    mode.add_argument("--approx", action="store_true",
                      help="force the Gaussian approximation")
    sp.add_argument("--format", choices=("pgt", "pgm", "ppm"), default="pgt",
                    help="output format (default: lossless pgt)")
    sp.add_argument("--height", type=int, default=128, help="toy scene height")
    sp.add_argument("--width", type=int, default=128, help="toy scene width")
    sp.add_argument("--channels", type=int, choices=(1, 3), default=1,
                    help="toy scene channels")

    sp = sub.add_parser("gat", help="apply the variance-stabilizing transform")
    sp.add_argument("--in", dest="in_path", required=True, metavar="IMG")
    sp.add_argument("--alpha", type=float, required=True)
    sp.add_argument("--sigma", type=float, required=True)
    sp.add_argument("--out", required=True, metavar="IMG")
    sp.add_argument("--inverse", action="store_true",
                    help="apply the algebraic inverse instead")

    sp = sub.add_parser("estimate", help="blind noise-parameter estimation")
    sp.add_argument("--in", dest="in_path", required=True, metavar="IMG")
    sp.add_argument("--method", choices=("gaussian", "cramer"), default="cramer")
    how = sp.add_mutually_exclusive_group()
    how.add_argument("--grid", action="store_true", help="grid search (default)")
    how.add_argument("--train", action="store_true", help="gradient descent fit")
    sp.add_argument("--grain", choices=GRAIN_SETTINGS, default="cg+fg1")

    sp = sub.add_parser("train", help="joint self-supervised training")
    sp.add_argument("--data", required=True, metavar="DIR")
    sp.add_argument("--config", metavar="FILE", help="key = value settings file")
    sp.add_argument("--out", required=True, metavar="CKPT_DIR")

    sp = sub.add_parser("denoise", help="run a trained denoiser on one image")
    sp.add_argument("--ckpt", required=True, metavar="DIR")
    sp.add_argument("--in", dest="in_path", required=True, metavar="IMG")
    sp.add_argument("--out", required=True, metavar="IMG")

    sp = sub.add_parser("eval", help="PSNR/SSIM of predictions against references")
    sp.add_argument("--pred", required=True, metavar="DIR")
    sp.add_argument("--ref", required=True, metavar="DIR")
    sp.add_argument("--out", metavar="DIR", help="also write eval.tsv and eval.png here")

    sp = sub.add_parser("bench", help="estimation accuracy across noise levels")
    sp.add_argument("--data", required=True, metavar="DIR")
    sp.add_argument("--levels", default="pg1,pg2,pg3,pg4,pg5",
                    help="comma-separated level names (pg1..pg5, zero)")
    sp.add_argument("--method", choices=("gaussian", "cramer"), default="cramer")
    sp.add_argument("--fit", choices=("grid", "descent"), default="grid")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="bench_out", metavar="DIR")

    sp = sub.add_parser("ablate", help="one-axis sweep around a base config")
    sp.add_argument("--axis", required=True, choices=ABLATION_AXES)
    sp.add_argument("--config", required=True, metavar="FILE")
    sp.add_argument("--data", metavar="DIR", help="dataset (defaults to the config's data_dir)")
    sp.add_argument("--out", default="ablation_out", metavar="DIR")
    sp.add_argument("--parallel", action="store_true",
                    help="run independent rows on worker threads")
    return parser


def _cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.toy is not None:
        if args.toy < 1:
            raise ValueError("--toy must be >= 1")
        images = toy_clean_images(args.toy, args.height, args.width,
                                  args.channels, args.seed)
        names = [f"toy_{i:03d}" for i in range(len(images))]
    else:
        named = load_clean_images(args.in_dir)
        names = [Path(n).stem for n, _ in named]
        images = [img for _, img in named]
    if args.exact and args.alpha <= 0.0:
        raise ValueError("--exact requires alpha > 0")
    use_exact = args.exact or (args.alpha > 0.0 and not args.approx)
    p = NoiseParams.isotropic(args.alpha, args.sigma)
    rng = SeededRng(args.seed)
    for i, (name, img) in enumerate(zip(names, images)):
        if args.alpha == 0.0 and args.sigma == 0.0:
            noisy = img
        elif use_exact:
            noisy = corrupt_exact(img, p, rng.fork(i))
        else:
            noisy = corrupt_gaussian_approx(img, p, rng.fork(i))
        save_image(noisy, out / f"{name}.{args.format}")
    print(f"wrote {len(images)} images to {out}")
    return 0


def _cmd_gat(args) -> int:
    img = load_image(args.in_path)
    p = NoiseParams.isotropic(args.alpha, args.sigma)
    res = gat_inverse_algebraic(img, p) if args.inverse else gat(img, p)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_image(res, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_estimate(args) -> int:
    img = load_image(args.in_path)
    if args.train:
        res = fit_noise_params_descent(img, method=args.method, grain=args.grain)
        how = "descent"
    else:
        res = fit_noise_params_grid(img, method=args.method, grain=args.grain)
        how = "grid"
    print(f"method = {args.method} ({how})")
    print(f"alpha_hat = {format_cell(res.alpha)}")
    print(f"sigma_hat = {format_cell(res.sigma)}")
    print(f"loss = {format_cell(res.loss)}")
    return 0


def _cmd_train(args) -> int:
    cfg = train_config_from_file(args.config) if args.config else TrainConfig()
    result = run_training(args.data, cfg, args.out)
    print(f"checkpoint: {result.out_dir / 'manifest.txt'}")
    print(f"metrics: {result.metrics_path}")
    print(f"noisy input psnr = {format_cell(result.noisy_psnr)} dB")
    print(f"final val psnr = {format_cell(result.final_psnr)} dB "
          f"(best {format_cell(result.best_psnr)})")
    print(f"gain = {format_cell(result.final_psnr - result.noisy_psnr)} dB")
    return 0


def _cmd_denoise(args) -> int:
    denoiser, _, cfg = load_checkpoint(args.ckpt)
    img = load_image(args.in_path)
    if img.channels != cfg.channels:
        raise ValueError(f"checkpoint is for {cfg.channels}-channel images, "
                         f"input has {img.channels}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_image(infer(denoiser, img), args.out)
    print(f"wrote {args.out}")
    return 0


def _match_pairs(pred_dir: str, ref_dir: str) -> list[tuple[str, Path, Path]]:
    pred_root, ref_root = Path(pred_dir), Path(ref_dir)
    refs: dict[str, Path] = {}
    for path in sorted(ref_root.iterdir()):
        if path.suffix.lower() in IMAGE_SUFFIXES:
            refs.setdefault(path.stem, path)
    pairs = []
    for path in sorted(pred_root.iterdir()):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if path.stem not in refs:
            raise ValueError(f"no reference image for {path.name}")
        pairs.append((path.stem, path, refs[path.stem]))
    if not pairs:
        raise ValueError(f"no prediction images in {pred_root}")
    return pairs


def _cmd_eval(args) -> int:
    report = BenchReport(
        columns=["image", "psnr", "ssim"],
        title=f"evaluation of {args.pred} against {args.ref}",
        notes=["psnr on unclipped values; 'sat' marks a zero-error pair"],
    )
    psnrs, ssims = [], []
    for stem, pred_path, ref_path in _match_pairs(args.pred, args.ref):
        pred, ref = load_image(pred_path), load_image(ref_path)
        p = psnr(pred, ref)
        s = ssim(pred, ref)
        if p is not None:
            psnrs.append(p)
        ssims.append(s)
        report.add_row([stem, p, s])
    mean_psnr = sum(psnrs) / len(psnrs) if psnrs else None
    report.add_row(["mean", mean_psnr, sum(ssims) / len(ssims)])
    print(report.to_text(), end="")
    if args.out:
        out = Path(args.out)
        report.save_tsv(out / "eval.tsv")
        labels = report.column_values("image")[:-1]
        values = [float(v) if v != "sat" else float("nan")
                  for v in report.column_values("psnr")[:-1]]
        render_bar_figure(labels, values, "psnr (dB)", out / "eval.png")
        print(f"wrote {out / 'eval.tsv'} and {out / 'eval.png'}")
    return 0


def _cmd_bench(args) -> int:
    levels = [tok.strip() for tok in args.levels.split(",") if tok.strip()]
    report = bench_estimation(args.data, levels=levels, method=args.method,
                              fit=args.fit, seed=args.seed)
    print(report.to_text(), end="")
    tsv, fig = save_estimation_report(report, args.out)
    print(f"wrote {tsv} and {fig}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = train_config_from_file(args.config)
    out = Path(args.out)
    report = run_ablation(args.axis, cfg, data=args.data,
                          out_dir=out / "runs", parallel=args.parallel)
    print(report.to_text(), end="")
    tsv, fig = save_ablation_report(report, out, args.axis)
    print(f"wrote {tsv} and {fig}")
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "gat": _cmd_gat,
    "estimate": _cmd_estimate,
    "train": _cmd_train,
    "denoise": _cmd_denoise,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "ablate": _cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, FileNotFoundError, ImageFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
