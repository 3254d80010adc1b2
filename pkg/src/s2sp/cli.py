"""Command-line surface: noise synthesis, training, denoising, evaluation.

Every data-producing run appends a plain-text key=value manifest next to
its primary output. Exit codes: 0 success, 2 usage/input errors, 1
anything else.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from typing import Optional

from . import gradcheck as gradcheck_mod
from .pipeline import (DEFAULT_ENSEMBLE_SIZE, Checkpoint, TrainConfig,
                       TrainingDiverged, denoise_ensemble, train)
from .pngio import read_png, write_png, write_run_manifest
from .quality import NoiseSpec, add_awgn, evaluate

USAGE_ERROR = 2
FAILURE = 1


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=4000, help="optimization steps (default 4000)")
    p.add_argument("--p", type=float, default=0.4,
                   help="shared drop probability for masks and dropout (default 0.4)")
    p.add_argument("--p-mask", type=float, default=None, help="override mask probability")
    p.add_argument("--p-drop", type=float, default=None, help="override dropout probability")
    p.add_argument("--lr", type=float, default=4e-4, help="Adam learning rate (default 4e-4)")
    p.add_argument("--lambda-iqa", type=float, default=2e-8,
                   help="weight of the quality loss (default 2e-8; 0 disables)")
    p.add_argument("--loss", choices=("l1", "l2"), default="l1", help="residual loss variant")
    p.add_argument("--normalize-loss", action="store_true",
                   help="mean over masked elements instead of raw sum")
    p.add_argument("--scorer", choices=("null", "smoothtv"), default="smoothtv",
                   help="no-reference quality scorer")
    p.add_argument("--no-gconv", action="store_true",
                   help="replace gated convolutions with vanilla ones (ablation)")
    p.add_argument("--log-every", type=int, default=100,
                   help="print a step/loss line every N steps (default 100)")


def _add_ensemble_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ensemble", type=int, default=DEFAULT_ENSEMBLE_SIZE,
                   help=f"number of dropout/mask instances to average (default {DEFAULT_ENSEMBLE_SIZE})")
    p.add_argument("--threads", type=int, default=None,
                   help="bound on inference parallelism (default: available cores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="s2sp",
        description="Single-image self-supervised denoiser (masked training, dropout-ensemble inference).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("add-noise", help="synthesize AWGN on a clean PNG")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--sigma", type=float, required=True, help="noise std on the 8-bit scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", default=None)

    p = sub.add_parser("train", help="train a denoiser on one noisy PNG")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True, help="output .s2sp checkpoint path")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    p.add_argument("--manifest", default=None)

    p = sub.add_parser("denoise", help="run the dropout ensemble with a trained checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--p-mask", type=float, default=None,
                   help="mask probability at inference (default: checkpoint dropout probability)")
    p.add_argument("--seed", type=int, default=0)
    _add_ensemble_flags(p)
    p.add_argument("--manifest", default=None)

    p = sub.add_parser("run", help="train then denoise in one go")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--checkpoint", default=None, help="where to store the checkpoint (default: <output>.s2sp)")
    p.add_argument("--ref", default=None, help="optional clean reference PNG for metrics")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p)
    _add_ensemble_flags(p)
    p.add_argument("--manifest", default=None)

    p = sub.add_parser("eval", help="PSNR/SSIM of a test image against a reference")
    p.add_argument("--test", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--manifest", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    p.add_argument("--tol", type=float, default=gradcheck_mod.DEFAULT_TOLERANCE)
    p.add_argument("--skip-end-to-end", action="store_true")
    p.add_argument("--manifest", default=None)

    p = sub.add_parser("manifest", help="print the layer/shape table of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    return parser


def _require_file(path: str) -> str:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(
        steps=args.steps, p=args.p, lr=args.lr, lambda_iqa=args.lambda_iqa,
        loss_variant=args.loss, normalize_loss=args.normalize_loss,
        gconv_enabled=not args.no_gconv, scorer=args.scorer, seed=seed,
        p_mask=args.p_mask, p_drop=args.p_drop)


def _config_entries(cfg: TrainConfig) -> dict:
    return {
        "steps": cfg.steps, "p": cfg.p, "p_mask": cfg.mask_probability,
        "p_drop": cfg.dropout_probability, "lr": cfg.lr,
        "lambda_iqa": cfg.lambda_iqa, "loss_variant": cfg.loss_variant,
        "normalize_loss": cfg.normalize_loss, "gconv_enabled": cfg.gconv_enabled,
        "scorer": cfg.scorer, "seed": cfg.seed,
    }


def _progress_printer(log_every: int):
    def progress(step: int, loss: float) -> None:
        if log_every > 0 and (step % log_every == 0):
            print(f"step={step} loss={loss:.6g}")
    return progress


def _cmd_add_noise(args) -> int:
    start = time.perf_counter()
    clean = read_png(_require_file(args.input))
    noisy = add_awgn(clean, NoiseSpec(sigma=args.sigma, seed=args.seed))
    write_png(args.output, noisy)
    write_run_manifest(args.manifest or args.output + ".manifest", {
        "command": "add-noise", "input": args.input, "output": args.output,
        "sigma": args.sigma, "seed": args.seed,
        "seconds_total": f"{time.perf_counter() - start:.3f}",
    })
    print(f"wrote {args.output}")
    return 0


def _cmd_train(args) -> int:
    noisy = read_png(_require_file(args.input))
    cfg = _train_config(args, args.seed)
    cfg.validate()
    start = time.perf_counter()
    ckpt, trace = train(noisy, cfg, progress=_progress_printer(args.log_every))
    train_seconds = time.perf_counter() - start
    ckpt.save(args.checkpoint)
    print(f"step={cfg.steps - 1} loss={trace[-1]:.6g}")
    print(f"wrote {args.checkpoint}")
    entries = {"command": "train", "input": args.input, "checkpoint": args.checkpoint}
    entries.update(_config_entries(cfg))
    entries["final_loss"] = f"{trace[-1]:.6g}"
    entries["seconds_train"] = f"{train_seconds:.3f}"
    write_run_manifest(args.manifest or args.checkpoint + ".manifest", entries)
    return 0


def _cmd_denoise(args) -> int:
    noisy = read_png(_require_file(args.input))
    ckpt = Checkpoint.load(_require_file(args.checkpoint))
    if args.ensemble < 1:
        raise ValueError(f"--ensemble must be >= 1, got {args.ensemble}")
    start = time.perf_counter()
    restored = denoise_ensemble(ckpt, noisy, n_instances=args.ensemble,
                                p_mask=args.p_mask, seed=args.seed, threads=args.threads)
    seconds = time.perf_counter() - start
    write_png(args.output, restored)
    print(f"wrote {args.output}")
    write_run_manifest(args.manifest or args.output + ".manifest", {
        "command": "denoise", "input": args.input, "checkpoint": args.checkpoint,
        "output": args.output, "ensemble": args.ensemble,
        "p_mask": ckpt.p_drop if args.p_mask is None else args.p_mask,
        "seed": args.seed, "threads": args.threads or (os.cpu_count() or 1),
        "seconds_denoise": f"{seconds:.3f}",
    })
    return 0


def _cmd_run(args) -> int:
    noisy = read_png(_require_file(args.input))
    checkpoint_path = args.checkpoint or args.output + ".s2sp"
    cfg = _train_config(args, args.seed)
    cfg.validate()

    t0 = time.perf_counter()
    ckpt, trace = train(noisy, cfg, progress=_progress_printer(args.log_every))
    t_train = time.perf_counter() - t0
    ckpt.save(checkpoint_path)

    t0 = time.perf_counter()
    restored = denoise_ensemble(ckpt, noisy, n_instances=args.ensemble,
                                p_mask=args.p_mask, seed=args.seed, threads=args.threads)
    t_denoise = time.perf_counter() - t0
    write_png(args.output, restored)
    print(f"wrote {checkpoint_path}")
    print(f"wrote {args.output}")

    entries = {"command": "run", "input": args.input, "output": args.output,
               "checkpoint": checkpoint_path}
    entries.update(_config_entries(cfg))
    entries.update({"ensemble": args.ensemble, "final_loss": f"{trace[-1]:.6g}",
                    "seconds_train": f"{t_train:.3f}", "seconds_denoise": f"{t_denoise:.3f}"})
    if args.ref is not None:
        report = evaluate(read_png(_require_file(args.ref)), restored)
        print(report.as_text())
        entries["ref"] = args.ref
        entries["metrics"] = report.as_record()
    write_run_manifest(args.manifest or args.output + ".manifest", entries)
    return 0


def _cmd_eval(args) -> int:
    start = time.perf_counter()
    test = read_png(_require_file(args.test))
    ref = read_png(_require_file(args.ref))
    report = evaluate(test, ref)
    print(report.as_text())
    print(report.as_record())
    write_run_manifest(args.manifest or args.test + ".eval.manifest", {
        "command": "eval", "test": args.test, "ref": args.ref,
        "metrics": report.as_record(),
        "seconds_total": f"{time.perf_counter() - start:.3f}",
    })
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_all(tol=args.tol, include_end_to_end=not args.skip_end_to_end)
    print(gradcheck_mod.format_results(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed (tol={args.tol:g})")
    if args.manifest:
        write_run_manifest(args.manifest, {
            "command": "gradcheck", "tol": args.tol,
            "passed": len(results) - len(failed), "failed": len(failed),
            **{f"max_rel_{r.name}": f"{r.max_rel_error:.3e}" for r in results},
        })
    return 0 if not failed else FAILURE


def _cmd_manifest(args) -> int:
    ckpt = Checkpoint.load(_require_file(args.checkpoint))
    net = ckpt.build_network()
    print(f"channels={ckpt.channels} gconv_enabled={ckpt.gconv_enabled} "
          f"p_drop={ckpt.p_drop:g} seed={ckpt.seed} steps={ckpt.steps}")
    print(net.shape_manifest().as_text())
    return 0


_HANDLERS = {
    "add-noise": _cmd_add_noise,
    "train": _cmd_train,
    "denoise": _cmd_denoise,
    "run": _cmd_run,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "manifest": _cmd_manifest,
}


def run_cli(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return FAILURE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return FAILURE


def main() -> int:
    return run_cli()


if __name__ == "__main__":
    sys.exit(main())
