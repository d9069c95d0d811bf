"""Command line entry point: ``tpd <command> --config run.json ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _cap_threads() -> None:
    # must run before numpy is imported to reach the BLAS pool
    n = os.environ.get("TPD_THREADS")
    if not n:
        return
    if not n.isdigit() or int(n) < 1:
        raise ValueError(f"TPD_THREADS must be a positive integer, got {n!r}")
    for var in _THREAD_VARS:
        os.environ[var] = n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tpd", description="Desk-scale diffusion virtual try-on.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        return sp

    sp = cmd("gen-data", "render the synthetic dataset")
    sp.add_argument("--out", help="dataset directory (default: paths.data_dir)")

    sp = cmd("train", "train the denoiser")
    sp.add_argument("--data", help="dataset directory (default: paths.data_dir)")
    sp.add_argument("--out", help="run directory (default: paths.out_dir)")
    sp.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")

    sp = cmd("infer", "two-stage try-on with metrics")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", help="dataset directory (default: paths.data_dir)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--paired", action="store_true", help="use each person's own garment")
    sp.add_argument("--split", default="train", choices=("train", "heldout"))

    sp = cmd("ablate", "train and compare both conditioning modes")
    sp.add_argument("--data", help="dataset directory (default: paths.data_dir)")
    sp.add_argument("--out", required=True)

    sp = cmd("grad-check", "finite-difference verification of every layer family")
    sp.add_argument("--out", help="optional JSON report path")
    return p


def _run(args) -> int:
    from .config import RunConfig, load_config
    from . import pipeline

    cfg = load_config(args.config) if args.config else RunConfig()
    cfg.validate()
    data = Path(getattr(args, "data", None) or cfg.paths.data_dir)

    if args.command == "gen-data":
        out = Path(args.out or cfg.paths.data_dir)
        manifest = pipeline.generate_dataset(cfg, out)
        print(f"wrote {manifest['count']} samples to {out} (config {manifest['config_hash'][:12]})")
        return EXIT_OK

    if args.command == "train":
        out = Path(args.out or cfg.paths.out_dir)
        params = pipeline.train(cfg, data, out, resume=args.resume)
        print(f"trained {params.step} steps; checkpoint {out / pipeline.CHECKPOINT_NAME}")
        return EXIT_OK

    if args.command == "infer":
        rep = pipeline.infer(cfg, args.ckpt, data, args.out, paired=args.paired, split=args.split)
        print(f"{rep.sample_count} samples  ssim {rep.mean_ssim:.6f}  psnr {rep.mean_psnr:.4f}  "
              f"stage1 iou {rep.mean_mask_iou:.4f}  preservation violations {rep.total_violations}")
        return EXIT_OK if rep.total_violations == 0 else EXIT_VERIFY

    if args.command == "ablate":
        report = pipeline.ablate(cfg, data, args.out)
        for row in report["rows"]:
            print(f"{row['mode']:8s} steps {row['training_steps']}  ssim {row['ssim']:.6f}  psnr {row['psnr']:.4f}")
        return EXIT_OK

    if args.command == "grad-check":
        result = pipeline.grad_check(seed=cfg.training.seed)
        for name, err in result["families"].items():
            flag = "ok" if name not in result["failed"] else "FAIL"
            print(f"{name:20s} {err:.3e}  {flag}")
        if args.out:
            Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if result["failed"]:
            print(f"gradient check failed (> {result['threshold']:g}): {', '.join(result['failed'])}", file=sys.stderr)
            return EXIT_VERIFY
        return EXIT_OK

    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _cap_threads()
        return _run(args)
    except ValueError as exc:  # ConfigError and malformed inputs
        print(f"tpd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, RuntimeError) as exc:
        print(f"tpd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
