"""Command-line entry point: ``madgnet <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 I/O or file-format problem, 3 validation
or assertion failure. Diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import param_report, profile_dataset
from .config import ExperimentConfig, load_config
from .data import (Manifest, load_manifest, load_sample, manifest_path, read_netpbm, synth_generate,
                   write_netpbm)
from .errors import MadgError, ParseError
from .metrics import evaluate_dataset
from .tensor import Tensor, no_grad, resample_nearest
from .train import Checkpoint, predict_probs, train_loop

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INVALID = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="madgnet", description="Desk-scale multi-frequency, multi-scale segmentation network.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic ellipse dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True, help="training samples")
    g.add_argument("--n-test", type=int, default=None, help="held-out samples (default n/2)")
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train from a config and a dataset directory")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--flow", choices=("ensemble", "parallel", "forward_only"))
    t.add_argument("--no-deep-supervision", action="store_true")
    t.add_argument("--log", help="loss log path (default: <out>.log)")
    t.add_argument("--resume", help="checkpoint to resume from")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", help="manifest split (default: eval_split from the config)")

    i = sub.add_parser("infer", help="predict a mask for one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)

    a = sub.add_parser("analyze", help="scale/frequency profile of a dataset")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--split", default="train")

    c = sub.add_parser("param-check", help="parameter census against the closed form")
    c.add_argument("--config")

    sub.add_parser("selfcheck", help="gradient, ensemble, DCT and MSSA consistency checks")
    return p


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_gen_data(args) -> int:
    n_test = args.n // 2 if args.n_test is None else args.n_test
    synth_generate(args.out, args.n, args.size, args.seed, "train")
    # held-out split from a disjoint stream of the same seed
    test_seed = int(np.random.SeedSequence([args.seed, 1]).generate_state(1)[0])
    synth_generate(args.out, n_test, args.size, test_seed, "test")
    print(f"wrote {args.n} train and {n_test} test samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    resume = Checkpoint.load(args.resume) if args.resume else None
    cfg = resume.config() if resume else load_config(args.config)
    if args.flow or args.no_deep_supervision:
        cfg = cfg.with_flow(args.flow, False if args.no_deep_supervision else None)
    size = cfg.data.size
    samples = load_manifest(Manifest.read(manifest_path(args.data, cfg.data.train_split)), (size, size))
    log_path = args.log or f"{args.out}.log"
    result = train_loop(cfg, samples, args.out, log_path, resume=resume)
    last = result.log[-1][3] if result.log else float("nan")
    print(f"trained {result.epochs_run} epochs, final loss {last:.6g}; checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = Checkpoint.load(args.ckpt)
    cfg = ck.config()
    size = cfg.data.size
    split = args.split or cfg.data.eval_split
    samples = load_manifest(Manifest.read(manifest_path(args.data, split)), (size, size))
    model = ck.model()
    probs = predict_probs(model, samples)
    report = evaluate_dataset(probs, [s.region for s in samples], [s.sample_id for s in samples])
    report.write(args.report)
    print("\t".join(f"{k}={v:.4f}" for k, v in report.means().items()))
    return EXIT_OK


def cmd_infer(args) -> int:
    ck = Checkpoint.load(args.ckpt)
    cfg = ck.config()
    size = cfg.data.size
    native = read_netpbm(args.image).shape[:2]
    # the loader wants a mask; the image doubles as a placeholder
    sample = load_sample(args.image, args.image, (size, size))
    model = ck.model()
    masks = model.infer(Tensor(sample.image[None]))[0]
    out = Path(args.out)
    for m, mask in enumerate(masks):
        with no_grad():
            full = resample_nearest(Tensor(mask[None, None].astype(np.float64)), size=native).data[0, 0]
        path = out if len(masks) == 1 else out.with_name(f"{out.stem}_{m}{out.suffix}")
        write_netpbm(path, (full > 0).astype(np.uint8) * 255)
    print(f"wrote {len(masks)} mask(s) to {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    prof = profile_dataset(Manifest.read(manifest_path(args.data, args.split)))
    prof.write(args.out)
    print(f"{len(prof.rows)} samples profiled, {prof.skipped} skipped; "
          f"scale mean {prof.scale_mean:.4f} var {prof.scale_var:.4g}, "
          f"frequency mean {prof.frequency_mean:.4f} var {prof.frequency_var:.4g}")
    return EXIT_OK


def cmd_param_check(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    report = param_report([cfg.network.mfmsa])
    sys.stdout.write(report.to_text())
    if not report.ok:
        _err("parameter census failed")
        return EXIT_INVALID
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_INVALID


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
    "analyze": cmd_analyze, "param-check": cmd_param_check, "selfcheck": cmd_selfcheck,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _err(str(exc))
        return EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ParseError, UnicodeDecodeError) as exc:
        _err(f"I/O error: {exc}")
        return EXIT_IO
    except (MadgError, KeyError, ValueError) as exc:
        _err(f"invalid: {exc}")
        return EXIT_INVALID


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
