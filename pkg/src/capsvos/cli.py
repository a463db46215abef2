"""Command-line entry point: ``capsvos <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import harness, synth
from .config import preset as model_preset
from .errors import CapsVOSError
from .metrics import schedule_clips


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _mix(text):
    out = {}
    for part in text.split(","):
        name, _, frac = part.partition("=")
        try:
            out[name.strip()] = float(frac) if frac else 1.0
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad scenario weight {part!r}") from None
    return out


def _common(p):
    p.add_argument("--config", metavar="PATH", help="run config file with 'key = value' lines")
    p.add_argument("--preset", choices=("desk", "paper"))
    p.add_argument("--overlap", type=int, metavar="N")
    p.add_argument("--ablation", choices=harness.ABLATIONS + ("full",), metavar="NAME")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--out", metavar="DIR")


def build_parser():
    parser = _Parser(prog="capsvos", description="Capsule video object segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--n-train", type=int, default=64)
    p.add_argument("--n-val", type=int, default=16)
    p.add_argument("--mix", type=_mix, default={"plain": 1.0}, help="e.g. plain=0.5,occlusion=0.5")
    p.add_argument("--video-length", type=int, default=8)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--val-data", metavar="DIR")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--max-minutes", type=float)

    p = sub.add_parser("eval", help="evaluate a checkpoint (prints a JSON report)")
    _common(p)
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")

    p = sub.add_parser("infer", help="segment one video directory of PGM frames")
    _common(p)
    p.add_argument("--video", required=True, metavar="DIR", help="frame_*.pgm plus mask_000.pgm")
    p.add_argument("--checkpoint")

    p = sub.add_parser("ablate", help="train and compare ablation variants over seeds")
    _common(p)
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--variants", default="full,no_zoom,no_memory")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-minutes", type=float)

    p = sub.add_parser("check-grads", help="run the finite-difference gradient suites")
    _common(p)
    p.add_argument("--suites", help="comma-separated subset of suites")
    return parser


def _run_config(args, **extra):
    over = {"preset": args.preset, "overlap": args.overlap, "seed": args.seed, "out_dir": args.out,
            "ablation": args.ablation}
    over.update(extra)
    if args.config:
        return harness.RunConfig.from_file(args.config, **over)
    return harness.RunConfig(**{k: v for k, v in over.items() if v is not None})


def cmd_gen_data(args):
    cfg = _run_config(args)
    canvas = tuple(model_preset(cfg.preset).high_res)
    out = args.out or "data"
    m = synth.generate_dataset(out, args.n_train, args.n_val, args.mix, cfg.seed, canvas,
                               video_length=args.video_length)
    print(f"wrote {len(m['clips'])} videos to {out}")
    return 0


def cmd_train(args):
    cfg = _run_config(args, train_data=args.data, val_data=args.val_data, epochs=args.epochs,
                      batch_size=args.batch_size, lr=args.lr, max_steps=args.max_steps,
                      max_minutes=args.max_minutes)
    res = harness.train(cfg, echo=print)
    print(f"best val J {res.best_val_J:.4f}; checkpoint {res.checkpoint}")
    return 0


def cmd_eval(args):
    cfg = _run_config(args, val_data=args.data)
    report = harness.evaluate(cfg, args.checkpoint, args.split)
    text = report.to_json()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as f:
            f.write(text)
    print(text)
    return 0


def cmd_infer(args):
    cfg = _run_config(args)
    frames = sorted(glob.glob(os.path.join(args.video, "frame_*.pgm")))
    if not frames:
        raise OSError(f"no frame_*.pgm files in {args.video}")
    video = np.stack([synth.read_pgm(p) for p in frames])
    first = synth.read_pgm(os.path.join(args.video, "mask_000.pgm")) > 127
    model = harness.build_model(cfg, args.checkpoint)
    res = harness.chain_inference(model, video, first, cfg.overlap)
    out = args.out or "predictions"
    os.makedirs(out, exist_ok=True)
    for t, m in enumerate(res.masks):
        synth.write_pgm(os.path.join(out, f"pred_{t:03d}.pgm"), m.astype(np.uint8) * 255)
    summary = {"frames": len(video), "overlap": cfg.overlap, "schedule": res.starts}
    with open(os.path.join(out, "schedule.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f)
    print(json.dumps(summary))
    return 0


def cmd_ablate(args):
    cfg = _run_config(args, train_data=args.data, epochs=args.epochs, max_minutes=args.max_minutes)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    variants = [v for v in args.variants.split(",") if v]
    table = harness.ablate(cfg, variants, seeds, echo=None)
    print(json.dumps(table, indent=1, sort_keys=True))
    return 0


def cmd_check_grads(args):
    from . import gradcheck

    suites = args.suites.split(",") if args.suites else None
    unknown = [s for s in suites or [] if s not in gradcheck.SUITES]
    if unknown:
        raise UsageError(f"unknown suites {unknown}; choose from {sorted(gradcheck.SUITES)}")
    ok, errors, seconds = gradcheck.run_all(echo=print, suites=suites)
    print(f"{'all suites passed' if ok else 'gradient check FAILED'} ({len(errors)} checks, {seconds:.1f}s)")
    return 0 if ok else 2


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "ablate": cmd_ablate, "check-grads": cmd_check_grads}


def cli_main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)
    except (CapsVOSError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
