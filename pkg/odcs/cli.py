#!/usr/bin/env python3
"""
odcs CLI - synthesize data, train, evaluate and predict from the command line
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from odcs.config import load_config
from odcs.data import RoiBox, make_synthetic_dataset, threads_from_env
from odcs.errors import ConfigError, OdcsError
from odcs.metrics import REFERENCE_RESULTS, summary_lines
from odcs.raster import write_raster
from odcs.trainer import Trainer, evaluate_checkpoint, predict_image
from odcs.version import __version__

GREEN = '\033[92m'
BOLD = '\033[1m'
RESET = '\033[0m'

# Exit statuses
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_INTERRUPTED = 130

logger = logging.getLogger(__name__)


def format_json(data):
    """Pretty print JSON"""
    return json.dumps(data, indent=2, ensure_ascii=False)


def display_report(report):
    """Display evaluation summary with reference values for context"""
    print(f"\n{BOLD}Evaluation{RESET}")
    print("-" * 40)
    for label, value in summary_lines(report).items():
        print(f"{label:<16} {value}")
    print(f"\nReference (full-scale, not reproduced): dice cup {REFERENCE_RESULTS['dice_cup']}, "
          f"dice disc {REFERENCE_RESULTS['dice_disc']}, CDR MAE {REFERENCE_RESULTS['cdr_mae']}")

    print(f"\n{'Image':<20} {'Dice cup':<10} {'Dice disc':<10} {'CDR pred':<10} {'CDR true':<10}")
    print("-" * 64)
    for row in report.rows:
        pred = "n/a" if row.cdr_pred is None else f"{row.cdr_pred:.4f}"
        true = "n/a" if row.cdr_true is None else f"{row.cdr_true:.4f}"
        print(f"{row.id:<20} {row.dice_cup:<10.4f} {row.dice_disc:<10.4f} {pred:<10} {true:<10}")


def cmd_synth(args):
    manifest, samples = make_synthetic_dataset(args.out, args.count, args.size, args.seed)
    enclosed = sum(1 for s in samples if s.mask.cup_enclosed())
    result = {"manifest": str(manifest), "count": len(samples), "size": args.size,
              "cup_enclosed": enclosed}
    if args.json:
        print(format_json(result))
    else:
        print(f"{GREEN}Wrote {len(samples)} samples ({args.size}x{args.size}){RESET}")
        print(f"Manifest: {manifest}")
    return result


def cmd_train(args):
    config = load_config(args.config)
    trainer = Trainer(config, progress=not args.quiet)
    if args.resume:
        trainer.resume(args.resume)
    results = trainer.fit()
    summary = {"steps": trainer.step, "checkpoint_dir": str(trainer.checkpoint_dir)}
    if results:
        last = results[-1]
        summary.update(l_dice=last.dice, l_mfm=last.mfm, l_total=last.total)
    if args.json:
        print(format_json(summary))
    else:
        print(f"{GREEN}Training finished at step {trainer.step}{RESET}")
        if results:
            print(f"Last step: l_dice {last.dice:.6f}  l_mfm {last.mfm:.6f}  l_total {last.total:.6f}")
        print(f"Checkpoints: {trainer.checkpoint_dir}")
    return summary


def cmd_eval(args):
    report = evaluate_checkpoint(args.ckpt, args.manifest)
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    if args.json:
        print(format_json(report.to_dict()))
    else:
        display_report(report)
    return report


def cmd_predict(args):
    roi = RoiBox.parse(args.roi) if args.roi else None
    prediction = predict_image(args.ckpt, args.image, roi=roi)
    out = Path(args.out) if args.out else Path(args.image).with_name(Path(args.image).stem + "_pred.pgm")
    write_raster(prediction.mask, out)
    if args.overlay:
        write_raster(prediction.overlay, args.overlay)
    result = {"mask": str(out), "roi": str(prediction.roi), "overlay": args.overlay}
    if args.json:
        print(format_json(result))
    else:
        print(f"{GREEN}Mask written to {out}{RESET} (ROI {prediction.roi})")
        if args.overlay:
            print(f"Overlay written to {args.overlay}")
    return result


def build_parser():
    parser = argparse.ArgumentParser(
        prog='odcs',
        description='odcs - optic disc and cup segmentation toolkit',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  odcs synth --out data --count 4 --size 64 --seed 7
  odcs train --config train.cfg
  odcs train --config train.cfg --resume runs/demo/latest.odcs
  odcs eval --ckpt runs/demo/latest.odcs --manifest data/manifest.txt
  odcs predict --ckpt runs/demo/latest.odcs --image eye.ppm --overlay eye_overlay.ppm
        """
    )
    parser.add_argument('--version', action='version', version=f'odcs {__version__}')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    verbosity.add_argument('-q', '--quiet', action='store_true',
                           help='Warnings only, no progress bar')
    output = argparse.ArgumentParser(add_help=False)
    output.add_argument('--json', action='store_true', help='Output in JSON format')

    sub = parser.add_subparsers(dest='command', required=True)

    synth = sub.add_parser('synth', parents=[output], help='Generate a synthetic dataset and manifest')
    synth.add_argument('--out', required=True, help='Output directory')
    synth.add_argument('--count', type=int, default=4, help='Number of samples (default: 4)')
    synth.add_argument('--size', type=int, default=64, help='Image side in pixels (default: 64)')
    synth.add_argument('--seed', type=int, default=0, help='Random seed (default: 0)')
    synth.set_defaults(func=cmd_synth)

    train = sub.add_parser('train', parents=[output], help='Train the generator')
    train.add_argument('--config', required=True, help='key = value configuration file')
    train.add_argument('--resume', help='Checkpoint to resume from')
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser('eval', parents=[output], help='Evaluate a checkpoint against a manifest')
    ev.add_argument('--ckpt', required=True, help='Checkpoint file')
    ev.add_argument('--manifest', required=True, help='Manifest of images and masks')
    ev.add_argument('--csv', help='Also write per-image rows to this CSV file')
    ev.set_defaults(func=cmd_eval)

    predict = sub.add_parser('predict', parents=[output], help='Segment one image')
    predict.add_argument('--ckpt', required=True, help='Checkpoint file')
    predict.add_argument('--image', required=True, help='Colour P6 image')
    predict.add_argument('--roi', help='x,y,w,h box; skips ROI detection')
    predict.add_argument('--out', help='Mask output path (default: <image>_pred.pgm)')
    predict.add_argument('--overlay', help='Write a P6 overlay to this path')
    predict.set_defaults(func=cmd_predict)
    return parser


def configure_logging(args):
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args)

    try:
        threads_from_env()
        args.func(args)
    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        sys.exit(EXIT_INTERRUPTED)
    except ConfigError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        sys.exit(EXIT_USAGE)
    except OdcsError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        sys.exit(EXIT_FAILURE)
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        sys.exit(EXIT_FAILURE)
    except Exception as e:
        logger.debug("Unhandled error", exc_info=True)
        message = " ".join(str(e).split()) or type(e).__name__
        print(f"error: internal: {type(e).__name__}: {message}", file=sys.stderr)
        sys.exit(EXIT_FAILURE)
    return 0


if __name__ == "__main__":
    main()
