"""Command line entry point: ``fcrn-aec [--profile desk|paper] [--config cfg.json] <command> ...``

Exit status is 0 on success, 1 on a runtime failure (message on stderr) and
2 on a usage error.
"""

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .fcrn import CheckpointError
from .kalman import KalmanConfig, kalman_aec
from .metrics import MetricError
from .scene import SceneError
from .signals import WavFormatError, read_wav, write_wav
from .training import TrainingError


def build_parser():
    p = argparse.ArgumentParser(
        prog="fcrn-aec",
        description="Acoustic echo cancellation with a convolutional recurrent network and a Kalman baseline.")
    p.add_argument("--profile", choices=["paper", "desk"], default=None,
                   help="parameter profile (default: desk, or the config file's value)")
    p.add_argument("--config", help="JSON experiment config; command line flags override it")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render the dataset manifest into a WAV tree")
    s.add_argument("--out", dest="data_dir", help="dataset directory")
    for split in ("train", "val", "test"):
        s.add_argument(f"--{split}", type=int, default=None, help=f"number of {split} mixtures")
    s.add_argument("--duration", type=float, default=None, help="seconds per mixture")
    s.add_argument("--linear", action="store_true", help="skip the loudspeaker nonlinearity")
    s.add_argument("--speech-dir", help="directory of near/far-end WAVs for train/val")
    s.add_argument("--test-speech-dir", help="directory of near/far-end WAVs for test")
    s.add_argument("--noise-dir", help="directory of noise WAVs for train/val")
    s.add_argument("--test-noise-dir", help="directory of noise WAVs for test")

    t = sub.add_parser("train", help="train one or more network variants")
    t.add_argument("--data", dest="data_dir")
    t.add_argument("--variant", action="append", help="<fusion>/<skip>/<target>, repeatable")
    t.add_argument("--out", dest="checkpoint_dir", help="checkpoint directory")
    t.add_argument("--epochs", type=int, dest="max_epochs")
    t.add_argument("--lr", type=float, dest="lr_init")
    t.add_argument("--stop-lr", type=float, dest="stop_lr")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seq-len", type=int)

    i = sub.add_parser("infer", help="run a trained network on one file pair")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="mic", required=True, help="microphone WAV")
    i.add_argument("--ref", required=True, help="far-end reference WAV")
    i.add_argument("--out", required=True, help="enhanced output WAV")
    i.add_argument("--dhat", help="also write the echo estimate (OutD variants)")

    k = sub.add_parser("kalman", help="run the Kalman baseline on one file pair")
    k.add_argument("--in", dest="mic", required=True)
    k.add_argument("--ref", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--no-postfilter", action="store_true")
    k.add_argument("--dhat", help="also write the linear echo estimate")

    e = sub.add_parser("evaluate", help="score checkpoints and the Kalman baseline")
    e.add_argument("--data", dest="data_dir")
    e.add_argument("--ckpt", action="append", default=[], help="checkpoint, repeatable")
    e.add_argument("--no-kalman", action="store_true")
    e.add_argument("--split", default=None)
    e.add_argument("--out", dest="results_dir", help="results directory")
    e.add_argument("--workers", type=int, default=None)
    e.add_argument("--pesq", dest="pesq_tool", help="external PESQ executable (else $FCRN_AEC_PESQ)")

    r = sub.add_parser("table", help="render result rows as text, JSONL and figures")
    r.add_argument("--results", required=True, help="rows.jsonl written by evaluate")
    r.add_argument("--out", required=True, help="report directory")
    r.add_argument("--no-figures", action="store_true")
    return p


def load_config(args):
    overrides = {"profile": args.profile, "seed": args.seed}
    for name in ("data_dir", "checkpoint_dir", "results_dir", "split", "workers", "pesq_tool"):
        overrides[name] = getattr(args, name, None)
    if args.config:
        return harness.ExperimentConfig.from_file(args.config, **overrides)
    return harness.with_overrides(harness.ExperimentConfig(), **overrides).validate()


def say(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


def cmd_simulate(args, cfg):
    counts = dict(cfg.counts)
    counts.update({s: getattr(args, s) for s in ("train", "val", "test") if getattr(args, s) is not None})
    cfg = harness.with_overrides(cfg, duration=args.duration, speech_dir=args.speech_dir,
                                 test_speech_dir=args.test_speech_dir, noise_dir=args.noise_dir,
                                 test_noise_dir=args.test_noise_dir)
    cfg.counts = counts
    if args.linear:
        cfg.nonlinear = False
    records = harness.run_simulate(cfg.validate())
    splits = {s: sum(r["split"] == s for r in records) for s in ("train", "val", "test")}
    print(json.dumps({"data_dir": cfg.data_dir, **splits}, sort_keys=True))


def cmd_train(args, cfg):
    overrides = {k: getattr(args, k) for k in ("max_epochs", "lr_init", "stop_lr", "batch_size", "seq_len")
                 if getattr(args, k) is not None}
    cfg.train = {**cfg.train, **overrides}
    if args.variant:
        cfg.variants = args.variant
    cfg.validate()
    from .plotting import plot_train_log
    for variant in cfg.variants:
        def progress(rec, variant=variant):
            say(args, f"{variant} epoch {rec['epoch']}: train {rec['train_loss']:.6g}"
                      f" val {rec['val_loss'] if rec['val_loss'] is None else format(rec['val_loss'], '.6g')}"
                      f" lr {rec['lr']:.3g} ({rec['wall_time']:.1f} s)")
        path, log = harness.run_train(cfg, variant, progress)
        plot_train_log(log.epochs, path.with_suffix(".loss.png"))
        print(json.dumps({"variant": variant, "checkpoint": str(path), "epochs": len(log.epochs),
                          "stop_reason": log.stop_reason}, sort_keys=True))


def _read_pair(mic, ref):
    y, x = read_wav(mic), read_wav(ref)
    if len(y) != len(x):
        raise ValueError(f"{mic} and {ref} differ in length ({len(y)} vs {len(x)} samples)")
    return y, x


def cmd_infer(args, cfg):
    y, x = _read_pair(args.mic, args.ref)
    model = harness.load_system(args.ckpt).model
    e, d_hat = model.enhance(y, x)
    write_wav(args.out, e)
    if args.dhat:
        if d_hat is None:
            raise ValueError(f"{model.config.variant} does not produce an echo estimate")
        write_wav(args.dhat, d_hat)


def cmd_kalman(args, cfg):
    y, x = _read_pair(args.mic, args.ref)
    e, d_hat = kalman_aec(x, y, KalmanConfig(), postfilter=not args.no_postfilter)
    write_wav(args.out, e)
    if args.dhat:
        write_wav(args.dhat, d_hat)


def cmd_evaluate(args, cfg):
    systems = [harness.load_system(p) for p in args.ckpt]
    if args.no_kalman:
        cfg.include_kalman = False
    if cfg.include_kalman:
        systems.append(harness.KalmanSystem())
    if not systems:
        raise harness.HarnessError("nothing to evaluate: give --ckpt or drop --no-kalman")
    rows, per_file = harness.run_eval(systems, cfg)
    out = Path(cfg.results_dir)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_jsonl(per_file, out / "files.jsonl")
    harness.write_jsonl(rows, out / "rows.jsonl")
    sys.stdout.write(harness.render_table(rows))


def cmd_table(args, cfg):
    rows = harness.read_jsonl(args.results)
    paths = harness.emit_table(rows, args.out, figures=not args.no_figures)
    sys.stdout.write(Path(paths["text"]).read_text())


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "infer": cmd_infer, "kalman": cmd_kalman,
            "evaluate": cmd_evaluate, "table": cmd_table}
ERRORS = (harness.HarnessError, CheckpointError, WavFormatError, SceneError, MetricError,
          TrainingError, ValueError, OSError)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        COMMANDS[args.command](args, cfg)
    except ERRORS as exc:
        print(f"fcrn-aec {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
