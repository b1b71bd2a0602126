"""Command-line entry point: ``jadce {gen-data,train,eval,verify,sweep}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from jadce.errors import JadceError, TrainingAbort


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer, got {text}")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("--jobs must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="desk",
                        help="YAML/JSON experiment config, or a preset name (paper, desk)")
    common.add_argument("--seed", type=_u64, default=None, help="override system.seed")
    common.add_argument("--out", default=None, help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="jadce", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate signature matrix and train/test sets")

    t = sub.add_parser("train", parents=[common], help="layer-wise training of one or all variants")
    t.add_argument("--variant", default="all", help="variant name, or 'all' for the configured list")
    t.add_argument("--resume", default=None, help="stage checkpoint to continue from")

    e = sub.add_parser("eval", parents=[common], help="evaluate checkpoints and the ISTA-GS baseline")
    e.add_argument("--variant", default="all")
    e.add_argument("checkpoints", nargs="*", help="checkpoint files (default: ckpt_<variant>.npz in --out)")

    v = sub.add_parser("verify", help="run the oracle and invariant checks")
    v.add_argument("--seed", type=_u64, default=0)
    v.add_argument("--out", default=None, help="also write the report as JSON into this directory")

    s = sub.add_parser("sweep", parents=[common], help="gen + train + eval over the configured sweep axis")
    s.add_argument("--variant", default="all")
    s.add_argument("--jobs", type=_positive, default=1, help="parallel worker processes")
    return p


def _config(args):
    from jadce.experiment import load_config

    cfg = load_config(args.config, seed=args.seed, out=args.out)
    variant = getattr(args, "variant", "all")
    if variant and variant != "all":
        cfg = cfg.replace(variants=[variant])
    return cfg


def cmd_gen_data(args) -> int:
    from jadce.experiment import generate

    cfg = _config(args)
    ds = generate(cfg)
    print(json.dumps(ds.summary(), indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from jadce.experiment import get_dataset, train_variant
    from jadce.training import load_checkpoint

    cfg = _config(args)
    ds = get_dataset(cfg)
    resume = load_checkpoint(args.resume, S_lift=ds.S_lift) if args.resume else None
    if resume is not None and len(cfg.variants) != 1:
        cfg = cfg.replace(variants=[resume.params.variant])
    for v in cfg.variants:
        cp = train_variant(cfg, ds, v, resume=resume)
        if v == "alpom_gs" and "init" in cp.timings:
            print(f"alpom_gs: B* solved ({cfg.train.weight_solver}) in {cp.timings['init']:.3f}s")
        final = cp.meta["val_nmse_db"].get(str(cfg.train.K))
        print(f"{v}: {cp.stage} stages, validation NMSE at depth {cfg.train.K}: {final:.2f} dB"
              if final is not None else f"{v}: {cp.stage} stages")
    return 0


def cmd_eval(args) -> int:
    from jadce.experiment import evaluate, get_dataset, load_checkpoints, write_eval_outputs
    from jadce.model import signature_hash

    cfg = _config(args)
    ds = get_dataset(cfg)
    cps = load_checkpoints(cfg, ds, args.checkpoints)
    records, extra = evaluate(cfg, ds, cps)
    write_eval_outputs(cfg, records, extra, sig=signature_hash(ds.S_lift))
    for r in records:
        print(f"{r.variant:<10} final NMSE {r.nmse_db[-1]:8.2f} dB  error rate {r.error_rate[-1]:.3e}")
    return 0


def cmd_verify(args) -> int:
    from jadce.verify import format_report, run_all

    results = run_all(seed=args.seed)
    print(format_report(results))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "verify_report.json"), "w") as fh:
            json.dump([{"name": r.name, "passed": r.passed, "seconds": r.seconds, "detail": r.detail}
                       for r in results], fh, indent=2)
    return 0 if all(r.passed for r in results) else 1


def cmd_sweep(args) -> int:
    from jadce.experiment import run_sweep

    cfg = _config(args)
    records = run_sweep(cfg, jobs=args.jobs)
    for r in records:
        cell = "" if cfg.sweep_axis == "none" else f"{cfg.sweep_axis}={r.cell[cfg.sweep_axis]} "
        print(f"{cell}{r.variant:<10} final NMSE {r.nmse_db[-1]:8.2f} dB")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "verify": cmd_verify, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except TrainingAbort as exc:
        print(f"error: {exc}; diagnostic checkpoint: {exc.path}", file=sys.stderr)
        return 3
    except (JadceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
