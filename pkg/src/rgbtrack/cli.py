"""``rgbtrack`` command line: gen, train, track, eval, bench-prune."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import bench, config, synth
from .errors import ConfigError, ContractError, DataError
from .tracker import Tracker
from .train import load_model, train

log = logging.getLogger("rgbtrack")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _load_config(args):
    overrides = {"seed": str(args.seed)} if args.seed is not None else None
    cfg = config.load(args.config, overrides)
    sys.stdout.write(cfg.echo())
    sys.stdout.flush()
    return cfg


def _out(args, default):
    return Path(args.out if args.out is not None else default)


def cmd_gen(args):
    cfg = _load_config(args)
    out = _out(args, "data")
    count = 0
    for suite in cfg.gen_suites:
        specs = synth.suite_specs(suite, cfg.gen_sequences, cfg.seed, cfg.gen_frames,
                                  cfg.gen_frame_size)
        for i, spec in enumerate(specs):
            synth.generate(spec, out / f"{suite}_{i:04d}")
            count += 1
    log.info("wrote %d sequences to %s", count, out)
    print(f"generated {count} sequences in {out}")


def cmd_train(args):
    cfg = _load_config(args)
    out = _out(args, "run")
    _, history = train(cfg, args.data, out, resume=not args.fresh)
    if history:
        print(f"final epoch {history[-1].epoch} loss {history[-1].loss:.6f}")
    print(f"checkpoint {out / 'checkpoint.btmt'}")


def cmd_track(args):
    cfg = _load_config(args)
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    tracker = Tracker.from_model(load_model(cfg, args.checkpoint))
    out = _out(args, "results")
    out.mkdir(parents=True, exist_ok=True)
    seqs = synth.find_sequences(args.sequences)
    if not seqs:
        raise DataError(f"no sequences under {args.sequences}")
    for seq in seqs:
        boxes = tracker.run(seq)
        synth.write_boxes(out / f"{seq.name}.txt", boxes)
        log.info("tracked %s (%d frames)", seq.name, len(boxes))
    print(f"tracked {len(seqs)} sequences into {out}")


def cmd_eval(args):
    cfg = _load_config(args)
    seqs = synth.find_sequences(args.sequences)
    report = synth.evaluate(args.results, seqs, cfg.pr_threshold, cfg.npr_threshold)
    synth.write_report(report, _out(args, args.results))
    sys.stdout.write(report.to_table())


def cmd_bench_prune(args):
    cfg = _load_config(args)
    out = _out(args, "bench")
    out.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model_config()
    cost = bench.cost_report(mcfg)
    (out / "cost_model.csv").write_text(cost)
    sys.stdout.write(cost)
    if args.analytic_only:
        return
    _, text = bench.throughput_report(mcfg, cfg.bench_frames, cfg.bench_warmup)
    (out / "throughput.csv").write_text(text)
    sys.stdout.write(text)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value configuration file")
    common.add_argument("--seed", type=int, help="overrides the seed key")
    common.add_argument("--out", metavar="DIR", help="output directory")

    p = argparse.ArgumentParser(prog="rgbtrack", description="Dual-template RGB-thermal tracker toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate synthetic sequences")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", default="data", help="directory of training sequences")
    t.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint in --out")
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("track", parents=[common], help="run the tracker over sequences")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--sequences", required=True)
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", parents=[common], help="score result files")
    e.add_argument("--results", required=True)
    e.add_argument("--sequences", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-prune", parents=[common], help="pruning cost model and throughput")
    b.add_argument("--analytic-only", action="store_true", help="skip the wall-clock measurement")
    b.set_defaults(func=cmd_bench_prune)
    return p


def main(argv=None):
    level = os.environ.get("BTM_LOG", "error").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, DataError, ContractError, OSError) as e:
        msg = " ".join(str(e).split())
        print(f"rgbtrack {args.command}: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
