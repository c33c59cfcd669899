"""Command-line entry point: ``wico {synth,train,fuse,eval,analyze}``.

Exit codes: 0 success, 2 invalid input or configuration, 3 corrupt file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .domain import DEFAULT_TAU, load_corpus, save_corpus
from .errors import CorruptFileError, WiCoError
from .harness import ALL_MODES, LEARNED_MODES, ErrorProfile, SceneSpec, generate_corpus, run_pipeline
from .model import ModelConfig
from .report import (analysis_report, dumps_report, dumps_results, evaluation_report,
                     load_results, report_csv)
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("wico")

EXIT_OK, EXIT_INVALID, EXIT_CORRUPT = 0, 2, 3


def cmd_synth(args) -> None:
    spec = SceneSpec(height=args.h, width=args.w, embedding_dim=args.c, seed=args.seed,
                     shape_family=args.shape)
    profile = ErrorProfile(args.p_pn, args.ip_erosion, args.score_noise, args.map_noise)
    corpus = generate_corpus(args.count, spec, profile, args.seed)
    save_corpus(corpus, args.out)
    log.info("wrote %d samples to %s", len(corpus), args.out)


def cmd_train(args) -> None:
    corpus = load_corpus(args.corpus)
    if not corpus:
        raise WiCoError("empty corpus")
    channels = corpus[0].pixel_embeddings.channels
    model_cfg = ModelConfig(channels=channels, use_cfi=not args.no_cfi,
                            integration=args.integration)
    cfg = TrainConfig(learning_rate=args.lr, weight_decay=args.wd, iterations=args.iters,
                      batch_size=args.batch_size, seed=args.seed)
    result = fit(corpus, model_cfg, cfg)
    save_checkpoint(args.out, result.params, model_cfg, cfg)
    last = result.curve[-1]
    log.info("trained %s for %d iterations, final loss %.5f", model_cfg.mode_name,
             cfg.iterations, last["loss"])


def cmd_fuse(args) -> None:
    corpus = load_corpus(args.corpus)
    params = cfg = None
    if args.mode in LEARNED_MODES:
        if args.ckpt is None:
            raise WiCoError(f"mode {args.mode!r} needs --ckpt")
        params, cfg, _ = load_checkpoint(args.ckpt)
    results = run_pipeline(corpus, args.mode, params, cfg, args.tau)
    Path(args.out).write_text(dumps_results(results, args.mode, args.tau))


def cmd_eval(args) -> None:
    results, mode, tau = load_results(args.results)
    corpus = load_corpus(args.corpus)
    doc = evaluation_report(results, corpus, mode, tau)
    Path(args.report).write_text(report_csv(doc))
    if args.json:
        Path(args.json).write_text(dumps_report(doc))
    print(f"{mode}: overall IoU {doc['iou']['fused']['overall']:.4f}, "
          f"mean IoU {doc['iou']['fused']['mean']:.4f}")


def cmd_analyze(args) -> None:
    results, _, _ = load_results(args.results)
    other = load_results(args.results_b)[0] if args.results_b else None
    any_flag = args.kde or args.mer or args.bins
    doc = analysis_report(results, other, kde=args.kde or not any_flag,
                          mer=args.mer or not any_flag, bins=args.bins or not any_flag)
    Path(args.out).write_text(dumps_report(doc))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wico", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic prediction dump")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p-pn", type=float, default=0.3)
    p.add_argument("--ip-erosion", type=float, default=0.3)
    p.add_argument("--score-noise", type=float, default=0.02)
    p.add_argument("--map-noise", type=float, default=0.3)
    p.add_argument("--shape", choices=("rectangle", "ellipse"), default="rectangle")
    p.add_argument("--h", type=int, default=32)
    p.add_argument("--w", type=int, default=32)
    p.add_argument("--c", type=int, default=16)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the interaction and integration heads")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--wd", type=float, default=5e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=24)
    p.add_argument("--integration", choices=("gsi", "si"), default="gsi")
    p.add_argument("--no-cfi", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="fuse both branches of every sample")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--mode", choices=ALL_MODES, required=True)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score a results file against its corpus")
    p.add_argument("--results", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="IoU densities, MER and error bins of results files")
    p.add_argument("--results", required=True)
    p.add_argument("--results-b")
    p.add_argument("--kde", action="store_true")
    p.add_argument("--mer", action="store_true")
    p.add_argument("--bins", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CorruptFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (WiCoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
