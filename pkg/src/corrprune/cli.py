"""``corrprune`` command line: generate, train, eval, prune, ablate."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation, synthdata
from .checkpoint import load_checkpoint, make_checkpoint, restore, save_checkpoint
from .config import KEYS, ConfigError, RunConfig, parse_config
from .network import BLOCK_VARIANTS, PREDICTOR_VARIANTS, lecot_forward
from .training import train

log = logging.getLogger("corrprune")

ALIASES = {"pairs": "num_pairs"}


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    keys = list(KEYS) + list(ALIASES)
    for key in keys:
        p.add_argument(f"--{key.replace('_', '-')}", dest=f"key_{key}", metavar="VALUE",
                       help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrprune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset file", allow_abbrev=False)
    _add_common(g)
    g.add_argument("--csv", help="also export the pairs as CSV")

    t = sub.add_parser("train", help="train a model on a dataset file", allow_abbrev=False)
    _add_common(t)
    t.add_argument("--log", help="append metrics CSV here")
    t.add_argument("--resume", help="continue from this checkpoint")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset", allow_abbrev=False)
    _add_common(e)
    e.add_argument("--format", choices=("text", "csv", "jsonl"), default="text")
    e.add_argument("--ransac", action="store_true", help="add a RANSAC baseline row")
    e.add_argument("--strict", action="store_true", help="fail on any per-pair error")

    p = sub.add_parser("prune", help="run the pipeline on one pair and dump per-row results", allow_abbrev=False)
    _add_common(p)
    p.add_argument("--index", type=int, default=0, help="pair index in the dataset")
    p.add_argument("--csv", help="read the pair from a CSV export instead")

    a = sub.add_parser("ablate", help="sweep block and predictor variants", allow_abbrev=False)
    _add_common(a)
    a.add_argument("--holdout", type=int, default=0,
                   help="evaluate on the last HOLDOUT pairs, train on the rest")
    a.add_argument("--format", choices=("text", "csv", "jsonl"), default="text")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    for key in list(KEYS) + list(ALIASES):
        value = getattr(args, f"key_{key}", None)
        if value is not None:
            overrides.append(f"{ALIASES.get(key, key)}={value}")
    return parse_config(args.config, overrides)


def _require(value: str, what: str) -> str:
    if not value:
        raise UsageError(f"missing {what}")
    return value


def cmd_generate(args, cfg: RunConfig) -> int:
    out = _require(cfg.run.out or cfg.run.dataset, "--out (dataset path)")
    pairs = synthdata.generate_dataset(cfg.dataset_spec())
    synthdata.write_dataset(out, pairs)
    if args.csv:
        synthdata.export_csv(args.csv, synthdata.read_dataset(out))
    log.info("wrote %d pairs of %d rows to %s", len(pairs), cfg.data.n, out)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    pairs = synthdata.read_dataset(_require(cfg.run.dataset, "--dataset"))
    out = _require(cfg.run.out or cfg.run.checkpoint, "--out (checkpoint path)")
    model = state = None
    start = 0
    if args.resume:
        model, state, start = restore(load_checkpoint(args.resume), cfg)

    def flush(m, s, it):
        save_checkpoint(out, make_checkpoint(cfg, m, s, it))

    res = train(
        pairs, cfg.network, cfg.loss, cfg.schedule,
        iterations=cfg.run.iterations, seed=cfg.run.seed, batch_size=cfg.run.batch_size,
        log_every=cfg.run.log_every, eps_verify=cfg.run.eps_verify,
        model=model, state=state, start=start, log_path=args.log,
        on_checkpoint=flush, checkpoint_every=cfg.run.checkpoint_every,
    )
    flush(res.model, res.state, res.iteration)
    if res.skipped:
        log.warning("%d iteration(s) skipped on eigengap collapse", res.skipped)
    return 0


def _load_model(cfg: RunConfig):
    ckpt = load_checkpoint(_require(cfg.run.checkpoint, "--checkpoint"))
    model, _, _ = restore(ckpt)
    return model, ckpt


def cmd_eval(args, cfg: RunConfig) -> int:
    model, _ = _load_model(cfg)
    pairs = synthdata.read_dataset(_require(cfg.run.dataset, "--dataset"))
    reports = [evaluation.evaluate(model, pairs, cfg.run.eps_verify, strict=args.strict)]
    if args.ransac:
        reports.append(evaluation.evaluate_ransac(pairs, cfg.run.ransac_iterations, cfg.run.eps_verify,
                                                  cfg.run.seed, strict=args.strict))
    text = evaluation.render_report(reports, args.format)
    if cfg.run.out:
        Path(cfg.run.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_prune(args, cfg: RunConfig) -> int:
    model, _ = _load_model(cfg)
    if args.csv:
        corrs = synthdata.read_csv_pair(args.csv, args.index)
    else:
        pairs = synthdata.read_dataset(_require(cfg.run.dataset, "--dataset"))
        if not 0 <= args.index < len(pairs):
            raise UsageError(f"--index {args.index} out of range (dataset has {len(pairs)} pairs)")
        corrs = pairs[args.index].corrs
    res = lecot_forward(corrs, model, cfg.run.eps_verify)
    in_c2 = np.zeros(len(corrs), np.uint8)
    in_c2[res.kept2] = 1
    weight = np.zeros(len(corrs))
    weight[res.kept2] = res.weights
    fh = open(cfg.run.out, "w", newline="") if cfg.run.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "x", "y", "u", "v", "P", "distance", "in_C2", "weight"])
        for i, row in enumerate(corrs):
            w.writerow([i, *(f"{v:.9g}" for v in row), int(res.P[i]), f"{res.distances[i]:.9g}",
                        int(in_c2[i]), f"{weight[i]:.9g}"])
    finally:
        if fh is not sys.stdout:
            fh.close()
    if cfg.run.out:
        with open(cfg.run.out + ".E.csv", "w", newline="") as fe:
            csv.writer(fe, lineterminator="\n").writerows([[f"{v:.17g}" for v in r] for r in res.E_hat])
    return 0


def run_ablation(cfg: RunConfig, train_pairs, eval_pairs, block_variants=BLOCK_VARIANTS,
                 predictor_variants=PREDICTOR_VARIANTS):
    reports = []
    for bv in block_variants:
        for pv in predictor_variants:
            net = dataclasses.replace(cfg.network, block_variant=bv, predictor_variant=pv)
            res = train(train_pairs, net, cfg.loss, cfg.schedule, iterations=cfg.run.iterations,
                        seed=cfg.run.seed, batch_size=cfg.run.batch_size, log_every=0,
                        eps_verify=cfg.run.eps_verify)
            reports.append(evaluation.evaluate(res.model, eval_pairs, cfg.run.eps_verify, method=f"{bv}/{pv}"))
            log.info("%s/%s: F %.3f mAP5 %.3f", bv, pv, reports[-1].f_score, reports[-1].map5)
    return reports


def cmd_ablate(args, cfg: RunConfig) -> int:
    pairs = synthdata.read_dataset(_require(cfg.run.dataset, "--dataset"))
    if args.holdout:
        if not 0 < args.holdout < len(pairs):
            raise UsageError("--holdout must leave at least one training pair")
        train_pairs, eval_pairs = pairs[:-args.holdout], pairs[-args.holdout:]
    else:
        train_pairs = eval_pairs = pairs
    reports = run_ablation(cfg, train_pairs, eval_pairs)
    text = evaluation.render_report(reports, args.format)
    if cfg.run.out:
        Path(cfg.run.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "prune": cmd_prune,
    "ablate": cmd_ablate,
}


def dispatch(command: str, argv) -> int:
    """Run one subcommand; returns 0 on success, 1 on runtime errors, 2 on usage errors."""
    parser = build_parser()
    try:
        args = parser.parse_args([command, *argv])
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("CORRPRUNE_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return 2
    except KeyboardInterrupt:
        log.error("interrupted")
        return 1
    except (OSError, ValueError, ArithmeticError) as exc:
        log.error("%s", exc)
        return 1


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMMANDS:
        build_parser().print_usage(sys.stderr)
        return 2
    return dispatch(argv[0], argv[1:])


if __name__ == "__main__":
    sys.exit(main())
