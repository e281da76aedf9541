"""``kvseg`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format
error, 3 numeric failure (gradient check above tolerance, non-finite loss).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

from . import tensor as T
from .complexity import audit_model, to_csv, to_table
from .config import list_fixtures, load_config
from .data import (
    SplitSpec,
    load_dataset,
    masks_from_manifest,
    read_ids,
    read_manifest,
    split_dataset,
    write_pgm,
    write_synthetic,
)
from .errors import ConfigurationError, DimensionError, FormatError, KVSegError, NumericError, ScheduleError
from .gradcheck import FD_STEP, group_errors, model_gradient_report
from .train import ScheduleConfig, Trainer, evaluate, load_checkpoint, load_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOL = 1e-5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- audit ----------------------------------------------------------------


def cmd_audit(args) -> int:
    reports = [audit_model(load_config(c), args.mode) for c in args.configs]
    other = reports[1] if len(reports) == 2 else None
    render = to_csv if args.csv else to_table
    print(render(reports[0], other, depth=args.depth), end="" if args.csv else "\n")
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    if args.corrupt_backward:
        with T.corrupt_backward(args.corrupt_backward):
            report = model_gradient_report(cfg, args.seed, args.batch, args.max_entries)
    else:
        report = model_gradient_report(cfg, args.seed, args.batch, args.max_entries)
    groups = group_errors(report.errors)
    width = max(len(k) for k in groups)
    for module, err in groups.items():
        print(f"{module.ljust(width)}  {err:.3e}  {'ok' if err <= args.tol else 'FAIL'}")
    kinked, probed = sum(report.kinked.values()), sum(report.probed.values())
    if kinked:
        print(f"{kinked} of {probed} probed entries straddle a ReLU/max-pool switch and were excluded")
    worst = report.max_error
    verdict = "PASS" if worst <= args.tol else "FAIL"
    print(f"{verdict}: max relative error {worst:.3e} (tolerance {args.tol:g}, step {FD_STEP:g})")
    return EXIT_OK if worst <= args.tol else EXIT_NUMERIC


# -- data -----------------------------------------------------------------


def cmd_decode_rle(args) -> int:
    masks = masks_from_manifest(read_manifest(args.manifest), args.order)
    out = Path(args.out)
    for id_, mask in masks.items():
        write_pgm(out / f"{id_}.pgm", mask)
    print(f"wrote {len(masks)} masks to {out}")
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    ids = write_synthetic(args.out, args.n, args.size, args.seed, args.classes)
    print(f"wrote {len(ids)} samples to {args.out}")
    return EXIT_OK


def _parse_ratios(text: str) -> tuple[Fraction, ...]:
    parts = [Fraction(p) for p in text.replace(",", ":").split(":")]
    total = sum(parts)
    return tuple(p / total for p in parts)


def cmd_split(args) -> int:
    source = Path(args.ids)
    ids = read_ids(source / "ids.txt" if source.is_dir() else source)
    try:
        spec = SplitSpec(_parse_ratios(args.ratios), args.seed)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigurationError(f"bad --ratios {args.ratios!r}: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), split_dataset(ids, spec)):
        (out / f"{name}.txt").write_text("".join(f"{i}\n" for i in part))
        print(f"{name}: {len(part)}")
    return EXIT_OK


# -- train / eval ---------------------------------------------------------


def _dataset(root, ids_file):
    return load_dataset(root, read_ids(ids_file) if ids_file else None)


def cmd_train(args) -> int:
    data = _dataset(args.data, args.ids)
    val = _dataset(args.val_data or args.data, args.val_ids) if (args.val_ids or args.val_data) else None
    given = {
        "epochs": args.epochs,
        "batch_size": args.batch,
        "lr": args.lr,
        "weight_decay": args.weight_decay,
        "augment": False if args.no_augment else None,
        "eval_every": args.eval_every,
    }
    given = {k: v for k, v in given.items() if v is not None}
    if args.resume:
        # flags left unset keep the schedule stored in the checkpoint
        stored = ScheduleConfig(**load_checkpoint(args.resume)[0]["schedule"])
        trainer = Trainer.resume(args.resume, data, replace(stored, **given), val)
    else:
        with T.precision(args.precision):
            trainer = Trainer(load_config(args.config), data, ScheduleConfig(**given), args.seed, val)
    print(f"{trainer.cfg.name} [{trainer.cfg.config_hash()}]: {trainer.model.num_parameters():,} params, "
          f"{trainer.total_steps} steps")
    for r in trainer.run(args.out, args.stop_at):
        if r.jaccard is not None or r.step == trainer.total_steps or r.step % args.log_every == 0:
            extra = "" if r.jaccard is None else f"  jaccard {r.jaccard:.4f}  weighted {r.weighted_jaccard:.4f}"
            print(f"epoch {r.epoch}  step {r.step}  lr {r.lr:.3e}  loss {r.loss:.5f}{extra}")
    print(f"checkpoint: {Path(args.out) / 'checkpoint.kvck'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_model(args.checkpoint)
    summary = evaluate(model, _dataset(args.data, args.ids), args.batch)
    print(f"{model.cfg.name} [{meta['config_hash']}] step {meta['step']}: {summary.samples} samples")
    for c, score in enumerate(summary.scores.per_class, start=1):
        print(f"class {c}: jaccard {score:.6f}")
    print(f"mean jaccard: {summary.mean:.6f}")
    print(f"weighted jaccard: {summary.weighted:.6f}")
    print(f"loss: {summary.loss:.6f}")
    return EXIT_OK


# -- wiring ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kvseg", description="KV-attention segmentation transformers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fixtures = ", ".join(list_fixtures())

    a = sub.add_parser("audit", help="parameter and MAC audit")
    a.add_argument("configs", nargs="+", metavar="CONFIG", help=f"config path or bundled name ({fixtures})")
    a.add_argument("--mode", choices=("paper", "full"), default="full")
    a.add_argument("--csv", action="store_true", help="emit CSV instead of a table")
    a.add_argument("--depth", type=int, default=3, help="module path depth for grouping rows")
    a.set_defaults(func=cmd_audit)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--batch", type=int, default=2)
    g.add_argument("--max-entries", type=int, default=None, help="probe at most K entries per tensor")
    g.add_argument("--tol", type=float, default=GRAD_TOL)
    g.add_argument("--corrupt-backward", metavar="OP", help="test hook: scale the gradient of OP by 1.01")
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("data", help="dataset utilities")
    dsub = d.add_subparsers(dest="data_command", required=True, parser_class=_Parser)
    dr = dsub.add_parser("decode-rle", help="manifest CSV -> mask graymaps")
    dr.add_argument("manifest")
    dr.add_argument("--out", required=True)
    dr.add_argument("--order", choices=("row", "column"), default="row")
    dr.set_defaults(func=cmd_decode_rle)
    ds = dsub.add_parser("make-synthetic", help="blob images with exact masks")
    ds.add_argument("--out", required=True)
    ds.add_argument("--n", type=int, default=8)
    ds.add_argument("--size", type=int, default=32)
    ds.add_argument("--seed", type=int, default=0)
    ds.add_argument("--classes", type=int, default=3, help="organ classes drawn (1..3)")
    ds.set_defaults(func=cmd_make_synthetic)
    dp = dsub.add_parser("split", help="train/val/test id lists")
    dp.add_argument("ids", help="file with one id per line, or a dataset directory")
    dp.add_argument("--out", required=True)
    dp.add_argument("--seed", type=int, default=0)
    dp.add_argument("--ratios", default="80:16:4")
    dp.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("config", nargs="?", help="config (omit with --resume)")
    t.add_argument("data", help="dataset directory")
    t.add_argument("--ids", help="restrict training to these ids")
    t.add_argument("--val-data")
    t.add_argument("--val-ids")
    t.add_argument("--epochs", type=int, help="default 100")
    t.add_argument("--batch", type=int, help="default 32")
    t.add_argument("--lr", type=float, help="peak learning rate, default 1e-4")
    t.add_argument("--weight-decay", type=float, help="default 0.01")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--eval-every", type=int)
    t.add_argument("--log-every", type=int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--precision", choices=sorted(T.PRECISIONS), default="single")
    t.add_argument("--resume", metavar="CHECKPOINT")
    t.add_argument("--stop-at", type=int, metavar="STEP", help="checkpoint and stop after this global step")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--ids")
    e.add_argument("--batch", type=int, default=8)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "train" and not args.resume and not args.config:
        parser.error("train needs a CONFIG unless --resume is given")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, ScheduleError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KVSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
