"""Command-line entry point.

Verbs: tokenize-train, prepare, pretrain, finetune, ablate,
fit-scaling, report. Exit codes: 0 success, 1 configuration error,
2 runtime failure, 3 analysis error.
"""

from __future__ import annotations

import argparse
import statistics
import sys

from .config import PRESETS, RunConfig, apply_overrides, load_run_config
from .corpus import PipelineConfig, curate, save_dataset
from .errors import AnalysisError, ConfigurationError, ContractError
from .harness import (
    emit_report, read_entries, run_ablation, run_pretrain, write_svg,
)
from .model import Model
from .scaling import estimate_shift, fit_power_law
from .tokenizer import Vocab, WordPieceModel, train_wordpiece
from .trainer import FinetuneProtocol, LossCurve, finetune, load_task


def _chart_series(curve: LossCurve):
    # the step-0 point sits at zero tokens, which a log axis cannot show
    tokens, losses = curve.tokens(), curve.losses()
    keep = tokens > 0
    return tokens[keep], losses[keep]


def _parse_optional_float(text: str) -> float | None:
    return None if text.lower() in ("none", "off") else float(text)


def _parse_optional_int(text: str) -> int | None:
    return None if text.lower() in ("none", "off") else int(text)


def cmd_tokenize_train(args) -> int:
    entries = read_entries(args.input)
    wp = train_wordpiece(entries, vocab_size=args.vocab_size,
                         max_chars_per_word=args.max_chars)
    wp.vocab.save(args.out)
    print(f"trained vocabulary of {len(wp.vocab)} tokens -> {args.out}")
    return 0


def cmd_prepare(args) -> int:
    entries = read_entries(args.input)
    wp = WordPieceModel(Vocab.load(args.vocab))
    cfg = PipelineConfig(
        t=_parse_optional_float(args.t),
        dedup_min_len=_parse_optional_int(args.dedup),
        sort=args.sort,
        shuffle_seed=args.seed,
        seq_len=args.seq_len,
    )
    ds, report = curate(entries, wp, cfg)
    save_dataset(args.out, ds)
    text = report.to_text() + "\n"
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    print(f"wrote {ds.sequence_count} sequences -> {args.out}")
    return 0


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    apply_overrides(cfg, overrides)
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    if args.input:
        cfg.tokenizer.input = args.input
    if args.budget_steps is not None:
        cfg.train.budget_steps = args.budget_steps
        cfg.train.budget_hours = None
    if args.budget_hours is not None:
        cfg.train.budget_hours = args.budget_hours
        cfg.train.budget_steps = None
    if args.seed is not None:
        cfg.train.seed = args.seed
    art, result = run_pretrain(cfg, args.out, input_path=cfg.tokenizer.input,
                               workdir=args.workdir)
    print(f"run directory: {art.run_dir}")
    if len(result.curve):
        last = result.curve.points[-1]
        print(f"steps {result.steps}  tokens {result.tokens}  "
              f"final loss {last.loss:.4f}")
    if result.aborted:
        print(f"run aborted: {result.abort_reason}", file=sys.stderr)
        return 2
    return 0


def cmd_finetune(args) -> int:
    examples = load_task(args.task)
    eval_examples = load_task(args.eval) if args.eval else None
    wp = WordPieceModel(Vocab.load(args.vocab))
    protocol = FinetuneProtocol(epochs=args.epochs, batch_size=args.batch_size,
                                lr=args.lr)
    accs, mccs = [], []
    for seed in range(args.seeds):
        model = Model.load(args.checkpoint)
        metrics = finetune(model, wp, examples, protocol, seed=seed,
                           eval_examples=eval_examples,
                           compute_matthews=args.matthews)
        accs.append(metrics.accuracy)
        line = f"seed {seed}: accuracy {metrics.accuracy:.4f}"
        if args.matthews:
            mccs.append(metrics.matthews)
            line += f"  matthews {metrics.matthews:.4f}"
        print(line)
    print(f"median accuracy over {args.seeds} seed(s): "
          f"{statistics.median(accs):.4f}")
    if mccs:
        print(f"median matthews over {args.seeds} seed(s): "
              f"{statistics.median(mccs):.4f}")
    return 0


def cmd_ablate(args) -> int:
    base = _load_config(args)
    names = [n.strip() for n in args.presets.split(",") if n.strip()]
    rows = []
    for name in names:
        if name not in PRESETS:
            raise ConfigurationError(
                f"unknown preset {name!r}; choose from {', '.join(PRESETS)}"
            )
        rows.append((name, PRESETS[name]))
    results, table = run_ablation(
        base, rows, args.input, args.workdir,
        task_path=args.task, task_seeds=args.seeds,
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
    print(table, end="")
    return 0 if all(r.status == "ok" for r in results) else 2


def cmd_fit_scaling(args) -> int:
    curves = [(path, LossCurve.from_csv(path)) for path in args.curve]
    fits = []
    for path, curve in curves:
        fit = fit_power_law(curve, burn_in=args.burn_in)
        fits.append(fit)
        print(f"{path}: loss = {fit.c:.4f} + {fit.a:.4f} * tokens^-{fit.b:.4f}"
              f"  (log residual {fit.residual:.6f})")
    if len(curves) == 2:
        shift = estimate_shift(curves[0][1], curves[1][1], burn_in=args.burn_in)
        print(f"shift factor ({curves[0][0]} vs {curves[1][0]}): "
              f"{shift.factor:.4f}  (residual {shift.residual:.6f})")
    if args.svg:
        series = {path: (curve.tokens(), curve.losses())
                  for path, curve in curves}
        write_svg(args.svg, series)
        print(f"wrote chart -> {args.svg}")
    return 0


def cmd_report(args) -> int:
    text = emit_report(args.run_dir, device_name=args.device,
                       baseline_dir=args.baseline)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    if args.svg:
        import os

        curve = LossCurve.from_csv(os.path.join(args.run_dir, "curve.csv"))
        write_svg(args.svg, {"loss": (curve.tokens(), curve.losses())})
        print(f"wrote chart -> {args.svg}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cramlab",
        description="compute-budgeted masked-language-model pretraining lab",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("tokenize-train", help="train a WordPiece vocabulary")
    p.add_argument("--input", required=True, help="corpus file or directory")
    p.add_argument("--vocab-size", type=int, default=32768)
    p.add_argument("--max-chars", type=int, default=100)
    p.add_argument("--out", required=True, help="vocabulary output path")
    p.set_defaults(func=cmd_tokenize_train)

    p = sub.add_parser("prepare", help="curate a corpus into a packed dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--t", default="0.3",
                   help="compression filter threshold, or 'none'")
    p.add_argument("--dedup", default="none",
                   help="exact-substring window length, or 'none'")
    sort = p.add_mutually_exclusive_group()
    sort.add_argument("--sort", dest="sort", action="store_true", default=True)
    sort.add_argument("--no-sort", dest="sort", action="store_false")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="also write the stats text here")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", help="run budgeted pretraining")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--input", help="corpus file or directory")
    p.add_argument("--budget-steps", type=int)
    p.add_argument("--budget-hours", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--workdir", default="work",
                   help="shared cache for prepared data")
    p.add_argument("--out", default="run", help="run directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune a checkpoint on a TSV task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--task", required=True, help="training TSV")
    p.add_argument("--eval", help="evaluation TSV (defaults to training set)")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=4e-5)
    p.add_argument("--matthews", action="store_true",
                   help="also report Matthews correlation")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("ablate", help="run an ablation table of presets")
    p.add_argument("--config", help="base run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--input", required=True)
    p.add_argument("--workdir", default="work")
    p.add_argument("--presets", default=",".join(PRESETS),
                   help="comma-separated preset names")
    p.add_argument("--task", help="optional finetune TSV scored per row")
    p.add_argument("--seeds", type=int, default=1,
                   help="finetune seeds per row (median reported)")
    p.add_argument("--out", help="write the table here as well")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("fit-scaling", help="fit power laws to loss curves")
    p.add_argument("--curve", action="append", required=True,
                   help="curve CSV (repeatable; two curves also get a "
                        "shift estimate)")
    p.add_argument("--burn-in", type=float,
                   help="ignore points below this token count")
    p.add_argument("--svg", help="write a loss chart here")
    p.set_defaults(func=cmd_fit_scaling)

    p = sub.add_parser("report", help="summarize a finished run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--device", help="device name for FLOP accounting")
    p.add_argument("--baseline", help="second run directory to diff against")
    p.add_argument("--out", help="write the report here as well")
    p.add_argument("--svg", help="write the loss chart here")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except AnalysisError as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return 3
    except (ContractError, FloatingPointError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
