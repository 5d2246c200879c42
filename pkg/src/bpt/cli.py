"""Command-line entry point: ``bpt <subcommand> ...``.

Exit status is 0 on success, 1 on a runtime failure (with a diagnostic on
stderr) and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from bpt import checkpoint
from bpt.bench import bench, bench_tsv
from bpt.config import load_config
from bpt.data import ClsCorpus, load_cls_corpus, load_lm_corpus
from bpt.errors import BptError
from bpt.graph import build_graph, export_graph
from bpt.gradcheck import KERNEL_TOL, MODEL_TOL, kernel_grad_checks, model_grad_check
from bpt.train import metrics_header, shift_eval, train


def _mode(text: str) -> str:
    return {"bi": "bidirectional", "causal": "causal", "bidirectional": "bidirectional"}[text]


def _add_run_flags(p: argparse.ArgumentParser, with_data: bool = True) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=("verify", "fast"))
    p.add_argument("--n", type=int, help="context length n_max")
    p.add_argument("--k", type=int, help="connection density")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="output directory")
    if with_data:
        p.add_argument("--data", required=True, help="corpus file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bpt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("graph", help="export the attention graph")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--mode", choices=("bi", "bidirectional", "causal"), default="bi")
    p.add_argument("--format", choices=("json", "dot"), default="json")
    p.add_argument("--out", help="file to write (default: stdout)")

    for name, help_ in (("train-lm", "train a character language model"), ("train-cls", "train a classifier")):
        p = sub.add_parser(name, help=help_)
        _add_run_flags(p)
        p.add_argument("--resume", help="checkpoint to continue from")
        p.add_argument("--plot", action="store_true", help="render a training curve into --out")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")

    p = sub.add_parser("shift-eval", help="accuracy under prepended placeholders")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--shift", type=int, default=7, help="largest shift to evaluate")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--out", help="directory for shift.tsv and shift.png")

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("bi", "bidirectional", "causal", "both"), default="both")

    p = sub.add_parser("bench", help="sparse vs dense throughput table")
    _add_run_flags(p, with_data=False)
    p.add_argument("--lengths", default="64,128,256,512,1024")
    p.add_argument("--budget", type=int, default=4096, help="tokens per forward batch")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--plot", action="store_true", help="render bench.png into --out")
    return parser


def _run_config(args, task: str):
    config = load_config(args.config, task)
    overrides = {}
    for flag, key in (("seed", "seed"), ("precision", "precision"), ("n", "n_max"), ("k", "k"), ("steps", "steps")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return config.replace(**overrides) if overrides else config


def _write(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def cmd_graph(args) -> int:
    graph = build_graph(args.n, args.k, _mode(args.mode))
    data = export_graph(graph, args.format)
    if args.out is None:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        Path(args.out).write_bytes(data)
    return 0


def cmd_train(args, task: str) -> int:
    config = _run_config(args, task)
    corpus = load_lm_corpus(args.data) if task == "lm" else load_cls_corpus(args.data)
    lines = []

    def emit(line: str) -> None:
        lines.append(line)
        print(line, flush=True)

    result = train(corpus, config, out_dir=args.out, emit=emit, resume=args.resume)
    if args.out is not None:
        out = Path(args.out)
        mode = "a" if args.resume else "w"
        with open(out / "metrics.tsv", mode) as fh:
            fh.write("\n".join(lines) + "\n")
        if args.plot:
            from bpt.plotting import plot_metrics

            plot_metrics(result.records, task, out / "metrics.png")
    return 0


def cmd_eval(args) -> int:
    config, params, _, meta = checkpoint.load(args.checkpoint)
    from bpt.train import evaluate

    if config.mode == "causal":
        corpus = load_lm_corpus(args.data, allow_test=True)
        name = "bpc"
    else:
        corpus = load_cls_corpus(args.data, allow_test=True)
        name = "accuracy"
    _check_vocab(corpus, config)
    value = evaluate(params, config, corpus, args.split)
    print(f"split\t{name}\n{args.split}\t{value:.6f}")
    return 0


def _check_vocab(corpus, config) -> None:
    if corpus.vocab_size != config.vocab:
        raise BptError("corpus vocabulary does not match the checkpoint; use the training corpus file")


def cmd_shift_eval(args) -> int:
    config, params, _, _ = checkpoint.load(args.checkpoint)
    corpus = load_cls_corpus(args.data, allow_test=True)
    _check_vocab(corpus, config)
    rows = shift_eval(params, config, corpus, args.shift, args.split)
    text = "shift\taccuracy\tdelta\n" + "".join(f"{s}\t{a:.6f}\t{d:+.6f}\n" for s, a, d in rows)
    sys.stdout.write(text)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "shift.tsv").write_text(text)
        from bpt.plotting import plot_shift

        plot_shift(rows, out / "shift.png")
    return 0


def cmd_grad_check(args) -> int:
    worst = 0.0
    print("check\trelative_error")
    for name, err in kernel_grad_checks(args.seed).items():
        print(f"kernel/{name}\t{err:.3e}")
        if err >= KERNEL_TOL:
            worst = max(worst, 1.0)
    modes = ("causal", "bidirectional") if args.mode == "both" else (_mode(args.mode),)
    model_worst = 0.0
    for mode in modes:
        for name, err in model_grad_check(args.seed, mode).items():
            print(f"model[{mode}]/{name}\t{err:.3e}")
            model_worst = max(model_worst, err)
    ok = model_worst < MODEL_TOL and worst == 0.0
    print(f"max_relative_error\t{model_worst:.3e}\t{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    config = _run_config(args, "cls")
    lengths = [int(x) for x in args.lengths.split(",") if x]
    # wall-clock rates are not reproducible, so verification mode reports edge counts only
    rows = bench(config, lengths, args.budget, args.repeats, timed=not config.verify)
    text = bench_tsv(rows)
    sys.stdout.write(text)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.tsv").write_text(text)
        if args.plot:
            from bpt.plotting import plot_bench

            plot_bench(rows, out / "bench.png")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "graph": cmd_graph,
        "train-lm": lambda a: cmd_train(a, "lm"),
        "train-cls": lambda a: cmd_train(a, "cls"),
        "eval": cmd_eval,
        "shift-eval": cmd_shift_eval,
        "grad-check": cmd_grad_check,
        "bench": cmd_bench,
    }
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return handlers[args.command](args)
    except (BptError, ValueError) as exc:
        print(f"bpt: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"bpt: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
