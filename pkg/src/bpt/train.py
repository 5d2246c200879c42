"""Training and evaluation loops for the LM and classification tasks."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from bpt import checkpoint
from bpt.config import RunConfig
from bpt.data import ClsCorpus, LMCorpus, lm_chunks, pack_sequences
from bpt.errors import ConfigError, DataError
from bpt.graph import BIDIRECTIONAL, CAUSAL, BpGraph, build_graph
from bpt.model import Batch, cls_logits, forward, init_params, loss_and_grads
from bpt.numeric import AdamState, adam_step

LN2 = math.log(2.0)


def bpc(nats_per_char: float) -> float:
    return nats_per_char / LN2


@dataclass
class MetricsReport:
    step: int
    train_loss: float
    train_metric: float | None
    eval_metric: float | None
    degree: dict
    wall: float | None

    def tsv(self) -> str:
        def fmt(x):
            return "-" if x is None else f"{x:.6f}"

        return "\t".join(
            [
                str(self.step),
                fmt(self.train_loss),
                fmt(self.train_metric),
                fmt(self.eval_metric),
                str(self.degree["min"]),
                f"{self.degree['mean']:.3f}",
                str(self.degree["max"]),
                str(self.degree["edges"]),
                "-" if self.wall is None else f"{self.wall:.3f}",
            ]
        )


def metrics_header(task: str) -> str:
    train_col, eval_col = ("train_bpc", "valid_bpc") if task == "lm" else ("train_acc", "valid_acc")
    cols = ["step", "train_loss", train_col, eval_col, "deg_min", "deg_mean", "deg_max", "edges", "wall_s"]
    return "\t".join(cols)


@dataclass
class TrainResult:
    config: RunConfig
    params: dict
    state: AdamState
    records: list[MetricsReport] = field(default_factory=list)
    best_metric: float | None = None


class _LMData:
    task = "lm"

    def __init__(self, ids: np.ndarray, n: int):
        self.tokens, self.targets, self.mask = lm_chunks(ids, n)

    def __len__(self) -> int:
        return len(self.tokens)

    def batch(self, idx) -> Batch:
        return Batch(self.tokens[idx], self.targets[idx], self.mask[idx])


class _ClsData:
    task = "cls"

    def __init__(self, split, n: int, shift: int = 0):
        seqs, labels = split
        if len(seqs) == 0:
            raise DataError("empty split")
        self.tokens = pack_sequences(seqs, n, shift)
        self.labels = labels

    def __len__(self) -> int:
        return len(self.tokens)

    def batch(self, idx) -> Batch:
        return Batch(self.tokens[idx], labels=self.labels[idx])


def _batches(n_items: int, size: int):
    for lo in range(0, n_items, size):
        yield np.arange(lo, min(lo + size, n_items))


def evaluate_lm(params: dict, config: RunConfig, graph: BpGraph, data: _LMData) -> float:
    """Mean nats per character over every unmasked position."""
    total, count = 0.0, 0
    for idx in _batches(len(data), config.batch):
        b = data.batch(idx)
        loss, _ = loss_and_grads(b, params, graph, config, need_grads=False)
        n = int(b.mask.sum())
        total += loss * n
        count += n
    return total / count


def predict_cls(params: dict, config: RunConfig, graph: BpGraph, tokens: np.ndarray) -> np.ndarray:
    preds = []
    for idx in _batches(len(tokens), config.batch):
        states, _ = forward(tokens[idx], params, graph, config)
        logits, _, _ = cls_logits(states, params, graph)
        preds.append(logits.argmax(axis=-1))
    return np.concatenate(preds)


def evaluate_cls(params: dict, config: RunConfig, graph: BpGraph, data: _ClsData) -> float:
    return float((predict_cls(params, config, graph, data.tokens) == data.labels).mean())


def _step_rng(config: RunConfig, step: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, step])


def train(
    corpus: LMCorpus | ClsCorpus,
    config: RunConfig,
    out_dir: str | Path | None = None,
    emit: Callable[[str], None] | None = None,
    resume: str | Path | None = None,
) -> TrainResult:
    """Optimize for ``config.steps`` steps, logging one TSV record per log step.

    Batch choice and dropout masks are drawn from a generator seeded by
    ``(seed, step)``, so a resumed run replays exactly the steps it skipped.
    Writes ``best.ckpt`` (best validation metric) and ``last.ckpt`` into
    ``out_dir`` when given.
    """
    task = "lm" if isinstance(corpus, LMCorpus) else "cls"
    want_mode = CAUSAL if task == "lm" else BIDIRECTIONAL
    if config.mode != want_mode:
        raise ConfigError(f"{task} training needs mode={want_mode}, got {config.mode}")
    updates = {"vocab": corpus.vocab_size}
    if task == "cls":
        updates["n_classes"] = corpus.n_classes
    config = config.replace(**updates)

    graph = build_graph(config.n_max, config.k, config.mode)
    if task == "lm":
        train_data, valid_data = _LMData(corpus.train, config.n_max), _LMData(corpus.valid, config.n_max)
    else:
        train_data, valid_data = _ClsData(corpus.train, config.n_max), _ClsData(corpus.valid, config.n_max)

    best = None
    if resume is not None:
        saved_cfg, params, state, meta = checkpoint.load(resume)
        if saved_cfg.replace(steps=config.steps) != config.replace(steps=config.steps):
            raise ConfigError("checkpoint config does not match the requested run")
        best = meta.get("best")
    else:
        params = init_params(config)
        state = AdamState(config.lr, config.beta1, config.beta2, config.eps, config.warmup)
    result = TrainResult(config, params, state, best_metric=best)

    degree = graph.degree_stats()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if emit is not None and state.step == 0:
        emit(metrics_header(task))
    better = (lambda a, b: a < b) if task == "lm" else (lambda a, b: a > b)
    t0 = time.perf_counter()

    while state.step < config.steps:
        step = state.step
        rng = _step_rng(config, step)
        if len(train_data) <= config.batch:
            idx = np.arange(len(train_data))
        else:
            idx = rng.choice(len(train_data), size=config.batch, replace=False)
        drop_rng = None if config.verify else rng
        loss, grads = loss_and_grads(train_data.batch(idx), params, graph, config, drop_rng)
        adam_step(params, grads, state)
        done = state.step
        if done % config.log_every and done != config.steps:
            continue
        train_metric = eval_metric = None
        if task == "lm":
            train_metric = bpc(loss)
        if done % config.eval_every == 0 or done == config.steps:
            if task == "lm":
                eval_metric = bpc(evaluate_lm(params, config, graph, valid_data))
            else:
                train_metric = evaluate_cls(params, config, graph, train_data)
                eval_metric = evaluate_cls(params, config, graph, valid_data)
            if best is None or better(eval_metric, best):
                best = result.best_metric = eval_metric
                if out is not None:
                    checkpoint.save(out / "best.ckpt", config, params, None, {"step": done, "best": best})
        wall = None if config.verify else time.perf_counter() - t0
        rec = MetricsReport(done, loss, train_metric, eval_metric, degree, wall)
        result.records.append(rec)
        if emit is not None:
            emit(rec.tsv())
    if out is not None:
        checkpoint.save(out / "last.ckpt", config, params, state, {"step": state.step, "best": best})
    return result


def train_lm(corpus: LMCorpus, config: RunConfig, **kwargs) -> TrainResult:
    if not isinstance(corpus, LMCorpus):
        raise DataError("train_lm needs a character corpus")
    return train(corpus, config, **kwargs)


def train_cls(corpus: ClsCorpus, config: RunConfig, **kwargs) -> TrainResult:
    if not isinstance(corpus, ClsCorpus):
        raise DataError("train_cls needs a labeled corpus")
    return train(corpus, config, **kwargs)


def evaluate(params: dict, config: RunConfig, corpus, split: str = "test") -> float:
    """BPC (LM) or accuracy (classification) on a named split."""
    data = getattr(corpus, split)
    graph = build_graph(config.n_max, config.k, config.mode)
    if isinstance(corpus, LMCorpus):
        return bpc(evaluate_lm(params, config, graph, _LMData(data, config.n_max)))
    return evaluate_cls(params, config, graph, _ClsData(data, config.n_max))


def shift_eval(params: dict, config: RunConfig, corpus: ClsCorpus, max_shift: int = 7, split: str = "test"):
    """Accuracy after prepending 0..max_shift zero-embedding placeholders.

    Returns rows ``(shift, accuracy, accuracy - accuracy_at_0)``.
    """
    if config.mode != BIDIRECTIONAL:
        raise ConfigError("shift evaluation needs a classification checkpoint")
    if max_shift < 0:
        raise DataError("max_shift must be non-negative")
    data = getattr(corpus, split)
    graph = build_graph(config.n_max, config.k, config.mode)
    longest = max(len(s) for s in data[0])
    if longest + max_shift > config.n_max:
        raise DataError(f"shift {max_shift} pushes a {longest}-token sequence past n_max={config.n_max}")
    rows = []
    for shift in range(max_shift + 1):
        acc = evaluate_cls(params, config, graph, _ClsData(data, config.n_max, shift))
        rows.append((shift, acc, acc - rows[0][1] if rows else 0.0))
    return rows

