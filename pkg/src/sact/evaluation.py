"""Corpus BLEU, the fixed-vs-adaptive temperature sweep, and trace export."""

from __future__ import annotations

import csv
import json
import math
import statistics
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import model as M
from . import training as TR
from .data import encode_pairs
from .model import AttentionTrace
from .rng import derive_rng, derive_seed

DEFAULT_TEMPERATURE_GRID = [round(0.80 + 0.05 * i, 2) for i in range(9)]  # 0.80..1.20
SACT_LABEL = "sact"


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus-level BLEU in [0, 100], case-insensitive, single reference.

    Clipped n-gram precisions for n = 1..max_n are aggregated over the whole
    corpus, combined by geometric mean, and multiplied by the brevity penalty
    exp(1 - r/c) when the hypothesis corpus is shorter than the reference.
    No smoothing: if any order has zero matches (or the hypotheses contain no
    n-grams of that order at all), the score is 0 by convention.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs "
                         f"{len(references)} references")
    if not hypotheses:
        raise ValueError("bleu needs a non-empty corpus")
    matched = np.zeros(max_n)
    total = np.zeros(max_n)
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = [t.lower() for t in hyp]
        ref = [t.lower() for t in ref]
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            total[n - 1] += sum(hyp_counts.values())
            matched[n - 1] += sum(min(c, ref_counts[g])
                                  for g, c in hyp_counts.items())
    if hyp_len == 0 or np.any(matched == 0) or np.any(total == 0):
        return 0.0
    log_precision = np.log(matched / total).mean()
    penalty = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * penalty * math.exp(log_precision)


def exact_match_rate(params, config, pairs, src_vocab, tgt_vocab) -> float:
    """Fraction of pairs whose greedy decode reproduces the target exactly."""
    hits = 0
    for src, tgt in pairs:
        ids, _ = M.greedy_decode(src_vocab.encode(src), params, config)
        if tgt_vocab.decode(ids) == list(tgt):
            hits += 1
    return hits / len(pairs)


# ---------------------------------------------------------------------------
# Temperature sweep (fixed grid vs adaptive controller)
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    """BLEU per fixed temperature plus the adaptive cell, for one seed."""

    fixed: list[tuple[float, float]]  # (temperature, bleu), grid order
    sact_bleu: float
    seed: int

    def __post_init__(self):
        taus = [t for t, _ in self.fixed]
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValueError(f"temperature grid must be strictly increasing: {taus}")


def _train_and_score(task, fixed_temperature, seed, model_config,
                     train_config) -> float:
    """One sweep cell: train a variant from scratch, return test BLEU."""
    from .tensor import set_precision
    set_precision(train_config.precision)
    train_pairs, valid_pairs, test_pairs, src_vocab, tgt_vocab = task
    config = replace(model_config, fixed_temperature=fixed_temperature)
    cell_cfg = replace(train_config, seed=derive_seed(seed, "cell",
                                                      str(fixed_temperature)))
    params = M.init_params(config, derive_rng(cell_cfg.seed, "init"))
    TR.train(params, config,
             encode_pairs(train_pairs, src_vocab, tgt_vocab),
             encode_pairs(valid_pairs, src_vocab, tgt_vocab), cell_cfg)
    hyps = [tgt_vocab.decode(M.greedy_decode(src_vocab.encode(src), params,
                                             config)[0])
            for src, _ in test_pairs]
    return bleu(hyps, [tgt for _, tgt in test_pairs])


def sweep_temperature(task, grid, seeds, model_config, train_config,
                      workers: int = 1, on_error=None) -> list[SweepResult]:
    """Train one model per (grid temperature, seed) plus the adaptive variant
    per seed, and score each on held-out data.

    ``task`` is (train_pairs, valid_pairs, test_pairs, src_vocab, tgt_vocab).
    Cells are independent and reproducible in isolation; failures are
    reported through ``on_error(label, seed, exception)`` and leave NaN in
    that cell rather than aborting the sweep.
    """
    if not grid:
        raise ValueError("sweep needs a non-empty temperature grid")
    cells = [(tau, seed) for seed in seeds for tau in list(grid) + [None]]

    def run(cell):
        tau, seed = cell
        try:
            return _train_and_score(task, tau, seed, model_config, train_config)
        except Exception as err:  # keep sweeping; record the failure
            if on_error is not None:
                on_error(SACT_LABEL if tau is None else tau, seed, err)
            return float("nan")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(_sweep_cell_entry,
                                   [(task, c, model_config, train_config)
                                    for c in cells]))
    else:
        scores = [run(c) for c in cells]

    by_cell = dict(zip(cells, scores))
    return [SweepResult(fixed=[(tau, by_cell[(tau, seed)]) for tau in grid],
                        sact_bleu=by_cell[(None, seed)], seed=seed)
            for seed in seeds]


def _sweep_cell_entry(packed):
    task, (tau, seed), model_config, train_config = packed
    try:
        return _train_and_score(task, tau, seed, model_config, train_config)
    except Exception:
        return float("nan")


def sweep_medians(results: list[SweepResult]) -> dict[str, float]:
    """Cross-seed median BLEU per cell label ('0.80', ..., 'sact')."""
    table: dict[str, float] = {}
    grid = [tau for tau, _ in results[0].fixed]
    for i, tau in enumerate(grid):
        table[format_tau(tau)] = statistics.median(r.fixed[i][1] for r in results)
    table[SACT_LABEL] = statistics.median(r.sact_bleu for r in results)
    return table


def format_tau(tau: float) -> str:
    return f"{tau:.2f}"


def write_sweep_csv(path, results: list[SweepResult]) -> None:
    """CSV rows tau,seed,bleu; the adaptive cells carry the label 'sact'."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "seed", "bleu"])
        for res in results:
            for tau, score in res.fixed:
                writer.writerow([format_tau(tau), res.seed, repr(score)])
            writer.writerow([SACT_LABEL, res.seed, repr(res.sact_bleu)])


def read_sweep_csv(path) -> list[SweepResult]:
    rows: dict[int, dict[str, float]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["tau", "seed", "bleu"]:
            raise ValueError(f"unexpected sweep CSV header: {header}")
        for tau, seed, score in reader:
            rows.setdefault(int(seed), {})[tau] = float(score)
    results = []
    for seed, cells in rows.items():
        fixed = sorted((float(tau), score) for tau, score in cells.items()
                       if tau != SACT_LABEL)
        results.append(SweepResult(fixed=fixed, sact_bleu=cells[SACT_LABEL],
                                   seed=seed))
    return results


# ---------------------------------------------------------------------------
# Trace export
# ---------------------------------------------------------------------------

def _format_float(x: float) -> str:
    return format(float(x), ".17g")


def export_trace(trace: AttentionTrace, path) -> None:
    """Write a trace as JSON plus a companion TSV next to it.

    The JSON holds {src_tokens, tgt_tokens, alpha, tau, beta, lambda} with
    floats printed to 17 significant digits so parsing recovers the exact
    values. The TSV has one row per target step: attention over source
    positions, then the temperature in the last column.
    """
    if trace.src_tokens is None or trace.tgt_tokens is None:
        raise ValueError("trace needs tokens attached before export")
    doc = {"src_tokens": trace.src_tokens,
           "tgt_tokens": trace.tgt_tokens,
           "alpha": [[_format_float(v) for v in row] for row in trace.weights],
           "tau": [_format_float(v) for v in trace.temperatures],
           "beta": [_format_float(v) for v in trace.exponents],
           "lambda": _format_float(trace.bound)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_render_trace_json(doc))
    tsv_path = str(path) + ".tsv" if not str(path).endswith(".json") \
        else str(path)[:-5] + ".tsv"
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(trace.src_tokens + ["tau"]) + "\n")
        for row, tau in zip(trace.weights, trace.temperatures):
            cells = [_format_float(v) for v in row] + [_format_float(tau)]
            fh.write("\t".join(cells) + "\n")


def _render_trace_json(doc: dict) -> str:
    """Serialize the trace document, keeping the pre-formatted 17-digit
    values as raw JSON number literals."""
    parts = ['{"src_tokens": ', json.dumps(doc["src_tokens"]),
             ', "tgt_tokens": ', json.dumps(doc["tgt_tokens"]),
             ', "alpha": [',
             ", ".join("[" + ", ".join(row) + "]" for row in doc["alpha"]),
             '], "tau": [', ", ".join(doc["tau"]),
             '], "beta": [', ", ".join(doc["beta"]),
             '], "lambda": ', doc["lambda"], "}"]
    return "".join(parts)


def load_trace(path) -> AttentionTrace:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return AttentionTrace(weights=np.array(doc["alpha"], dtype=np.float64),
                          temperatures=np.array(doc["tau"], dtype=np.float64),
                          exponents=np.array(doc["beta"], dtype=np.float64),
                          bound=float(doc["lambda"]),
                          src_tokens=list(doc["src_tokens"]),
                          tgt_tokens=list(doc["tgt_tokens"]))
