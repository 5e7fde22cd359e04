"""Measurement suite: ranking, calibration, ablations, control, pool benchmark.

Everything here treats trained models as immutable scoring functions. Where
ground truth exists (the synthetic world), reports carry an extra oracle
column; on real data those fields stay None.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import decoder
from . import autodiff as ad
from .corpus import Question, StudentHistory
from .ktrain import KT, predict_batch, predict_difficulty
from .qgen import (QG, GenerationError, QGExample, SamplingParams,
                   encode_examples, generate, with_binary_targets)


class EvalError(ValueError):
    pass


class UndefinedAUCError(EvalError):
    pass


# ---------------------------------------------------------------------------
# instance extraction: one prediction task per (history prefix, next question)


@dataclass(frozen=True)
class KTInstance:
    state: StudentHistory
    question: Question
    label: bool
    true_p: float | None = None
    unseen: bool | None = None


def kt_instances(histories: Sequence[StudentHistory],
                 traces: Sequence[Sequence[float]] | None = None,
                 unseen_texts: set[str] | None = None,
                 min_prefix: int = 0) -> list[KTInstance]:
    out: list[KTInstance] = []
    for si, h in enumerate(histories):
        for i in range(min_prefix, len(h.interactions)):
            it = h.interactions[i]
            out.append(KTInstance(
                StudentHistory(f"{h.student_id}@{i}", h.interactions[:i]),
                it.question,
                it.correct,
                None if traces is None else float(traces[si][i]),
                None if unseen_texts is None else it.question.text in unseen_texts,
            ))
    return out


def score_instances(kt: KT, instances: Sequence[KTInstance]
                    ) -> tuple[np.ndarray, float]:
    preds, secs = predict_batch(kt, [(x.state, x.question) for x in instances])
    return np.array([p.d for p in preds]), secs


# ---------------------------------------------------------------------------
# AUC


def auc_roc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """P(score of a random positive > random negative), ties at half credit."""
    y = np.asarray(labels, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 1:
        raise EvalError("scores and labels must be equal-length vectors")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs both classes present")
    ranks = rankdata(s)  # average ranks give exactly the half-credit tie rule
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationReport:
    bin_edges: list[float]
    pred_mean: list[float | None]
    frac_correct: list[float | None]
    count: list[int]
    bootstrap_sd: list[float | None]

    def max_deviation(self, min_count: int = 1) -> float:
        devs = [abs(p - f) for p, f, c in
                zip(self.pred_mean, self.frac_correct, self.count)
                if c >= min_count]
        if not devs:
            raise EvalError("no bins meet the count threshold")
        return max(devs)


def calibration(preds: Sequence[float], labels: Sequence[bool], n_bins: int = 10,
                n_boot: int = 1000, seed: int = 0) -> CalibrationReport:
    """Equal-width bins over [0,1]; empty bins stay None rather than being
    interpolated. bootstrap_sd is the sd of resampled per-bin accuracy."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0 or p.min() < 0 or p.max() > 1:
        raise EvalError("predictions must be non-empty and lie in [0, 1]")
    idx = np.minimum((p * n_bins).astype(int), n_bins - 1)
    rng = np.random.default_rng([seed, 23])
    edges = [i / n_bins for i in range(n_bins + 1)]
    pred_mean: list[float | None] = []
    frac: list[float | None] = []
    count: list[int] = []
    boot_sd: list[float | None] = []
    for b in range(n_bins):
        sel = idx == b
        c = int(sel.sum())
        count.append(c)
        if c == 0:
            pred_mean.append(None)
            frac.append(None)
            boot_sd.append(None)
            continue
        yb = y[sel]
        pred_mean.append(float(p[sel].mean()))
        frac.append(float(yb.mean()))
        draws = rng.integers(c, size=(n_boot, c))
        boot_sd.append(float(yb[draws].mean(axis=1).std()))
    return CalibrationReport(edges, pred_mean, frac, count, boot_sd)


# ---------------------------------------------------------------------------
# ablation perplexity


ABLATION_MODES = ("ground_truth", "permute_student", "permute_difficulty",
                  "permute_both")
TARGET_KINDS = ("continuous", "binary")


@dataclass
class AblationRow:
    mode: str
    target_kind: str
    perplexity: float
    ci_lo: float
    ci_hi: float
    n_examples: int


@dataclass
class AblationReport:
    rows: list[AblationRow] = field(default_factory=list)

    def get(self, mode: str, target_kind: str) -> AblationRow:
        for r in self.rows:
            if r.mode == mode and r.target_kind == target_kind:
                return r
        raise KeyError((mode, target_kind))


def _pooled_perplexity(nlls: np.ndarray, counts: np.ndarray) -> float:
    return float(np.exp((nlls * counts).sum() / counts.sum()))


def ablation_perplexity(qg: QG, eval_set: Sequence[QGExample], mode: str,
                        target_kind: str = "continuous", seed: int = 0,
                        n_boot: int = 1000,
                        perms: tuple[np.ndarray | None, np.ndarray | None] | None = None
                        ) -> AblationRow:
    """Masked-question perplexity with the named field(s) shuffled across
    examples. perms overrides the seeded (state_perm, d_perm) pair, which is
    how the identity-permutation equality is exercised."""
    if mode not in ABLATION_MODES:
        raise EvalError(f"unknown ablation mode {mode!r}")
    if target_kind not in TARGET_KINDS:
        raise EvalError(f"unknown target kind {target_kind!r}")
    examples = list(eval_set)
    n = len(examples)
    if n == 0:
        raise EvalError("empty evaluation set")
    if mode != "ground_truth" and n < 2:
        raise EvalError("permutation modes need at least two examples")
    if target_kind == "binary":
        examples = with_binary_targets(examples)

    rng = np.random.default_rng([seed, 31])
    s_perm = np.arange(n)
    d_perm = np.arange(n)
    if mode in ("permute_student", "permute_both"):
        s_perm = rng.permutation(n)
    if mode in ("permute_difficulty", "permute_both"):
        d_perm = rng.permutation(n)
    if perms is not None:
        got_s, got_d = perms
        s_perm = s_perm if got_s is None else np.asarray(got_s)
        d_perm = d_perm if got_d is None else np.asarray(got_d)

    shuffled = [QGExample(examples[int(s_perm[i])].state,
                          examples[int(d_perm[i])].d,
                          examples[i].question)
                for i in range(n)]
    encoded = encode_examples(qg, shuffled)
    nlls = np.empty(n)
    counts = np.empty(n)
    with ad.no_grad():
        for i, (tokens, control_position, mask, d) in enumerate(encoded):
            vec = qg.control.vector(d)
            loss = decoder.sequence_loss(qg.model, tokens, mask,
                                         overrides=[(control_position, vec)])
            nlls[i] = loss.item()
            counts[i] = sum(mask)
    ppl = _pooled_perplexity(nlls, counts)
    boot_rng = np.random.default_rng([seed, 43])
    draws = boot_rng.integers(n, size=(n_boot, n))
    boots = np.array([_pooled_perplexity(nlls[dr], counts[dr]) for dr in draws])
    lo, hi = np.percentile(boots, [2.5, 97.5])
    return AblationRow(mode, target_kind, ppl, float(lo), float(hi), n)


def ablation_report(qg_by_kind: dict[str, QG], eval_set: Sequence[QGExample],
                    seed: int = 0, n_boot: int = 1000) -> AblationReport:
    """All four modes for each target kind that has a trained model."""
    report = AblationReport()
    for kind, qg in qg_by_kind.items():
        for mode in ABLATION_MODES:
            report.rows.append(ablation_perplexity(
                qg, eval_set, mode, kind, seed=seed, n_boot=n_boot))
    return report


# ---------------------------------------------------------------------------
# difficulty-control sweep


@dataclass
class ControlCell:
    student_id: str
    d_target: float
    achieved: list[float]
    oracle: list[float] | None
    failures: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.achieved)) if self.achieved else float("nan")

    @property
    def sd(self) -> float:
        return float(np.std(self.achieved)) if self.achieved else float("nan")


@dataclass
class ControlReport:
    cells: list[ControlCell]
    rmse: float
    oracle_rmse: float | None
    n_samples: int
    n_failures: int

    def target_means(self) -> dict[float, float]:
        by_t: dict[float, list[float]] = {}
        for c in self.cells:
            by_t.setdefault(c.d_target, []).extend(c.achieved)
        return {t: float(np.mean(v)) for t, v in sorted(by_t.items()) if v}


DEFAULT_TARGETS = tuple(round(0.1 * i, 1) for i in range(1, 10))


def control_sweep(kt: KT, qg: QG, students: Sequence[StudentHistory],
                  targets: Sequence[float] = DEFAULT_TARGETS, n_per: int = 30,
                  params: SamplingParams | None = None,
                  oracle_fn: Callable[[StudentHistory, Question], float] | None = None
                  ) -> ControlReport:
    """Generate n_per questions per (student, target); achieved difficulty is
    the KT score of each generated question for that same student. Failed
    generations are counted, never dropped silently."""
    params = params or SamplingParams()
    cells: list[ControlCell] = []
    sq_err: list[float] = []
    oracle_sq_err: list[float] = []
    counter = 0
    for state in students:
        for t in targets:
            achieved: list[float] = []
            oracle_vals: list[float] | None = [] if oracle_fn else None
            failures = 0
            for _ in range(n_per):
                counter += 1
                try:
                    q = generate(qg, state, t, params, sample_index=counter)
                except GenerationError:
                    failures += 1
                    continue
                a = predict_difficulty(kt, state, q).d
                achieved.append(a)
                sq_err.append((a - t) ** 2)
                if oracle_fn is not None:
                    o = oracle_fn(state, q)
                    oracle_vals.append(o)
                    oracle_sq_err.append((o - t) ** 2)
            cells.append(ControlCell(state.student_id, float(t), achieved,
                                     oracle_vals, failures))
    if not sq_err:
        raise EvalError("every generation failed; nothing to report")
    return ControlReport(
        cells,
        rmse=math.sqrt(float(np.mean(sq_err))),
        oracle_rmse=math.sqrt(float(np.mean(oracle_sq_err))) if oracle_sq_err else None,
        n_samples=len(sq_err),
        n_failures=sum(c.failures for c in cells),
    )


# ---------------------------------------------------------------------------
# novelty and fluency


def novelty_rate(generated: Sequence[Question], known: Sequence[Question] | set[str]
                 ) -> float:
    """Fraction of generations whose exact word sequence is not in `known`."""
    if isinstance(known, set):
        texts = known
    else:
        texts = {q.text for q in known}
    if not generated:
        raise EvalError("no generated questions")
    return sum(1 for q in generated if q.text not in texts) / len(generated)


def fluency_proxy(generated: Sequence[Question], world) -> float:
    """Fraction NOT producible by the world grammar (lower is better)."""
    if not generated:
        raise EvalError("no generated questions")
    return sum(1 for q in generated if not world.is_grammatical(q)) / len(generated)


# ---------------------------------------------------------------------------
# pool-selection vs generation benchmark


@dataclass
class PoolBenchRow:
    method: str            # "pool" or "generate"
    pool_size: int         # 0 for generation rows
    d_target: float
    rmse: float
    seconds: float
    failures: int = 0


@dataclass
class PoolBenchReport:
    rows: list[PoolBenchRow]
    hard_easy_gap: float | None = None  # mean hard-target minus easy-target RMSE


def pool_benchmark(kt: KT, qg: QG, state: StudentHistory,
                   d_targets: Sequence[float], pool_sizes: Sequence[int],
                   bank: Sequence[Question], k: int = 30, seed: int = 0,
                   params: SamplingParams | None = None) -> PoolBenchReport:
    """Rank-from-pool versus generate-to-order, at matched selection size k.

    Pools are nested prefixes of one seeded shuffle of the bank, so a bigger
    pool can only improve the best-k match for any target. Pool latency is
    the KT scoring pass; generation latency is the sampling loop.
    """
    sizes = list(pool_sizes)
    if any(b >= a for a, b in zip(sizes[1:], sizes)):
        raise EvalError("pool sizes must be strictly increasing")
    if sizes and sizes[0] < k:
        raise EvalError(f"smallest pool ({sizes[0]}) is below k={k}")
    if sizes and sizes[-1] > len(bank):
        raise EvalError(f"largest pool ({sizes[-1]}) exceeds bank size {len(bank)}")
    params = params or SamplingParams()
    order = np.random.default_rng([seed, 41]).permutation(len(bank))
    rows: list[PoolBenchRow] = []
    scores: np.ndarray | None = None
    for size in sizes:
        pool = [bank[int(i)] for i in order[:size]]
        preds, secs = predict_batch(kt, [(state, q) for q in pool])
        scores = np.array([p.d for p in preds])
        for t in d_targets:
            top = np.sort(np.abs(scores - t))[:k]
            rows.append(PoolBenchRow("pool", size, float(t),
                                     math.sqrt(float(np.mean(top ** 2))), secs))
    for ti, t in enumerate(d_targets):
        t0 = time.perf_counter()
        questions: list[Question] = []
        failures = 0
        for i in range(k):
            try:
                questions.append(generate(qg, state, float(t), params,
                                          sample_index=10_000 + ti * k + i))
            except GenerationError:
                failures += 1
        gen_secs = time.perf_counter() - t0
        if questions:
            preds, _ = predict_batch(kt, [(state, q) for q in questions])
            achieved = np.array([p.d for p in preds])
            rmse = math.sqrt(float(np.mean((achieved - t) ** 2)))
        else:
            rmse = float("nan")
        rows.append(PoolBenchRow("generate", 0, float(t), rmse, gen_secs, failures))
    if sizes:
        largest = [r for r in rows if r.method == "pool" and r.pool_size == sizes[-1]]
        hard = [r.rmse for r in largest if r.d_target < 0.5]
        easy = [r.rmse for r in largest if r.d_target >= 0.5]
        gap = (float(np.mean(hard)) - float(np.mean(easy))
               if hard and easy else None)
    else:
        gap = None
    return PoolBenchReport(rows, gap)
