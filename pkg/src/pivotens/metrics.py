"""Evaluation stack: chrF, corpus BLEU, hallucination estimators, bootstrap.

chrF follows the common reference-tool semantics: whitespace is stripped
before character n-gram extraction, an F-score is computed per n-gram order
from clipped precision/recall, and the per-order F-scores are
macro-averaged, skipping orders where neither side has any n-grams.  The
default beta of 3 weights recall three times precision.

BLEU is corpus-level BLEU-4 over caller-supplied tokens: clipped n-gram
precisions for n=1..4 with exponential smoothing for zero match counts
(the floor halves for every further zero order), a geometric mean over the
orders that have any hypothesis n-grams, and the standard brevity penalty
``exp(min(0, 1 - ref_len/hyp_len))``.  Feed it SentencePiece tokens and it
is spBLEU; anything else is BLEU under caller tokenization.

Hallucination estimators: the chrF-threshold proxy (proportion of
sentences under a threshold, default 20) and the top n-gram (TNG) flag for
oscillatory hallucinations, comparing the most-repeated n-gram counts of
hypothesis versus source with defaults n=4, t=2.

Significance: paired bootstrap resampling over sentence indices.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

_WHITESPACE = re.compile(r"\s+")

BLEU_ORDER = 4


@dataclass(frozen=True)
class ChrfParams:
    char_order: int = 6
    beta: float = 3.0
    strip_whitespace: bool = True

    def __post_init__(self) -> None:
        if self.char_order < 1:
            raise ValueError("char_order must be >= 1")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class TngParams:
    n: int = 4
    t: int = 2
    comparison: str = "difference"  # or "ratio"

    def __post_init__(self) -> None:
        if self.n < 1 or self.t < 1:
            raise ValueError("n and t must be >= 1")
        if self.comparison not in ("difference", "ratio"):
            raise ValueError(f"unknown comparison {self.comparison!r}")


def _char_ngrams(s: str, n: int) -> Counter:
    return Counter(s[i : i + n] for i in range(len(s) - n + 1))


def chrf(hyp: str, ref: str, params: ChrfParams = ChrfParams()) -> float:
    """Character n-gram F-score of a hypothesis against one reference, in [0, 100]."""
    if params.strip_whitespace:
        hyp = _WHITESPACE.sub("", hyp)
        ref = _WHITESPACE.sub("", ref)
    if not ref:
        raise ValueError("reference must be non-empty")
    beta_sq = params.beta**2
    f_scores = []
    for n in range(1, params.char_order + 1):
        hyp_ngrams = _char_ngrams(hyp, n)
        ref_ngrams = _char_ngrams(ref, n)
        hyp_total = sum(hyp_ngrams.values())
        ref_total = sum(ref_ngrams.values())
        if hyp_total == 0 and ref_total == 0:
            continue
        matched = sum((hyp_ngrams & ref_ngrams).values())
        precision = matched / hyp_total if hyp_total else 0.0
        recall = matched / ref_total if ref_total else 0.0
        if precision + recall == 0.0:
            f_scores.append(0.0)
        else:
            f_scores.append(
                (1 + beta_sq) * precision * recall / (beta_sq * precision + recall)
            )
    if not f_scores:
        return 0.0
    return 100.0 * sum(f_scores) / len(f_scores)


def _bleu_sentence_stats(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> list[int]:
    """Per-sentence sufficient statistics: clipped matches and totals per
    order, then hypothesis and reference lengths.  Corpus BLEU is a pure
    function of their sums, which is what makes bootstrap resampling cheap.
    """
    hyp = tuple(hyp)
    ref = tuple(ref)
    if not ref:
        raise ValueError("references must be non-empty")
    row: list[int] = []
    for n in range(1, BLEU_ORDER + 1):
        hyp_ngrams = Counter(hyp[i : i + n] for i in range(len(hyp) - n + 1))
        ref_ngrams = Counter(ref[i : i + n] for i in range(len(ref) - n + 1))
        row.append(sum((hyp_ngrams & ref_ngrams).values()))
        row.append(sum(hyp_ngrams.values()))
    row.append(len(hyp))
    row.append(len(ref))
    return row


def _bleu_from_totals(totals: Sequence[int]) -> float:
    hyp_len = totals[2 * BLEU_ORDER]
    ref_len = totals[2 * BLEU_ORDER + 1]
    if hyp_len == 0:
        return 0.0
    log_precisions = []
    smooth = 1.0
    for n in range(BLEU_ORDER):
        correct, total = totals[2 * n], totals[2 * n + 1]
        if total == 0:
            break  # orders beyond the longest hypothesis drop out of the mean
        if correct == 0:
            smooth *= 2.0
            log_precisions.append(math.log(1.0 / (smooth * total)))
        else:
            log_precisions.append(math.log(correct / total))
    if not log_precisions:
        return 0.0
    brevity = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return 100.0 * brevity * math.exp(sum(log_precisions) / len(log_precisions))


def bleu(
    hyps: Sequence[Sequence[Hashable]],
    refs: Sequence[Sequence[Hashable]],
) -> float:
    """Corpus BLEU-4 over token sequences, in [0, 100]."""
    if len(hyps) != len(refs):
        raise ValueError(f"hypothesis/reference length mismatch: {len(hyps)} != {len(refs)}")
    if not hyps:
        raise ValueError("empty corpus")
    stats = np.array([_bleu_sentence_stats(h, r) for h, r in zip(hyps, refs)], dtype=np.int64)
    return _bleu_from_totals(stats.sum(axis=0))


def hallucination_rate_chrf(
    pairs: Sequence[tuple[str, str]],
    threshold: float = 20.0,
    params: ChrfParams = ChrfParams(),
) -> float:
    """Percentage of (hyp, ref) pairs scoring below the chrF threshold."""
    if not pairs:
        raise ValueError("empty pair list")
    flagged = sum(1 for hyp, ref in pairs if chrf(hyp, ref, params) < threshold)
    return 100.0 * flagged / len(pairs)


def _top_ngram_count(tokens: Sequence[Hashable], n: int) -> int:
    tokens = tuple(tokens)
    if len(tokens) < n:
        return 0
    counts = Counter(tokens[i : i + n] for i in range(len(tokens) - n + 1))
    return max(counts.values())


def tng_flag(
    src: Sequence[Hashable],
    hyp: Sequence[Hashable],
    params: TngParams = TngParams(),
) -> bool:
    """Top n-gram oscillation flag: hypothesis repeats an n-gram far more than the source.

    Difference form: true iff the hypothesis's top n-gram count exceeds the
    source's by at least ``t``.  The ratio form (top counts' ratio >= t) is
    available via ``TngParams.comparison``.
    """
    c_hyp = _top_ngram_count(hyp, params.n)
    c_src = _top_ngram_count(src, params.n)
    if params.comparison == "difference":
        return c_hyp - c_src >= params.t
    return c_hyp >= params.t * max(c_src, 1)


def tng_rate(
    srcs: Sequence[Sequence[Hashable]],
    hyps: Sequence[Sequence[Hashable]],
    params: TngParams = TngParams(),
) -> float:
    """Percentage of sentences flagged by ``tng_flag``."""
    if len(srcs) != len(hyps):
        raise ValueError("source/hypothesis length mismatch")
    if not srcs:
        raise ValueError("empty corpus")
    flagged = sum(1 for s, h in zip(srcs, hyps) if tng_flag(s, h, params))
    return 100.0 * flagged / len(srcs)


@dataclass(frozen=True)
class BootstrapResult:
    winner: str | None  # "a", "b", or None for a full-set tie
    p_value: float
    significant: bool
    metric_a: float
    metric_b: float


def paired_bootstrap(
    metric: Callable[[Sequence, Sequence], float],
    sys_a: Sequence,
    sys_b: Sequence,
    refs: Sequence,
    resamples: int = 1000,
    alpha: float = 0.05,
    seed: int | None = None,
) -> BootstrapResult:
    """Paired bootstrap significance test between two systems.

    Draws ``resamples`` with-replacement index samples; the p-value is the
    fraction of samples where the apparent loser (on the full set) scores at
    least as well as the apparent winner.  Deterministic under a fixed seed.
    """
    if not (len(sys_a) == len(sys_b) == len(refs)):
        raise ValueError("system outputs and references must be aligned")
    if resamples < 100:
        raise ValueError("resamples must be >= 100")
    n = len(refs)
    if n == 0:
        raise ValueError("empty corpus")
    metric_a = metric(sys_a, refs)
    metric_b = metric(sys_b, refs)
    if metric_a == metric_b:
        return BootstrapResult(None, 1.0, False, metric_a, metric_b)
    winner = "a" if metric_a > metric_b else "b"
    win_sys, lose_sys = (sys_a, sys_b) if winner == "a" else (sys_b, sys_a)
    rng = np.random.default_rng(seed)
    if metric is bleu:
        # BLEU decomposes into summed per-sentence statistics; resampled
        # scores are computed from statistic sums instead of re-counting.
        win_stats = np.array(
            [_bleu_sentence_stats(h, r) for h, r in zip(win_sys, refs)], dtype=np.int64
        )
        lose_stats = np.array(
            [_bleu_sentence_stats(h, r) for h, r in zip(lose_sys, refs)], dtype=np.int64
        )

        def scores_at(idx):
            return (
                _bleu_from_totals(win_stats[idx].sum(axis=0)),
                _bleu_from_totals(lose_stats[idx].sum(axis=0)),
            )

    else:

        def scores_at(idx):
            sample_refs = [refs[i] for i in idx]
            return (
                metric([win_sys[i] for i in idx], sample_refs),
                metric([lose_sys[i] for i in idx], sample_refs),
            )

    losses = 0
    for _ in range(resamples):
        win_score, lose_score = scores_at(rng.integers(0, n, size=n))
        if lose_score >= win_score:
            losses += 1
    p_value = losses / resamples
    return BootstrapResult(winner, p_value, p_value < alpha, metric_a, metric_b)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class SystemScores:
    bleu: float
    chrf_hallucination_rate: float
    tng_hallucination_rate: float | None = None
    gt_hallucination_rate: float | None = None

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "chrf_hallucination_rate": self.chrf_hallucination_rate,
            "tng_hallucination_rate": self.tng_hallucination_rate,
            "gt_hallucination_rate": self.gt_hallucination_rate,
        }


@dataclass
class EvalReport:
    """Per-direction metric bundle across systems, with significance marks.

    ``marks`` is the set of systems not significantly outperformed by any
    other system (pairwise bootstrap on BLEU); it is never empty.
    """

    direction: tuple[str, str]
    systems: dict[str, SystemScores]
    marks: set[str] = field(default_factory=set)
    scored: int = 0
    failed: int = 0
    extras: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, scores in self.systems.items():
            for rate in (
                scores.bleu,
                scores.chrf_hallucination_rate,
                scores.tng_hallucination_rate,
                scores.gt_hallucination_rate,
            ):
                if rate is not None and not 0.0 <= rate <= 100.0:
                    raise ValueError(f"{name}: score {rate} outside [0, 100]")
        if self.systems and not self.marks:
            raise ValueError("significance marks must be non-empty")

    def to_dict(self) -> dict:
        return {
            "direction": {"src": self.direction[0], "tgt": self.direction[1]},
            "systems": {name: s.to_dict() for name, s in self.systems.items()},
            "not_significantly_outperformed": sorted(self.marks),
            "scored": self.scored,
            "failed": self.failed,
            "extras": self.extras,
        }


def compute_marks(
    outputs: dict[str, Sequence[Sequence[Hashable]]],
    refs: Sequence[Sequence[Hashable]],
    resamples: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
) -> set[str]:
    """Systems not significantly outperformed by any other system on BLEU."""
    names = list(outputs)
    beaten: set[str] = set()
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            pair_seed = seed * 100003 + i * 1009 + names.index(b)
            result = paired_bootstrap(
                bleu, outputs[a], outputs[b], refs,
                resamples=resamples, alpha=alpha, seed=pair_seed,
            )
            if result.significant:
                beaten.add(b if result.winner == "a" else a)
    return set(names) - beaten


def render_report_table(report: EvalReport, system_order: Sequence[str] | None = None) -> str:
    """Plain-text table in the familiar column-per-system layout.

    BLEU entries for the not-significantly-outperformed set are wrapped in
    asterisks (the plain-text stand-in for bold).
    """
    names = list(system_order) if system_order else sorted(report.systems)
    width = max(12, max((len(n) for n in names), default=12) + 2)
    src, tgt = report.direction
    lines = [
        f"direction: {src}-{tgt}   (scored {report.scored}, failed {report.failed})",
        "metric".ljust(24) + "".join(n.rjust(width) for n in names),
    ]

    def row(label: str, fmt: Callable[[str], str]) -> str:
        return label.ljust(24) + "".join(fmt(n).rjust(width) for n in names)

    def bleu_cell(name: str) -> str:
        value = f"{report.systems[name].bleu:.2f}"
        return f"*{value}*" if name in report.marks else value

    lines.append(row("bleu", bleu_cell))
    lines.append(
        row("chrf_hallucination_%", lambda n: f"{report.systems[n].chrf_hallucination_rate:.2f}")
    )
    if any(s.tng_hallucination_rate is not None for s in report.systems.values()):
        lines.append(
            row(
                "tng_hallucination_%",
                lambda n: (
                    "-"
                    if report.systems[n].tng_hallucination_rate is None
                    else f"{report.systems[n].tng_hallucination_rate:.2f}"
                ),
            )
        )
    if any(s.gt_hallucination_rate is not None for s in report.systems.values()):
        lines.append(
            row(
                "gt_hallucination_%",
                lambda n: (
                    "-"
                    if report.systems[n].gt_hallucination_rate is None
                    else f"{report.systems[n].gt_hallucination_rate:.2f}"
                ),
            )
        )
    return "\n".join(lines) + "\n"
