"""Beam search over a pluggable next-token scorer.

Each step issues one batched scorer call covering all (pivot x live beam)
prefixes, combines the K per-pivot distributions for every live hypothesis
with the configured rule, expands, and prunes.  All K distributions feeding
one combination are conditioned on the same target prefix; the batch
builder asserts this.

Search rules (declared here, not attributed to any external source):

* Finished hypotheses leave the active beam and enter a pool holding at
  most ``beam_size`` finished hypotheses.  Because every per-step log-score
  is non-positive, extending a hypothesis can only lower its raw score, so
  the search stops once the pool is full and the best active score cannot
  beat the worst pooled score.  It also stops when the beam empties or at
  ``max_len``.
* Score ties during pruning break by lower token id, then earlier insertion
  order of the parent hypothesis, for cross-platform reproducibility.
* If nothing finishes within ``max_len`` the best active hypotheses are
  returned flagged unfinished rather than silently truncated with eos.

Length normalization (``by_length``) divides by token count when ranking
the returned list only; pruning and early stopping always use raw sums.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .combiners import combine
from .core import (
    CombinedStep,
    Combiner,
    DecodeParams,
    Hypothesis,
    LengthNorm,
    SourceSet,
    TokenSeq,
)


class DecodeError(Exception):
    """Raised when decoding fails; carries the failing step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class StepQuery:
    """One scorer request: next-token distribution for (source, prefix)."""

    src_lang: str
    tgt_lang: str
    source: TokenSeq
    prefix: TokenSeq


@runtime_checkable
class Scorer(Protocol):
    """Provider of next-token distributions (a model, channel, or wire client).

    Implementations must be deterministic: identical queries return
    identical distributions within a session.  ``step_batch`` preserves
    query order.
    """

    @property
    def vocab_size(self) -> int: ...

    @property
    def eos_id(self) -> int: ...

    def step_batch(self, queries: Sequence[StepQuery]) -> list: ...


@dataclass(frozen=True)
class TraceStep:
    """One decoder step: the live prefixes scored and the expansions kept."""

    prefixes: tuple[tuple[int, ...], ...]
    base_scores: tuple[float, ...]
    combined: tuple[CombinedStep, ...]
    selected: tuple[tuple[int, int, float, bool], ...]  # (parent, token, score, finished)

    def to_dict(self) -> dict:
        return {
            "prefixes": [list(p) for p in self.prefixes],
            "base_scores": list(self.base_scores),
            "combined": [c.to_dict() for c in self.combined],
            "selected": [list(s) for s in self.selected],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceStep":
        return cls(
            prefixes=tuple(tuple(p) for p in d["prefixes"]),
            base_scores=tuple(d["base_scores"]),
            combined=tuple(CombinedStep.from_dict(c) for c in d["combined"]),
            selected=tuple((s[0], s[1], s[2], bool(s[3])) for s in d["selected"]),
        )


@dataclass(frozen=True)
class DecodeTrace:
    """Per-step record of a decode; replaying it reproduces the result exactly."""

    steps: tuple[TraceStep, ...]

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(s.to_dict()) for s in self.steps) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "DecodeTrace":
        steps = tuple(
            TraceStep.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()
        )
        return cls(steps=steps)


@dataclass
class DecodeResult:
    hypotheses: list[Hypothesis]
    trace: DecodeTrace | None = None


@dataclass
class _Beam:
    tokens: tuple[int, ...] = ()
    score: float = 0.0
    provenance: tuple[int, ...] = ()


def _finalize(
    live: list[_Beam], finished: list[_Beam], params: DecodeParams, want_prov: bool
) -> list[Hypothesis]:
    """Rank the finished pool (or, failing that, the live beam) for return."""
    pool = finished if finished else live
    done = bool(finished)

    def rank_key(b: _Beam):
        score = b.score
        if params.length_normalization == LengthNorm.BY_LENGTH and b.tokens:
            score = score / len(b.tokens)
        return (-score, b.tokens)

    return [
        Hypothesis(
            tokens=TokenSeq(b.tokens),
            score=b.score,
            finished=done,
            per_step_provenance=b.provenance if want_prov else None,
        )
        for b in sorted(pool, key=rank_key)[: params.beam_size]
    ]


def _select(
    live: list[_Beam],
    combined: list[CombinedStep],
    eos_id: int,
    beam_size: int,
) -> list[tuple[int, int, float, bool]]:
    """Pick the top ``beam_size`` expansions of the live beam.

    Returns (parent index, token, new score, finished) tuples in rank order,
    with ties broken by (lower token id, earlier parent insertion).
    Candidates with -inf scores are dropped: they can never participate in a
    returned hypothesis.
    """
    base = np.array([b.score for b in live], dtype=np.float64)
    mat = np.stack([c.logscores for c in combined])  # (B, V)
    total = (base[:, None] + mat).ravel()
    valid = np.flatnonzero(total > -np.inf)
    if valid.size == 0:
        return []
    vocab = mat.shape[1]
    tokens = valid % vocab
    parents = valid // vocab
    scores = total[valid]
    order = np.lexsort((parents, tokens, -scores))[:beam_size]
    return [
        (int(parents[i]), int(tokens[i]), float(scores[i]), int(tokens[i]) == eos_id)
        for i in order
    ]


def beam_search(
    sources: SourceSet,
    tgt_lang: str,
    scorer: Scorer,
    params: DecodeParams,
    return_trace: bool = False,
) -> DecodeResult:
    """Decode one target sequence conditioned on ``sources``.

    Returns up to ``beam_size`` finished hypotheses ranked by score (after
    optional length normalization), or the best unfinished hypotheses
    flagged ``finished=False`` when nothing completes within ``max_len``.
    """
    if params.combiner == Combiner.DIRECT and sources.k != 1:
        raise ValueError("direct scoring admits exactly one source")

    want_prov = params.combiner == Combiner.MAXENS
    live: list[_Beam] = [_Beam()]
    finished: list[_Beam] = []
    steps: list[TraceStep] = []

    for step_index in range(params.max_len):
        prefixes = [TokenSeq(b.tokens) for b in live]
        queries = [
            StepQuery(src_lang=lang, tgt_lang=tgt_lang, source=seq, prefix=prefix)
            for prefix in prefixes
            for lang, seq in sources.entries
        ]
        # Prefix-sharing contract: the K queries of one hypothesis share one prefix.
        assert all(
            queries[i * sources.k + j].prefix is prefixes[i]
            for i in range(len(live))
            for j in range(sources.k)
        )
        try:
            dists = scorer.step_batch(queries)
        except Exception as exc:
            raise DecodeError(f"scorer failed at step {step_index}: {exc}", step=step_index) from exc
        if len(dists) != len(queries):
            raise DecodeError(
                f"scorer returned {len(dists)} distributions for {len(queries)} queries",
                step=step_index,
            )

        combined = [
            combine(params.combiner, dists[i * sources.k : (i + 1) * sources.k])
            for i in range(len(live))
        ]
        selected = _select(live, combined, scorer.eos_id, params.beam_size)
        if not selected:
            # every expansion has zero probability; keep the current live
            # beam so callers still get best-effort unfinished hypotheses
            break

        if return_trace:
            steps.append(
                TraceStep(
                    prefixes=tuple(b.tokens for b in live),
                    base_scores=tuple(b.score for b in live),
                    combined=tuple(combined),
                    selected=tuple(selected),
                )
            )

        next_live: list[_Beam] = []
        for parent, token, score, is_eos in selected:
            prov = live[parent].provenance
            if want_prov:
                prov = prov + (int(combined[parent].provenance[token]),)
            beam = _Beam(tokens=live[parent].tokens + (token,), score=score, provenance=prov)
            if is_eos:
                finished.append(beam)
            else:
                next_live.append(beam)
        # Pool keeps the best beam_size finished, same tie rules as pruning.
        finished.sort(key=lambda b: (-b.score, b.tokens))
        del finished[params.beam_size :]
        live = next_live

        if not live:
            break
        if len(finished) >= params.beam_size:
            best_active = max(b.score for b in live)
            if best_active <= finished[-1].score:
                break

    return DecodeResult(
        hypotheses=_finalize(live, finished, params, want_prov),
        trace=DecodeTrace(tuple(steps)) if return_trace else None,
    )


def replay_trace(trace: DecodeTrace, eos_id: int, params: DecodeParams) -> list[Hypothesis]:
    """Reconstruct the decode outcome from a trace alone (no scorer).

    Used to verify that a serialized trace fully determines the returned
    hypotheses and scores.
    """
    want_prov = params.combiner == Combiner.MAXENS
    live: list[_Beam] = [_Beam()]
    finished: list[_Beam] = []
    for step in trace.steps:
        if tuple(b.tokens for b in live) != step.prefixes:
            raise ValueError("trace does not match replayed beam state")
        next_live: list[_Beam] = []
        for parent, token, score, is_eos in step.selected:
            prov = live[parent].provenance
            if want_prov:
                prov = prov + (int(step.combined[parent].provenance[token]),)
            recomputed = live[parent].score + float(step.combined[parent].logscores[token])
            if recomputed != score:
                raise ValueError("trace score mismatch during replay")
            beam = _Beam(tokens=live[parent].tokens + (token,), score=score, provenance=prov)
            (finished if is_eos else next_live).append(beam)
        finished.sort(key=lambda b: (-b.score, b.tokens))
        del finished[params.beam_size :]
        live = next_live
        if not live:
            break
        if len(finished) >= params.beam_size:
            if max(b.score for b in live) <= finished[-1].score:
                break

    return _finalize(live, finished, params, want_prov)


def score_fixed_sequence(
    seq: TokenSeq,
    sources: SourceSet,
    tgt_lang: str,
    scorer: Scorer,
    combiner: Combiner | str,
) -> float:
    """Force-decode a complete sequence and return its combined log-score.

    Matches ``beam_search``'s reported score for any hypothesis it returns
    (identical accumulation order).
    """
    combiner = Combiner(combiner)
    if combiner == Combiner.DIRECT and sources.k != 1:
        raise ValueError("direct scoring admits exactly one source")
    if not seq.is_complete(scorer.eos_id):
        raise ValueError("sequence must be complete (single trailing eos)")
    for t in seq.ids:
        if t >= scorer.vocab_size:
            raise ValueError(f"token id {t} out of vocab (size {scorer.vocab_size})")

    score = 0.0
    for i, token in enumerate(seq.ids):
        prefix = TokenSeq(seq.ids[:i])
        queries = [
            StepQuery(src_lang=lang, tgt_lang=tgt_lang, source=s, prefix=prefix)
            for lang, s in sources.entries
        ]
        try:
            dists = scorer.step_batch(queries)
        except Exception as exc:
            raise DecodeError(f"scorer failed at step {i}: {exc}", step=i) from exc
        step = combine(combiner, dists)
        score = score + float(step.logscores[token])
    return score
