"""Shared domain types: vocabularies, token sequences, distributions, hypotheses.

All log quantities throughout the package are natural logarithms, and a
probability of exactly zero is represented as ``-inf`` (never a large
negative sentinel).  Every type here is immutable after construction and
safe to share between concurrent workers.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

# Tolerance for accepting a vector as a normalized distribution (ingest check).
NORMALIZATION_TOL = 1e-6


class Combiner(str, enum.Enum):
    """Per-step score combination rule used by the decoder."""

    DIRECT = "direct"
    MULTIAVG = "multiavg"
    MAXENS = "maxens"
    LOGAVG = "logavg"


class LengthNorm(str, enum.Enum):
    NONE = "none"
    BY_LENGTH = "by_length"


def logsumexp(values: np.ndarray) -> float:
    """Stable log-sum-exp of a 1-D array; returns -inf for an all--inf input."""
    m = np.max(values)
    if m == -np.inf:
        return -math.inf
    return float(m + np.log(np.sum(np.exp(values - m))))


@dataclass(frozen=True)
class Vocab:
    """An ordered token inventory with a designated end-of-sequence id."""

    tokens: tuple[str, ...]
    eos_id: int
    bos_id: int | None = None

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab tokens must be unique")
        if not 0 <= self.eos_id < len(self.tokens):
            raise ValueError(f"eos_id {self.eos_id} out of range for size {len(self.tokens)}")
        if self.bos_id is not None and not 0 <= self.bos_id < len(self.tokens):
            raise ValueError(f"bos_id {self.bos_id} out of range")
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def size(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise KeyError(f"token {token!r} not in vocab") from None

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "eos_id": self.eos_id, "bos_id": self.bos_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(tokens=tuple(d["tokens"]), eos_id=d["eos_id"], bos_id=d.get("bos_id"))


@dataclass(frozen=True)
class TokenSeq:
    """An immutable sequence of token ids.

    Corpus-side sequences are bodies (no eos); decoder outputs are complete
    sequences carrying eos as their final token.
    """

    ids: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if any(i < 0 for i in self.ids):
            raise ValueError("token ids must be non-negative")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def validate_against(self, vocab: Vocab) -> None:
        for i in self.ids:
            if i >= vocab.size:
                raise ValueError(f"token id {i} out of range for vocab size {vocab.size}")

    def is_complete(self, eos_id: int) -> bool:
        """True iff the sequence ends with eos and contains it exactly once."""
        return bool(self.ids) and self.ids[-1] == eos_id and eos_id not in self.ids[:-1]

    def body(self, eos_id: int) -> "TokenSeq":
        """The sequence with a single trailing eos removed (if present)."""
        if self.ids and self.ids[-1] == eos_id:
            return TokenSeq(self.ids[:-1])
        return self

    def to_dict(self) -> dict:
        return {"ids": list(self.ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "TokenSeq":
        return cls(ids=tuple(d["ids"]))


def _freeze_array(values, length_name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{length_name} must be a 1-D vector")
    if np.any(np.isnan(arr)) or np.any(arr == np.inf):
        raise ValueError(f"{length_name} entries must be finite or -inf")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class StepDistribution:
    """A next-token log-probability vector over the full vocabulary.

    Normalization (log-sum-exp within ``NORMALIZATION_TOL`` of zero) is
    asserted on every construction path.
    """

    logprobs: np.ndarray

    def __post_init__(self) -> None:
        arr = _freeze_array(self.logprobs, "logprobs")
        lse = logsumexp(arr)
        if not abs(lse) <= NORMALIZATION_TOL:
            raise ValueError(f"distribution not normalized: log-sum-exp = {lse}")
        object.__setattr__(self, "logprobs", arr)

    @classmethod
    def from_probs(cls, probs) -> "StepDistribution":
        p = np.asarray(probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return cls(logprobs=np.log(p))

    @property
    def size(self) -> int:
        return int(self.logprobs.shape[0])

    def __eq__(self, other) -> bool:
        return isinstance(other, StepDistribution) and np.array_equal(
            self.logprobs, other.logprobs
        )

    def to_dict(self) -> dict:
        return {"logprobs": self.logprobs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StepDistribution":
        return cls(logprobs=np.asarray(d["logprobs"], dtype=np.float64))


@dataclass(frozen=True)
class CombinedStep:
    """Per-token log-scores after combining the pivot distributions.

    ``normalized`` is False for max-combined output, whose elementwise max of
    distributions generally sums above one.  ``provenance`` (max combination
    only) holds, per token, the index of the pivot achieving the maximum.
    """

    logscores: np.ndarray
    normalized: bool
    provenance: np.ndarray | None = None

    def __post_init__(self) -> None:
        arr = _freeze_array(self.logscores, "logscores")
        if self.normalized:
            lse = logsumexp(arr)
            if not abs(lse) <= NORMALIZATION_TOL:
                raise ValueError(f"normalized step not normalized: log-sum-exp = {lse}")
        object.__setattr__(self, "logscores", arr)
        if self.provenance is not None:
            prov = np.asarray(self.provenance, dtype=np.int64)
            if prov.shape != arr.shape:
                raise ValueError("provenance length must match logscores")
            prov = prov.copy()
            prov.setflags(write=False)
            object.__setattr__(self, "provenance", prov)

    @property
    def size(self) -> int:
        return int(self.logscores.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, CombinedStep):
            return False
        if self.normalized != other.normalized:
            return False
        if not np.array_equal(self.logscores, other.logscores):
            return False
        if (self.provenance is None) != (other.provenance is None):
            return False
        return self.provenance is None or np.array_equal(self.provenance, other.provenance)

    def to_dict(self) -> dict:
        return {
            "logscores": self.logscores.tolist(),
            "normalized": self.normalized,
            "provenance": None if self.provenance is None else self.provenance.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CombinedStep":
        prov = d.get("provenance")
        return cls(
            logscores=np.asarray(d["logscores"], dtype=np.float64),
            normalized=d["normalized"],
            provenance=None if prov is None else np.asarray(prov, dtype=np.int64),
        )


@dataclass(frozen=True)
class SourceSet:
    """The ordered conditioning sources (pivot translations) for one decode."""

    entries: tuple[tuple[str, TokenSeq], ...]

    def __post_init__(self) -> None:
        entries = tuple((str(lang), seq) for lang, seq in self.entries)
        if len(entries) < 1:
            raise ValueError("source set requires at least one entry")
        langs = [lang for lang, _ in entries]
        if len(set(langs)) != len(langs):
            raise ValueError("language codes must be unique within a source set")
        object.__setattr__(self, "entries", entries)

    @property
    def k(self) -> int:
        return len(self.entries)

    @property
    def langs(self) -> tuple[str, ...]:
        return tuple(lang for lang, _ in self.entries)

    def to_dict(self) -> dict:
        return {"entries": [{"lang": lang, "seq": seq.to_dict()} for lang, seq in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "SourceSet":
        return cls(
            entries=tuple(
                (e["lang"], TokenSeq.from_dict(e["seq"])) for e in d["entries"]
            )
        )


@dataclass(frozen=True)
class Hypothesis:
    """A (partial or complete) target sequence with its accumulated log-score.

    ``score`` is the plain sum of the chosen per-step log-scores, in step
    order, and is recomputable from a step trace to 1e-9 (bitwise, in fact,
    since the decoder accumulates with the same left-to-right addition).
    """

    tokens: TokenSeq
    score: float
    finished: bool
    per_step_provenance: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.per_step_provenance is not None:
            prov = tuple(int(p) for p in self.per_step_provenance)
            if len(prov) != len(self.tokens):
                raise ValueError("provenance must have one entry per token")
            object.__setattr__(self, "per_step_provenance", prov)

    def to_dict(self) -> dict:
        return {
            "tokens": self.tokens.to_dict(),
            "score": self.score,
            "finished": self.finished,
            "per_step_provenance": (
                None if self.per_step_provenance is None else list(self.per_step_provenance)
            ),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hypothesis":
        prov = d.get("per_step_provenance")
        return cls(
            tokens=TokenSeq.from_dict(d["tokens"]),
            score=d["score"],
            finished=d["finished"],
            per_step_provenance=None if prov is None else tuple(prov),
        )


@dataclass(frozen=True)
class DecodeParams:
    """Beam search configuration.

    Defaults: beam size 5 and raw (unnormalized) sum scoring, since the
    scoring rules are defined as plain sums of per-step log quantities.
    Length handling during search is deliberately a knob, not an assumption.
    """

    beam_size: int = 5
    max_len: int = 256
    combiner: Combiner = Combiner.DIRECT
    length_normalization: LengthNorm = LengthNorm.NONE

    def __post_init__(self) -> None:
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        object.__setattr__(self, "combiner", Combiner(self.combiner))
        object.__setattr__(
            self, "length_normalization", LengthNorm(self.length_normalization)
        )

    def to_dict(self) -> dict:
        return {
            "beam_size": self.beam_size,
            "max_len": self.max_len,
            "combiner": self.combiner.value,
            "length_normalization": self.length_normalization.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecodeParams":
        return cls(**d)


def recompute_score(hyp: Hypothesis, steps: Sequence[CombinedStep]) -> float:
    """Re-derive a hypothesis score as the sum of its per-step log-scores.

    ``steps`` must hold one combined step per generated token.
    """
    if len(steps) != len(hyp.tokens):
        raise ValueError(
            f"step count {len(steps)} does not match token count {len(hyp.tokens)}"
        )
    score = 0.0
    for step, tok in zip(steps, hyp.tokens):
        score = score + float(step.logscores[tok])
    return score


# ---------------------------------------------------------------------------
# JSONL sentence format
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SentenceRecord:
    """One corpus line: an id, a language code, and text and/or token ids.

    When both ``text`` and ``tokens`` are present, ``tokens`` takes
    precedence.
    """

    id: str
    lang: str
    text: str | None = None
    tokens: TokenSeq | None = None
    ref_of: str | None = field(default=None, compare=False)

    def token_seq(self, vocab: Vocab | None = None) -> TokenSeq:
        """Token ids for this sentence, tokenizing ``text`` on whitespace if needed."""
        if self.tokens is not None:
            return self.tokens
        if self.text is None:
            raise ValueError(f"sentence {self.id!r} has neither tokens nor text")
        if vocab is None:
            raise ValueError(f"sentence {self.id!r} is text-only and no vocab was given")
        return TokenSeq(tuple(vocab.index(w) for w in self.text.split()))

    def to_json(self) -> str:
        d: dict = {"id": self.id, "lang": self.lang}
        if self.text is not None:
            d["text"] = self.text
        if self.tokens is not None:
            d["tokens"] = list(self.tokens.ids)
        return json.dumps(d, ensure_ascii=False)


def parse_sentence_line(line: str) -> SentenceRecord:
    d = json.loads(line)
    tokens = d.get("tokens")
    return SentenceRecord(
        id=str(d["id"]),
        lang=str(d["lang"]),
        text=d.get("text"),
        tokens=None if tokens is None else TokenSeq(tuple(tokens)),
    )


def read_sentences(path) -> list[SentenceRecord]:
    """Read a JSONL sentence file (one object per line, blank lines skipped)."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(parse_sentence_line(line))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad sentence record: {exc}") from exc
    return records


def write_sentences(path, records: Iterable[SentenceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
