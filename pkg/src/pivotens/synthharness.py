"""Synthetic cipher-language translation tasks with a hallucination attractor.

Languages are permutations of a shared base vocabulary, so every
translation direction has an exact reference (the cipher image of the
source).  Channels emit per-position next-token distributions with a
configurable fidelity (mass on the correct token) and confusion model for
the remainder, which makes decodes deterministic, exhaustively checkable,
and free of sampled history: a channel's emission depends only on the
source and the prefix length.

Hallucinations are modeled with a shared *attractor*: a fixed target-side
sequence over reserved tokens that never occur in real sources.  A
per-sentence trigger (hashed from the base sentence, hence identical for
every path) puts the channel into hallucination mode, where the attractor
token is moderately probable and the correct token gets no mass at all.
That is the stickiness mechanism: one confident honest pivot still knows
the right answer, so a per-token maximum follows it, while averaging lets
the attractor mass accumulated across the other paths win.

Ground-truth hallucination labels come for free: a decode of a triggered
sentence whose body is dominated by reserved attractor tokens is a
hallucination by construction.  This also lets the chrF-threshold proxy be
calibrated against truth, which real benchmarks cannot do.

The default regime constants (trigger probability 0.3, attractor
confidence 0.45, honest-pivot fidelity 0.9 with a 0.91 first step, other
pivots 0.35, hallucinating paths opening at first-step confidence
0.15/0.14) are harness calibration values chosen so that the gap between
max- and mean-combination flips outcomes on triggered sentences.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import (
    Combiner,
    DecodeParams,
    SentenceRecord,
    StepDistribution,
    TokenSeq,
    Vocab,
)
from .decoder import StepQuery

try:  # Python >= 3.11
    import tomllib as _toml

    def _load_toml(path) -> dict:
        with open(path, "rb") as fh:
            return _toml.load(fh)

except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import toml as _toml

    def _load_toml(path) -> dict:
        return _toml.load(path)


HONEST = "honest"
TRIGGERED = "triggered"

# Emission beyond the end of the channel's own sequence: strongly eos.
BEYOND_END_EOS_CONF = 0.98


def _hash_unit(*parts) -> float:
    """Deterministic uniform draw in [0, 1) from arbitrary key parts."""
    digest = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def _hash_choice(n: int, *parts) -> int:
    return int(_hash_unit(*parts) * n)


# ---------------------------------------------------------------------------
# Languages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CipherLanguage:
    """A language realized as a bijection over the shared base vocabulary.

    Reserved ids (eos and attractor tokens) are fixed points; content ids
    are permuted.
    """

    code: str
    mapping: tuple[int, ...]

    def __post_init__(self) -> None:
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise ValueError("mapping must be a permutation of 0..V-1")
        inverse = [0] * len(self.mapping)
        for i, m in enumerate(self.mapping):
            inverse[m] = i
        object.__setattr__(self, "mapping", tuple(self.mapping))
        object.__setattr__(self, "_inverse", tuple(inverse))

    def encipher(self, seq: TokenSeq) -> TokenSeq:
        return TokenSeq(tuple(self.mapping[i] for i in seq.ids))

    def decipher(self, seq: TokenSeq) -> TokenSeq:
        inverse = getattr(self, "_inverse")
        return TokenSeq(tuple(inverse[i] for i in seq.ids))


def make_language(code: str, vocab_size: int, reserved: Sequence[int], seed: int) -> CipherLanguage:
    """Generate a cipher language whose permutation fixes the reserved ids."""
    reserved_set = set(reserved)
    content = [i for i in range(vocab_size) if i not in reserved_set]
    rng = np.random.default_rng([seed, _hash_choice(2**31, "lang", code)])
    shuffled = list(np.array(content)[rng.permutation(len(content))])
    mapping = list(range(vocab_size))
    for src, dst in zip(content, shuffled):
        mapping[src] = int(dst)
    return CipherLanguage(code=code, mapping=tuple(mapping))


# ---------------------------------------------------------------------------
# Channels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionSpec:
    """How a channel spreads the non-fidelity remainder over wrong tokens.

    The default is uniform over every token other than the emission target.
    ``exclude_eos`` keeps early stopping implausible (real translators
    rarely emit instant eos); ``exclude_correct`` models a detached
    (hallucinating) path that assigns the correct token no mass at all.
    With ``confusable_prob``, a per-position hashed draw concentrates
    ``confusable_share`` of the remainder on one random wrong token,
    modeling position-level mistranslations that are independent across
    channels.
    """

    exclude_eos: bool = False
    exclude_correct: bool = False
    confusable_prob: float = 0.0
    confusable_share: float = 0.8

    def __post_init__(self) -> None:
        if not 0.0 <= self.confusable_prob <= 1.0:
            raise ValueError("confusable_prob must be in [0, 1]")
        if not 0.0 < self.confusable_share <= 1.0:
            raise ValueError("confusable_share must be in (0, 1]")


@dataclass(frozen=True)
class AttractorConfig:
    """The shared hallucination: a fixed complete target-side sequence.

    ``trigger_prob`` is the per-sentence probability of hallucination mode;
    ``attractor_conf`` the per-step probability of the attractor token while
    in that mode.  ``first_step_conf`` optionally overrides the opening
    step, and ``lock_conf`` applies from the attractor's own eos onward: it
    must end the averaged path decisively, yet stay far enough below the
    honest fidelity that the per-token maximum never finds an early eos
    worth its raw-sum cost.
    """

    attractor_seq: TokenSeq
    trigger_prob: float
    attractor_conf: float
    first_step_conf: float | None = None
    lock_conf: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.trigger_prob <= 1.0:
            raise ValueError("trigger_prob must be in [0, 1]")
        for name in ("attractor_conf", "lock_conf"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must be in (0, 1)")
        if self.first_step_conf is not None and not 0.0 < self.first_step_conf < 1.0:
            raise ValueError("first_step_conf must be in (0, 1)")


@dataclass(frozen=True)
class ChannelModel:
    """A synthetic noisy translator for one language pair."""

    src_lang: CipherLanguage
    tgt_lang: CipherLanguage
    vocab: Vocab
    fidelity: float
    confusion: ConfusionSpec = ConfusionSpec()
    attractor: AttractorConfig | None = None
    first_step_fidelity: float | None = None
    noise_key: str = ""

    def __post_init__(self) -> None:
        if not 0.0 < self.fidelity <= 1.0:
            raise ValueError("fidelity must be in (0, 1]")
        if self.first_step_fidelity is not None and not 0.0 < self.first_step_fidelity <= 1.0:
            raise ValueError("first_step_fidelity must be in (0, 1]")


def channel_step(
    channel: ChannelModel,
    source: TokenSeq,
    prefix: TokenSeq,
    mode: str = HONEST,
) -> StepDistribution:
    """Next-token distribution of a channel at the current prefix position.

    Honest mode places the channel's fidelity mass on the correct next
    ciphered token; triggered mode places the attractor confidence on the
    next attractor token (and none on the correct token when the confusion
    spec says so).  The remainder spreads per the confusion spec.  Queries
    past the end of the channel's sequence emit an eos-dominated
    distribution.
    """
    if mode not in (HONEST, TRIGGERED):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == TRIGGERED and channel.attractor is None:
        raise ValueError("triggered mode requires an attractor config")

    vocab = channel.vocab
    pos = len(prefix)
    base = channel.src_lang.decipher(source)
    image = channel.tgt_lang.encipher(base)

    if pos < len(image):
        correct = image.ids[pos]
    else:
        correct = vocab.eos_id

    if mode == HONEST:
        target = correct
        if pos > len(image):
            conf = BEYOND_END_EOS_CONF
        elif pos == 0 and channel.first_step_fidelity is not None:
            conf = channel.first_step_fidelity
        else:
            conf = channel.fidelity
    else:
        att = channel.attractor
        attr_ids = att.attractor_seq.ids
        if pos < len(attr_ids):
            target = attr_ids[pos]
            if pos == 0 and att.first_step_conf is not None:
                conf = att.first_step_conf
            elif pos == len(attr_ids) - 1:
                conf = att.lock_conf
            else:
                conf = att.attractor_conf
        else:
            target = vocab.eos_id
            conf = att.lock_conf

    spec = channel.confusion
    support = [
        i
        for i in range(vocab.size)
        if i != target
        and not (spec.exclude_eos and i == vocab.eos_id)
        and not (spec.exclude_correct and i == correct)
    ]

    probs = np.zeros(vocab.size)
    if not support:
        probs[target] = 1.0
        return StepDistribution.from_probs(probs)
    probs[target] = conf
    remainder = 1.0 - conf
    if remainder > 0.0:
        draw_key = (channel.noise_key, "confusable", base.ids, pos)
        if spec.confusable_prob > 0.0 and _hash_unit(*draw_key) < spec.confusable_prob:
            confusable = support[_hash_choice(len(support), channel.noise_key, "pick", base.ids, pos)]
            if len(support) == 1:
                probs[confusable] += remainder
            else:
                probs[confusable] += remainder * spec.confusable_share
                rest = remainder * (1.0 - spec.confusable_share) / (len(support) - 1)
                for i in support:
                    if i != confusable:
                        probs[i] += rest
        else:
            share = remainder / len(support)
            for i in support:
                probs[i] += share
    return StepDistribution.from_probs(probs)


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """A complete synthetic study: task shape, channel regime, decoding."""

    vocab_content_size: int = 12
    sentence_len_min: int = 6
    sentence_len_max: int = 8
    corpus_size: int = 500
    seed: int = 13
    src_lang: str = "srl"
    tgt_lang: str = "tgl"
    pivot_langs: tuple[str, ...] = ("pva", "pvb", "pvc")

    trigger_prob: float = 0.3
    attractor_len: int = 4
    attractor_conf: float = 0.45
    attractor_first_step_confs: tuple[float, ...] = (0.15, 0.14)
    attractor_lock_conf: float = 0.5

    honest_fidelity: float = 0.9
    honest_first_step_fidelity: float | None = 0.91
    low_fidelity: float = 0.35
    low_confusable_prob: float = 0.15
    low_confusable_share: float = 0.8
    direct_fidelity: float = 0.45
    direct_confusable_prob: float = 0.25
    direct_confusable_share: float = 0.9
    pivot_stage_fidelity: float = 1.0

    chrf_hallucination_threshold: float = 20.0
    gt_attractor_fraction: float = 0.5
    beam_size: int = 5
    max_len: int = 0  # 0 = sentence_len_max + attractor_len + 4
    bootstrap_resamples: int = 1000
    alpha: float = 0.05

    def __post_init__(self) -> None:
        if self.vocab_content_size < 2:
            raise ValueError("vocab_content_size must be >= 2")
        if self.corpus_size < 1:
            raise ValueError("corpus_size must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not 1 <= self.sentence_len_min <= self.sentence_len_max:
            raise ValueError("bad sentence length range")
        if len(self.pivot_langs) < 1:
            raise ValueError("at least one pivot language is required")
        object.__setattr__(self, "pivot_langs", tuple(self.pivot_langs))
        object.__setattr__(
            self, "attractor_first_step_confs", tuple(self.attractor_first_step_confs)
        )

    @property
    def effective_max_len(self) -> int:
        if self.max_len > 0:
            return self.max_len
        return self.sentence_len_max + self.attractor_len + 4

    def decode_params(self, combiner: Combiner) -> DecodeParams:
        return DecodeParams(
            beam_size=self.beam_size, max_len=self.effective_max_len, combiner=combiner
        )

    @classmethod
    def noiseless(cls, **overrides) -> "ExperimentConfig":
        """A deterministic-cipher preset: every channel is exact, nothing triggers."""
        base = dict(
            trigger_prob=0.0,
            honest_fidelity=1.0,
            honest_first_step_fidelity=None,
            low_fidelity=1.0,
            low_confusable_prob=0.0,
            direct_fidelity=1.0,
            direct_confusable_prob=0.0,
            pivot_stage_fidelity=1.0,
        )
        base.update(overrides)
        return cls(**base)


def load_experiment_config(path) -> ExperimentConfig:
    """Load an ExperimentConfig from a TOML document (flat key = field)."""
    data = _load_toml(path)
    known = {f.name for f in ExperimentConfig.__dataclass_fields__.values()}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
    for key in ("pivot_langs", "attractor_first_step_confs"):
        if key in data:
            data[key] = tuple(data[key])
    return ExperimentConfig(**data)


# ---------------------------------------------------------------------------
# Task construction
# ---------------------------------------------------------------------------

_CONTENT_CONSONANTS = "bcdfghjklm"
_CONTENT_VOWELS = "aei"
_RESERVED_CONSONANTS = "npqrstvwxz"
_RESERVED_VOWELS = "ouy"


def _word(index: int, consonants: str, vowels: str) -> str:
    syllables = []
    for _ in range(2):
        index, c = divmod(index, len(consonants))
        index, v = divmod(index, len(vowels))
        syllables.append(consonants[c] + vowels[v])
    return "".join(syllables)


def build_vocab(content_size: int, attractor_len: int) -> Vocab:
    """eos at id 0, content ids 1..V, reserved attractor ids after.

    Content and attractor surface forms use disjoint alphabets, so a pure
    attractor output shares no characters with any real reference; the
    chrF proxy threshold therefore transfers cleanly to this task.
    """
    tokens = ["</s>"]
    tokens += [_word(i, _CONTENT_CONSONANTS, _CONTENT_VOWELS) for i in range(content_size)]
    tokens += [_word(i, _RESERVED_CONSONANTS, _RESERVED_VOWELS) for i in range(attractor_len)]
    return Vocab(tokens=tuple(tokens), eos_id=0)


@dataclass(frozen=True)
class SynthSentence:
    id: str
    base: TokenSeq  # body in base-concept space (content ids only)
    triggered: bool
    designated_pivot: int


@dataclass
class SynthTask:
    """A built synthetic task: vocabulary, languages, channels, corpus."""

    config: ExperimentConfig
    vocab: Vocab
    languages: dict[str, CipherLanguage]
    corpus: list[SynthSentence]
    attractor_seq: TokenSeq  # complete, target-side
    attractor_ids: frozenset[int]

    def language(self, code: str) -> CipherLanguage:
        return self.languages[code]

    def render_text(self, seq: TokenSeq) -> str:
        body = seq.body(self.vocab.eos_id)
        return " ".join(self.vocab.tokens[i] for i in body.ids)

    def source_seq(self, sentence: SynthSentence) -> TokenSeq:
        return self.languages[self.config.src_lang].encipher(sentence.base)

    def reference_seq(self, sentence: SynthSentence) -> TokenSeq:
        return self.languages[self.config.tgt_lang].encipher(sentence.base)

    def is_triggered(self, base: TokenSeq) -> bool:
        return _hash_unit(self.config.seed, "trigger", base.ids) < self.config.trigger_prob

    def designated_pivot(self, base: TokenSeq) -> int:
        return _hash_choice(len(self.config.pivot_langs), self.config.seed, "designate", base.ids)

    def is_gt_hallucination(self, sentence: SynthSentence, decoded: TokenSeq) -> bool:
        """Ground truth by construction: a triggered sentence decoded into the attractor.

        Flagged when at least ``gt_attractor_fraction`` of the decoded body
        consists of reserved attractor tokens (which never occur in real
        sources or references).
        """
        if not sentence.triggered:
            return False
        body = decoded.body(self.vocab.eos_id)
        if not body.ids:
            return False
        hits = sum(1 for i in body.ids if i in self.attractor_ids)
        return hits / len(body.ids) >= self.config.gt_attractor_fraction

    def source_records(self) -> list[SentenceRecord]:
        return [
            SentenceRecord(
                id=s.id,
                lang=self.config.src_lang,
                text=self.render_text(self.source_seq(s)),
                tokens=self.source_seq(s),
            )
            for s in self.corpus
        ]

    def reference_records(self) -> list[SentenceRecord]:
        return [
            SentenceRecord(
                id=s.id,
                lang=self.config.tgt_lang,
                text=self.render_text(self.reference_seq(s)),
                tokens=self.reference_seq(s),
            )
            for s in self.corpus
        ]

    def scorer(self) -> "SyntheticScorer":
        return SyntheticScorer(self)


def build_task(config: ExperimentConfig) -> SynthTask:
    """Deterministically construct the task for a config (same seed, same bytes)."""
    vocab = build_vocab(config.vocab_content_size, config.attractor_len)
    reserved = [vocab.eos_id] + list(
        range(1 + config.vocab_content_size, vocab.size)
    )
    lang_codes = [config.src_lang, config.tgt_lang, *config.pivot_langs]
    if len(set(lang_codes)) != len(lang_codes):
        raise ValueError("language codes must be distinct")
    languages = {
        code: make_language(code, vocab.size, reserved, config.seed) for code in lang_codes
    }
    attractor_body = tuple(range(1 + config.vocab_content_size, vocab.size))
    attractor_seq = TokenSeq(attractor_body + (vocab.eos_id,))

    corpus = []
    content_ids = np.arange(1, 1 + config.vocab_content_size)
    for index in range(config.corpus_size):
        rng = np.random.default_rng([config.seed, index])
        length = int(
            rng.integers(config.sentence_len_min, config.sentence_len_max + 1)
        )
        base = TokenSeq(tuple(int(i) for i in rng.choice(content_ids, size=length)))
        corpus.append(
            SynthSentence(
                id=f"s{index:05d}",
                base=base,
                triggered=_hash_unit(config.seed, "trigger", base.ids) < config.trigger_prob,
                designated_pivot=_hash_choice(
                    len(config.pivot_langs), config.seed, "designate", base.ids
                ),
            )
        )
    return SynthTask(
        config=config,
        vocab=vocab,
        languages=languages,
        corpus=corpus,
        attractor_seq=attractor_seq,
        attractor_ids=frozenset(attractor_body),
    )


# ---------------------------------------------------------------------------
# Scorer
# ---------------------------------------------------------------------------


class SyntheticScorer:
    """Realizes the scorer contract over a task's channel models.

    Per query, the channel and mode are resolved from the base sentence:
    the designated pivot's path stays honest and confident; on triggered
    sentences every other path (including direct) hallucinates toward the
    shared attractor.  All randomness is hashed from (seed, base sentence,
    position), so the scorer is stateless and deterministic.
    """

    def __init__(self, task: SynthTask):
        self.task = task
        cfg = task.config
        vocab = task.vocab
        langs = task.languages

        def attractor(first_conf: float | None) -> AttractorConfig:
            return AttractorConfig(
                attractor_seq=task.attractor_seq,
                trigger_prob=cfg.trigger_prob,
                attractor_conf=cfg.attractor_conf,
                first_step_conf=first_conf,
                lock_conf=cfg.attractor_lock_conf,
            )

        sticky = ConfusionSpec(exclude_eos=True, exclude_correct=True)
        low_confusion = ConfusionSpec(
            exclude_eos=True,
            confusable_prob=cfg.low_confusable_prob,
            confusable_share=cfg.low_confusable_share,
        )
        direct_confusion = ConfusionSpec(
            exclude_eos=True,
            confusable_prob=cfg.direct_confusable_prob,
            confusable_share=cfg.direct_confusable_share,
        )

        self._direct = ChannelModel(
            src_lang=langs[cfg.src_lang],
            tgt_lang=langs[cfg.tgt_lang],
            vocab=vocab,
            fidelity=cfg.direct_fidelity,
            confusion=direct_confusion,
            attractor=attractor(None),
            noise_key=f"{cfg.seed}:direct",
        )
        self._direct_triggered = replace(self._direct, confusion=sticky)
        self._pivot_production = {}
        self._honest = {}
        self._low = {}
        self._low_triggered = {}
        confs = cfg.attractor_first_step_confs
        for k, code in enumerate(cfg.pivot_langs):
            self._pivot_production[code] = ChannelModel(
                src_lang=langs[cfg.src_lang],
                tgt_lang=langs[code],
                vocab=vocab,
                fidelity=cfg.pivot_stage_fidelity,
                confusion=ConfusionSpec(exclude_eos=True),
                noise_key=f"{cfg.seed}:prod:{code}",
            )
            self._honest[code] = ChannelModel(
                src_lang=langs[code],
                tgt_lang=langs[cfg.tgt_lang],
                vocab=vocab,
                fidelity=cfg.honest_fidelity,
                first_step_fidelity=cfg.honest_first_step_fidelity,
                confusion=ConfusionSpec(exclude_eos=True),
                noise_key=f"{cfg.seed}:honest:{code}",
            )
            self._low[code] = ChannelModel(
                src_lang=langs[code],
                tgt_lang=langs[cfg.tgt_lang],
                vocab=vocab,
                fidelity=cfg.low_fidelity,
                confusion=low_confusion,
                noise_key=f"{cfg.seed}:low:{code}",
            )
            # One triggered variant per rank among the non-designated pivots,
            # so the opening-step confidences land in a fixed order.
            self._low_triggered[code] = tuple(
                ChannelModel(
                    src_lang=langs[code],
                    tgt_lang=langs[cfg.tgt_lang],
                    vocab=vocab,
                    fidelity=cfg.low_fidelity,
                    confusion=sticky,
                    attractor=attractor(
                        confs[rank % len(confs)] if confs else None
                    ),
                    noise_key=f"{cfg.seed}:low:{code}",
                )
                for rank in range(max(1, len(cfg.pivot_langs) - 1))
            )

    @property
    def vocab_size(self) -> int:
        return self.task.vocab.size

    @property
    def eos_id(self) -> int:
        return self.task.vocab.eos_id

    def _resolve(self, query: StepQuery) -> tuple[ChannelModel, str]:
        cfg = self.task.config
        src, tgt = query.src_lang, query.tgt_lang
        if src == cfg.src_lang and tgt == cfg.tgt_lang:
            base = self.task.languages[src].decipher(query.source)
            if self.task.is_triggered(base):
                return self._direct_triggered, TRIGGERED
            return self._direct, HONEST
        if src == cfg.src_lang and tgt in self._pivot_production:
            return self._pivot_production[tgt], HONEST
        if src in self._low and tgt == cfg.tgt_lang:
            base = self.task.languages[src].decipher(query.source)
            pivot_index = cfg.pivot_langs.index(src)
            designated = self.task.designated_pivot(base)
            if pivot_index == designated:
                return self._honest[src], HONEST
            if self.task.is_triggered(base):
                rank = sum(
                    1 for j in range(pivot_index) if j != designated
                )
                variants = self._low_triggered[src]
                return variants[rank % len(variants)], TRIGGERED
            return self._low[src], HONEST
        raise ValueError(f"no channel for language pair {src}->{tgt}")

    def step_batch(self, queries: Sequence[StepQuery]) -> list[StepDistribution]:
        out = []
        for q in queries:
            channel, mode = self._resolve(q)
            out.append(channel_step(channel, q.source, q.prefix, mode))
        return out


# ---------------------------------------------------------------------------
# Experiment driver
# ---------------------------------------------------------------------------


@dataclass
class SentenceOutcome:
    id: str
    triggered: bool
    designated_pivot: int
    outputs: dict[str, TokenSeq]  # strategy -> complete decoded sequence
    scores: dict[str, float]
    gt_flags: dict[str, bool]
    provenance: dict[str, tuple[int, ...] | None]


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    report: "EvalReport"
    sentences: list[SentenceOutcome]
    failures: list[dict]
    confident_pivot_agreement: float | None

    def to_dict(self) -> dict:
        return {
            "report": self.report.to_dict(),
            "failures": self.failures,
            "confident_pivot_agreement": self.confident_pivot_agreement,
            "triggered_sentences": sum(1 for s in self.sentences if s.triggered),
            "corpus_size": len(self.sentences) + len(self.failures),
        }

    def dump_sentences_jsonl(self, path, task: SynthTask) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.sentences:
                fh.write(
                    json.dumps(
                        {
                            "id": s.id,
                            "triggered": s.triggered,
                            "designated_pivot": s.designated_pivot,
                            "outputs": {
                                name: {
                                    "tokens": list(seq.ids),
                                    "text": task.render_text(seq),
                                    "score": s.scores[name],
                                    "gt_hallucination": s.gt_flags[name],
                                    "provenance": (
                                        None
                                        if s.provenance[name] is None
                                        else list(s.provenance[name])
                                    ),
                                }
                                for name, seq in s.outputs.items()
                            },
                        }
                    )
                    + "\n"
                )


_STRATEGY_COMBINERS = {
    "direct": Combiner.DIRECT,
    "multiavg": Combiner.MULTIAVG,
    "maxens": Combiner.MAXENS,
    "logavg": Combiner.LOGAVG,
}


def run_experiment(
    config: ExperimentConfig,
    strategies: Sequence[str] | None = None,
    include_logavg: bool = False,
) -> ExperimentReport:
    """Run the full synthetic study and report per-strategy metrics.

    Default strategy set mirrors the familiar four-column layout: direct,
    multiavg, maxens, and the first pivot as the single-pivot baseline.
    Deterministic under the config seed.
    """
    from . import pipeline  # local import to avoid a module cycle
    from .metrics import EvalReport

    task = build_task(config)
    scorer = task.scorer()
    first_pivot = config.pivot_langs[0]
    if strategies is None:
        strategies = ["direct", "multiavg", "maxens", f"pivot:{first_pivot}"]
        if include_logavg:
            strategies.insert(3, "logavg")

    run_configs = {name: _strategy_config(config, name) for name in strategies}
    # Per-pivot single decodes back the confident-pivot agreement check.
    pivot_single = {
        code: _strategy_config(config, f"pivot:{code}") for code in config.pivot_langs
    }

    outcomes: list[SentenceOutcome] = []
    failures: list[dict] = []
    agree = 0
    triggered_total = 0
    for sentence in task.corpus:
        src_seq = task.source_seq(sentence)
        outputs: dict[str, TokenSeq] = {}
        scores: dict[str, float] = {}
        gt_flags: dict[str, bool] = {}
        provenance: dict[str, tuple[int, ...] | None] = {}
        try:
            for name, rc in run_configs.items():
                result = pipeline.translate_sentence(src_seq, rc, scorer)
                hyp = result.hypothesis
                outputs[name] = hyp.tokens
                scores[name] = hyp.score
                gt_flags[name] = task.is_gt_hallucination(sentence, hyp.tokens)
                provenance[name] = hyp.per_step_provenance
            if sentence.triggered:
                triggered_total += 1
                designated_code = config.pivot_langs[sentence.designated_pivot]
                single = pipeline.translate_sentence(
                    src_seq, pivot_single[designated_code], scorer
                )
                if "maxens" in outputs and outputs["maxens"].ids == single.hypothesis.tokens.ids:
                    agree += 1
        except pipeline.PipelineError as exc:
            failures.append({"id": sentence.id, "stage": exc.stage, "error": str(exc)})
            continue
        outcomes.append(
            SentenceOutcome(
                id=sentence.id,
                triggered=sentence.triggered,
                designated_pivot=sentence.designated_pivot,
                outputs=outputs,
                scores=scores,
                gt_flags=gt_flags,
                provenance=provenance,
            )
        )

    if not outcomes:
        raise ValueError("every sentence failed; nothing to report")

    from .metrics import SystemScores, compute_marks, hallucination_rate_chrf, bleu, tng_rate

    outcomes.sort(key=lambda s: s.id)
    by_id = {s.id: s for s in outcomes}
    scored_sentences = [s for s in task.corpus if s.id in by_id]
    refs_tokens = [task.reference_seq(s).ids for s in scored_sentences]
    refs_text = [task.render_text(task.reference_seq(s)) for s in scored_sentences]
    srcs_tokens = [task.source_seq(s).ids for s in scored_sentences]

    systems: dict[str, SystemScores] = {}
    outputs_by_strategy: dict[str, list[tuple[int, ...]]] = {}
    eos = task.vocab.eos_id
    for name in strategies:
        bodies = [by_id[s.id].outputs[name].body(eos).ids for s in scored_sentences]
        texts = [task.render_text(by_id[s.id].outputs[name]) for s in scored_sentences]
        outputs_by_strategy[name] = bodies
        systems[name] = SystemScores(
            bleu=bleu(bodies, refs_tokens),
            chrf_hallucination_rate=hallucination_rate_chrf(
                list(zip(texts, refs_text)), threshold=config.chrf_hallucination_threshold
            ),
            tng_hallucination_rate=tng_rate(srcs_tokens, bodies),
            gt_hallucination_rate=100.0
            * sum(by_id[s.id].gt_flags[name] for s in scored_sentences)
            / len(scored_sentences),
        )

    marks = compute_marks(
        outputs_by_strategy,
        refs_tokens,
        resamples=config.bootstrap_resamples,
        alpha=config.alpha,
        seed=config.seed,
    )
    report = EvalReport(
        direction=(config.src_lang, config.tgt_lang),
        systems=systems,
        marks=marks,
        scored=len(outcomes),
        failed=len(failures),
        extras={
            "triggered_sentences": triggered_total,
            "strategies": list(strategies),
        },
    )
    return ExperimentReport(
        config=config,
        report=report,
        sentences=outcomes,
        failures=failures,
        confident_pivot_agreement=(agree / triggered_total) if triggered_total else None,
    )


def _strategy_config(config: ExperimentConfig, name: str):
    from . import pipeline

    decode = config.decode_params(Combiner.DIRECT)
    if name == "direct":
        return pipeline.RunConfig(
            src_lang=config.src_lang,
            tgt_lang=config.tgt_lang,
            strategy="direct",
            pivot_params=decode,
            final_params=decode,
        )
    if name.startswith("pivot:"):
        lang = name.split(":", 1)[1]
        return pipeline.RunConfig(
            src_lang=config.src_lang,
            tgt_lang=config.tgt_lang,
            pivot_langs=(lang,),
            strategy="single_pivot",
            single_pivot=lang,
            pivot_params=decode,
            final_params=decode,
        )
    if name in _STRATEGY_COMBINERS:
        return pipeline.RunConfig(
            src_lang=config.src_lang,
            tgt_lang=config.tgt_lang,
            pivot_langs=config.pivot_langs,
            strategy=name,
            pivot_params=decode,
            final_params=decode,
        )
    raise ValueError(f"unknown strategy {name!r}")
