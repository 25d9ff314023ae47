"""End-to-end orchestration: pivot production, sentence translation, corpora.

A run translates the source into each pivot language (direct scoring, top
hypothesis only), then decodes the target once conditioned on the whole
pivot set with the strategy's combination rule.  Single-pivot and direct
baselines share the same machinery with K=1.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

from .core import (
    Combiner,
    DecodeParams,
    Hypothesis,
    SentenceRecord,
    SourceSet,
    TokenSeq,
    read_sentences,
)
from .decoder import DecodeResult, DecodeTrace, Scorer, beam_search
from .metrics import (
    EvalReport,
    SystemScores,
    bleu,
    compute_marks,
    hallucination_rate_chrf,
    tng_rate,
)

# Default pivot set for real-model runs: high-resource bridge languages.
DEFAULT_PIVOTS = ("en", "es", "fr")

STRATEGIES = ("direct", "single_pivot", "multiavg", "maxens", "logavg")

_ENSEMBLE_COMBINERS = {
    "multiavg": Combiner.MULTIAVG,
    "maxens": Combiner.MAXENS,
    "logavg": Combiner.LOGAVG,
}


class PipelineError(Exception):
    """A translation failure, labeled with the stage that raised it."""

    stage = "pipeline"

    def __init__(self, message: str, sentence_id: str | None = None):
        super().__init__(message)
        self.sentence_id = sentence_id


class PivotStageError(PipelineError):
    stage = "pivot"

    def __init__(self, message: str, pivot_lang: str, sentence_id: str | None = None):
        super().__init__(message, sentence_id)
        self.pivot_lang = pivot_lang


class FinalStageError(PipelineError):
    stage = "final"


@dataclass(frozen=True)
class RunConfig:
    """One translation strategy for one direction.

    ``final_params.combiner`` is derived from the strategy; only the beam
    geometry of ``pivot_params``/``final_params`` is caller-controlled.
    Pivot production defaults to the same beam size as the final stage.
    """

    src_lang: str
    tgt_lang: str
    pivot_langs: tuple[str, ...] = ()
    strategy: str = "direct"
    single_pivot: str | None = None
    include_direct_path: bool = False
    pivot_params: DecodeParams = DecodeParams()
    final_params: DecodeParams = DecodeParams()
    backend: dict | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "pivot_langs", tuple(self.pivot_langs))
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "direct" and self.pivot_langs:
            raise ValueError("strategy 'direct' forbids pivot languages")
        if self.strategy == "single_pivot":
            if self.single_pivot is None:
                raise ValueError("strategy 'single_pivot' requires single_pivot")
            if self.single_pivot not in self.pivot_langs:
                raise ValueError(
                    f"single_pivot {self.single_pivot!r} not in pivot_langs"
                )
        if self.strategy in _ENSEMBLE_COMBINERS and not self.pivot_langs:
            raise ValueError(f"strategy {self.strategy!r} requires pivot languages")

    @property
    def name(self) -> str:
        if self.strategy == "single_pivot":
            return f"pivot:{self.single_pivot}"
        return self.strategy

    @property
    def final_combiner(self) -> Combiner:
        return _ENSEMBLE_COMBINERS.get(self.strategy, Combiner.DIRECT)


@dataclass
class SentenceResult:
    hypothesis: Hypothesis
    sources: SourceSet
    trace: DecodeTrace | None = None


def _top_pivot(
    src: TokenSeq, src_lang: str, pivot: str, params: DecodeParams, scorer: Scorer
) -> TokenSeq:
    result = beam_search(
        SourceSet(((src_lang, src),)),
        tgt_lang=pivot,
        scorer=scorer,
        params=replace(params, combiner=Combiner.DIRECT),
    )
    top = result.hypotheses[0]
    if not top.finished:
        raise PivotStageError(
            f"pivot decode into {pivot!r} did not finish within max_len", pivot_lang=pivot
        )
    return top.tokens.body(scorer.eos_id)


def produce_pivots(src: TokenSeq, config: RunConfig, scorer: Scorer) -> SourceSet:
    """Translate the source into every configured pivot language.

    Each pivot contributes its top hypothesis, in configuration order; with
    ``include_direct_path`` the original source is appended as an extra
    conditioning entry.
    """
    if not config.pivot_langs:
        raise ValueError("pivot list is empty")
    entries = []
    for pivot in config.pivot_langs:
        try:
            entries.append(
                (pivot, _top_pivot(src, config.src_lang, pivot, config.pivot_params, scorer))
            )
        except PivotStageError:
            raise
        except Exception as exc:
            raise PivotStageError(
                f"pivot decode into {pivot!r} failed: {exc}", pivot_lang=pivot
            ) from exc
    if config.include_direct_path:
        entries.append((config.src_lang, src))
    return SourceSet(tuple(entries))


def translate_sentence(
    src: TokenSeq,
    config: RunConfig,
    scorer: Scorer,
    return_trace: bool = False,
) -> SentenceResult:
    """Translate one sentence using the configured strategy."""
    if config.strategy == "direct":
        sources = SourceSet(((config.src_lang, src),))
    elif config.strategy == "single_pivot":
        pivot_config = replace(config, pivot_langs=(config.single_pivot,))
        sources = SourceSet(
            ((config.single_pivot, produce_pivots(src, pivot_config, scorer).entries[0][1]),)
        )
    else:
        sources = produce_pivots(src, config, scorer)

    params = replace(config.final_params, combiner=config.final_combiner)
    try:
        result: DecodeResult = beam_search(
            sources, config.tgt_lang, scorer, params, return_trace=return_trace
        )
    except Exception as exc:
        raise FinalStageError(f"final decode failed: {exc}") from exc
    return SentenceResult(
        hypothesis=result.hypotheses[0], sources=sources, trace=result.trace
    )


# ---------------------------------------------------------------------------
# Corpus runs
# ---------------------------------------------------------------------------


@dataclass
class OutputRecord:
    id: str
    tokens: TokenSeq  # complete sequence (with eos when finished)
    score: float
    finished: bool
    text: str
    provenance: tuple[int, ...] | None = None

    def to_json(self, lang: str) -> str:
        return json.dumps(
            {
                "id": self.id,
                "lang": lang,
                "tokens": list(self.tokens.ids),
                "text": self.text,
                "score": self.score,
                "finished": self.finished,
                "provenance": None if self.provenance is None else list(self.provenance),
            },
            ensure_ascii=False,
        )


@dataclass
class FailureRecord:
    id: str
    strategy: str
    stage: str
    error: str


@dataclass
class CorpusRunResult:
    outputs: dict[str, list[OutputRecord]]  # strategy name -> records (corpus order)
    failures: list[FailureRecord]
    report: EvalReport | None

    def write_outputs(self, path, strategy: str, tgt_lang: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.outputs[strategy]:
                fh.write(rec.to_json(tgt_lang) + "\n")


def _default_render(seq: TokenSeq) -> str:
    return " ".join(str(i) for i in seq.ids)


def run_corpus(
    corpus,
    configs: RunConfig | Sequence[RunConfig],
    scorer: Scorer | None = None,
    refs=None,
    render: Callable[[TokenSeq], str] | None = None,
    chrf_threshold: float = 20.0,
    resamples: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
    workers: int = 1,
) -> CorpusRunResult:
    """Translate a corpus under one or more strategies and (optionally) evaluate.

    ``corpus``/``refs`` are JSONL paths or pre-read sentence record lists.
    Per-sentence failures are recorded and excluded from metrics, never
    silently dropped; (scored + failed) always equals the corpus size.
    """
    config_list = [configs] if isinstance(configs, RunConfig) else list(configs)
    if not config_list:
        raise ValueError("at least one run configuration is required")
    if scorer is None:
        scorer = resolve_backend(config_list[0])
    records = read_sentences(corpus) if not isinstance(corpus, list) else corpus
    if not records:
        raise ValueError("empty corpus")
    render = render or _default_render

    names = [rc.name for rc in config_list]
    if len(set(names)) != len(names):
        raise ValueError("duplicate strategy names in configuration list")

    outputs: dict[str, list[OutputRecord]] = {name: [] for name in names}
    failures: list[FailureRecord] = []
    failed_ids: set[str] = set()

    def translate_one(record: SentenceRecord) -> tuple[str, dict[str, OutputRecord], list[FailureRecord]]:
        src_seq = record.token_seq()
        out: dict[str, OutputRecord] = {}
        fails: list[FailureRecord] = []
        for rc in config_list:
            try:
                result = translate_sentence(src_seq, rc, scorer)
            except PipelineError as exc:
                fails.append(
                    FailureRecord(
                        id=record.id, strategy=rc.name, stage=exc.stage, error=str(exc)
                    )
                )
                continue
            hyp = result.hypothesis
            out[rc.name] = OutputRecord(
                id=record.id,
                tokens=hyp.tokens,
                score=hyp.score,
                finished=hyp.finished,
                text=render(hyp.tokens),
                provenance=hyp.per_step_provenance,
            )
        return record.id, out, fails

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(translate_one, records))
    else:
        results = [translate_one(r) for r in records]

    for sentence_id, out, fails in results:
        if fails:
            failures.extend(fails)
            failed_ids.add(sentence_id)
            continue
        for name, rec in out.items():
            outputs[name].append(rec)

    report = None
    if refs is not None:
        ref_records = read_sentences(refs) if not isinstance(refs, list) else refs
        ref_by_id = {r.id: r for r in ref_records}
        scored_ids = sorted(r.id for r in records if r.id not in failed_ids)
        if scored_ids:
            missing = [i for i in scored_ids if i not in ref_by_id]
            if missing:
                raise ValueError(f"references missing for ids: {missing[:5]}")
            src_by_id = {r.id: r for r in records}
            refs_tokens = [tuple(ref_by_id[i].token_seq().ids) for i in scored_ids]
            refs_text = [
                ref_by_id[i].text if ref_by_id[i].text is not None
                else _default_render(ref_by_id[i].token_seq())
                for i in scored_ids
            ]
            srcs_tokens = [tuple(src_by_id[i].token_seq().ids) for i in scored_ids]
            systems: dict[str, SystemScores] = {}
            bodies_by_name: dict[str, list[tuple[int, ...]]] = {}
            for name in names:
                by_id = {rec.id: rec for rec in outputs[name]}
                bodies = [by_id[i].tokens.body(scorer.eos_id).ids for i in scored_ids]
                texts = [by_id[i].text for i in scored_ids]
                bodies_by_name[name] = bodies
                systems[name] = SystemScores(
                    bleu=bleu(bodies, refs_tokens),
                    chrf_hallucination_rate=hallucination_rate_chrf(
                        list(zip(texts, refs_text)), threshold=chrf_threshold
                    ),
                    tng_hallucination_rate=tng_rate(srcs_tokens, bodies),
                )
            marks = (
                compute_marks(bodies_by_name, refs_tokens, resamples=resamples, alpha=alpha, seed=seed)
                if len(names) > 1
                else set(names)
            )
            report = EvalReport(
                direction=(config_list[0].src_lang, config_list[0].tgt_lang),
                systems=systems,
                marks=marks,
                scored=len(scored_ids),
                failed=len(failed_ids),
            )
    return CorpusRunResult(outputs=outputs, failures=failures, report=report)


def resolve_backend(config: RunConfig) -> Scorer:
    """Build a scorer from a RunConfig backend descriptor.

    ``{"kind": "synthetic", "config": <toml path>}`` builds the synthetic
    task and uses its channels; ``{"kind": "wire", "url": ..., "eos_id":
    ...}`` connects to a remote step server.
    """
    spec = config.backend
    if not spec:
        raise ValueError("run configuration has no backend descriptor")
    kind = spec.get("kind")
    if kind == "synthetic":
        from .synthharness import build_task, load_experiment_config

        return build_task(load_experiment_config(spec["config"])).scorer()
    if kind == "wire":
        from .modelwire import EndpointConfig, WireClient, WireScorer

        endpoint = EndpointConfig(
            base_url=spec.get("url") or EndpointConfig.url_from_env(),
            timeout_ms=spec.get("timeout_ms", 30000),
            max_batch=spec.get("max_batch", 64),
            retries=spec.get("retries", 2),
        )
        return WireScorer(WireClient(endpoint), eos_id=int(spec["eos_id"]))
    raise ValueError(f"unknown backend kind {kind!r}")
