"""Pipeline orchestration: pivot production, strategies, corpus runs."""

from pathlib import Path

import pytest

import pivotens.core as core
from pivotens import (
    DecodeParams,
    ExperimentConfig,
    RunConfig,
    SourceSet,
    beam_search,
    build_task,
    produce_pivots,
    run_corpus,
    translate_sentence,
)
from pivotens.metrics import render_report_table
from pivotens.pipeline import PivotStageError
from pivotens.synthharness import _strategy_config

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def noiseless():
    task = build_task(ExperimentConfig.noiseless(corpus_size=8, seed=3))
    return task, task.scorer()


@pytest.fixture(scope="module")
def regime():
    task = build_task(ExperimentConfig(corpus_size=30, seed=13))
    return task, task.scorer()


def ensemble_config(task, strategy="maxens", **kw) -> RunConfig:
    cfg = task.config
    return RunConfig(
        src_lang=cfg.src_lang,
        tgt_lang=cfg.tgt_lang,
        pivot_langs=cfg.pivot_langs,
        strategy=strategy,
        pivot_params=cfg.decode_params(core.Combiner.DIRECT),
        final_params=cfg.decode_params(core.Combiner.DIRECT),
        **kw,
    )


class TestRunConfigValidation:
    def test_direct_forbids_pivots(self):
        with pytest.raises(ValueError):
            RunConfig(src_lang="a", tgt_lang="b", strategy="direct", pivot_langs=("p",))

    def test_single_pivot_must_name_a_pivot(self):
        with pytest.raises(ValueError):
            RunConfig(src_lang="a", tgt_lang="b", strategy="single_pivot", pivot_langs=("p",))
        with pytest.raises(ValueError):
            RunConfig(
                src_lang="a",
                tgt_lang="b",
                strategy="single_pivot",
                single_pivot="q",
                pivot_langs=("p",),
            )

    def test_ensemble_requires_pivots(self):
        with pytest.raises(ValueError):
            RunConfig(src_lang="a", tgt_lang="b", strategy="maxens")


class TestProducePivots:
    def test_noiseless_single_pivot_is_exact_cipher_image(self, noiseless):
        task, scorer = noiseless
        sentence = task.corpus[0]
        config = ensemble_config(task)
        sources = produce_pivots(task.source_seq(sentence), config, scorer)
        for code, seq in sources.entries:
            assert seq == task.languages[code].encipher(sentence.base)

    def test_three_pivots_in_config_order(self, noiseless):
        task, scorer = noiseless
        config = ensemble_config(task)
        sources = produce_pivots(task.source_seq(task.corpus[0]), config, scorer)
        assert sources.langs == task.config.pivot_langs
        assert sources.k == 3

    def test_include_direct_path_appends_source(self, noiseless):
        task, scorer = noiseless
        src = task.source_seq(task.corpus[0])
        config = ensemble_config(task, include_direct_path=True)
        sources = produce_pivots(src, config, scorer)
        assert sources.k == 4
        assert sources.entries[-1] == (task.config.src_lang, src)

    def test_matches_independent_beam_runs(self, regime):
        task, scorer = regime
        src = task.source_seq(task.corpus[0])
        config = ensemble_config(task)
        sources = produce_pivots(src, config, scorer)
        for code, seq in sources.entries:
            result = beam_search(
                SourceSet(((task.config.src_lang, src),)),
                code,
                scorer,
                config.pivot_params,
            )
            assert result.hypotheses[0].tokens.body(scorer.eos_id) == seq

    def test_pivot_failure_reports_language(self, regime):
        task, scorer = regime
        config = ensemble_config(task)
        tiny = RunConfig(
            src_lang=config.src_lang,
            tgt_lang=config.tgt_lang,
            pivot_langs=config.pivot_langs,
            strategy="maxens",
            pivot_params=DecodeParams(beam_size=1, max_len=1),
            final_params=config.final_params,
        )
        with pytest.raises(PivotStageError) as err:
            produce_pivots(task.source_seq(task.corpus[0]), tiny, scorer)
        assert err.value.pivot_lang == task.config.pivot_langs[0]
        assert err.value.stage == "pivot"


class TestTranslateSentence:
    def test_single_pivot_equals_multiavg_with_one_pivot(self, regime):
        task, scorer = regime
        cfg = task.config
        lang = cfg.pivot_langs[0]
        single = RunConfig(
            src_lang=cfg.src_lang,
            tgt_lang=cfg.tgt_lang,
            pivot_langs=(lang,),
            strategy="single_pivot",
            single_pivot=lang,
            pivot_params=cfg.decode_params(core.Combiner.DIRECT),
            final_params=cfg.decode_params(core.Combiner.DIRECT),
        )
        avg = RunConfig(
            src_lang=cfg.src_lang,
            tgt_lang=cfg.tgt_lang,
            pivot_langs=(lang,),
            strategy="multiavg",
            pivot_params=cfg.decode_params(core.Combiner.DIRECT),
            final_params=cfg.decode_params(core.Combiner.DIRECT),
        )
        for sentence in task.corpus[:6]:
            src = task.source_seq(sentence)
            a = translate_sentence(src, single, scorer).hypothesis
            b = translate_sentence(src, avg, scorer).hypothesis
            assert a.tokens == b.tokens
            assert a.score == b.score

    def test_noiseless_all_strategies_return_reference(self, noiseless):
        task, scorer = noiseless
        for sentence in task.corpus[:4]:
            src = task.source_seq(sentence)
            ref = task.reference_seq(sentence)
            for strategy in ("direct", "multiavg", "maxens", "logavg"):
                rc = _strategy_config(task.config, strategy)
                hyp = translate_sentence(src, rc, scorer).hypothesis
                assert hyp.tokens.body(scorer.eos_id) == ref, strategy

    def test_confident_pivot_regime_max_follows_single_mean_differs(self, regime):
        """On a triggered sentence the max rule reproduces the confident
        pivot's own decode while the averaging rule diverges from it."""
        task, scorer = regime
        triggered = [s for s in task.corpus if s.triggered]
        assert triggered
        checked = 0
        for sentence in triggered[:5]:
            src = task.source_seq(sentence)
            designated = task.config.pivot_langs[sentence.designated_pivot]
            single = translate_sentence(
                src, _strategy_config(task.config, f"pivot:{designated}"), scorer
            ).hypothesis
            top = translate_sentence(
                src, _strategy_config(task.config, "maxens"), scorer
            ).hypothesis
            avg = translate_sentence(
                src, _strategy_config(task.config, "multiavg"), scorer
            ).hypothesis
            assert top.tokens == single.tokens
            assert avg.tokens != single.tokens
            checked += 1
        assert checked

    def test_maxens_provenance_reported(self, regime):
        task, scorer = regime
        src = task.source_seq(task.corpus[0])
        hyp = translate_sentence(src, _strategy_config(task.config, "maxens"), scorer).hypothesis
        assert hyp.per_step_provenance is not None
        assert len(hyp.per_step_provenance) == len(hyp.tokens)


class TestRunCorpus:
    def write_corpus(self, task, tmp_path):
        src_path = tmp_path / "src.jsonl"
        ref_path = tmp_path / "ref.jsonl"
        core.write_sentences(src_path, task.source_records())
        core.write_sentences(ref_path, task.reference_records())
        return src_path, ref_path

    def test_empty_corpus_rejected(self, tmp_path, noiseless):
        task, scorer = noiseless
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        with pytest.raises(ValueError):
            run_corpus(empty, ensemble_config(task), scorer=scorer)

    def test_identical_strategies_tie_in_marks(self, tmp_path, noiseless):
        task, scorer = noiseless
        src_path, ref_path = self.write_corpus(task, tmp_path)
        configs = [
            ensemble_config(task, strategy="multiavg"),
            ensemble_config(task, strategy="maxens"),
        ]
        result = run_corpus(
            src_path, configs, scorer=scorer, refs=ref_path, render=task.render_text,
            resamples=200,
        )
        assert result.report.marks == {"multiavg", "maxens"}

    def test_stage_separability(self, regime):
        """Corpus output equals composing pivot production and the final
        decode by hand, sentence by sentence."""
        task, scorer = regime
        config = ensemble_config(task, strategy="maxens")
        records = task.source_records()[:6]
        result = run_corpus(records, config, scorer=scorer, render=task.render_text)
        from dataclasses import replace as dc_replace

        for record, out in zip(records, result.outputs["maxens"]):
            src = record.token_seq()
            sources = produce_pivots(src, config, scorer)
            params = dc_replace(config.final_params, combiner=config.final_combiner)
            manual = beam_search(sources, config.tgt_lang, scorer, params).hypotheses[0]
            assert out.tokens == manual.tokens
            assert out.score == manual.score

    def test_corpus_permutation_leaves_metrics_unchanged(self, tmp_path, regime):
        task, scorer = regime
        records = task.source_records()
        refs = task.reference_records()
        config = ensemble_config(task, strategy="multiavg")
        forward = run_corpus(
            records, config, scorer=scorer, refs=refs, render=task.render_text, resamples=200
        )
        backward = run_corpus(
            records[::-1], config, scorer=scorer, refs=refs, render=task.render_text,
            resamples=200,
        )
        assert forward.report.to_dict() == backward.report.to_dict()
        by_id_fwd = {r.id: r.tokens for r in forward.outputs["multiavg"]}
        by_id_bwd = {r.id: r.tokens for r in backward.outputs["multiavg"]}
        assert by_id_fwd == by_id_bwd

    def test_error_accounting_never_silently_drops(self, tmp_path, noiseless):
        task, scorer = noiseless
        src_path, ref_path = self.write_corpus(task, tmp_path)
        # out-of-vocab token id forces a per-sentence failure
        with open(src_path, "a", encoding="utf-8") as fh:
            fh.write('{"id": "sbad", "lang": "%s", "tokens": [999]}\n' % task.config.src_lang)
        with open(ref_path, "a", encoding="utf-8") as fh:
            fh.write('{"id": "sbad", "lang": "%s", "tokens": [1]}\n' % task.config.tgt_lang)
        config = ensemble_config(task, strategy="maxens")
        result = run_corpus(
            src_path, config, scorer=scorer, refs=ref_path, render=task.render_text,
            resamples=200,
        )
        assert len(result.failures) == 1
        assert result.failures[0].id == "sbad"
        assert result.report.scored + result.report.failed == len(task.corpus) + 1

    def test_workers_match_sequential(self, regime):
        task, scorer = regime
        records = task.source_records()[:10]
        config = ensemble_config(task, strategy="maxens")
        seq = run_corpus(records, config, scorer=scorer, render=task.render_text)
        par = run_corpus(records, config, scorer=scorer, render=task.render_text, workers=4)
        assert [(r.id, r.tokens, r.score) for r in seq.outputs["maxens"]] == [
            (r.id, r.tokens, r.score) for r in par.outputs["maxens"]
        ]

    def test_outputs_jsonl_carry_provenance(self, tmp_path, regime):
        task, scorer = regime
        records = task.source_records()[:3]
        config = ensemble_config(task, strategy="maxens")
        result = run_corpus(records, config, scorer=scorer, render=task.render_text)
        out_path = tmp_path / "out.jsonl"
        result.write_outputs(out_path, "maxens", task.config.tgt_lang)
        import json

        lines = [json.loads(l) for l in out_path.read_text().splitlines()]
        assert all(l["provenance"] is not None for l in lines)
        assert all(len(l["provenance"]) == len(l["tokens"]) for l in lines)


class TestGoldenReport:
    def test_report_table_byte_for_byte(self):
        from pivotens import run_experiment

        result = run_experiment(ExperimentConfig(corpus_size=24, seed=101))
        table = render_report_table(result.report, result.report.extras["strategies"])
        golden = (DATA / "golden_report.txt").read_text()
        assert table == golden
