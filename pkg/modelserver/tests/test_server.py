"""Sidecar contracts: schema, determinism, protocol suite, greedy parity."""

import json

import numpy as np
import pytest
import requests
import torch

from conftest import EOS_ID, LANG_MAP, VOCAB_SIZE

GOLDEN_QUERY = {
    "session": "test",
    "queries": [
        {
            "src_lang": "aa",
            "tgt_lang": "bb",
            "source_tokens": [5, 6, 7, 2],
            "source_text": None,
            "prefix_tokens": [],
        },
        {
            "src_lang": "aa",
            "tgt_lang": "cc",
            "source_tokens": [9, 10, 2],
            "source_text": None,
            "prefix_tokens": [11, 12],
        },
    ],
}


class TestMeta:
    def test_advertises_protocol_and_vocab(self, live_server):
        meta = requests.get(f"{live_server}/v1/meta", timeout=10).json()
        assert meta["protocol"] == 1
        assert meta["vocab_size"] == VOCAB_SIZE
        assert meta["languages"] == sorted(LANG_MAP)
        assert isinstance(meta["model"], str)


class TestStepEndpoint:
    def test_golden_request_response_schema(self, live_server):
        """Frozen shape contract: one dense vector per query, nothing else."""
        response = requests.post(f"{live_server}/v1/step", json=GOLDEN_QUERY, timeout=30)
        assert response.status_code == 200
        body = response.json()
        assert set(body) == {"logprobs"}
        assert len(body["logprobs"]) == 2
        assert all(len(row) == VOCAB_SIZE for row in body["logprobs"])
        assert all(isinstance(v, float) for v in body["logprobs"][0])

    def test_repeated_query_identical_vectors(self, live_server):
        a = requests.post(f"{live_server}/v1/step", json=GOLDEN_QUERY, timeout=30).json()
        b = requests.post(f"{live_server}/v1/step", json=GOLDEN_QUERY, timeout=30).json()
        assert a == b  # deterministic inference mode, bit-for-bit over JSON

    def test_vectors_normalized_within_wire_tolerance(self, live_server):
        body = requests.post(f"{live_server}/v1/step", json=GOLDEN_QUERY, timeout=30).json()
        for row in body["logprobs"]:
            lse = float(np.logaddexp.reduce(np.asarray(row)))
            assert abs(lse) <= 1e-4

    def test_malformed_request_is_400(self, live_server):
        bad = [
            {},  # no queries
            {"queries": "nope"},
            {"queries": [{"src_lang": "aa"}]},  # missing fields
            {"queries": [{"src_lang": "aa", "tgt_lang": "zz", "source_tokens": [5, 2], "prefix_tokens": []}]},  # unknown language
            {"queries": [{"src_lang": "aa", "tgt_lang": "bb", "source_tokens": [999, 2], "prefix_tokens": []}]},  # out of vocab
            {"queries": [{"src_lang": "aa", "tgt_lang": "bb", "source_text": "hi", "prefix_tokens": []}]},  # no tokenizer assets
        ]
        for payload in bad:
            response = requests.post(f"{live_server}/v1/step", json=payload, timeout=30)
            assert response.status_code == 400, payload
            assert "error" in response.json()

    def test_oversized_batch_is_429(self, live_server):
        query = dict(GOLDEN_QUERY["queries"][0])
        response = requests.post(
            f"{live_server}/v1/step", json={"queries": [query] * 33}, timeout=30
        )
        assert response.status_code == 429

    def test_batch_rows_equal_single_rows(self, live_server):
        """Row i of a mixed batch equals the same query sent alone."""
        batch = requests.post(f"{live_server}/v1/step", json=GOLDEN_QUERY, timeout=30).json()
        for i, query in enumerate(GOLDEN_QUERY["queries"]):
            single = requests.post(
                f"{live_server}/v1/step", json={"queries": [query]}, timeout=30
            ).json()
            assert batch["logprobs"][i] == single["logprobs"][0]


class TestPrimaryProtocolSuite:
    def test_live_sidecar_passes_conformance(self, live_server):
        from pivotens import EndpointConfig, TokenSeq, verify_endpoint
        from pivotens.decoder import StepQuery

        probes = [
            StepQuery(
                src_lang="aa",
                tgt_lang="bb",
                source=TokenSeq((5, 6, 7, EOS_ID)),
                prefix=TokenSeq(tuple(range(10, 10 + i))),
            )
            for i in range(4)
        ]
        failures = verify_endpoint(EndpointConfig(base_url=live_server), probes)
        assert failures == []


class TestGreedyParity:
    def test_wire_greedy_matches_native_generation(self, live_server, backend):
        """Beam-1 direct decoding over the wire reproduces the checkpoint's
        own greedy generation token-for-token on 20 sentences."""
        from pivotens import (
            DecodeParams,
            EndpointConfig,
            SourceSet,
            TokenSeq,
            WireClient,
            WireScorer,
            beam_search,
        )

        new_tokens = 12
        scorer = WireScorer(
            WireClient(EndpointConfig(base_url=live_server)), eos_id=EOS_ID
        )
        params = DecodeParams(beam_size=1, max_len=new_tokens, combiner="direct")
        rng = np.random.default_rng(77)
        langs = sorted(LANG_MAP)
        for case in range(20):
            body_len = int(rng.integers(2, 7))
            source = tuple(int(t) for t in rng.integers(4, 40, size=body_len)) + (EOS_ID,)
            tgt_lang = langs[case % len(langs)]

            result = beam_search(
                SourceSet((("aa", TokenSeq(source)),)), tgt_lang, scorer, params
            )
            wire_tokens = list(result.hypotheses[0].tokens.ids)

            with torch.no_grad():
                native = backend.model.generate(
                    torch.tensor([list(source)]),
                    forced_bos_token_id=LANG_MAP[tgt_lang],
                    num_beams=1,
                    do_sample=False,
                    # the forced language token counts as a generated token
                    max_new_tokens=new_tokens + 1,
                )
            native_tokens = native[0].tolist()
            assert native_tokens[0] == backend.decoder_start_token_id
            assert native_tokens[1] == LANG_MAP[tgt_lang]
            assert wire_tokens == native_tokens[2:], f"case {case}"


class TestEnsembleOverWire:
    def test_two_source_max_ensemble_decode(self, live_server):
        """The engine's K>1 ensemble path against the live sidecar: one
        batched exchange per step covering both sources, per-step
        provenance, deterministic results, honest unfinished flagging."""
        from pivotens import (
            DecodeParams,
            EndpointConfig,
            SourceSet,
            TokenSeq,
            WireClient,
            WireScorer,
            beam_search,
            score_fixed_sequence,
        )

        scorer = WireScorer(
            WireClient(EndpointConfig(base_url=live_server, max_batch=8)), eos_id=EOS_ID
        )
        sources = SourceSet(
            (("aa", TokenSeq((5, 9, 30, EOS_ID))), ("bb", TokenSeq((7, 22, EOS_ID))))
        )
        params = DecodeParams(beam_size=3, max_len=6, combiner="maxens")
        first = beam_search(sources, "cc", scorer, params)
        second = beam_search(sources, "cc", scorer, params)
        assert [(h.tokens.ids, h.score) for h in first.hypotheses] == [
            (h.tokens.ids, h.score) for h in second.hypotheses
        ]
        top = first.hypotheses[0]
        assert top.per_step_provenance is not None
        assert all(p in (0, 1) for p in top.per_step_provenance)
        if top.finished:
            rescored = score_fixed_sequence(top.tokens, sources, "cc", scorer, "maxens")
            assert abs(rescored - top.score) <= 1e-9
        else:
            assert len(top.tokens.ids) == params.max_len


class TestServerConfig:
    def test_lang_map_file_loading(self, tmp_path, tiny_checkpoint):
        from modelserver import ServerConfig

        path = tmp_path / "langs.json"
        path.write_text(json.dumps({"xx": 30}))
        config = ServerConfig.with_lang_map_file(tiny_checkpoint, str(path))
        assert config.lang_token_map == {"xx": 30}

    def test_bad_batch_size_rejected(self, tiny_checkpoint):
        from modelserver import ServerConfig

        with pytest.raises(ValueError):
            ServerConfig(checkpoint=tiny_checkpoint, max_batch=0)
