"""Checkpoint backend: one decoder step over a Hugging Face seq2seq model.

Works with M2M100-family checkpoints (M2M100 418M, SMaLL100) and any other
encoder-decoder model following the same conventions: a fixed decoder start
token followed by a target-language token, then the generated prefix.

Inference runs in deterministic evaluation mode.  Queries inside a batch
are grouped by their source sequence so each distinct source is encoded
once and its encoder states are reused across the group's decoder rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


class BackendRequestError(ValueError):
    """A query the backend cannot serve (bad language, missing tokenizer)."""


@dataclass
class StepRequest:
    src_lang: str
    tgt_lang: str
    source_tokens: list[int] | None
    source_text: str | None
    prefix_tokens: list[int]


@dataclass
class CheckpointBackend:
    checkpoint: str
    device: str = "cpu"
    lang_token_map: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        from transformers import AutoModelForSeq2SeqLM, AutoTokenizer

        self.model = AutoModelForSeq2SeqLM.from_pretrained(self.checkpoint)
        self.model.to(self.device)
        self.model.eval()
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(self.checkpoint)
        except Exception:
            self.tokenizer = None  # token-id queries only
        config = self.model.config
        self.vocab_size = int(config.vocab_size)
        self.eos_token_id = int(config.eos_token_id)
        self.decoder_start_token_id = int(
            config.decoder_start_token_id
            if config.decoder_start_token_id is not None
            else config.eos_token_id
        )
        self.pad_token_id = int(
            config.pad_token_id if config.pad_token_id is not None else self.eos_token_id
        )

    @property
    def model_name(self) -> str:
        return str(self.checkpoint)

    def languages(self) -> list[str]:
        if self.lang_token_map:
            return sorted(self.lang_token_map)
        if self.tokenizer is not None and hasattr(self.tokenizer, "lang_code_to_id"):
            return sorted(self.tokenizer.lang_code_to_id)
        return []

    def lang_token(self, lang: str) -> int:
        """Target-language forcing follows the checkpoint's language-token convention."""
        if lang in self.lang_token_map:
            return self.lang_token_map[lang]
        if self.tokenizer is not None:
            if hasattr(self.tokenizer, "get_lang_id"):
                try:
                    return int(self.tokenizer.get_lang_id(lang))
                except KeyError:
                    pass
            if hasattr(self.tokenizer, "lang_code_to_id") and lang in self.tokenizer.lang_code_to_id:
                return int(self.tokenizer.lang_code_to_id[lang])
        raise BackendRequestError(f"unknown target language {lang!r}")

    def _encode_source(self, request: StepRequest) -> list[int]:
        if request.source_tokens is not None:
            return [int(t) for t in request.source_tokens]
        if request.source_text is None:
            raise BackendRequestError("query needs source_tokens or source_text")
        if self.tokenizer is None:
            raise BackendRequestError("checkpoint has no tokenizer; send source_tokens")
        if hasattr(self.tokenizer, "src_lang"):
            self.tokenizer.src_lang = request.src_lang
        return list(self.tokenizer(request.source_text).input_ids)

    def step(self, requests: list[StepRequest]) -> np.ndarray:
        """Next-token log-probabilities for each query, shape (N, vocab_size)."""
        if not requests:
            return np.zeros((0, self.vocab_size))
        rows: list[tuple[list[int], list[int]]] = []
        for request in requests:
            source = self._encode_source(request)
            if not source:
                raise BackendRequestError("empty source")
            if any(not 0 <= t < self.vocab_size for t in source + list(request.prefix_tokens)):
                raise BackendRequestError("token id out of vocabulary range")
            decoder_input = [
                self.decoder_start_token_id,
                self.lang_token(request.tgt_lang),
                *[int(t) for t in request.prefix_tokens],
            ]
            rows.append((source, decoder_input))

        out = np.empty((len(rows), self.vocab_size), dtype=np.float64)
        groups: dict[tuple[int, ...], list[int]] = {}
        for i, (source, _) in enumerate(rows):
            groups.setdefault(tuple(source), []).append(i)

        with torch.no_grad():
            for source, indices in groups.items():
                out[indices] = self._step_group(list(source), [rows[i][1] for i in indices])
        return out

    def _step_group(self, source: list[int], decoder_inputs: list[list[int]]) -> np.ndarray:
        """Encode one source, decode a batch of prefixes against it."""
        src = torch.tensor([source], dtype=torch.long, device=self.device)
        src_mask = torch.ones_like(src)
        encoder = self.model.get_encoder()
        encoder_outputs = encoder(input_ids=src, attention_mask=src_mask)

        n = len(decoder_inputs)
        max_len = max(len(d) for d in decoder_inputs)
        dec = torch.full((n, max_len), self.pad_token_id, dtype=torch.long, device=self.device)
        for i, d in enumerate(decoder_inputs):
            dec[i, : len(d)] = torch.tensor(d, dtype=torch.long)

        hidden = encoder_outputs.last_hidden_state.expand(n, -1, -1)
        expanded = type(encoder_outputs)(last_hidden_state=hidden)
        outputs = self.model(
            encoder_outputs=expanded,
            attention_mask=src_mask.expand(n, -1),
            decoder_input_ids=dec,
        )
        logits = outputs.logits  # (n, max_len, vocab)
        result = np.empty((n, self.vocab_size), dtype=np.float64)
        for i, d in enumerate(decoder_inputs):
            # causal decoder: right padding never feeds position len(d)-1
            step_logits = logits[i, len(d) - 1, :].to(torch.float64)
            result[i] = torch.log_softmax(step_logits, dim=-1).cpu().numpy()
        return result
