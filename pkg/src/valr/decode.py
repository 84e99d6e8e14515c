"""Greedy decoding with fixed-length latent segments.

Language mode feeds token embeddings and reads the LM head. Emitting
``<latent>`` switches to latent mode for exactly ``K`` positions: the
``<latent>`` token itself, ``K - 2`` positions fed the previous position's
final hidden state, then a forced ``</latent>`` token. The next token is read
from the logits at the ``</latent>`` position. With ``K == 1`` the segment is
the lone ``<latent>`` token.

This module must not depend on the encoders: test-time decoding never sees an
external vision model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, SequenceLengthError, StructureError
from .model import DirectEmbedding, ImagePatchSlot, ModelConfig, ModelRunner, TokenId

LANGUAGE, LATENT = "language", "latent"
TOKEN_IN, FEEDBACK_IN, FORCED_IN = "token", "hidden-feedback", "forced-control"


class Runner(Protocol):
    def feed(self, seq) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass
class DecodeConfig:
    K: int
    max_new_positions: int = 256
    max_latent_segments: int = 32

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.max_new_positions < 1:
            raise ConfigError("max_new_positions must be positive")


@dataclass
class TraceEntry:
    pos: int
    mode: str
    input_kind: str
    token: int | None
    step: int = 0                      # 1..K inside a latent segment
    vector: np.ndarray | None = None   # fed hidden state, for hidden-feedback entries

    def to_dict(self) -> dict:
        return {"pos": self.pos, "mode": self.mode, "input_kind": self.input_kind, "token": self.token}


@dataclass
class DecodeTrace:
    entries: list = field(default_factory=list)
    K: int = 0
    truncated: bool = False
    stop_reason: str = ""

    def __len__(self):
        return len(self.entries)

    def segments(self) -> list[list[TraceEntry]]:
        runs, cur = [], None
        for e in self.entries:
            if e.mode == LATENT:
                if e.step == 1:
                    cur = []
                    runs.append(cur)
                cur.append(e)
        return runs

    def language_tokens(self) -> list[int]:
        return [e.token for e in self.entries if e.mode == LANGUAGE]

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_dict()) + "\n")


def validate_trace(trace: DecodeTrace, latent_id: int, end_latent_id: int) -> None:
    """Check the exactly-K property and that LM-head picks only happen in language mode."""
    K = trace.K
    for run in trace.segments():
        if len(run) != K:
            raise StructureError(f"latent run at {run[0].pos} has {len(run)} positions, expected {K}")
        if run[0].token != latent_id or run[0].input_kind != TOKEN_IN:
            raise StructureError(f"latent run at {run[0].pos} does not open with <latent>")
        if K > 1 and (run[-1].token != end_latent_id or run[-1].input_kind != FORCED_IN):
            raise StructureError(f"latent run at {run[0].pos} does not close with a forced </latent>")
        for e in run[1:-1]:
            if e.input_kind != FEEDBACK_IN or e.token is not None:
                raise StructureError(f"latent interior at {e.pos} is not hidden feedback")
        if [e.pos for e in run] != list(range(run[0].pos, run[0].pos + len(run))):
            raise StructureError(f"latent run at {run[0].pos} is not contiguous")


def decode(runner: Runner, prompt: Sequence, dcfg: DecodeConfig, vocab, start: int = 0,
           max_total: int | None = None) -> tuple[list[int], DecodeTrace]:
    """Greedy decode after ``prompt``; returns (language tokens without <eos>, trace).

    ``start`` is the absolute position of the first prompt entry and
    ``max_total`` caps the absolute sequence length.
    """
    if not len(prompt):
        raise ConfigError("empty prompt")
    pos = start + len(prompt)
    if max_total is not None and pos > max_total:
        raise SequenceLengthError(f"prompt of {len(prompt)} positions exceeds max_seq_len {max_total}")
    budget = dcfg.max_new_positions
    if max_total is not None:
        budget = min(budget, max_total - pos)
    K = dcfg.K
    trace = DecodeTrace(K=K)
    hidden, logits = runner.feed(list(prompt))
    out, n_segments, used = [], 0, 0
    while True:
        if used >= budget:
            trace.truncated, trace.stop_reason = True, "max_new_positions"
            break
        tok = int(np.argmax(logits))
        if tok == vocab.eos:
            trace.entries.append(TraceEntry(pos, LANGUAGE, TOKEN_IN, tok))
            trace.stop_reason = "eos"
            break
        if tok == vocab.latent:
            if n_segments >= dcfg.max_latent_segments:
                trace.truncated, trace.stop_reason = True, "max_latent_segments"
                break
            if budget - used < K:
                trace.truncated, trace.stop_reason = True, "max_new_positions"
                break
            n_segments += 1
            trace.entries.append(TraceEntry(pos, LATENT, TOKEN_IN, tok, 1))
            hidden, logits = runner.feed([TokenId(tok)])
            pos += 1
            for k in range(2, K):
                vec = np.array(hidden, copy=True)
                trace.entries.append(TraceEntry(pos, LATENT, FEEDBACK_IN, None, k, vec))
                hidden, logits = runner.feed([DirectEmbedding(vec)])
                pos += 1
            if K > 1:
                trace.entries.append(TraceEntry(pos, LATENT, FORCED_IN, vocab.end_latent, K))
                hidden, logits = runner.feed([TokenId(vocab.end_latent)])
                pos += 1
            used += K
            continue
        trace.entries.append(TraceEntry(pos, LANGUAGE, TOKEN_IN, tok))
        out.append(tok)
        used += 1
        if used >= budget:
            trace.truncated, trace.stop_reason = True, "max_new_positions"
            break
        hidden, logits = runner.feed([TokenId(tok)])
        pos += 1
    return out, trace


def plan_entries(plan) -> list:
    """Model inputs for a plan's positions (latent interiors are not representable)."""
    out = []
    for tok, (img, patch) in zip(plan.tokens, plan.image_slot):
        out.append(ImagePatchSlot(int(img), int(patch)) if img >= 0 else TokenId(int(tok)))
    return out


def decode_model(cfg: ModelConfig, params, prompt_plan, dcfg: DecodeConfig, vocab,
                 trained_K: int | None = None) -> tuple[list[int], DecodeTrace]:
    """Decode from a prompt plan (``<bos>``, image slots, question)."""
    K = cfg.K if trained_K is None else trained_K
    if dcfg.K != K:
        raise ConfigError(f"decode K={dcfg.K} but the checkpoint was trained with K={K}")
    runner = ModelRunner(cfg, params, prompt_plan.images)
    return decode(runner, plan_entries(prompt_plan), dcfg, vocab, max_total=cfg.max_seq_len)


def strip_latent(x, vocab, K: int | None = None) -> list[int]:
    """Drop latent-segment positions from a trace or a token-id sequence."""
    if isinstance(x, DecodeTrace):
        return x.language_tokens()
    ids = [int(t) for t in x]
    out, i = [], 0
    while i < len(ids):
        t = ids[i]
        if t == vocab.latent:
            if K == 1:
                i += 1
                continue
            try:
                j = ids.index(vocab.end_latent, i + 1)
            except ValueError:
                raise StructureError(f"unterminated latent segment starting at {i}") from None
            if vocab.latent in ids[i + 1:j]:
                raise StructureError(f"nested <latent> inside segment starting at {i}")
            if K is not None and j - i + 1 != K:
                raise StructureError(f"latent segment at {i} has {j - i + 1} positions, expected {K}")
            i = j + 1
            continue
        if t == vocab.end_latent:
            raise StructureError(f"</latent> at {i} without an open segment")
        out.append(t)
        i += 1
    return out
