import json
import subprocess
import sys

import numpy as np
import pytest

from valr.data.vocab import Vocabulary
from valr.decode import (FEEDBACK_IN, FORCED_IN, LATENT, DecodeConfig, DecodeTrace, TraceEntry, decode,
                         strip_latent, validate_trace)
from valr.errors import ConfigError, StructureError
from valr.model import DirectEmbedding, ModelConfig, ModelRunner, TokenId, init_params

VOCAB = Vocabulary.from_lexicon()
V = len(VOCAB)


class ScriptedModel:
    """Emits a fixed token script; hidden state is a running position counter."""

    def __init__(self, script, d=4):
        self.script, self.i, self.d, self.fed = list(script), 0, d, []

    def feed(self, seq):
        self.fed.extend(seq)
        logits = np.zeros(V)
        tok = self.script[min(self.i, len(self.script) - 1)]
        logits[tok] = 1.0
        self.i += 1
        return np.full(self.d, float(len(self.fed))), logits


class RandomModel:
    def __init__(self, seed, bias=None):
        self.rng = np.random.default_rng(seed)
        self.bias = bias

    def feed(self, seq):
        z = self.rng.normal(size=V)
        if self.bias is not None:
            z[self.bias] += 2.0
        return self.rng.normal(size=4), z


def test_immediate_eos():
    out, trace = decode(ScriptedModel([VOCAB.eos]), [TokenId(VOCAB.bos)], DecodeConfig(K=4), VOCAB)
    assert out == [] and len(trace) == 1 and trace.stop_reason == "eos"


def test_one_segment_k4():
    red = VOCAB.ids["red"]
    m = ScriptedModel([VOCAB.latent, 7, 7, 7, red, VOCAB.eos])
    out, trace = decode(m, [TokenId(VOCAB.bos)], DecodeConfig(K=4), VOCAB)
    assert out == [red]
    kinds = [(e.mode, e.input_kind, e.token) for e in trace.entries]
    assert kinds[:4] == [(LATENT, "token", VOCAB.latent), (LATENT, FEEDBACK_IN, None), (LATENT, FEEDBACK_IN, None),
                         (LATENT, FORCED_IN, VOCAB.end_latent)]
    assert [e.pos for e in trace.entries] == [1, 2, 3, 4, 5, 6]
    # interior inputs are the previous position's hidden state, bit for bit
    assert isinstance(m.fed[2], DirectEmbedding) and m.fed[2].vector.tobytes() == np.full(4, 2.0).tobytes()
    assert m.fed[3].vector.tobytes() == np.full(4, 3.0).tobytes()
    validate_trace(trace, VOCAB.latent, VOCAB.end_latent)


def test_budget_and_segment_limits():
    m = ScriptedModel([VOCAB.latent])
    _, trace = decode(m, [TokenId(1)], DecodeConfig(K=4, max_new_positions=10, max_latent_segments=32), VOCAB)
    assert trace.truncated and len(trace.segments()) == 2 and len(trace) == 8
    _, trace = decode(ScriptedModel([VOCAB.latent]), [TokenId(1)],
                      DecodeConfig(K=4, max_new_positions=100, max_latent_segments=3), VOCAB)
    assert trace.truncated and trace.stop_reason == "max_latent_segments" and len(trace.segments()) == 3
    validate_trace(trace, VOCAB.latent, VOCAB.end_latent)


@pytest.mark.parametrize("K", [1, 2, 4, 9])
def test_adversarial_mocks_keep_exactly_k(K):
    for seed in range(25):
        bias = [VOCAB.latent, VOCAB.end_latent, VOCAB.latent_slot][seed % 3]
        _, trace = decode(RandomModel(seed, bias), [TokenId(1)], DecodeConfig(K=K, max_new_positions=60), VOCAB)
        validate_trace(trace, VOCAB.latent, VOCAB.end_latent)
        assert all(len(r) == K for r in trace.segments())


def test_real_model_deterministic():
    cfg = ModelConfig(vocab_size=V, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=64, K=4)
    params = init_params(cfg)
    params["head.b"].data[VOCAB.latent] = 0.5  # make segments likely
    runs = [decode(ModelRunner(cfg, params), [TokenId(1), TokenId(9)], DecodeConfig(K=4, max_new_positions=30), VOCAB)
            for _ in range(2)]
    assert runs[0][0] == runs[1][0]
    assert [e.to_dict() for e in runs[0][1].entries] == [e.to_dict() for e in runs[1][1].entries]
    validate_trace(runs[0][1], VOCAB.latent, VOCAB.end_latent)
    assert runs[0][1].segments()


def test_strip_latent():
    a, b = VOCAB.ids["red"], VOCAB.ids["disk"]
    assert strip_latent([1, a, b], VOCAB) == [1, a, b]
    seg = [VOCAB.latent, VOCAB.latent_slot, VOCAB.latent_slot, VOCAB.end_latent]
    assert strip_latent([a] + seg + [b], VOCAB, K=4) == [a, b]
    with pytest.raises(StructureError):
        strip_latent([a, VOCAB.latent, VOCAB.latent_slot, b], VOCAB)
    with pytest.raises(StructureError):
        strip_latent([a] + seg + [b], VOCAB, K=3)
    trace = DecodeTrace([TraceEntry(0, "language", "token", a)], K=4)
    assert strip_latent(trace, VOCAB) == [a]


def test_trace_dump(tmp_path):
    _, trace = decode(ScriptedModel([VOCAB.latent, 0, 0, VOCAB.eos]), [TokenId(1)], DecodeConfig(K=3), VOCAB)
    trace.dump(tmp_path / "t.jsonl")
    rows = [json.loads(x) for x in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert set(rows[0]) == {"pos", "mode", "input_kind", "token"}
    assert len(rows) == len(trace)


def test_k_mismatch():
    from valr.decode import decode_model
    from valr.data.plans import prompt_tokens
    from valr.data.synthetic import generate_synthetic
    cfg = ModelConfig(vocab_size=V, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=200, K=4)
    plan = prompt_tokens(generate_synthetic(1)[0], VOCAB)
    with pytest.raises(ConfigError):
        decode_model(cfg, init_params(cfg), plan, DecodeConfig(K=9), VOCAB)


def test_decode_path_never_imports_encoders():
    code = ("import sys, valr.decode, valr.model, valr.data.plans, valr.data.synthetic, valr.data.matchers;"
            "print('valr.encoders' in sys.modules)")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
