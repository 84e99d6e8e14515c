import numpy as np
import pytest

from valr import numerics as nx
from valr.errors import CacheError, DimensionError, SequenceLengthError
from valr.images import Image
from valr.model import (DirectEmbedding, ImagePatchSlot, ModelConfig, TokenId, embed_inputs, forward,
                        init_params, lm_head, param_count)
from valr.numerics import Tape, Tensor


def small_cfg(**kw):
    base = dict(vocab_size=50, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=40, K=4, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def rand_image(seed):
    return Image(np.random.default_rng(seed).integers(0, 256, (16, 16, 3)) / 255.0)


def random_seq(rng, n, cfg, n_images=0):
    seq = []
    for _ in range(n):
        r = rng.random()
        if n_images and r < 0.3:
            seq.append(ImagePatchSlot(int(rng.integers(n_images)), int(rng.integers(16))))
        elif r < 0.45:
            seq.append(DirectEmbedding(rng.normal(size=cfg.d_model)))
        else:
            seq.append(TokenId(int(rng.integers(cfg.vocab_size))))
    return seq


def test_param_count_golden():
    # closed form for this config: embeddings 2352, blocks 2 x 2160, final norm 32, head 850
    assert param_count(init_params(small_cfg())) == 7554


def test_embed_lookup_and_passthrough():
    cfg = small_cfg()
    params = init_params(cfg)
    e = embed_inputs(cfg, params, [TokenId(7)])
    np.testing.assert_array_equal(e.data[0], params["tok_emb"].data[7])
    v = np.random.default_rng(0).normal(size=16)
    e = embed_inputs(cfg, params, [TokenId(1), DirectEmbedding(v)])
    assert e.data[1].tobytes() == v.tobytes()


def test_embed_image_slot_count():
    cfg = small_cfg()
    params = init_params(cfg)
    seq = [ImagePatchSlot(0, p) for p in range(cfg.grid * cfg.grid)]
    assert len(seq) == 16
    assert embed_inputs(cfg, params, seq, [rand_image(0)]).shape == (16, 16)
    with pytest.raises(DimensionError):
        embed_inputs(cfg, params, [ImagePatchSlot(0, 16)], [rand_image(0)])
    with pytest.raises(DimensionError):
        embed_inputs(cfg, params, [TokenId(50)])


def test_cache_matches_full_recompute():
    cfg = small_cfg()
    params = init_params(cfg)
    rng = np.random.default_rng(1)
    imgs = [rand_image(1), rand_image(2)]
    seq = random_seq(rng, 13, cfg, n_images=2)
    full, _ = forward(cfg, params, seq, imgs)
    _, cache = forward(cfg, params, seq[:12], imgs)
    inc, _ = forward(cfg, params, seq[12:], imgs, cache=cache)
    for a, b in [(full.last_hidden, inc.last_hidden), (full.tapped_hidden, inc.tapped_hidden),
                 (full.logits, inc.logits)]:
        assert np.abs(a.data[12] - b.data[0]).max() < 1e-9


def test_causality():
    cfg = small_cfg()
    params = init_params(cfg)
    rng = np.random.default_rng(2)
    seq = random_seq(rng, 10, cfg)
    out1, _ = forward(cfg, params, seq)
    seq2 = seq[:6] + list(reversed(seq[6:]))
    out2, _ = forward(cfg, params, seq2)
    np.testing.assert_array_equal(out1.logits.data[:6], out2.logits.data[:6])


def test_residual_identity():
    cfg = small_cfg(n_layers=1, align_layer=0)
    params = init_params(cfg)
    for name in ["blocks.0.attn.wo", "blocks.0.mlp.w2", "blocks.0.mlp.b2", "pos_emb"]:
        params[name].data[...] = 0.0
    seq = [TokenId(3), TokenId(9), TokenId(4)]
    out, _ = forward(cfg, params, seq)
    x = embed_inputs(cfg, params, seq).data
    mu, var = x.mean(-1, keepdims=True), x.var(-1, keepdims=True)
    np.testing.assert_allclose(out.last_hidden.data, (x - mu) / np.sqrt(var + 1e-5), atol=1e-12)


def test_tap_is_pure_read():
    cfg = small_cfg()
    params = init_params(cfg)
    seq = random_seq(np.random.default_rng(4), 8, cfg)
    a, _ = forward(cfg, params, seq, need_logits=True)
    b, _ = forward(cfg, params, seq, need_logits=False)
    assert a.tapped_hidden.data.tobytes() == b.tapped_hidden.data.tobytes()
    assert b.logits is None


def test_lm_head_zero_and_shape():
    cfg = small_cfg()
    params = init_params(cfg)
    out = lm_head(params, np.zeros(16))
    assert out.shape == (50,)
    np.testing.assert_array_equal(out.data, 0.0)


def test_lm_head_gradcheck():
    cfg = small_cfg()
    params = init_params(cfg)
    rng = np.random.default_rng(5)
    params["head.b"].data[...] = rng.normal(size=50)
    h = Tensor(rng.normal(size=16), requires_grad=True)
    w = rng.normal(size=50)

    def loss():
        return nx.sum_(nx.mul(nx.softmax(lm_head(params, h)), Tensor(w)))

    with Tape() as tape:
        val = loss()
    tape.backward(val)
    for idx in [(0, 0), (3, 7), (15, 49)]:
        num = nx.numerical_grad(lambda: loss().item(), params["head.w"].data, idx)
        assert nx.rel_error(params["head.w"].grad[idx], num) < 1e-5
    for i in [0, 5]:
        num = nx.numerical_grad(lambda: loss().item(), h.data, i)
        assert nx.rel_error(h.grad[i], num) < 1e-5


def test_overflow_and_stale_cache():
    cfg = small_cfg(max_seq_len=8)
    params = init_params(cfg)
    with pytest.raises(SequenceLengthError):
        forward(cfg, params, [TokenId(1)] * 9)
    _, cache = forward(cfg, params, [TokenId(1)] * 3)
    params.bump()
    with pytest.raises(CacheError):
        forward(cfg, params, [TokenId(1)], cache=cache)
