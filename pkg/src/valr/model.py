"""Decoder-only transformer with a linear patch embedder and a mid-layer tap.

Inputs at each position are one of: a token id, a raw patch of one of the
sample's images, or a vector fed in directly (the hidden state of the previous
position during latent steps). Positional embeddings are learned and indexed
by absolute position for every input kind.

The core entry point, :func:`forward_batch`, runs a ragged batch chunk by
chunk: rows may carry padding, and a :class:`KVCache` lets later chunks attend
to everything before them. :func:`forward` is the single-sequence wrapper.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np

from . import numerics as nx
from .errors import CacheError, ConfigError, DimensionError, SequenceLengthError
from .images import Image, grid_side, image_patches
from .numerics import Tensor
from .seeding import rng_for

PAD, TOKEN, PATCH, DIRECT = 0, 1, 2, 3
NEG_INF = -1e30


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 320
    image_side: int = 16
    native_patch: int = 4
    align_layer: int | None = None
    K: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.align_layer is None:
            self.align_layer = self.n_layers // 2
        self.validate()

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0 <= self.align_layer < self.n_layers:
            raise ConfigError(f"align_layer {self.align_layer} outside [0, {self.n_layers})")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        grid_side(self.image_side, self.native_patch)

    @property
    def grid(self) -> int:
        return self.image_side // self.native_patch

    @property
    def patch_dim(self) -> int:
        return self.native_patch * self.native_patch * 3

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams(dict):
    """name -> Tensor, plus a version counter bumped on every update."""

    version: int = 0

    def bump(self) -> None:
        self.version += 1


PATCH_EMBEDDER = ("patch.w", "patch.b", "patch.row", "patch.col")


def param_shapes(cfg: ModelConfig) -> dict:
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {
        "tok_emb": (v, d),
        "pos_emb": (cfg.max_seq_len, d),
        "patch.w": (cfg.patch_dim, d),
        "patch.b": (d,),
        "patch.row": (cfg.grid, d),
        "patch.col": (cfg.grid, d),
    }
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, f), p + "mlp.b1": (f,), p + "mlp.w2": (f, d), p + "mlp.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, v), "head.b": (v,)})
    return shapes


def init_params(cfg: ModelConfig) -> ModelParams:
    rng = rng_for(cfg.seed, "model-init")
    resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    params = ModelParams()
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf == "b" or name == "head.b":
            data = np.zeros(shape)
        elif name.endswith(("attn.wo", "mlp.w2")):
            data = rng.normal(0.0, resid_std, size=shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def param_count(params) -> int:
    return int(sum(t.size for t in params.values()))


# ---------------------------------------------------------------- sequence inputs


@dataclass(frozen=True)
class TokenId:
    id: int


@dataclass(frozen=True, eq=False)
class DirectEmbedding:
    vector: object  # Tensor or array of length d_model


@dataclass(frozen=True)
class ImagePatchSlot:
    image: int
    patch: int


Entry = Union[TokenId, DirectEmbedding, ImagePatchSlot]


@dataclass
class ForwardOutput:
    last_hidden: Tensor
    tapped_hidden: Tensor
    logits: Tensor | None


@dataclass
class KVCache:
    keys: list
    values: list
    valid: np.ndarray  # [B, S] key validity
    params_key: tuple = field(default=(None, None))

    @property
    def length(self) -> int:
        return self.valid.shape[1]

    @property
    def batch(self) -> int:
        return self.valid.shape[0]


@dataclass
class SlotBatch:
    """Per-slot routing for one chunk: what each ``[B, L]`` position embeds."""

    kind: np.ndarray      # PAD / TOKEN / PATCH / DIRECT
    index: np.ndarray     # token id, row in patch_bank, or row in direct
    grid: np.ndarray      # patch grid index (PATCH only)
    positions: np.ndarray  # absolute positions

    @property
    def valid(self) -> np.ndarray:
        return self.kind != PAD


def embed_slots(cfg: ModelConfig, params, slots: SlotBatch, patch_bank: np.ndarray | None,
                direct: Tensor | None) -> Tensor:
    """Assemble ``[B, L, d]`` input rows (positional embedding not yet added)."""
    d = cfg.d_model
    kind = slots.kind.reshape(-1)
    idx = slots.index.reshape(-1)
    parts, perm = [], np.zeros(kind.size, dtype=np.int64)
    offset = 0
    sel = np.nonzero(kind == TOKEN)[0]
    if sel.size:
        if idx[sel].min() < 0 or idx[sel].max() >= cfg.vocab_size:
            raise DimensionError(f"token id out of range [0, {cfg.vocab_size})")
        parts.append(nx.embedding(params["tok_emb"], idx[sel]))
        perm[sel] = offset + np.arange(sel.size)
        offset += sel.size
    sel = np.nonzero(kind == PATCH)[0]
    if sel.size:
        grid = slots.grid.reshape(-1)[sel]
        if grid.min() < 0 or grid.max() >= cfg.grid * cfg.grid:
            raise DimensionError(f"patch index outside the {cfg.grid}x{cfg.grid} grid")
        pix = Tensor(patch_bank[idx[sel]])
        rows = nx.matmul(pix, params["patch.w"]) + params["patch.b"]
        rows = rows + nx.embedding(params["patch.row"], grid // cfg.grid)
        rows = rows + nx.embedding(params["patch.col"], grid % cfg.grid)
        parts.append(rows)
        perm[sel] = offset + np.arange(sel.size)
        offset += sel.size
    sel = np.nonzero(kind == DIRECT)[0]
    if sel.size:
        if direct is None or direct.ndim != 2 or direct.shape[1] != d:
            raise DimensionError(f"direct embeddings must be [n, {d}]")
        parts.append(nx.take(direct, idx[sel]))
        perm[sel] = offset + np.arange(sel.size)
        offset += sel.size
    sel = np.nonzero(kind == PAD)[0]
    if sel.size:
        parts.append(Tensor(np.zeros((1, d))))
        perm[sel] = offset
    rows = parts[0] if len(parts) == 1 else nx.concat(parts, axis=0)
    B, L = slots.kind.shape
    return nx.reshape(nx.take(rows, perm), (B, L, d))


def _attention(cfg, params, prefix, h, layer_cache, allowed_add):
    B, L, d = h.shape
    H = cfg.n_heads
    dh = d // H

    def heads(w):
        return nx.transpose(nx.reshape(nx.matmul(h, params[prefix + w]), (B, L, H, dh)), (0, 2, 1, 3))

    q, k, v = heads("attn.wq"), heads("attn.wk"), heads("attn.wv")
    if layer_cache is not None:
        k = nx.concat([layer_cache[0], k], axis=2)
        v = nx.concat([layer_cache[1], v], axis=2)
    scores = nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    p = nx.softmax(scores + allowed_add, axis=-1)
    o = nx.reshape(nx.transpose(nx.matmul(p, v), (0, 2, 1, 3)), (B, L, d))
    return nx.matmul(o, params[prefix + "attn.wo"]), k, v


def forward_batch(cfg: ModelConfig, params, x: Tensor, slots: SlotBatch, cache: KVCache | None = None,
                  need_logits: bool = True) -> tuple[ForwardOutput, KVCache]:
    """Run one chunk ``x: [B, L, d]`` on top of ``cache``.

    Padding slots are never attended to. Query slot ``i`` of this chunk sees
    valid cached keys plus valid chunk keys at slots ``<= i``.
    """
    B, L, d = x.shape
    valid = slots.valid
    pos = slots.positions
    if (pos[valid] >= cfg.max_seq_len).any():
        raise SequenceLengthError(f"position {int(pos[valid].max())} exceeds max_seq_len {cfg.max_seq_len}")
    key = (id(params), getattr(params, "version", None))
    if cache is not None:
        if cache.batch != B or cache.params_key != key or len(cache.keys) != cfg.n_layers:
            raise CacheError("stale KV cache: produced by different parameters or batch shape")
        S = cache.length
        all_valid = np.concatenate([cache.valid, valid], axis=1)
    else:
        S = 0
        all_valid = valid
    causal = np.arange(S + L)[None, :] <= (S + np.arange(L))[:, None]
    allowed = all_valid[:, None, :] & causal[None]
    allowed_add = np.where(allowed, 0.0, NEG_INF)[:, None]  # [B, 1, L, S+L]

    h = x + nx.embedding(params["pos_emb"], np.where(valid, pos, 0))
    keys, values, tapped = [], [], None
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        lc = None if cache is None else (cache.keys[i], cache.values[i])
        a, k, v = _attention(cfg, params, p, nx.layer_norm(h, params[p + "ln1.g"], params[p + "ln1.b"]), lc, allowed_add)
        h = h + a
        m = nx.layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"])
        m = nx.matmul(nx.gelu(nx.matmul(m, params[p + "mlp.w1"]) + params[p + "mlp.b1"]), params[p + "mlp.w2"])
        h = h + m + params[p + "mlp.b2"]
        keys.append(k)
        values.append(v)
        if i == cfg.align_layer:
            tapped = h
    last = nx.layer_norm(h, params["ln_f.g"], params["ln_f.b"])
    logits = nx.matmul(last, params["head.w"]) + params["head.b"] if need_logits else None
    return ForwardOutput(last, tapped, logits), KVCache(keys, values, all_valid, key)


def lm_head(params, hidden_row) -> Tensor:
    row = nx.reshape(nx.as_tensor(hidden_row), (1, -1))
    return nx.reshape(nx.matmul(row, params["head.w"]) + params["head.b"], (-1,))


# ---------------------------------------------------------------- single sequence


def _single_slots(cfg: ModelConfig, seq: Sequence[Entry], images: Sequence[Image], start: int):
    L = len(seq)
    kind = np.zeros((1, L), dtype=np.int8)
    index = np.zeros((1, L), dtype=np.int64)
    grid = np.zeros((1, L), dtype=np.int64)
    bank, direct = [], []
    patches_per_image = cfg.grid * cfg.grid
    used = {}
    for j, e in enumerate(seq):
        if isinstance(e, TokenId):
            kind[0, j], index[0, j] = TOKEN, e.id
        elif isinstance(e, ImagePatchSlot):
            if not 0 <= e.image < len(images):
                raise DimensionError(f"image slot references image {e.image}, only {len(images)} given")
            if not 0 <= e.patch < patches_per_image:
                raise DimensionError(f"patch index {e.patch} outside the {cfg.grid}x{cfg.grid} grid")
            if e.image not in used:
                used[e.image] = len(bank)
                bank.append(image_patches(images[e.image], cfg.native_patch))
            kind[0, j] = PATCH
            index[0, j] = used[e.image] * patches_per_image + e.patch
            grid[0, j] = e.patch
        elif isinstance(e, DirectEmbedding):
            vec = nx.as_tensor(e.vector)
            if vec.size != cfg.d_model:
                raise DimensionError(f"direct embedding has length {vec.size}, expected {cfg.d_model}")
            kind[0, j], index[0, j] = DIRECT, len(direct)
            direct.append(nx.reshape(vec, (1, cfg.d_model)))
        else:
            raise TypeError(f"unknown sequence entry {e!r}")
    slots = SlotBatch(kind, index, grid, (start + np.arange(L))[None, :])
    bank = np.concatenate(bank, axis=0) if bank else None
    direct = None if not direct else (direct[0] if len(direct) == 1 else nx.concat(direct, axis=0))
    return slots, bank, direct


def embed_inputs(cfg: ModelConfig, params, seq: Sequence[Entry], images: Sequence[Image] = ()) -> Tensor:
    slots, bank, direct = _single_slots(cfg, seq, images, 0)
    return nx.reshape(embed_slots(cfg, params, slots, bank, direct), (len(seq), cfg.d_model))


def forward(cfg: ModelConfig, params, seq: Sequence[Entry], images: Sequence[Image] = (),
            cache: KVCache | None = None, need_logits: bool = True) -> tuple[ForwardOutput, KVCache]:
    """Single-sequence forward; ``seq`` continues the prefix held in ``cache``."""
    start = 0 if cache is None else cache.length
    if start + len(seq) > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence length {start + len(seq)} exceeds max_seq_len {cfg.max_seq_len}")
    slots, bank, direct = _single_slots(cfg, seq, images, start)
    x = embed_slots(cfg, params, slots, bank, direct)
    out, cache = forward_batch(cfg, params, x, slots, cache, need_logits)
    T = len(seq)
    squeeze = lambda t: None if t is None else nx.reshape(t, (T, t.shape[-1]))
    return ForwardOutput(squeeze(out.last_hidden), squeeze(out.tapped_hidden), squeeze(out.logits)), cache


class ModelRunner:
    """Incremental single-sequence stepping for decoding (no gradient tape)."""

    def __init__(self, cfg: ModelConfig, params, images: Sequence[Image] = ()):
        self.cfg, self.params, self.images = cfg, params, list(images)
        self.cache: KVCache | None = None
        self.position = 0

    def feed(self, seq: Sequence[Entry]) -> tuple[np.ndarray, np.ndarray]:
        """Append ``seq``; return the last position's (hidden, logits)."""
        out, self.cache = forward(self.cfg, self.params, seq, self.images, self.cache)
        self.position += len(seq)
        return out.last_hidden.data[-1], out.logits.data[-1]
