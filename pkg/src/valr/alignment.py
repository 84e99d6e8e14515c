"""Patch-wise cosine alignment of latent-segment features to frozen encoder features.

Each latent segment's ``K`` tapped hidden rows form a ``sqrt(K) x sqrt(K)``
grid (row-major in segment order). The grid is nearest-neighbour upsampled to
the encoder's ``sqrt(P) x sqrt(P)`` patch grid, passed through a per-encoder
MLP head, and compared row by row with the encoder's features:

    loss = -mean_p cos(head(up(tapped))[p], target[p])

Several encoders are combined by averaging their losses, and a batch averages
over all of its segments.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, EmptyLossError, InvariantError
from .numerics import Tensor
from .seeding import rng_for

ACTIVATIONS = ("gelu", "identity")


def _side(n: int, what: str) -> int:
    s = math.isqrt(n) if n > 0 else 0
    if s * s != n:
        raise DimensionError(f"{what}={n} is not a perfect square")
    return s


def upsample_index(K: int, P: int) -> np.ndarray:
    """Row of the ``K`` grid feeding each of the ``P`` output rows."""
    k, p = _side(K, "K"), _side(P, "P")
    if P < K:
        raise DimensionError(f"cannot upsample K={K} latent rows to only P={P} patches")
    src = np.arange(p) * k // p
    return (src[:, None] * k + src[None, :]).reshape(-1)


def upsample_grid(latent_feats: Tensor, P: int) -> Tensor:
    K = latent_feats.shape[0]
    if K == P:
        _side(K, "K")
        return latent_feats
    return nx.take(latent_feats, upsample_index(K, P))


class ProjectionHead:
    """Two affine maps with an activation between: ``d_model -> hidden -> D``."""

    def __init__(self, encoder_name: str, d_model: int, D: int, hidden: int | None = None,
                 activation: str = "gelu", seed: int = 0):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown head activation {activation!r}")
        self.encoder_name, self.d_model, self.D = encoder_name, d_model, D
        self.hidden = hidden or max(d_model, D)
        self.activation = activation
        rng = rng_for(seed, f"psi-{encoder_name}")
        self.params = {
            "w1": Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_model), (d_model, self.hidden)), requires_grad=True),
            "b1": Tensor(np.zeros(self.hidden), requires_grad=True),
            "w2": Tensor(rng.normal(0.0, 1.0 / math.sqrt(self.hidden), (self.hidden, D)), requires_grad=True),
            "b2": Tensor(np.zeros(D), requires_grad=True),
        }

    @classmethod
    def identity(cls, encoder_name: str, d: int) -> "ProjectionHead":
        head = cls(encoder_name, d, d, d, activation="identity")
        head.params["w1"].data[...] = np.eye(d)
        head.params["w2"].data[...] = np.eye(d)
        return head

    def named_params(self) -> dict:
        return {f"psi.{self.encoder_name}.{k}": v for k, v in self.params.items()}

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_model:
            raise DimensionError(f"head {self.encoder_name}: input width {x.shape[-1]} != {self.d_model}")
        h = nx.matmul(x, self.params["w1"]) + self.params["b1"]
        if self.activation == "gelu":
            h = nx.gelu(h)
        return nx.matmul(h, self.params["w2"]) + self.params["b2"]


def build_heads(shapes: dict, d_model: int, seed: int = 0) -> list[ProjectionHead]:
    """One head per encoder, in registry order; ``shapes`` maps name -> (P, D)."""
    return [ProjectionHead(name, d_model, D, seed=seed) for name, (_, D) in shapes.items()]


def head_params(heads) -> dict:
    out = {}
    for h in heads:
        out.update(h.named_params())
    return out


def _target_array(target) -> np.ndarray:
    return np.asarray(getattr(target, "features", target), dtype=np.float64)


def repa_loss_single(tapped: Tensor, head: ProjectionHead, target) -> Tensor:
    """Negative mean patch-wise cosine for one segment and one encoder."""
    feats = _target_array(target)
    up = upsample_grid(nx.as_tensor(tapped), feats.shape[0])
    return nx.scale(nx.mean(nx.cosine_rows(head(up), Tensor(feats))), -1.0)


def _check_pairing(heads, names) -> None:
    if [h.encoder_name for h in heads] != list(names):
        raise ConfigError(f"heads {[h.encoder_name for h in heads]} do not match encoders {list(names)}")


def repa_loss_multi(tapped: Tensor, heads, targets) -> Tensor:
    """Mean of the single-encoder losses; ``targets`` is a list or a name-keyed dict."""
    if isinstance(targets, dict):
        _check_pairing(heads, targets.keys())
        targets = list(targets.values())
    elif len(heads) != len(targets):
        raise ConfigError(f"{len(heads)} heads for {len(targets)} targets")
    else:
        names = [getattr(t, "encoder_name", h.encoder_name) for h, t in zip(heads, targets)]
        _check_pairing(heads, names)
    losses = [repa_loss_single(tapped, h, t) for h, t in zip(heads, targets)]
    total = losses[0]
    for x in losses[1:]:
        total = total + x
    return nx.scale(total, 1.0 / len(losses))


def segment_alignment_loss(segments: Tensor, targets: dict, heads) -> tuple[Tensor, dict]:
    """Batched loss over ``segments: [N, K, d]`` with ``targets[name]: [N, P, D]``.

    Returns the multi-encoder mean and the per-encoder values (as floats).
    """
    _check_pairing(heads, targets.keys())
    N, K, d = segments.shape
    if N == 0:
        raise EmptyLossError("no latent segments to align")
    flat = nx.reshape(segments, (N * K, d))
    parts, comps = [], {}
    for head in heads:
        feats = np.asarray(targets[head.encoder_name], dtype=np.float64)
        if feats.ndim != 3 or feats.shape[0] != N:
            raise DimensionError(f"{head.encoder_name}: targets {feats.shape} for {N} segments")
        P = feats.shape[1]
        idx = (np.arange(N)[:, None] * K + upsample_index(K, P)[None, :]).reshape(-1)
        sims = nx.cosine_rows(head(nx.take(flat, idx)), Tensor(feats.reshape(N * P, -1)))
        loss = nx.scale(nx.mean(sims), -1.0)
        comps[head.encoder_name] = float(loss.data)
        parts.append(loss)
    total = parts[0]
    for x in parts[1:]:
        total = total + x
    return nx.scale(total, 1.0 / len(parts)), comps


def batch_alignment_loss(items, heads) -> Tensor:
    """Average over every latent segment in ``items = [(plan, tapped [T, d]), ...]``.

    Segments of length 1 have no grid and contribute nothing.
    """
    rows, targets = [], {h.encoder_name: [] for h in heads}
    K = None
    for plan, tapped in items:
        for seg in plan.segments:
            if seg.K == 1:
                continue
            for h in heads:
                if h.encoder_name not in seg.features:
                    raise InvariantError(f"{plan.sample_id}: segment {seg.segment_index} has no "
                                         f"{h.encoder_name} target")
                targets[h.encoder_name].append(_target_array(seg.features[h.encoder_name]))
            K = seg.K
            rows.append(nx.take(nx.as_tensor(tapped), np.arange(seg.start, seg.start + seg.K)))
    if not rows:
        raise EmptyLossError("no latent segments to align")
    stacked = nx.reshape(nx.concat(rows, axis=0), (len(rows), K, rows[0].shape[1]))
    loss, _ = segment_alignment_loss(stacked, {k: np.stack(v) for k, v in targets.items()}, heads)
    return loss
