"""Two-stage training: CoT fine-tuning, then latent training with alignment.

Stage 1 trains on plain CoT sequences with next-token cross-entropy. Stage 2
trains on latent-augmented sequences; each latent interior is fed the final
hidden state of the position before it, so a batch is run in lockstep chunks:
a teacher-forced text chunk up to and including ``<latent>``, then one
single-position chunk per interior step, and so on. The total loss is
``ce + lam * repa`` where ``repa`` is the multi-encoder alignment loss on the
tapped hidden rows of every latent segment.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .alignment import ProjectionHead, build_heads, head_params, segment_alignment_loss, upsample_index
from .checkpoint import load_tensors, save_tensors
from .data.plans import LatentPlan, augment_latent, plain_tokenize
from .data.vocab import Vocabulary
from .errors import CheckpointError, ConfigError, FeatureLookupError, NumericError
from .images import image_patches
from .model import (DIRECT, PAD, PATCH, PATCH_EMBEDDER, TOKEN, ModelConfig, ModelParams, SlotBatch, embed_slots,
                    forward_batch, init_params, param_shapes)
from .numerics import Tape, Tensor
from .seeding import rng_for

log = logging.getLogger(__name__)

STAGE_LR = {1: 1e-5, 2: 2e-6}


@dataclass
class TrainConfig:
    stage: int = 1
    latent: bool = True          # False trains plain CoT in stage 2 (vanilla SFT)
    # model shape; only read when starting from scratch
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 320
    align_layer: int | None = None
    K: int = 16
    # optimisation
    lr_backbone: float | None = None
    lr_heads: float = 1e-5
    weight_decay: float = 0.01
    warmup_ratio: float = 0.03
    epochs: int = 1
    max_steps: int | None = None
    batch_size: int = 8
    grad_accum: int = 1
    clip_norm: float = 1.0
    lam: float = 0.5
    detach_feedback: bool = False
    encoders: list = field(default_factory=lambda: ["dct", "hist", "randproj"])
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.lr_backbone is None:
            self.lr_backbone = STAGE_LR[self.stage]
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ConfigError("batch_size and grad_accum must be positive")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.uses_repa and math.isqrt(self.K) ** 2 != self.K:
            raise ConfigError(f"alignment needs a square K, got {self.K}")

    @classmethod
    def from_dict(cls, d: dict, **overrides) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        d.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path, **overrides) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @property
    def uses_repa(self) -> bool:
        return self.stage == 2 and self.latent and self.lam > 0 and self.K > 1

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_seq_len,
                           align_layer=self.align_layer, K=self.K, seed=self.seed)


@dataclass
class StepReport:
    step: int
    ce: float
    repa: float | None
    total: float
    components: dict
    grad_norm: float
    lr: float
    lr_heads: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- batched forward


@dataclass
class BatchOutput:
    last: Tensor        # [R, d] rows of the physical timeline
    tapped: Tensor      # [R, d]
    row: np.ndarray     # [B, Tmax] row of (sample, position); -1 past the end


def _pieces(plan: LatentPlan):
    """Split a plan into alternating text spans and interior runs (both as ranges)."""
    interior = plan.interior_positions()
    if interior.size == 0:
        return [range(0, len(plan))], []
    texts, runs, start = [], [], 0
    for seg in plan.segments:
        if seg.K < 3:
            continue
        texts.append(range(start, seg.start + 1))
        runs.append(range(seg.start + 1, seg.start + seg.K - 1))
        start = seg.start + seg.K - 1
    texts.append(range(start, len(plan)))
    return texts, runs


def run_plans(cfg: ModelConfig, params, plans, detach_feedback: bool = False) -> BatchOutput:
    """Forward a batch of plans; latent interiors receive hidden-state feedback."""
    B = len(plans)
    bank, base = [], []
    n_patch = cfg.grid * cfg.grid
    for plan in plans:
        base.append(sum(len(b) for b in bank))
        for img in plan.images:
            bank.append(image_patches(img, cfg.native_patch))
    patch_bank = np.concatenate(bank, axis=0) if bank else None
    split = [_pieces(p) for p in plans]
    n_phase = max(len(t) for t, _ in split)
    K = max((p.K for p in plans), default=0)
    n_inner = max(K - 2, 0)

    lasts, taps, cache = [], [], None
    col = 0
    row_col = np.full((B, max(len(p) for p in plans)), -1, dtype=np.int64)
    prev_last, prev_w, prev_slot = None, 0, np.zeros(B, dtype=np.int64)

    def run_chunk(kind, index, grid, pos, direct):
        nonlocal cache, col, prev_last, prev_w
        slots = SlotBatch(kind, index, grid, pos)
        x = embed_slots(cfg, params, slots, patch_bank, direct)
        out, cache = forward_batch(cfg, params, x, slots, cache, need_logits=False)
        W = kind.shape[1]
        bb, jj = np.nonzero(kind != PAD)
        row_col[bb, pos[bb, jj]] = col + jj
        lasts.append(out.last_hidden)
        taps.append(out.tapped_hidden)
        col += W
        prev_last, prev_w = nx.reshape(out.last_hidden, (B * W, cfg.d_model)), W

    for m in range(n_phase):
        spans = [t[m] if m < len(t) else range(0) for t, _ in split]
        W = max(len(s) for s in spans)
        kind = np.full((B, W), PAD, dtype=np.int8)
        index = np.zeros((B, W), dtype=np.int64)
        grid = np.zeros((B, W), dtype=np.int64)
        pos = np.zeros((B, W), dtype=np.int64)
        for b, (plan, span) in enumerate(zip(plans, spans)):
            n = len(span)
            if not n:
                continue
            sl = np.arange(span.start, span.stop)
            img, patch = plan.image_slot[sl, 0], plan.image_slot[sl, 1]
            is_img = img >= 0
            kind[b, :n] = np.where(is_img, PATCH, TOKEN)
            index[b, :n] = np.where(is_img, base[b] + img * n_patch + patch, plan.tokens[sl])
            grid[b, :n] = np.where(is_img, patch, 0)
            pos[b, :n] = sl
            prev_slot[b] = n - 1
        run_chunk(kind, index, grid, pos, None)
        for k in range(n_inner):
            active = [b for b, (_, r) in enumerate(split) if m < len(r)]
            if not active:
                break
            src = np.array([b * prev_w + prev_slot[b] for b in active])
            direct = nx.take(prev_last, src)
            if detach_feedback:
                direct = nx.detach(direct)
            kind = np.full((B, 1), PAD, dtype=np.int8)
            index = np.zeros((B, 1), dtype=np.int64)
            pos = np.zeros((B, 1), dtype=np.int64)
            for i, b in enumerate(active):
                kind[b, 0], index[b, 0], pos[b, 0] = DIRECT, i, split[b][1][m][k]
            prev_slot[:] = 0
            run_chunk(kind, index, np.zeros((B, 1), dtype=np.int64), pos, direct)

    d = cfg.d_model
    flat = lambda ts: nx.reshape(ts[0] if len(ts) == 1 else nx.concat(ts, axis=1), (B * col, d))
    row = np.where(row_col >= 0, np.arange(B)[:, None] * col + row_col, -1)
    return BatchOutput(flat(lasts), flat(taps), row)


def ce_loss(params, plans, out: BatchOutput) -> Tensor:
    """Next-token CE: the row at position t predicts token t+1 where ce_mask[t+1]."""
    rows, targets = [], []
    for b, plan in enumerate(plans):
        t = np.nonzero(plan.ce_mask[1:])[0]
        rows.append(out.row[b, t])
        targets.append(plan.tokens[t + 1])
    rows, targets = np.concatenate(rows), np.concatenate(targets)
    h = nx.take(out.last, rows)
    logits = nx.matmul(h, params["head.w"]) + params["head.b"]
    return nx.cross_entropy(logits, targets, np.ones(len(targets), dtype=bool))


def alignment_inputs(plans, out: BatchOutput, heads):
    """Stack tapped rows ``[N, K, d]`` and targets ``{name: [N, P, D]}`` over all segments.

    Segments without a square grid of at least two rows (K = 1, 2, 3, ...) are skipped.
    """
    idx, targets = [], {h.encoder_name: [] for h in heads}
    K = None
    for b, plan in enumerate(plans):
        for seg in plan.segments:
            if seg.K == 1 or math.isqrt(seg.K) ** 2 != seg.K:
                continue
            K = seg.K
            idx.append(out.row[b, seg.start:seg.start + seg.K])
            for h in heads:
                f = seg.features.get(h.encoder_name)
                if f is None:
                    raise FeatureLookupError(f"{plan.sample_id}: segment {seg.segment_index} has no "
                                             f"{h.encoder_name} features")
                targets[h.encoder_name].append(f)
    if not idx:
        return None, None
    d = out.tapped.shape[1]
    tapped = nx.reshape(nx.take(out.tapped, np.concatenate(idx)), (len(idx), K, d))
    return tapped, {k: np.stack(v) for k, v in targets.items()}


def compute_losses(cfg: ModelConfig, params, heads, plans, lam: float, detach_feedback: bool = False,
                   with_repa: bool = True):
    """Returns ``(total, ce, repa or None, per-encoder components)`` as tensors/floats."""
    out = run_plans(cfg, params, plans, detach_feedback)
    ce = ce_loss(params, plans, out)
    if not with_repa or not heads:
        return ce, ce, None, {}
    tapped, targets = alignment_inputs(plans, out, heads)
    if tapped is None:
        return ce, ce, None, {}
    repa, comps = segment_alignment_loss(tapped, targets, heads)
    return ce + nx.scale(repa, lam), ce, repa, comps


# ---------------------------------------------------------------- optimiser


class AdamW:
    """AdamW with per-group learning rates and decoupled weight decay on matrices."""

    def __init__(self, params: dict, groups: dict, weight_decay: float = 0.01, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params, self.groups = params, groups  # name -> group key
        self.wd, self.betas, self.eps = weight_decay, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lrs: dict) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            lr = lrs[self.groups[k]]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if p.data.ndim >= 2:
                p.data -= lr * self.wd * p.data
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict:
        out = {"opt.t": np.array([float(self.t)])}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state(self, tensors: dict) -> None:
        if "opt.t" not in tensors:
            return
        self.t = int(tensors["opt.t"][0])
        for k in self.params:
            if f"opt.m.{k}" in tensors:
                self.m[k] = tensors[f"opt.m.{k}"].copy()
                self.v[k] = tensors[f"opt.v.{k}"].copy()


def warmup_factor(step: int, total_steps: int, ratio: float) -> float:
    """Linear ramp from 0 at step 0 to 1 at the end of warmup, then constant."""
    warm = max(1, round(ratio * total_steps))
    return min(1.0, step / warm)


# ---------------------------------------------------------------- trainer


class Trainer:
    def __init__(self, cfg: TrainConfig, model_cfg: ModelConfig, params: ModelParams, vocab: Vocabulary,
                 heads=None, total_steps: int = 1, out_dir=None):
        self.cfg, self.model_cfg, self.params, self.vocab = cfg, model_cfg, params, vocab
        self.heads = list(heads or [])
        self.total_steps = max(1, total_steps)
        self.out_dir = Path(out_dir) if out_dir else None
        self.step_index = 0
        trainable, groups = {}, {}
        for k, p in params.items():
            if cfg.stage == 2 and k in PATCH_EMBEDDER:
                continue
            trainable[k], groups[k] = p, "backbone"
        for k, p in head_params(self.heads).items():
            trainable[k], groups[k] = p, "heads"
        self.trainable = trainable
        self.opt = AdamW(trainable, groups, cfg.weight_decay)

    def lrs(self, step: int | None = None) -> dict:
        f = warmup_factor(self.step_index if step is None else step, self.total_steps, self.cfg.warmup_ratio)
        return {"backbone": self.cfg.lr_backbone * f, "heads": self.cfg.lr_heads * f}

    def losses(self, plans):
        c = self.cfg
        return compute_losses(self.model_cfg, self.params, self.heads, plans, c.lam, c.detach_feedback,
                              with_repa=c.uses_repa)

    def step(self, plans) -> StepReport:
        """One optimiser update over ``grad_accum`` micro-batches of ``plans``."""
        c = self.cfg
        for p in self.trainable.values():
            p.grad = None
        micro = np.array_split(np.arange(len(plans)), min(c.grad_accum, len(plans)))
        ce_sum = repa_sum = total_sum = 0.0
        comps_sum: dict = {}
        have_repa = False
        for idx in micro:
            batch = [plans[i] for i in idx]
            with Tape() as tape:
                total, ce, repa, comps = self.losses(batch)
            if not np.isfinite(total.data).all():
                self._dump_diagnostics(float(ce.data), None if repa is None else float(repa.data))
                raise NumericError(f"non-finite loss at step {self.step_index}")
            tape.backward(total, np.array(1.0 / len(micro)))
            ce_sum += float(ce.data)
            total_sum += float(total.data)
            if repa is not None:
                have_repa = True
                repa_sum += float(repa.data)
                for k, v in comps.items():
                    comps_sum[k] = comps_sum.get(k, 0.0) + v
        n = len(micro)
        grads = [p.grad for p in self.trainable.values() if p.grad is not None]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if not math.isfinite(norm):
            self._dump_diagnostics(ce_sum / n, repa_sum / n if have_repa else None)
            raise NumericError(f"non-finite gradient at step {self.step_index}")
        if c.clip_norm and norm > c.clip_norm:
            for g in grads:
                g *= c.clip_norm / norm
        lrs = self.lrs()
        self.opt.step(lrs)
        self.params.bump()
        ce_m = ce_sum / n
        repa_m = repa_sum / n if have_repa else None
        total = ce_m + c.lam * repa_m if have_repa else ce_m
        report = StepReport(self.step_index, ce_m, repa_m, total, {k: v / n for k, v in comps_sum.items()},
                            norm, lrs["backbone"], lrs["heads"] if self.heads else None)
        self.step_index += 1
        return report

    def _dump_diagnostics(self, ce, repa) -> None:
        info = {"step": self.step_index, "ce": ce, "repa": repa,
                "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in self.trainable.items()},
                "nonfinite_params": [k for k, p in self.trainable.items() if not np.isfinite(p.data).all()]}
        target = (self.out_dir or Path(".")) / "diagnostics.json"
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(json.dumps(info, indent=2))
            log.error("non-finite values; diagnostics written to %s", target)
        except OSError:
            log.error("non-finite values; diagnostics: %s", info)

    def evaluate_losses(self, plans) -> tuple[float, float | None]:
        """CE and REPA on ``plans`` without recording a tape."""
        _, ce, repa, _ = compute_losses(self.model_cfg, self.params, self.heads, plans, self.cfg.lam,
                                        with_repa=bool(self.heads) and self.cfg.K > 1)
        return float(ce.data), None if repa is None else float(repa.data)


def probe_cosine(model_cfg: ModelConfig, params, heads, plans) -> float:
    """Mean per-segment cosine similarity, i.e. ``-repa``, on a fixed probe batch."""
    out = run_plans(model_cfg, params, plans)
    tapped, targets = alignment_inputs(plans, out, heads)
    repa, _ = segment_alignment_loss(tapped, targets, heads)
    return -float(repa.data)


def _unit(x):
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def alignment_report(model_cfg: ModelConfig, params, heads, plans) -> dict:
    """Per-encoder probe diagnostics beyond the raw cosine.

    ``baseline`` is the cosine a constant predictor reaches by always emitting
    the mean target direction; ``centered`` is the cosine after removing the
    batch-mean row from both predictions and targets, so it only rewards
    image-specific agreement.
    """
    out = run_plans(model_cfg, params, plans)
    tapped, targets = alignment_inputs(plans, out, heads)
    N, K, d = tapped.shape
    flat = tapped.data.reshape(N * K, d)
    report = {}
    for head in heads:
        feats = targets[head.encoder_name]
        P, D = feats.shape[1:]
        idx = (np.arange(N)[:, None] * K + upsample_index(K, P)[None, :]).reshape(-1)
        pred = head(Tensor(flat[idx])).data
        tgt = feats.reshape(N * P, D)
        mean_dir = _unit(_unit(tgt).mean(0))
        report[head.encoder_name] = {
            "cosine": float((_unit(pred) * _unit(tgt)).sum(-1).mean()),
            "baseline": float((_unit(tgt) @ mean_dir).mean()),
            "centered": float((_unit(pred - pred.mean(0)) * _unit(tgt - tgt.mean(0))).sum(-1).mean()),
        }
    return report


# ---------------------------------------------------------------- features


def attach_features(plans, registry, cache: dict | None = None) -> None:
    """Fill ``segment.features`` for every segment from ``registry`` (must cover all encoders)."""
    cache = {} if cache is None else cache
    for plan in plans:
        for seg in plan.segments:
            img = plan.images[seg.target_image]
            key = (img.sample_id, img.image_id)
            if key not in cache:
                cache[key] = {k: f.features for k, f in registry.encode_all(img).items()}
            seg.features = cache[key]


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, trainer: Trainer, extra: dict | None = None) -> None:
    heads = [{"encoder": h.encoder_name, "d_model": h.d_model, "D": h.D, "hidden": h.hidden,
              "activation": h.activation} for h in trainer.heads]
    config = {"model": trainer.model_cfg.to_dict(), "train": trainer.cfg.to_dict(), "vocab": trainer.vocab.tokens,
              "K": trainer.model_cfg.K, "latent": trainer.cfg.latent and trainer.cfg.stage == 2,
              "stage": trainer.cfg.stage, "step": trainer.step_index, "heads": heads}
    config.update(extra or {})
    tensors = {k: p.data for k, p in trainer.params.items()}
    tensors.update({k: p.data for k, p in head_params(trainer.heads).items()})
    tensors.update(trainer.opt.state())
    save_tensors(path, config, tensors)


@dataclass
class Checkpoint:
    config: dict
    model_cfg: ModelConfig
    params: ModelParams
    heads: list
    vocab: Vocabulary
    tensors: dict

    @property
    def K(self) -> int:
        return int(self.config["K"])

    @property
    def latent(self) -> bool:
        return bool(self.config.get("latent"))


def load_checkpoint(path) -> Checkpoint:
    config, tensors = load_tensors(path)
    try:
        model_cfg = ModelConfig(**config["model"])
        vocab = Vocabulary(config["vocab"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: bad config ({e})") from None
    params = ModelParams()
    for name in param_shapes(model_cfg):
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        params[name] = Tensor(tensors[name], requires_grad=True, name=name)
    heads = []
    for h in config.get("heads", []):
        head = ProjectionHead(h["encoder"], h["d_model"], h["D"], h["hidden"], h["activation"])
        for k in head.params:
            head.params[k] = Tensor(tensors[f"psi.{h['encoder']}.{k}"], requires_grad=True)
        heads.append(head)
    return Checkpoint(config, model_cfg, params, heads, vocab, tensors)


# ---------------------------------------------------------------- runs


def make_plans(samples, cfg: TrainConfig, vocab: Vocabulary, model_cfg: ModelConfig) -> list[LatentPlan]:
    n_patch = model_cfg.grid * model_cfg.grid
    if cfg.stage == 2 and cfg.latent:
        return [augment_latent(s, model_cfg.K, vocab, n_patch, model_cfg.max_seq_len) for s in samples]
    return [plain_tokenize(s, vocab, n_patch, model_cfg.max_seq_len) for s in samples]


def planned_steps(n_samples: int, cfg: TrainConfig) -> int:
    per_step = cfg.batch_size * cfg.grad_accum
    if cfg.max_steps is not None:
        return cfg.max_steps
    return max(1, cfg.epochs * math.ceil(n_samples / per_step))


def batches(n: int, cfg: TrainConfig, steps: int):
    """Yield index arrays; reshuffled each pass with a seed derived from (seed, stage, pass)."""
    per_step = min(cfg.batch_size * cfg.grad_accum, n)
    done, epoch = 0, 0
    while done < steps:
        order = rng_for(cfg.seed, f"stage{cfg.stage}-epoch-{epoch}").permutation(n)
        for i in range(0, n - per_step + 1, per_step):
            if done >= steps:
                return
            yield order[i:i + per_step]
            done += 1
        epoch += 1


def train_stage(cfg: TrainConfig, samples, out_dir, init: Checkpoint | None = None, registry=None,
                metrics_name: str = "metrics.jsonl", probe: list | None = None,
                probe_every: int = 0, progress=None, stop_above: float | None = None) -> Path:
    """Train one stage and write ``checkpoint.valrckpt`` plus a metrics log into ``out_dir``.

    With a probe batch, ``stop_above`` ends the run early at the first probe
    whose cosine exceeds it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = init.vocab if init else Vocabulary.from_lexicon()
    if init is not None:
        mc = dict(init.config["model"])
        mc["K"] = cfg.K
        if cfg.align_layer is not None:
            mc["align_layer"] = cfg.align_layer
        model_cfg = ModelConfig(**mc)
        params = init.params
    else:
        model_cfg = cfg.model_config(len(vocab))
        params = init_params(model_cfg)
    plans = make_plans(samples, cfg, vocab, model_cfg)
    heads = []
    if cfg.uses_repa:
        if registry is None:
            raise ConfigError("stage 2 with alignment needs an encoder registry")
        attach_features(plans, registry)
        if probe:
            attach_features(probe, registry)
        kept = {h.encoder_name: h for h in (init.heads if init else [])}
        heads = [kept.get(name) or ProjectionHead(name, model_cfg.d_model, D, seed=cfg.seed)
                 for name, (_, D) in registry.shapes().items()]
    steps = planned_steps(len(plans), cfg)
    trainer = Trainer(cfg, model_cfg, params, vocab, heads, steps, out_dir)
    with open(out_dir / metrics_name, "w", encoding="utf-8") as fh:
        for idx in batches(len(plans), cfg, steps):
            rec = trainer.step([plans[i] for i in idx]).to_dict()
            if probe and probe_every and (trainer.step_index % probe_every == 0 or trainer.step_index == steps):
                rec["probe_cosine"] = probe_cosine(model_cfg, params, heads, probe)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if progress and (trainer.step_index % cfg.log_every == 0 or trainer.step_index == steps):
                progress(rec)
            if stop_above is not None and rec.get("probe_cosine", -np.inf) > stop_above:
                break
    path = out_dir / "checkpoint.valrckpt"
    save_checkpoint(path, trainer)
    return path


def run_curriculum(cfg1: TrainConfig, cfg2: TrainConfig, samples, out_dir, registry=None, progress=None) -> Path:
    """Stage 1 then stage 2; checkpoints in ``out_dir/stage1`` and ``out_dir/stage2``."""
    out_dir = Path(out_dir)
    p1 = train_stage(cfg1, samples, out_dir / "stage1", progress=progress)
    return train_stage(cfg2, samples, out_dir / "stage2", init=load_checkpoint(p1), registry=registry,
                       progress=progress)
