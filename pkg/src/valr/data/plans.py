"""Token layouts for training: plain CoT sequences and latent-augmented ones.

Layout (``plain_tokenize`` omits the latent segments)::

    <bos> [image slots ...] question
      ( <latent> <lat> x (K-2) </latent>  step_i tokens ) for every step
    Answer: answer tokens <eos>

``K == 1`` segments are a lone ``<latent>``; ``K == 2`` segments are the two
control tokens with no interior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import SchemaError, SequenceLengthError
from .schema import ReasoningSample
from .vocab import Vocabulary

# position roles
BOS, IMAGE, QUESTION, OPEN, INTERIOR, CLOSE, STEP, ANSWER, EOS = range(9)
ROLE_NAMES = ("bos", "image", "question", "latent_open", "latent_interior", "latent_close", "step", "answer", "eos")
CE_ROLES = (OPEN, CLOSE, STEP, ANSWER, EOS)


@dataclass
class AlignmentTarget:
    segment_index: int
    start: int          # position of the segment's first slot
    K: int
    target_image: int
    features: dict = field(default_factory=dict)  # encoder name -> P x D array, filled before stage 2

    @property
    def span(self) -> range:
        return range(self.start, self.start + self.K)


@dataclass
class LatentPlan:
    sample_id: str
    tokens: np.ndarray      # token id per position (image slots hold <image>)
    roles: np.ndarray
    image_slot: np.ndarray  # [T, 2] (image, patch) for image slots, -1 elsewhere
    ce_mask: np.ndarray     # True where the token at this position is a CE target
    segments: list
    K: int
    images: list
    family: str | None = None
    answer: str = ""

    def __len__(self):
        return len(self.tokens)

    @property
    def prompt_length(self) -> int:
        """Positions up to and including the question."""
        return int(np.nonzero(self.roles == QUESTION)[0].max()) + 1

    def interior_positions(self) -> np.ndarray:
        return np.nonzero(self.roles == INTERIOR)[0]


def segment_tokens(K: int, vocab: Vocabulary) -> list[int]:
    if K < 1:
        raise SchemaError("latent segments need K >= 1")
    if K == 1:
        return [vocab.latent]
    return [vocab.latent] + [vocab.latent_slot] * (K - 2) + [vocab.end_latent]


def segment_roles(K: int) -> list[int]:
    if K == 1:
        return [OPEN]
    return [OPEN] + [INTERIOR] * (K - 2) + [CLOSE]


def _build(sample: ReasoningSample, vocab: Vocabulary, K: int | None, patches_per_image: int,
           max_seq_len: int | None) -> LatentPlan:
    tokens, roles, slots, segments = [vocab.bos], [BOS], [(-1, -1)], []

    def add(ids, role):
        tokens.extend(ids)
        roles.extend([role] * len(ids))
        slots.extend([(-1, -1)] * len(ids))

    for img in range(len(sample.images)):
        for p in range(patches_per_image):
            tokens.append(vocab.image)
            roles.append(IMAGE)
            slots.append((img, p))
    add(vocab.encode(sample.question), QUESTION)
    for i, step in enumerate(sample.steps):
        if K is not None:
            if step.target_image is None:
                raise SchemaError(f"{sample.sample_id}: step {i} has no target image")
            segments.append(AlignmentTarget(i, len(tokens), K, step.target_image))
            tokens.extend(segment_tokens(K, vocab))
            roles.extend(segment_roles(K))
            slots.extend([(-1, -1)] * K)
        add(vocab.encode(step.text), STEP)
    add([vocab.answer] + vocab.encode(sample.answer), ANSWER)
    add([vocab.eos], EOS)
    if max_seq_len is not None and len(tokens) > max_seq_len:
        raise SequenceLengthError(f"sample {sample.sample_id}: {len(tokens)} positions exceed "
                                  f"max_seq_len {max_seq_len}")
    roles = np.array(roles, dtype=np.int8)
    return LatentPlan(sample.sample_id, np.array(tokens, dtype=np.int64), roles,
                      np.array(slots, dtype=np.int64), np.isin(roles, CE_ROLES), segments,
                      0 if K is None else K, list(sample.images), sample.family, sample.answer)


def augment_latent(sample: ReasoningSample, K: int, vocab: Vocabulary, patches_per_image: int = 16,
                   max_seq_len: int | None = None) -> LatentPlan:
    """Insert one K-position latent segment before every reasoning step."""
    return _build(sample, vocab, K, patches_per_image, max_seq_len)


def plain_tokenize(sample: ReasoningSample, vocab: Vocabulary, patches_per_image: int = 16,
                   max_seq_len: int | None = None) -> LatentPlan:
    """Stage-1 layout: the same sequence with no latent segments."""
    return _build(sample, vocab, None, patches_per_image, max_seq_len)


def prompt_tokens(sample: ReasoningSample, vocab: Vocabulary, patches_per_image: int = 16) -> LatentPlan:
    """Just ``<bos>``, image slots and the question, for decoding."""
    plan = plain_tokenize(sample, vocab, patches_per_image)
    n = plan.prompt_length
    return LatentPlan(plan.sample_id, plan.tokens[:n], plan.roles[:n], plan.image_slot[:n],
                      plan.ce_mask[:n], [], 0, plan.images, plan.family, plan.answer)
