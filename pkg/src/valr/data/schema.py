"""Reasoning samples and their JSONL corpus format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..errors import SchemaError
from ..images import Image, pixels_from_b64, pixels_to_b64

REGIMES = ("single", "multi", "interleaved")


@dataclass
class Step:
    text: str
    target_image: int | None = None


@dataclass
class ReasoningSample:
    sample_id: str
    images: list
    question: str
    steps: list
    answer: str
    regime: str = "multi"
    interleaved_before_step: dict | None = None
    family: str | None = None
    meta: dict = field(default_factory=dict)

    def validate(self) -> "ReasoningSample":
        if self.regime not in REGIMES:
            raise SchemaError(f"{self.sample_id}: unknown regime {self.regime!r}")
        if not self.images:
            raise SchemaError(f"{self.sample_id}: needs at least one image")
        if not self.steps:
            raise SchemaError(f"{self.sample_id}: needs at least one reasoning step")
        if self.regime == "single" and len(self.images) != 1:
            raise SchemaError(f"{self.sample_id}: single-view sample has {len(self.images)} images")
        for i, s in enumerate(self.steps):
            if s.target_image is not None and not 0 <= s.target_image < len(self.images):
                raise SchemaError(f"{self.sample_id}: step {i} targets image {s.target_image}, "
                                  f"only {len(self.images)} images")
        for k, v in (self.interleaved_before_step or {}).items():
            if not 0 <= int(k) < len(self.steps) or not 0 <= int(v) < len(self.images):
                raise SchemaError(f"{self.sample_id}: bad interleaved entry {k}: {v}")
        return self

    @property
    def assigned(self) -> bool:
        return all(s.target_image is not None for s in self.steps)

    def with_targets(self, targets) -> "ReasoningSample":
        steps = [Step(s.text, int(t)) for s, t in zip(self.steps, targets)]
        return replace(self, steps=steps)


def sample_to_dict(s: ReasoningSample) -> dict:
    d = {
        "sample_id": s.sample_id,
        "regime": s.regime,
        "images": [{"id": i, "pixels_b64": pixels_to_b64(img.pixels), "side": img.side}
                   for i, img in enumerate(s.images)],
        "question": s.question,
        "steps": [{"text": st.text, "target_image": st.target_image} for st in s.steps],
        "answer": s.answer,
    }
    if s.interleaved_before_step:
        d["interleaved_before_step"] = {str(k): int(v) for k, v in sorted(s.interleaved_before_step.items())}
    if s.family is not None:
        d["family"] = s.family
    if s.meta:
        d["meta"] = s.meta
    return d


_REQUIRED = ("sample_id", "regime", "images", "question", "steps", "answer")


def sample_from_dict(d: dict, where: str = "") -> ReasoningSample:
    for key in _REQUIRED:
        if key not in d:
            raise SchemaError(f"{where}missing field {key!r}")
    try:
        images = []
        for j, im in enumerate(d["images"]):
            if int(im["id"]) != j:
                raise SchemaError(f"{where}image ids must be 0..n-1 in order")
            images.append(Image(pixels_from_b64(im["pixels_b64"], int(im["side"])), j, d["sample_id"]))
        steps = [Step(str(s["text"]), None if s.get("target_image") is None else int(s["target_image"]))
                 for s in d["steps"]]
        inter = d.get("interleaved_before_step")
        inter = {int(k): int(v) for k, v in inter.items()} if inter else None
        sample = ReasoningSample(str(d["sample_id"]), images, str(d["question"]), steps, str(d["answer"]),
                                 str(d["regime"]), inter, d.get("family"), d.get("meta") or {})
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"{where}{e}") from None
    try:
        return sample.validate()
    except SchemaError as e:
        raise SchemaError(f"{where}{e}") from None


def save_jsonl(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_dict(s), sort_keys=True, separators=(",", ":")) + "\n")


def load_jsonl(path) -> list[ReasoningSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{Path(path).name}:{lineno}: "
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{where}invalid JSON ({e.msg})") from None
            out.append(sample_from_dict(d, where))
    return out
