"""Step-to-image matching for multi-view samples."""

from __future__ import annotations

import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor

import httpx

from ..errors import CurationError
from .schema import ReasoningSample

log = logging.getLogger(__name__)

KEY_ENV = "VALR_MATCHER_KEY"

DEFAULT_PROMPT = """You are given {n_images} images, numbered 0 to {last}, and a step-by-step solution to a visual question.
For every step, pick the single image that is most useful for carrying out that step.

Question: {question}
Steps:
{steps}

Reply with exactly {n_steps} lines, one per step, in the form "<step number>. <image number>" and nothing else."""


class RuleBasedMatcher:
    """Picks the image named by ``view N`` in the step text; falls back to ``default``."""

    def __init__(self, pattern: str = r"\bview (\d+)\b", default: int = 0):
        self.pattern = re.compile(pattern)
        self.default = default

    def match(self, sample: ReasoningSample) -> list[int]:
        out = []
        for step in sample.steps:
            m = self.pattern.search(step.text)
            k = int(m.group(1)) if m else self.default
            out.append(k if 0 <= k < len(sample.images) else self.default)
        return out


def parse_numbered_list(text: str, n_steps: int, n_images: int) -> list[int]:
    """Strict parse of ``"1. 0\\n2. 1\\n..."``; raises ValueError on anything else."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != n_steps:
        raise ValueError(f"expected {n_steps} lines, got {len(lines)}")
    out = []
    for i, ln in enumerate(lines, 1):
        m = re.fullmatch(r"(\d+)[.)]\s*(\d+)", ln)
        if not m or int(m.group(1)) != i:
            raise ValueError(f"bad line {ln!r}")
        k = int(m.group(2))
        if not 0 <= k < n_images:
            raise ValueError(f"image {k} out of range")
        out.append(k)
    return out


class ExternalMatcher:
    """Asks a chat-completion endpoint; optional rule-based fallback."""

    def __init__(self, url: str, model: str = "gpt-4o", prompt: str = DEFAULT_PROMPT, retries: int = 2,
                 timeout: float = 30.0, fallback: RuleBasedMatcher | None = None, client: httpx.Client | None = None,
                 api_key: str | None = None, backoff: float = 0.0):
        self.url, self.model, self.prompt = url, model, prompt
        self.retries, self.timeout, self.backoff = retries, timeout, backoff
        self.fallback = fallback
        self.api_key = api_key if api_key is not None else os.environ.get(KEY_ENV)
        self.client = client or httpx.Client(timeout=timeout)

    def _request(self, sample: ReasoningSample) -> dict:
        steps = "\n".join(f"{i}. {s.text}" for i, s in enumerate(sample.steps, 1))
        content = self.prompt.format(n_images=len(sample.images), last=len(sample.images) - 1,
                                     question=sample.question, steps=steps, n_steps=len(sample.steps))
        return {"model": self.model, "messages": [{"role": "user", "content": content}]}

    def match(self, sample: ReasoningSample) -> list[int]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = self._request(sample)
        last = None
        for attempt in range(self.retries + 1):
            try:
                r = self.client.post(self.url, json=body, headers=headers, timeout=self.timeout)
                r.raise_for_status()
                text = r.json()["choices"][0]["message"]["content"]
                return parse_numbered_list(text, len(sample.steps), len(sample.images))
            except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as e:
                last = e
                log.debug("matcher attempt %d for %s failed: %s", attempt + 1, sample.sample_id, e)
                if self.backoff:
                    time.sleep(self.backoff * 2 ** attempt)
        if self.fallback is not None:
            log.warning("external matcher failed for %s after %d attempts (%s); using rule-based fallback",
                        sample.sample_id, self.retries + 1, last)
            return self.fallback.match(sample)
        raise CurationError(f"{sample.sample_id}: matcher failed after {self.retries + 1} attempts: {last}")


def assign_targets(sample: ReasoningSample, matcher=None) -> ReasoningSample:
    """Fill every step's target image according to the sample's regime."""
    if sample.regime == "single":
        return sample.with_targets([0] * len(sample.steps))
    if sample.regime == "interleaved":
        inter = sample.interleaved_before_step or {}
        targets, current = [], 0
        for i in range(len(sample.steps)):
            current = inter.get(i, current)
            targets.append(current)
        return sample.with_targets(targets)
    if matcher is None:
        raise CurationError(f"{sample.sample_id}: multi-view sample needs a matcher")
    targets = matcher.match(sample)
    if len(targets) != len(sample.steps):
        raise CurationError(f"{sample.sample_id}: matcher returned {len(targets)} targets for "
                            f"{len(sample.steps)} steps")
    return sample.with_targets(targets)


def curate(samples, matcher=None, workers: int = 4) -> tuple[list, list]:
    """Assign targets for a corpus; failed samples are skipped and logged.

    Returns ``(curated, skipped_ids)`` in input order.
    """
    def one(s):
        try:
            return assign_targets(s, matcher)
        except CurationError as e:
            log.warning("skipping sample: %s", e)
            return None

    if workers > 1 and isinstance(matcher, ExternalMatcher):
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(one, samples))
    else:
        done = [one(s) for s in samples]
    kept = [d for d in done if d is not None]
    skipped = [s.sample_id for s, d in zip(samples, done) if d is None]
    return kept, skipped
