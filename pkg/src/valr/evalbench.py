"""Exact-match evaluation with per-family and per-length breakdowns."""

from __future__ import annotations

import csv
import hashlib
import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data.plans import prompt_tokens
from .decode import DecodeConfig, decode_model

BUCKETS = ((0, 8), (8, 16), (16, 32), (32, None))


def bucket_label(lo, hi) -> str:
    return f"[{lo},{'inf' if hi is None else hi})"


def bucket_of(n: int) -> str:
    for lo, hi in BUCKETS:
        if n >= lo and (hi is None or n < hi):
            return bucket_label(lo, hi)
    raise ValueError(n)


def normalize(text: str) -> str:
    return " ".join(text.casefold().split())


def extract_answer(words: list[str], marker: str = "Answer:") -> str | None:
    """Text after the last answer marker, or None if there is no marker."""
    if marker not in words:
        return None
    i = len(words) - 1 - words[::-1].index(marker)
    return " ".join(words[i + 1:])


@dataclass
class EvalReport:
    accuracy: float
    n: int
    per_family: dict
    per_bucket: dict
    n_missing_marker: int
    n_truncated: int
    seed: int | None = None
    checkpoint: str | None = None
    decode: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def to_dict(self, with_records: bool = True) -> dict:
        d = asdict(self)
        if not with_records:
            d.pop("records")
        return d


def _cell(hits):
    return {"accuracy": (sum(hits) / len(hits)) if hits else None, "n": len(hits)}


def evaluate_predictions(samples, predict, seed=None, checkpoint=None, decode_cfg=None) -> EvalReport:
    """``predict(sample) -> (generated words without latents, truncated flag)``."""
    fams, buckets, records = {}, {bucket_label(*b): [] for b in BUCKETS}, []
    hits, missing, truncated = [], 0, 0
    for s in samples:
        words, trunc = predict(s)
        pred = extract_answer(words)
        ok = pred is not None and normalize(pred) == normalize(s.answer)
        missing += pred is None
        truncated += bool(trunc)
        hits.append(ok)
        fams.setdefault(s.family or "unknown", []).append(ok)
        b = bucket_of(len(words))
        buckets[b].append(ok)
        records.append({"sample_id": s.sample_id, "family": s.family, "answer": s.answer, "prediction": pred,
                        "correct": ok, "length": len(words), "missing_marker": pred is None,
                        "truncated": bool(trunc)})
    return EvalReport(sum(hits) / len(hits) if hits else 0.0, len(hits),
                      {k: _cell(v) for k, v in sorted(fams.items())}, {k: _cell(v) for k, v in buckets.items()},
                      missing, truncated, seed, checkpoint, dict(decode_cfg or {}), records)


def checkpoint_predictor(ck, dcfg: DecodeConfig):
    n_patch = ck.model_cfg.grid * ck.model_cfg.grid
    vocab = ck.vocab

    def predict(sample):
        plan = prompt_tokens(sample, vocab, n_patch)
        out, trace = decode_model(ck.model_cfg, ck.params, plan, dcfg, vocab, trained_K=ck.K)
        return vocab.decode(out).split(), trace.truncated

    return predict


def checkpoint_id(path) -> str:
    h = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
    return f"{Path(path).name}@{h}"


def evaluate(ck, samples, dcfg: DecodeConfig, seed=None, checkpoint=None) -> EvalReport:
    return evaluate_predictions(samples, checkpoint_predictor(ck, dcfg), seed, checkpoint, asdict(dcfg))


def snapshot(params) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- comparison


def _mean_std(xs):
    xs = [x for x in xs if x is not None]
    if not xs:
        return None, None
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def compare(reports: dict) -> dict:
    """``reports``: label -> list of EvalReports (one per seed) -> comparison table."""
    families = sorted({f for rs in reports.values() for r in rs for f in r.per_family})
    rows = []
    for label, rs in reports.items():
        row = {"model": label, "n_seeds": len(rs), "seeds": [r.seed for r in rs]}
        row["overall_mean"], row["overall_std"] = _mean_std([r.accuracy for r in rs])
        for f in families:
            row[f"{f}_mean"], row[f"{f}_std"] = _mean_std(
                [r.per_family[f]["accuracy"] if f in r.per_family else None for r in rs])
        rows.append(row)
    return {"families": families, "rows": rows}


def write_comparison(table: dict, out_dir, stem: str = "comparison") -> dict:
    from .plotting import accuracy_bars
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / f"{stem}.json", "csv": out_dir / f"{stem}.csv", "png": out_dir / f"{stem}.png"}
    paths["json"].write_text(json.dumps(table, indent=2, sort_keys=True))
    cols = ["model", "n_seeds", "overall_mean", "overall_std"] + [
        f"{f}_{s}" for f in table["families"] for s in ("mean", "std")]
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in table["rows"]:
            w.writerow({k: ("" if row.get(k) is None else (f"{row[k]:.4f}" if isinstance(row[k], float) else row[k]))
                        for k in cols})
    columns = ["overall"] + table["families"]
    bars = [(r["model"], {c: (r[f"{c}_mean"], r[f"{c}_std"]) for c in columns}) for r in table["rows"]]
    accuracy_bars(bars, columns, paths["png"], "accuracy (mean and stdev over seeds)")
    return paths


def format_table(table: dict) -> str:
    """Human-readable rendering of a comparison table."""
    cols = ["overall"] + table["families"]
    lines = ["model".ljust(16) + "".join(c[:18].rjust(20) for c in cols)]
    for row in table["rows"]:
        cells = []
        for c in cols:
            m, s = row[f"{c}_mean"], row[f"{c}_std"]
            cells.append(("-" if m is None else f"{m:.3f} +/- {s:.3f}").rjust(20))
        lines.append(str(row["model"])[:16].ljust(16) + "".join(cells))
    return "\n".join(lines)
