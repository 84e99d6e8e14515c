"""Command-line entry point: ``valr <command> [options]``.

Exit codes: 0 success, 1 user error (bad flags, bad config, bad input
files), 2 internal error.

Only ``extract-features``, stage-2 ``train`` with alignment, ``sweep`` and
``prepare-data --features-out`` import :mod:`valr.encoders`; everything else
runs without it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from .errors import ConfigError, ValrError

log = logging.getLogger("valr")

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- manifest


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


class RunManifest:
    """``manifest.json`` for one output directory.

    Written before any work, then rewritten with output hashes on completion.
    Output paths are relative to the directory so runs in different places
    can be compared.
    """

    def __init__(self, out_dir, command: str, argv, config: dict, seed, inputs=()):
        self.dir = Path(out_dir)
        self.data = {"command": command, "argv": list(argv), "config": config, "version": version_string(),
                     "seed": seed, "started": _now(), "finished": None, "status": "running",
                     "inputs": {str(p): file_hash(p) for p in inputs if Path(p).is_file()}, "outputs": {}}
        self.dir.mkdir(parents=True, exist_ok=True)
        self.write()

    def write(self) -> None:
        _atomic_write(self.dir / MANIFEST, json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self, status: str = "complete", error: str | None = None) -> None:
        outs = {}
        for p in sorted(self.dir.rglob("*")):
            if p.is_file() and p.name != MANIFEST and not p.name.endswith(".tmp"):
                outs[p.relative_to(self.dir).as_posix()] = file_hash(p)
        self.data.update(finished=_now(), status=status, outputs=outs)
        if error:
            self.data["error"] = error
        self.write()


def read_manifest(out_dir) -> dict:
    return json.loads((Path(out_dir) / MANIFEST).read_text())


class _Run:
    """Context manager that finalises a manifest whatever happens."""

    def __init__(self, *a, **kw):
        self.m = RunManifest(*a, **kw)

    def __enter__(self):
        return self.m

    def __exit__(self, et, ev, tb):
        self.m.finish("complete" if et is None else "failed", None if et is None else f"{et.__name__}: {ev}")
        return False


# ---------------------------------------------------------------- helpers


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _load_corpus(path):
    from .data import load_jsonl
    if not Path(path).is_file():
        raise UsageError(f"no such corpus file: {path}")
    return load_jsonl(path)


def _load_ckpt(path):
    from .training import load_checkpoint
    if not Path(path).is_file():
        raise UsageError(f"no such checkpoint: {path}")
    return load_checkpoint(path)


def _progress(rec):
    extra = "" if rec.get("repa") is None else f" repa {rec['repa']:.4f}"
    log.info("step %d ce %.4f%s total %.4f", rec["step"] + 1, rec["ce"], extra, rec["total"])


def _read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _make_matcher(args):
    from .data.matchers import KEY_ENV, ExternalMatcher, RuleBasedMatcher
    if args.matcher == "rule":
        return RuleBasedMatcher()
    if not args.matcher_url:
        raise UsageError("--matcher external needs --matcher-url")
    if not os.environ.get(KEY_ENV):
        raise UsageError(f"--matcher external needs the {KEY_ENV} environment variable")
    fallback = RuleBasedMatcher() if args.matcher_fallback else None
    return ExternalMatcher(args.matcher_url, model=args.matcher_model, retries=args.matcher_retries,
                           timeout=args.matcher_timeout, fallback=fallback)


def extract_features(samples, encoder_names, out_dir) -> dict:
    """Encode every image of ``samples`` and write ``{name}.valrfeat`` per encoder."""
    from .encoders import build_registry, write_feature_store
    reg = build_registry(encoder_names)
    entries = {name: {} for name in reg.names}
    for s in samples:
        for img in s.images:
            for name, f in reg.encode_all(img).items():
                entries[name][(img.sample_id, img.image_id)] = f.features
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, ent in entries.items():
        paths[name] = out_dir / f"{name}.valrfeat"
        write_feature_store(paths[name], ent)
    return paths


def _registry(cfg, features):
    from .encoders import build_registry, file_registry
    if features:
        return file_registry(features, cfg.encoders)
    return build_registry(cfg.encoders)


def _train_config(args, stage: int):
    from .training import TrainConfig
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"no such config file: {args.config}")
        return TrainConfig.from_json(args.config, stage=stage, seed=args.seed)
    return TrainConfig(stage=stage, **({} if args.seed is None else {"seed": args.seed}))


def _train_one(cfg, samples, out_dir, init_path=None, features=None) -> Path:
    """One stage into ``out_dir``; stage 2 needs ``init_path``. Also writes the loss plot."""
    from .plotting import loss_curves
    from .training import train_stage
    init = None
    if cfg.stage == 2:
        if not init_path:
            raise UsageError("stage 2 needs --init <stage-1 checkpoint>")
        init = _load_ckpt(init_path)
    registry = _registry(cfg, features) if cfg.uses_repa else None
    path = train_stage(cfg, samples, out_dir, init=init, registry=registry, progress=_progress)
    loss_curves(_read_metrics(Path(out_dir) / "metrics.jsonl"), Path(out_dir) / "loss.png", f"stage {cfg.stage}")
    return path


# ---------------------------------------------------------------- commands


def cmd_prepare_data(args, argv) -> int:
    from .data import save_jsonl
    from .data.matchers import curate
    from .data.synthetic import FAMILIES, generate_synthetic
    from .seeding import derive_seed
    families = _csv_list(args.families)
    eval_families = _csv_list(args.eval_families) if args.eval_families else families
    for f in families + eval_families:
        if f not in FAMILIES:
            raise UsageError(f"unknown family {f!r}; choose from {','.join(FAMILIES)}")
    if args.n_train < 1 or args.n_eval < 0:
        raise UsageError("--n-train must be positive and --n-eval non-negative")
    eval_seed = derive_seed(args.seed, "eval") % 2 ** 31
    config = {"families": families, "eval_families": eval_families, "n_train": args.n_train,
              "n_eval": args.n_eval, "matcher": args.matcher, "eval_seed": eval_seed,
              "features_out": args.features_out, "encoders": _csv_list(args.encoders)}
    out = Path(args.out)
    with _Run(out, "prepare-data", argv, config, args.seed):
        matcher = _make_matcher(args)
        train, skipped = curate(generate_synthetic(args.n_train, families, args.seed, prefix="train"), matcher,
                                args.workers)
        save_jsonl(train, out / "train.jsonl")
        if args.n_eval:
            held, sk2 = curate(generate_synthetic(args.n_eval, eval_families, eval_seed, prefix="eval"), matcher,
                               args.workers)
            save_jsonl(held, out / "eval.jsonl")
            skipped += sk2
        if skipped:
            (out / "skipped.txt").write_text("\n".join(skipped) + "\n")
        log.info("wrote %d train samples to %s (%d skipped)", len(train), out,
                 len(skipped))
    if args.features_out:
        fo = Path(args.features_out)
        with _Run(fo, "extract-features", argv, {"encoders": config["encoders"], "data": str(out / "train.jsonl")},
                  args.seed, [out / "train.jsonl"]):
            extract_features(train, config["encoders"], fo)
    return 0


def cmd_extract_features(args, argv) -> int:
    samples = _load_corpus(args.data)
    names = _csv_list(args.encoders)
    with _Run(args.out, "extract-features", argv, {"encoders": names}, None, [args.data]):
        paths = extract_features(samples, names, args.out)
        log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_train(args, argv) -> int:
    cfg = _train_config(args, args.stage)
    samples = _load_corpus(args.data)
    inputs = [args.data] + [p for p in (args.config, args.init) if p]
    with _Run(args.out, "train", argv, cfg.to_dict(), cfg.seed, inputs):
        path = _train_one(cfg, samples, args.out, args.init, args.features)
        log.info("checkpoint written to %s", path)
    return 0


def cmd_decode(args, argv) -> int:
    from .data.plans import prompt_tokens
    from .decode import DecodeConfig, decode_model
    ck = _load_ckpt(args.checkpoint)
    samples = _load_corpus(args.prompt_file)
    dcfg = DecodeConfig(ck.K, args.max_new)
    n_patch = ck.model_cfg.grid * ck.model_cfg.grid
    records = []
    for s in samples:
        out, trace = decode_model(ck.model_cfg, ck.params, prompt_tokens(s, ck.vocab, n_patch), dcfg, ck.vocab,
                                  trained_K=ck.K)
        print(f"{s.sample_id}\t{ck.vocab.decode(out)}")
        for e in trace.entries:
            rec = e.to_dict()
            if len(samples) > 1:
                rec["sample_id"] = s.sample_id
            records.append(rec)
    if args.trace_out:
        Path(args.trace_out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.trace_out, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return 0


def _parse_checkpoints(items) -> list[tuple[str, str]]:
    out = []
    for item in items:
        label, sep, path = item.partition("=")
        if not sep:
            path = item
            label = Path(item).parent.name or Path(item).stem
        out.append((label, path))
    labels = [lbl for lbl, _ in out]
    if len(set(labels)) != len(labels):
        raise UsageError(f"duplicate checkpoint labels: {labels}")
    return out


def cmd_eval(args, argv) -> int:
    from .decode import DecodeConfig
    from .evalbench import checkpoint_id, compare, evaluate, format_table, snapshot, write_comparison
    from .plotting import bucket_bars
    samples = _load_corpus(args.data)
    specs = _parse_checkpoints(args.checkpoint)
    seeds = [int(s) for s in _csv_list(args.seeds)] if args.seeds else [None]
    out = Path(args.report_out)
    jobs = []
    for label, tmpl in specs:
        for seed in seeds:
            path = tmpl.replace("{seed}", str(seed)) if seed is not None else tmpl
            if not Path(path).is_file():
                raise UsageError(f"no such checkpoint: {path}")
            jobs.append((label, seed, path))
    inputs = [args.data] + [p for *_, p in jobs]
    config = {"checkpoints": [[lbl, s, p] for lbl, s, p in jobs], "max_new": args.max_new}
    with _Run(out, "eval", argv, config, seeds[0], inputs):
        reports = {}
        for label, seed, path in jobs:
            ck = _load_ckpt(path)
            before = snapshot(ck.params)
            rep = evaluate(ck, samples, DecodeConfig(ck.K, args.max_new), seed, checkpoint_id(path))
            if snapshot(ck.params) != before:
                raise RuntimeError("evaluation changed checkpoint parameters")
            stem = label if seed is None else f"{label}_seed{seed}"
            (out / f"{stem}.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
            bucket_bars(rep.per_bucket, out / f"{stem}_buckets.png", f"{label}: accuracy by generated length")
            log.info("%s: accuracy %.4f over %d samples", stem, rep.accuracy, rep.n)
            reports.setdefault(label, []).append(rep)
        table = compare(reports)
        write_comparison(table, out)
        print(format_table(table))
    return 0


SWEEP_AXES = ("lambda", "K", "align_layer")


def validate_sweep_values(axis: str, raw: list[str], n_layers: int, min_p: int) -> list:
    """Parse and check sweep values; raises ConfigError before anything is trained."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    if not raw:
        raise ConfigError("--values is empty")
    vals = []
    for r in raw:
        try:
            v = float(r) if axis == "lambda" else int(r)
        except ValueError:
            raise ConfigError(f"{axis} value {r!r} is not a number") from None
        if axis == "lambda" and (v < 0 or not math.isfinite(v)):
            raise ConfigError(f"lambda must be non-negative, got {r}")
        if axis == "K":
            if v < 1 or (v > 1 and math.isqrt(v) ** 2 != v):
                raise ConfigError(f"K must be 1 or a perfect square, got {v}")
            if v > min_p:
                raise ConfigError(f"K={v} exceeds the smallest encoder patch count {min_p}")
        if axis == "align_layer" and not 0 <= v < n_layers:
            raise ConfigError(f"align_layer {v} outside [0, {n_layers})")
        vals.append(v)
    if len(set(vals)) != len(vals):
        raise ConfigError(f"duplicate sweep values: {raw}")
    return vals


def cmd_sweep(args, argv) -> int:
    from dataclasses import replace

    from .decode import DecodeConfig
    from .evalbench import evaluate
    from .plotting import sweep_plot
    from .training import TrainConfig
    cfg2 = _train_config(args, 2)
    cfg1 = None
    if args.init:
        n_layers = _load_ckpt(args.init).model_cfg.n_layers
    else:
        cfg1 = (TrainConfig.from_json(args.stage1_config, stage=1, seed=args.seed) if args.stage1_config
                else TrainConfig(stage=1, **({} if args.seed is None else {"seed": args.seed})))
        n_layers = cfg1.n_layers
    min_p = min(p for p, _ in _registry(cfg2, args.features).shapes().values())
    values = validate_sweep_values(args.axis, _csv_list(args.values), n_layers, min_p)
    key = {"lambda": "lam"}.get(args.axis, args.axis)
    # build every per-value config up front so bad combinations fail before training
    per_value = [(v, replace(cfg2, **{key: v})) for v in values]
    train = _load_corpus(args.data)
    held = _load_corpus(args.eval_data)
    out = Path(args.out)
    inputs = [args.data, args.eval_data] + [p for p in (args.config, args.init, args.stage1_config) if p]
    config = {"axis": args.axis, "values": values, "base": cfg2.to_dict(),
              "stage1": None if cfg1 is None else cfg1.to_dict()}
    with _Run(out, "sweep", argv, config, cfg2.seed, inputs):
        init = args.init
        if init is None:
            with _Run(out / "stage1", "sweep/train", argv, cfg1.to_dict(), cfg1.seed, [args.data]):
                init = str(_train_one(cfg1, train, out / "stage1"))
        families = sorted({s.family or "unknown" for s in held})
        rows = []
        for v, cfg in per_value:
            vdir = out / f"{args.axis}={v}"
            with _Run(vdir, "sweep/train+eval", argv, cfg.to_dict(), cfg.seed, [args.data, args.eval_data, init]):
                ckpt = _train_one(cfg, train, vdir, init, args.features)
                rep = evaluate(_load_ckpt(ckpt), held, DecodeConfig(cfg.K, args.max_new), cfg.seed)
                (vdir / "eval.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
            last = _read_metrics(vdir / "metrics.jsonl")[-1]
            row = {"value": v, "accuracy": rep.accuracy, "final_ce": last["ce"], "final_total": last["total"]}
            for f in families:
                row[f"{f}_accuracy"] = rep.per_family.get(f, {"accuracy": 0.0})["accuracy"]
            rows.append(row)
            log.info("%s=%s: accuracy %.4f", args.axis, v, rep.accuracy)
        cols = ["value", "accuracy"] + [f"{f}_accuracy" for f in families] + ["final_ce", "final_total"]
        (out / "sweep.json").write_text(json.dumps({"axis": args.axis, "columns": cols, "rows": rows},
                                                   indent=2, sort_keys=True) + "\n")
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(rows)
        sweep_plot(args.axis, values, {c: [r[c] for r in rows] for c in cols[1:-2]}, out / "sweep.png")
        for r in rows:
            print("  ".join(f"{c}={r[c]:.4f}" if isinstance(r[c], float) else f"{c}={r[c]}" for c in cols))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> Parser:
    p = Parser(prog="valr", description="Latent visual reasoning toy pipeline.")
    p.add_argument("--version", action="version", version=f"valr {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True

    s = sub.add_parser("prepare-data", help="generate synthetic train/eval corpora")
    s.add_argument("--families", default="count,relative_position,appearance_order")
    s.add_argument("--eval-families", default=None, help="families for the eval split (default: --families)")
    s.add_argument("--n-train", type=int, default=20000)
    s.add_argument("--n-eval", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--matcher", choices=("rule", "external"), default="rule")
    s.add_argument("--matcher-url")
    s.add_argument("--matcher-model", default="gpt-4o")
    s.add_argument("--matcher-retries", type=int, default=2)
    s.add_argument("--matcher-timeout", type=float, default=30.0)
    s.add_argument("--matcher-fallback", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--workers", type=int, default=4, help="in-flight external matcher requests")
    s.add_argument("--features-out", help="also extract training features into this directory")
    s.add_argument("--encoders", default="dct,hist,randproj")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("extract-features", help="precompute encoder features for a corpus")
    s.add_argument("--data", required=True)
    s.add_argument("--encoders", default="dct,hist,randproj")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract_features)

    s = sub.add_parser("train", help="train one curriculum stage")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--config", help="flat JSON config (TrainConfig keys)")
    s.add_argument("--data", required=True)
    s.add_argument("--features", help="directory of .valrfeat stores (stage 2)")
    s.add_argument("--init", help="stage-1 checkpoint (stage 2)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("decode", help="greedy decode prompts from a corpus file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prompt-file", required=True, help="JSONL corpus; questions and images are used")
    s.add_argument("--max-new", type=int, default=256)
    s.add_argument("--trace-out")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("eval", help="exact-match evaluation and model comparison")
    s.add_argument("--checkpoint", action="append", required=True,
                   help="[label=]path, repeatable; '{seed}' in the path expands per --seeds entry")
    s.add_argument("--data", required=True)
    s.add_argument("--report-out", required=True)
    s.add_argument("--seeds", help="comma-separated training seeds")
    s.add_argument("--max-new", type=int, default=256)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="stage-2 sweep over lambda, K or align_layer")
    s.add_argument("--axis", required=True, choices=SWEEP_AXES)
    s.add_argument("--values", required=True)
    s.add_argument("--config", help="base stage-2 config")
    s.add_argument("--data", required=True)
    s.add_argument("--eval-data", required=True)
    s.add_argument("--features")
    s.add_argument("--init", help="shared stage-1 checkpoint; trained once if omitted")
    s.add_argument("--stage1-config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-new", type=int, default=256)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args, argv)
    except (UsageError, ValrError) as e:
        print(f"valr {args.command}: error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130
    except Exception:
        log.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
