import json

import numpy as np
import pytest

from valr.data.matchers import RuleBasedMatcher, assign_targets
from valr.data.synthetic import generate_synthetic
from valr.data.vocab import Vocabulary
from valr.decode import DecodeConfig
from valr.evalbench import (BUCKETS, bucket_of, compare, evaluate, evaluate_predictions, extract_answer,
                            format_table, snapshot, write_comparison)
from valr.model import init_params
from valr.training import Checkpoint, TrainConfig

VOCAB = Vocabulary.from_lexicon()


def corpus(n=200, seed=21):
    return [assign_targets(s, RuleBasedMatcher()) for s in generate_synthetic(n, seed=seed)]


def oracle(sample):
    words = " ".join(st.text for st in sample.steps).split() + ["Answer:"] + sample.answer.split()
    return words, False


def test_extract_answer():
    assert extract_answer("so 3 . Answer: 3".split()) == "3"
    assert extract_answer("Answer: red disk , blue square".split()) == "red disk , blue square"
    assert extract_answer("no marker".split()) is None


def test_bucket_edges():
    assert [bucket_of(n) for n in (0, 7, 8, 15, 16, 31, 32, 500)] == [
        "[0,8)", "[0,8)", "[8,16)", "[8,16)", "[16,32)", "[16,32)", "[32,inf)", "[32,inf)"]


def test_oracle_scores_one():
    rep = evaluate_predictions(corpus(), oracle)
    assert rep.accuracy == 1.0 and rep.n_missing_marker == 0
    assert set(rep.per_family) == {"count", "relative_position", "appearance_order"}


def test_empty_answers_score_zero_and_flag():
    rep = evaluate_predictions(corpus(50), lambda s: ([], False))
    assert rep.accuracy == 0.0 and rep.n_missing_marker == 50


def test_buckets_populated_and_sum():
    data = corpus(200)
    rng = np.random.default_rng(0)
    lengths = {s.sample_id: int(rng.integers(0, 50)) for s in data}

    def pred(s):
        w = ["red"] * lengths[s.sample_id]
        return (w[:-2] + ["Answer:", s.answer] if len(w) > 2 else w), False

    rep = evaluate_predictions(data, pred)
    assert len(rep.per_bucket) == len(BUCKETS)
    assert sum(c["n"] for c in rep.per_bucket.values()) == 200
    assert sum(c["n"] for c in rep.per_family.values()) == 200
    for c in list(rep.per_bucket.values()) + list(rep.per_family.values()):
        assert c["accuracy"] is None or 0 <= c["accuracy"] <= 1


def _tiny_checkpoint():
    cfg = TrainConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, K=4)
    mc = cfg.model_config(len(VOCAB))
    return Checkpoint({"K": 4, "model": mc.to_dict()}, mc, init_params(mc), [], VOCAB, {})


def test_evaluate_real_model_is_pure_and_deterministic():
    ck = _tiny_checkpoint()
    data = corpus(6)
    before = snapshot(ck.params)
    dcfg = DecodeConfig(K=4, max_new_positions=20)
    a = evaluate(ck, data, dcfg, seed=0)
    b = evaluate(ck, data, dcfg, seed=0)
    assert snapshot(ck.params) == before
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)


def test_compare_table(tmp_path):
    data = corpus(30)
    good = [evaluate_predictions(data, oracle, seed=s) for s in range(3)]
    bad = [evaluate_predictions(data, lambda x: ([], False), seed=s) for s in range(3)]
    mixed = [evaluate_predictions(data, oracle if s else (lambda x: ([], False)), seed=s) for s in range(3)]
    table = compare({"a": good, "b": bad, "a2": good, "m": mixed})
    rows = {r["model"]: r for r in table["rows"]}
    assert rows["a"]["overall_mean"] == 1.0 and rows["b"]["overall_mean"] == 0.0
    assert {k: v for k, v in rows["a"].items() if k != "model"} == {k: v for k, v in rows["a2"].items() if k != "model"}
    assert rows["m"]["overall_std"] == pytest.approx(np.std([0, 1, 1], ddof=1))
    assert "count_mean" in rows["a"]
    paths = write_comparison(table, tmp_path)
    assert paths["png"].stat().st_size > 0
    assert paths["csv"].read_text().splitlines()[0].startswith("model,n_seeds,overall_mean")
    assert "+/-" in format_table(table)
