"""Smoke test for the promptdiv_py extension module.

Build and install first: `pip install --no-build-isolation crates/python`
(or `maturin develop` inside crates/python), then run this file.
"""

import json
import math
import pathlib

import promptdiv_py as pd

FIXTURES = pathlib.Path(__file__).resolve().parents[2] / "core" / "tests" / "fixtures"


def main():
    x = "the quick brown fox jumps over the lazy dog"
    assert pd.ncd(x, x) < 0.5 < pd.ncd(x, "0123456789 !@#$%^&*() ZYXWVUTSRQ")
    assert pd.compressed_size("hello") > 0
    assert abs(pd.ngram_cosine("zzzz", "aaaa") - 1.0) < 1e-12
    assert pd.ngram_cosine("the cat", "The cat", unit="word") == 0.0

    w = pd.synthetic_workload(size=200, seed=0)
    pool = w.pool
    assert len(pool) == 200 and len(w.failing_ids) == 40
    json.loads(w.mock_rules)

    art = pd.adaptive_select(pool, 50, w.template, w.mock_rules, seed=1)
    assert len(art) == 50 and len(set(art.ids)) == 50
    assert math.isinf(art.steps[0][1]) and art.steps[0][2] == 0
    assert len(art.verdicts) == 50

    rnd = pd.random_select(pool, 50, seed=1)
    assert len(rnd) == 50 and rnd.steps[0][1] is None

    small = pd.TestPool.from_texts([("a", "aaaa", "1"), ("b", "zzzz", "2"), ("c", "aaab", None)])
    t = pd.tsdm_select(small, 2)
    assert t.ids[:2] == ["a", "b"]

    table = pd.EmbeddingTable.load(str(FIXTURES / "embeddings_3.jsonl"))
    epool = pd.TestPool.load(str(FIXTURES / "embed_pool.jsonl"))
    rules = (FIXTURES / "mock_rules.json").read_text()
    template = (FIXTURES / "template.txt").read_text()
    e = pd.adaptive_select(epool, 3, template, rules, distance="embed", embeddings=table)
    assert sorted(e.ids) == sorted(epool.ids())

    assert abs(pd.apfd([True, False, False]) - (1 - 1 / 3 + 1 / 6)) < 1e-12
    assert pd.unique_words(["The cat.", "the dog"]) == 3
    stat, p, method = pd.wilcoxon([(i + 1.0, 0.0) for i in range(8)])
    assert method == "exact" and p < 0.01

    try:
        pd.adaptive_select(pool, 5, w.template, w.mock_rules, distance="bogus")
    except ValueError as err:
        assert "bogus" in str(err)
    else:
        raise AssertionError("unknown distance accepted")

    print("promptdiv_py smoke test passed:", pd.__version__)


if __name__ == "__main__":
    main()
