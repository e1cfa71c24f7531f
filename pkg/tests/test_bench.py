import json
import random

import pytest

from beaconmesh.bench import (
    QUESTION_SHAPES,
    BenchError,
    generate_corpus,
    load_corpus,
    make_agents,
    random_selector,
    run_bench,
)
from beaconmesh.engine import TRUTH_MARKER
from beaconmesh.fabric import Bid
from beaconmesh.matching import DEFAULT_TAXONOMY, KeywordTagger
from beaconmesh.protocol import BeaconResponseBody

TAGGER = KeywordTagger.load()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return generate_corpus(tmp_path_factory.mktemp("corpus"), n_tasks=120, n_agents=8, seed=0)


def test_every_shape_tags_only_its_skill():
    for skill, shape in QUESTION_SHAPES.items():
        vec = TAGGER.tag(shape.format(x=1, y=2, m="[[truth=1;wrong=2]]"))
        assert [s for s, v in zip(TAGGER.skills, vec) if v] == [skill]


def test_corpus_is_deterministic(tmp_path, corpus):
    other = generate_corpus(tmp_path, n_tasks=120, n_agents=8, seed=0)
    assert (other / "tasks.jsonl").read_bytes() == (corpus / "tasks.jsonl").read_bytes()
    assert (other / "agents.json").read_bytes() == (corpus / "agents.json").read_bytes()


def test_corpus_shape(corpus):
    agents, tasks = load_corpus(corpus)
    assert len(agents) == 8 and len(tasks) == 120
    for t in tasks:
        assert len(t["chains"]) == 3
        for c in t["chains"]:
            assert 2 <= len(c["subtasks"]) <= 4
            assert all(q.endswith("?") for q in c["subtasks"])
            assert TRUTH_MARKER.search(c["subtasks"][-1]).group(1) == t["answer"]


def test_agents_are_specialists():
    for doc in make_agents(8, random.Random(1)):
        vec = sorted(doc["capability_vector"], reverse=True)
        assert vec[0] >= 0.75 and 0.3 <= vec[1] <= 0.6 and vec[2] <= 0.2
    primaries = {DEFAULT_TAXONOMY[max(range(8), key=d["capability_vector"].__getitem__)]
                 for d in make_agents(8, random.Random(1))}
    assert primaries == set(DEFAULT_TAXONOMY)


def test_random_selector_is_keyed_on_slot():
    bids = [Bid(c * 64, BeaconResponseBody(0.5, 0, 0), 0.0) for c in "abcdef"]
    pick = random_selector(3)
    first = [pick(("t", c, k), bids).agent_id for c in range(3) for k in range(1, 4)]
    again = [pick(("t", c, k), list(reversed(bids))).agent_id for c in range(3) for k in range(1, 4)]
    assert first == again
    assert len(set(first)) > 1


def test_score_beats_random_and_three_chains_help(corpus):
    res = {(m, c): run_bench(corpus, m, c, seed=0, limit=60) for m in ("score", "random") for c in (1, 3)}
    assert res["score", 1].accuracy > res["random", 1].accuracy
    assert res["score", 3].accuracy > res["random", 3].accuracy
    assert res["score", 3].accuracy >= res["score", 1].accuracy
    doc = res["score", 3].to_json()
    assert doc["tasks"] == 60 and doc["mode"] == "score" and 0 <= doc["accuracy"] <= 1


def test_bench_is_reproducible(corpus):
    a = run_bench(corpus, "random", 3, seed=4, limit=20)
    b = run_bench(corpus, "random", 3, seed=4, limit=20)
    assert (a.correct, a.failed) == (b.correct, b.failed)


def test_bench_errors(tmp_path, corpus):
    with pytest.raises(BenchError, match="agents.json"):
        run_bench(tmp_path, "score", 1)
    with pytest.raises(BenchError):
        run_bench(corpus, "oracle", 1)
    with pytest.raises(BenchError):
        run_bench(corpus, "score", 0)
    (tmp_path / "agents.json").write_text("[]")
    (tmp_path / "tasks.jsonl").write_text(json.dumps({"x": 1}) + "\n")
    with pytest.raises(BenchError):
        load_corpus(tmp_path)
    (tmp_path / "agents.json").write_text("{oops")
    with pytest.raises(BenchError):
        load_corpus(tmp_path)
