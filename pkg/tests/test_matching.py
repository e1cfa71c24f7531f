import asyncio
import itertools
import math

import mpmath
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beaconmesh.engine import ScriptedBehavior, ScriptedEngine
from beaconmesh.matching import (
    DEFAULT_TAXONOMY,
    DegenerateVector,
    EngineTagger,
    KeywordTagger,
    NoResponders,
    ValidationError,
    match_score,
    one_hot,
    rank_responses,
    requirement_of,
    select_executor,
    uniform_vector,
    validate_vector,
)
from beaconmesh.protocol import BeaconResponseBody
from strategies import unit_vectors

# independent 50-digit evaluation of 1.5 / sqrt(1.25 * 2)
FROZEN_COSINE = 0.94868329805051379959966806332981556011586654179757


def oracle_cosine(c, r):
    with mpmath.workdps(50):
        c = [mpmath.mpf(x) for x in c]
        r = [mpmath.mpf(x) for x in r]
        value = mpmath.fdot(c, r) / (mpmath.sqrt(mpmath.fdot(c, c)) * mpmath.sqrt(mpmath.fdot(r, r)))
        return float(min(1, max(0, value)))


def test_self_similarity():
    v = (0.3, 0.1, 0.9)
    assert match_score(v, v) == pytest.approx(1.0, abs=1e-12)


def test_orthogonal():
    assert match_score((1, 0, 0), (0, 1, 0)) == 0.0


def test_frozen_three_dimensional_case():
    assert match_score((1, 0.5, 0), (1, 1, 0)) == pytest.approx(FROZEN_COSINE, abs=1e-12)
    assert round(match_score((1, 0.5, 0), (1, 1, 0)), 4) == 0.9487


def test_zero_vector_is_degenerate():
    with pytest.raises(DegenerateVector):
        match_score((0, 0), (1, 0))


def test_dimension_mismatch():
    with pytest.raises(ValidationError):
        match_score((1, 0), (1, 0, 0))


@pytest.mark.parametrize("bad", [(1.5, 0), (-0.1, 1), (math.nan, 1), ()])
def test_validate_vector_rejects(bad):
    with pytest.raises(ValidationError):
        validate_vector(bad)


def test_validate_vector_dimension():
    with pytest.raises(ValidationError):
        validate_vector((1, 0), dim=3)
    with pytest.raises(DegenerateVector):
        validate_vector((0, 0))


@settings(max_examples=400, deadline=None)
@given(unit_vectors(), unit_vectors())
def test_matches_high_precision_oracle(c, r):
    s = match_score(c, r)
    assert 0.0 <= s <= 1.0
    assert s == pytest.approx(oracle_cosine(c, r), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(unit_vectors(), unit_vectors(), st.floats(0.01, 1.0))
def test_scale_invariance(c, r, k):
    scaled = [x * k for x in c]
    if any(x > 0 for x in scaled):
        assert match_score(scaled, r) == pytest.approx(match_score(c, r), abs=1e-9)


def resp(score, at=0, load=0):
    return BeaconResponseBody(score, load, at)


def test_single_responder():
    assert select_executor([("a" * 64, resp(0.1))]) == "a" * 64


def test_argmax():
    got = select_executor([("A", resp(0.2)), ("B", resp(0.9)), ("C", resp(0.7))])
    assert got == "B"


def test_tie_broken_by_earlier_response():
    fixture = [("B", resp(0.9, at=5)), ("C", resp(0.9, at=3))]
    # brute force: every ordering of the fixture selects the same winner
    winners = {select_executor(list(p)) for p in itertools.permutations(fixture)}
    assert winners == {"C"}


def test_tie_then_load_then_id():
    fixture = [("D", resp(0.5, 1, 2)), ("B", resp(0.5, 1, 1)), ("A", resp(0.5, 1, 1))]
    for p in itertools.permutations(fixture):
        assert [a for a, _ in rank_responses(list(p))] == ["A", "B", "D"]


def test_no_responders():
    with pytest.raises(NoResponders):
        select_executor([])


TAGGER = KeywordTagger.load()


def test_keyword_hit():
    vec = requirement_of("Do the arithmetic here", TAGGER)
    assert vec[DEFAULT_TAXONOMY.index("arithmetic")] == 1.0


def test_no_keywords_falls_back_to_uniform():
    assert requirement_of("Zzz qqq?", TAGGER) == uniform_vector(8)


def test_fixture_subtask_tags_algebra_and_arithmetic():
    vec = requirement_of("What is the product of the roots of this quadratic equation?", TAGGER)
    expected = [0.0] * 8
    expected[DEFAULT_TAXONOMY.index("arithmetic")] = 1.0  # "product"
    expected[DEFAULT_TAXONOMY.index("algebra")] = 1.0  # "roots", "quadratic", "equation"
    assert list(vec) == expected


def test_keywords_match_whole_words_only():
    assert TAGGER.tag("the summary")[0] == 0.0
    assert TAGGER.tag("the sum")[0] == 1.0


def test_empty_text_rejected():
    with pytest.raises(ValidationError):
        requirement_of("   ", TAGGER)


def test_one_hot():
    assert one_hot("logic") == (0, 0, 1, 0, 0, 0, 0, 0)
    with pytest.raises(ValidationError):
        one_hot("cooking")


def test_engine_tagger_and_fallback():
    engine = ScriptedEngine(ScriptedBehavior(rules=(("Sub-task: add", "arithmetic, logic"),), default="none"))
    tagger = EngineTagger(engine, fallback=TAGGER)
    vec = asyncio.run(tagger.tag("add these"))
    assert vec[0] == 1.0 and vec[2] == 1.0 and sum(vec) == 2.0
    # engine names nothing: keyword table decides
    assert asyncio.run(tagger.tag("the passage says")) == TAGGER.tag("the passage says")


def test_custom_taxonomy_file(tmp_path):
    path = tmp_path / "tax.json"
    path.write_text('{"music": ["melody"], "sport": ["goal"]}')
    tagger = KeywordTagger.load(path)
    assert tagger.skills == ("music", "sport")
    assert tagger.tag("a melody") == [1.0, 0.0]
    path.write_text('{"music": "melody"}')
    with pytest.raises(ValidationError):
        KeywordTagger.load(path)
