import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eog.kg import KnowledgeGraph, Triple
from eog.trace import count_tokens, extract_mentioned_triples, extract_tuple_mentions, parse_trace


def test_minimal_well_formed():
    tr = parse_trace('<think>x</think><answer>["Paris"]</answer>')
    assert tr.think == "x"
    assert tr.answers == {"paris"}
    assert tr.format_valid


def test_no_tags():
    tr = parse_trace("no tags at all")
    assert not tr.format_valid
    assert tr.answers is None
    assert tr.predicted == frozenset()


def test_non_json_answer_falls_back_to_singleton():
    tr = parse_trace("<think>t</think><answer>London</answer>")
    assert tr.format_valid
    assert tr.answers == {"london"}


def test_json_string_answer_is_unquoted():
    assert parse_trace('<think>t</think><answer>"Rome"</answer>').answers == {"rome"}


def test_empty_json_list():
    tr = parse_trace("<think>t</think><answer>[]</answer>")
    assert tr.format_valid and tr.answers == frozenset()


@pytest.mark.parametrize(
    "raw",
    [
        "<answer>[\"a\"]</answer><think>t</think>",
        "<think>t</think><think>u</think><answer>[\"a\"]</answer>",
        "<think>t</think><answer>[\"a\"]</answer><answer>[\"b\"]</answer>",
        "<think>t<answer>[\"a\"]</answer></think>",
        "<think>t</think>[\"a\"]",
        "<think>t</think><answer>[\"a\"]",
    ],
)
def test_bad_layouts_are_invalid(raw):
    assert not parse_trace(raw).format_valid


def test_count_tokens():
    assert count_tokens("a b  c") == 3
    assert count_tokens("") == 0
    assert count_tokens(" ".join(["x"] * 3001)) == 3001


def test_mentioned_requires_all_three_parts():
    cands = {Triple("paris", "capital of", "france")}
    assert extract_mentioned_triples("Paris is the capital of France", cands) == cands
    assert extract_mentioned_triples("Paris is in France", cands) == set()


def test_mentioned_five_candidates_two_hits():
    cands = {
        Triple("a1", "r1", "b1"),
        Triple("a2", "r2", "b2"),
        Triple("a3", "r3", "b3"),
        Triple("a4", "r4", "b4"),
        Triple("a5", "r5", "b5"),
    }
    think = "we saw a1 via r1 to b1, and a4 r4 b4; also a2 and b2 but no relation"
    hits = extract_mentioned_triples(think, cands)
    assert hits == {Triple("a1", "r1", "b1"), Triple("a4", "r4", "b4")}


def test_tuple_mentions_validated_by_graph():
    g = KnowledgeGraph([("a", "r", "b")])
    think = "I checked (A, r, b) and (a, r, zzz)."
    assert extract_tuple_mentions(think, g) == {Triple("a", "r", "b")}


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=80))
def test_parse_is_total_and_deterministic(raw):
    a, b = parse_trace(raw), parse_trace(raw)
    assert a == b
    if a.format_valid:
        assert a.think is not None and a.answers is not None


words = st.sampled_from(["ab", "bc", "cd", "r", "s", "x y"])
cand_sets = st.sets(st.tuples(words, words, words).map(lambda t: Triple(*t)), max_size=8)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="abcdrsxy ", max_size=30), cand_sets, cand_sets, st.text(alphabet="abcdrsxy ", max_size=10))
def test_mention_monotonicity(think, c1, c2, extra):
    base = extract_mentioned_triples(think, c1)
    assert base <= c1
    assert base <= extract_mentioned_triples(think, c1 | c2)
    assert base <= extract_mentioned_triples(think + extra, c1)


def test_tags_are_case_sensitive():
    tr = parse_trace('<Think>x</Think><answer>["a"]</answer>')
    assert not tr.format_valid
    assert tr.predicted == frozenset()
    inner = parse_trace('<think>about <THINK> tags</think><answer>["a"]</answer>')
    assert inner.format_valid and inner.think == "about <THINK> tags"
