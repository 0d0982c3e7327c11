"""Reply-parsing corpus: concept extraction, verdict matching, fenced dicts."""

import pytest

from chbr.core import ClassLabel
from chbr.errors import ParseError
from chbr.sampler import (
    match_answer,
    parse_batch_verdicts,
    parse_concept_list,
    parse_final_concept,
)

WELL_FORMED_CONCEPTS = [
    ("The final concept is: a hammer-shaped head.", "a hammer-shaped head"),
    ("noise\nThe final concept is: X", "X"),
    ('THE FINAL CONCEPT IS: "quad exhaust outlets"', "quad exhaust outlets"),
    ("the final concept is: lowercase prefix", "lowercase prefix"),
    ("The Final Concept Is: Mixed Case Prefix", "Mixed Case Prefix"),
    ("The final concept is: 'single quoted'", "single quoted"),
    ("The final concept is:    padded   ", "padded"),
    ("The final concept is: trailing period.", "trailing period"),
    ('The final concept is: "quoted with period".', "quoted with period"),
    (
        "Step 1: think.\nStep 2: decide.\nThe final concept is: last line wins",
        "last line wins",
    ),
    (
        "The final concept is: early\nmore text\nThe final concept is: late",
        "late",
    ),
    ("prefix text The final concept is: after inline prefix", "after inline prefix"),
    ("The final concept is: Ünïcode pétals", "Ünïcode pétals"),
    ("The final concept is: comma, inside, phrase", "comma, inside, phrase"),
]

MALFORMED_CONCEPTS = [
    "no marker anywhere",
    "The final concept: missing is",
    "The final concept is:",
    "The final concept is:   .",
    "",
]


@pytest.mark.parametrize("reply,expected", WELL_FORMED_CONCEPTS)
def test_parse_final_concept_well_formed(reply, expected):
    assert parse_final_concept(reply) == expected


@pytest.mark.parametrize("reply", MALFORMED_CONCEPTS)
def test_parse_final_concept_malformed(reply):
    with pytest.raises(ParseError):
        parse_final_concept(reply)


WELL_FORMED_VERDICTS = [
    ('```\npredicted_dict = {"c1": "Abbey"}\n```', {"c1": "Abbey"}),
    ("```{'a': 'B'}```", {"a": "B"}),
    ('```\n{"a": "B", "c": "D",}\n```', {"a": "B", "c": "D"}),
    ("'''\npredicted_dict = {'x': 'Y'}\n'''", {"x": "Y"}),
    ('```python\npredicted_dict = {"k": "V"}\n```', {"k": "V"}),
    (
        'Here you go:\n```\npredicted_dict={"one": "Class A", "two": "Class B"}\n```\nDone.',
        {"one": "Class A", "two": "Class B"},
    ),
    ("```{}```", {}),
]

MALFORMED_VERDICTS = [
    "predicted_dict = {'a': 'B'}",  # no fence
    "```not a dict at all```",
    "```['a', 'b']```",
    "```{'a': 1}```",  # non-string value
    "no backticks in sight",
]


@pytest.mark.parametrize("reply,expected", WELL_FORMED_VERDICTS)
def test_parse_batch_verdicts_well_formed(reply, expected):
    assert parse_batch_verdicts(reply) == expected


@pytest.mark.parametrize("reply", MALFORMED_VERDICTS)
def test_parse_batch_verdicts_malformed(reply):
    with pytest.raises(ParseError):
        parse_batch_verdicts(reply)


SHARKS = [
    ClassLabel("gws", "Great White Shark"),
    ClassLabel("hh", "Hammerhead Shark"),
    ClassLabel("abbey", "Abbey"),
]


def test_match_answer_exact_case_insensitive():
    assert match_answer("great white shark", SHARKS).id == "gws"


def test_match_answer_containment():
    assert match_answer("The answer is: Abbey.", SHARKS).id == "abbey"


def test_match_answer_ambiguous_returns_none():
    assert match_answer("shark", SHARKS) is None


def test_match_answer_multiple_containment_returns_none():
    assert match_answer("Great White Shark or Hammerhead Shark?", SHARKS) is None


def test_match_answer_punctuation_and_whitespace():
    assert match_answer("  Great  White   Shark!!! ", SHARKS).id == "gws"


def test_match_answer_no_match():
    assert match_answer("Tiger Shark", SHARKS) is None


def test_parse_concept_list_counts():
    reply = "\n".join(
        f"The final concept is: concept {i}" for i in range(3)
    )
    assert parse_concept_list(reply, 3) == [f"concept {i}" for i in range(3)]
    with pytest.raises(ParseError):
        parse_concept_list(reply, 4)
