from __future__ import annotations

import random

import pytest

from zebra.kb_core import (
    Choice,
    Example,
    ExampleSet,
    KbError,
    QueryView,
    label_for_index,
    load_examples,
    make_choices,
    serialize_query,
    validate_example,
    write_examples,
)


def _example(**overrides) -> Example:
    base = dict(
        id="x1",
        question="What gets wet while drying?",
        choices=make_choices(["a towel", "a stone"]),
        answer_label="A",
        explanations=("Towels absorb water from other things.",),
        topic="objects",
    )
    base.update(overrides)
    return Example(**base)


def test_label_for_index():
    assert label_for_index(0) == "A"
    assert label_for_index(4) == "E"
    with pytest.raises(ValueError):
        label_for_index(26)
    with pytest.raises(ValueError):
        label_for_index(-1)


def test_make_choices_assigns_positional_labels():
    choices = make_choices(["x", "y", "z"])
    assert [c.label for c in choices] == ["A", "B", "C"]
    assert [c.text for c in choices] == ["x", "y", "z"]


def test_load_two_line_file(tmp_path):
    path = tmp_path / "kb.jsonl"
    path.write_text(
        '{"id": "a", "question": "Q1?", "choices": ["x", "y"]}\n'
        '{"id": "b", "question": "Q2?", "choices": ["u", "v"], "answer": "B"}\n',
        encoding="utf-8",
    )
    loaded = load_examples(path)
    assert len(loaded) == 2
    assert loaded.ids() == ["a", "b"]
    assert loaded["b"].answer_label == "B"


def test_load_duplicate_id_names_id_and_line(tmp_path):
    path = tmp_path / "kb.jsonl"
    path.write_text(
        '{"id": "q1", "question": "Q1?", "choices": ["x", "y"]}\n'
        '{"id": "q2", "question": "Q2?", "choices": ["x", "y"]}\n'
        '{"id": "q1", "question": "Q3?", "choices": ["x", "y"]}\n',
        encoding="utf-8",
    )
    with pytest.raises(KbError) as err:
        load_examples(path)
    assert "q1" in str(err.value)
    assert ":3" in str(err.value)


def test_load_rejects_answer_outside_choices(tmp_path):
    path = tmp_path / "kb.jsonl"
    record = {
        "id": "q1",
        "question": "Q?",
        "choices": ["a", "b", "c", "d", "e"],
        "answer": "F",
    }
    import json

    path.write_text(json.dumps(record) + "\n", encoding="utf-8")
    with pytest.raises(KbError, match="not among choices"):
        load_examples(path)


def test_load_reports_line_number_for_bad_json(tmp_path):
    path = tmp_path / "kb.jsonl"
    path.write_text(
        '{"id": "a", "question": "Q?", "choices": ["x", "y"]}\n{broken\n',
        encoding="utf-8",
    )
    with pytest.raises(KbError, match=":2"):
        load_examples(path)


def test_load_empty_file_is_an_error(tmp_path):
    path = tmp_path / "kb.jsonl"
    path.write_text("", encoding="utf-8")
    with pytest.raises(KbError, match="no examples"):
        load_examples(path)


def test_validate_accepts_valid_example():
    report = validate_example(_example())
    assert report.ok
    assert report.violations == ()


def test_validate_rejects_skipped_labels():
    ex = _example(choices=(Choice("A", "x"), Choice("C", "y")))
    report = validate_example(ex)
    assert not report.ok
    assert "labels not consecutive from A" in report.violations


def test_validate_rejects_empty_explanation():
    ex = _example(explanations=("fine", ""))
    report = validate_example(ex)
    assert not report.ok
    assert "empty explanation at index 1" in report.violations


def test_validate_collects_every_violation():
    ex = Example(
        id="bad",
        question="  ",
        choices=(Choice("A", "x"), Choice("B", " ")),
        answer_label="Z",
        explanations=("", "ok"),
    )
    report = validate_example(ex)
    assert not report.ok
    assert len(report.violations) >= 3


def test_validate_rejects_separator_in_text():
    # Only the space-padded marker breaks injectivity; a bare token is fine.
    assert validate_example(_example(question="What does x[SEP]y mean?")).ok
    report = validate_example(_example(question="What a [SEP] b means?"))
    assert not report.ok
    assert any("separator" in v for v in report.violations)


def test_validate_rejects_newlines():
    ex = _example(question="line one\nline two")
    report = validate_example(ex)
    assert not report.ok
    assert any("newline" in v for v in report.violations)


def test_serialize_query_paper_format():
    q = QueryView(
        id="q",
        question="Where could you find a toilet that only friends can use?",
        choices=make_choices(["rest area", "school", "stadium", "apartment", "hospital"]),
    )
    assert serialize_query(q) == (
        "Where could you find a toilet that only friends can use?"
        " [SEP] rest area [SEP] school [SEP] stadium [SEP] apartment [SEP] hospital"
    )


def test_serialize_query_single_choice():
    q = QueryView(id="q", question="Q?", choices=make_choices(["x"]))
    assert serialize_query(q) == "Q? [SEP] x"


def test_serialize_query_is_order_sensitive():
    a = QueryView(id="q", question="Q?", choices=make_choices(["x", "y"]))
    b = QueryView(id="q", question="Q?", choices=make_choices(["y", "x"]))
    assert serialize_query(a) != serialize_query(b)


def test_serialize_accepts_example_directly():
    ex = _example()
    assert serialize_query(ex) == serialize_query(ex.as_query())


def test_example_set_rejects_duplicates():
    s = ExampleSet([_example()])
    with pytest.raises(KbError, match="x1"):
        s.add(_example())


def test_round_trip_preserves_fields(tmp_path, kb_small):
    out = tmp_path / "copy.jsonl"
    write_examples(kb_small, out)
    reloaded = load_examples(out)
    assert reloaded.ids() == kb_small.ids()
    for ex_id in kb_small.ids():
        assert reloaded[ex_id] == kb_small[ex_id]


def test_round_trip_of_optional_fields(tmp_path):
    bare = Example(id="b", question="Q?", choices=make_choices(["x", "y"]))
    out = tmp_path / "bare.jsonl"
    write_examples(ExampleSet([bare]), out)
    back = load_examples(out)["b"]
    assert back.answer_label is None
    assert back.explanations == ()
    assert back.topic is None


def test_validator_detects_random_violations():
    rng = random.Random(7)
    breakers = [
        lambda ex: _example(question=""),
        lambda ex: _example(choices=make_choices(["only"])),
        lambda ex: _example(choices=(Choice("B", "x"), Choice("C", "y"))),
        lambda ex: _example(answer_label="Q"),
        lambda ex: _example(explanations=("ok", "  ")),
        lambda ex: _example(choices=(Choice("A", "x"), Choice("B", "\n"))),
    ]
    for _ in range(50):
        breaker = rng.choice(breakers)
        assert not validate_example(breaker(_example())).ok
