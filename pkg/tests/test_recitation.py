import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfqa.corpus import SourceQuestion
from cfqa.errors import ConfigError, TemplateAmbiguityError
from cfqa.gateway import FixtureBuilder, Gateway
from cfqa.recitation import (
    BACKEND_ERROR,
    RecitationConfig,
    RecitationExemplar,
    RecitationPromptTemplate,
    build_recitation_prompt,
    generate_recitations,
    load_recitation_template,
    parse_recitation,
    render_as_completion,
)

T = load_recitation_template()

# One dedicated completion per format violation.
VIOLATION_FIXTURES = {
    "missing_blank_line": "Tiger Eyes is a novel by Judy Blume.\nAnswer: Judy Blume",
    "missing_answer_marker": "Tiger Eyes is a novel by Judy Blume.\n\nJudy Blume",
    "empty_document": "\n\nAnswer: Judy Blume",
    "empty_answer": "Tiger Eyes is a novel by Judy Blume.\n\nAnswer:   ",
    "trailing_garbage": "Tiger Eyes is a novel by Judy Blume.\n\nAnswer: Judy Blume\nAnd some rambling afterwards.",
}


@pytest.mark.parametrize("reason,raw", sorted(VIOLATION_FIXTURES.items()))
def test_each_violation_reason(reason, raw):
    r = parse_recitation(raw, T)
    assert not r.ok
    assert r.violation == reason


def test_well_formed():
    r = parse_recitation("Doc line one.\nDoc line two.\n\nAnswer: Judy Blume\n", T)
    assert (r.document, r.answer) == ("Doc line one.\nDoc line two.", "Judy Blume")


def test_next_question_block_is_not_garbage():
    r = parse_recitation("Doc.\n\nAnswer: X\n\nQuestion: another one?", T)
    assert r.ok and r.answer == "X"


def test_second_answer_line_is_trailing_garbage():
    r = parse_recitation("Doc.\n\nAnswer: X\nAnswer: Y", T)
    assert r.violation == "trailing_garbage"


def test_multiline_answer_mode():
    raw = "Doc.\n\nAnswer: first line\nsecond line"
    assert parse_recitation(raw, T).violation == "trailing_garbage"
    r = parse_recitation(raw, T, multiline_answer=True)
    assert r.answer == "first line\nsecond line"


def test_empty_completion():
    assert parse_recitation("", T).violation == "empty_document"


_marker_free = st.text(
    st.characters(blacklist_categories=("Cs",), blacklist_characters="\r\x0b\x0c\x1c\x1d\x1e\x85  "),
    min_size=1, max_size=80,
).map(str.strip).filter(lambda s: s and all(m not in s for m in T.markers))


@settings(max_examples=1000, deadline=None)
@given(_marker_free, _marker_free.filter(lambda s: "\n" not in s))
def test_round_trip(document, answer):
    r = parse_recitation(render_as_completion(document, answer, T), T)
    assert r.ok, r.violation
    assert (r.document, r.answer) == (document, answer)


def test_prompt_structure():
    q = SourceQuestion("q1", "Who wrote Tiger Eyes?", ("Judy Blume",))
    prompt = build_recitation_prompt(T, q)
    assert prompt.count(T.question_marker) == len(T.exemplars) + 1
    assert prompt.count(T.answer_marker) == len(T.exemplars)
    assert prompt.endswith("Question: Who wrote Tiger Eyes?\nDocument:\n")
    assert len(T.exemplars) == 5
    assert build_recitation_prompt(T, q) == prompt


def test_prompt_rejects_marker_in_question():
    with pytest.raises(TemplateAmbiguityError):
        build_recitation_prompt(T, "What follows Answer: here?")


def test_template_validation():
    ex = RecitationExemplar("Q?", "Doc.", "A")
    with pytest.raises(ConfigError):
        RecitationPromptTemplate("", (ex,), answer_marker="Question:")
    with pytest.raises(ConfigError):
        RecitationPromptTemplate("", (), min_exemplars=1)
    with pytest.raises(TemplateAmbiguityError):
        RecitationPromptTemplate("", (RecitationExemplar("Q?", "Doc. Answer: A", "A"),))


def test_config_validation():
    with pytest.raises(ConfigError):
        RecitationConfig(k_samples=0)
    with pytest.raises(ConfigError):
        RecitationConfig(temperature=-0.1)


def test_generation_isolates_failures():
    q = SourceQuestion("q1", "Who wrote Tiger Eyes?", ("Judy Blume",))
    prompt = build_recitation_prompt(T, q)
    b = FixtureBuilder()
    b.add_completion(prompt, render_as_completion("Doc zero.", "Alice", T), 0)
    b.add_error(prompt, 1, "refusal")
    b.add_completion(prompt, "no structure at all", 2)
    out = generate_recitations(Gateway(b.build(), max_retries=0), T, RecitationConfig(k_samples=3), q)
    assert [c.sample_index for c in out] == [0, 1, 2]
    assert out[0].parsed and out[0].answer == "Alice"
    assert out[1].violation == BACKEND_ERROR
    assert out[2].violation == "missing_answer_marker"
    assert all(c.provenance.temperature == 0.7 for c in out)


def test_generation_order_independent_of_workers():
    qs = [SourceQuestion(f"q{i}", f"Question number {i}?", ("x",)) for i in range(4)]
    b = FixtureBuilder()
    backend = b.build(strict=False)
    cfg = RecitationConfig(k_samples=6)
    from cfqa.recitation import generate_many

    serial = generate_many(Gateway(backend), T, cfg, qs, seed=3, max_workers=1)
    parallel = generate_many(Gateway(backend), T, cfg, qs, seed=3, max_workers=8)
    assert serial == parallel
    assert [(c.question_id, c.sample_index) for c in serial] == [(q.question_id, i) for q in qs for i in range(6)]
