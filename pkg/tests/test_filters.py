import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfqa.corpus import FilterVerdict, Provenance, RecitationCandidate, ScoredCandidate, SourceQuestion, prompt_hash
from cfqa.errors import CapabilityError, ConfigError, DataError, UndefinedVerdictError
from cfqa.filters import (
    FilterConfig,
    apply_attribution_filter,
    apply_factuality_filter,
    build_attribution_prompt,
    build_factuality_prompt,
    judge_attribution,
    judge_factuality,
    judge_verdict,
    load_attribution_template,
    load_factuality_template,
    normalize_answer_surface,
    normalized_yes,
    score_surface,
    select_best_per_question,
    surface_form_match,
    surface_prefilter,
)
from cfqa.gateway import FixtureBuilder, Gateway, HttpBackend

Q = SourceQuestion("q1", "Who wrote Tiger Eyes?", ("Shirley Conran", "Conran"))
FACT_T = load_factuality_template()
ATTR_T = load_attribution_template()


def cand(answer, i=0, qid="q1", doc=None):
    prov = Provenance("mock", prompt_hash("p"), 0.7, i, "1970-01-01T00:00:00+00:00")
    return RecitationCandidate(qid, i, "raw", "parsed", prov, document=doc or f"Doc about {answer}.", answer=answer)


def verdict(p):
    return FilterVerdict(p, 1 - p, p)


def scored(answer, i=0, fact=None, attr=None, match=False, qid="q1"):
    return ScoredCandidate(cand(answer, i, qid), match,
                           verdict(fact) if fact is not None else None,
                           verdict(attr) if attr is not None else None)


@pytest.mark.parametrize("a,b,same", [
    ("Shirley  Conran", "shirley conran", True),
    ("  SHIRLEY\tCONRAN ", "Shirley Conran", True),
    ("Eugène", "Eugene", False),
    ("S. Conran", "S Conran", False),
    ("Straße", "STRASSE", False),
])
def test_surface_normalization(a, b, same):
    assert (normalize_answer_surface(a) == normalize_answer_surface(b)) is same


def test_surface_match_any_alias():
    assert surface_form_match("conran", Q.gold_answers)
    assert not surface_form_match("Judy Blume", Q.gold_answers)
    with pytest.raises(DataError):
        surface_form_match("x", [])


def test_normalized_yes():
    assert normalized_yes(0.3, 0.1) == pytest.approx(0.75)
    with pytest.raises(UndefinedVerdictError):
        normalized_yes(0.0, 0.0)
    with pytest.raises(DataError):
        normalized_yes(1.2, 0.0)


def test_variant_mass_is_summed():
    b = FixtureBuilder()
    b.add_token_probs("judge me", {"Yes": 0.4, " Yes": 0.2, "No": 0.3, " No": 0.1})
    v = judge_verdict(Gateway(b.build()), "judge me", FilterConfig())
    assert (v.p_yes_raw, v.p_no_raw) == pytest.approx((0.6, 0.4))
    assert v.normalized_yes == pytest.approx(0.6)


def test_prompts_end_with_verdict_marker_and_use_exemplar_counts():
    fp = build_factuality_prompt(FACT_T, Q.question_text, "Judy Blume", "Shirley Conran")
    ap = build_attribution_prompt(ATTR_T, Q.question_text, "Judy Blume wrote it.", "Judy Blume")
    assert fp.endswith(FACT_T.markers["verdict"])
    assert ap.endswith(ATTR_T.markers["verdict"])
    assert len(FACT_T.exemplars) == 8 and len(ATTR_T.exemplars) == 5
    FilterConfig().check_templates(FACT_T, ATTR_T)
    with pytest.raises(ConfigError):
        FilterConfig(factuality_exemplars=3).check_templates(FACT_T, ATTR_T)
    # factuality judge never sees a document
    assert "Judy Blume wrote it." not in fp


@pytest.mark.parametrize("p,kept", [(0.49, True), (0.5, False), (0.51, False)])
def test_factuality_threshold(p, kept):
    out = apply_factuality_filter([scored("Judy Blume", fact=p)], FilterConfig())
    assert bool(out) is kept


@pytest.mark.parametrize("p,kept", [(0.49, False), (0.5, True), (0.51, True)])
def test_attribution_threshold(p, kept):
    out = apply_attribution_filter([scored("Judy Blume", attr=p)], FilterConfig())
    assert bool(out) is kept


def test_unjudged_candidates_dropped():
    cfg = FilterConfig()
    assert apply_factuality_filter([scored("Judy Blume")], cfg) == []
    assert apply_attribution_filter([scored("Judy Blume")], cfg) == []


def test_surface_matches_removed_before_judge():
    cfg = FilterConfig()
    sc = score_surface([cand("shirley conran", 0), cand("Judy Blume", 1)], {"q1": Q}, cfg)
    assert [c.surface_match for c in sc] == [True, False]
    assert [c.answer for c in surface_prefilter(sc, cfg)] == ["Judy Blume"]
    canonical = score_surface([cand("Conran")], {"q1": Q}, FilterConfig(surface_aliases="canonical"))
    assert canonical[0].surface_match is False


def test_factual_mode_keeps_surface_matches_without_judge():
    cfg = FilterConfig(mode="factual")
    sc = score_surface([cand("shirley conran", 0), cand("Judy Blume", 1)], {"q1": Q}, cfg)
    backend = FixtureBuilder().build()  # strict and empty: any judge call would fail
    judged = judge_factuality(Gateway(backend), FACT_T, surface_prefilter(sc, cfg), {"q1": Q}, cfg)
    assert backend.calls["next_token"] == 0
    assert [c.answer for c in apply_factuality_filter(judged, cfg)] == ["shirley conran"]


def test_judge_errors_are_recorded_not_raised():
    cfg = FilterConfig()
    sc = [scored("Judy Blume", 0), scored("Jackie Collins", 1)]
    b = FixtureBuilder()
    b.add_token_probs(build_factuality_prompt(FACT_T, Q.question_text, "Judy Blume", Q.canonical_gold),
                      {"Yes": 0.0, "No": 0.0})
    out = judge_factuality(Gateway(b.build(), max_retries=0), FACT_T, sc, {"q1": Q}, cfg)
    assert out[0].factuality_error == "undefined_verdict"
    assert out[1].factuality_error == "backend_error"
    assert apply_factuality_filter(out, cfg) == []


def test_capability_error_propagates():
    g = Gateway(HttpBackend("http://127.0.0.1:9", "h", supports_token_probs=False))
    with pytest.raises(CapabilityError):
        judge_attribution(g, ATTR_T, [scored("Judy Blume")], {"q1": Q}, FilterConfig())


def test_ablation_skips_filter():
    cfg = FilterConfig(ablate={"attribution"})
    assert len(apply_attribution_filter([scored("x", attr=0.1)], cfg)) == 1
    assert judge_attribution(None, ATTR_T, [scored("x")], {"q1": Q}, cfg)[0].attribution is None
    with pytest.raises(ConfigError):
        FilterConfig(ablate={"selection"})


def test_selection_ties():
    qs = {"q1": Q, "q2": SourceQuestion("q2", "Q2?", ("g",))}
    cands = [
        scored("Zed", 4, fact=0.1, attr=0.9),
        scored("Amy", 2, fact=0.1, attr=0.9),
        scored("Bob", 2, fact=0.1, attr=0.9),
        scored("Cat", 0, fact=0.1, attr=0.8),
        scored("Solo", 3, fact=0.2, attr=0.6, qid="q2"),
    ]
    recs = select_best_per_question(cands, qs)
    assert [(r.question_id, r.answer) for r in recs] == [("q1", "Amy"), ("q2", "Solo")]
    assert recs[0].attribution_score == 0.9 and recs[0].factuality_score == 0.1
    assert recs[0].original_gold_answer == "Shirley Conran"


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.sampled_from([0.5, 0.6, 0.7, 0.9]),
                          st.sampled_from(["a", "b", "c"])), min_size=1, max_size=10,
                unique_by=lambda t: (t[0], t[2])))
def test_selection_is_order_independent(rows):
    cands = [scored(ans, i, fact=0.1, attr=p) for i, p, ans in rows]
    a = select_best_per_question(cands, {"q1": Q})
    b = select_best_per_question(list(reversed(cands)), {"q1": Q})
    assert a == b
