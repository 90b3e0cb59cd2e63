import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfqa.corpus import PredictionRecord, SourceQuestion
from cfqa.errors import DataError
from cfqa.metrics import (
    DatasetScore,
    MetricReport,
    aggregate_ood,
    exact_match,
    normalize_for_metric,
    score_predictions,
    token_f1,
)
from tests import squad_v1_oracle as oracle
from tests.metric_fixture import PAIRS

TABLE2_CF_OOD_F1 = {"SQuAD": 81.7, "NQ": 71.2, "HotpotQA": 73.8, "BioASQ": 69.5, "AQA": 44.9, "AmbigQA": 53.2}
TABLE8_TRIVIAQA_OOD_EM = {"SQuAD": 68.6, "NQ": 50.5, "HotpotQA": 51.9, "BioASQ": 53.3, "AQA": 31.6, "AmbigQA": 46.8}


def test_derived_partial_overlap():
    # 1 shared token; precision 1/3, recall 1 -> 2PR/(P+R) = 0.5
    assert token_f1("King Edward potato", "potato") == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("pred,golds", PAIRS)
def test_oracle_parity(pred, golds):
    ours_f1 = max(token_f1(pred, g) for g in golds)
    ours_em = max(float(exact_match(pred, g)) for g in golds)
    ref_f1 = oracle.metric_max_over_ground_truths(oracle.f1_score, pred, golds)
    ref_em = float(oracle.metric_max_over_ground_truths(oracle.exact_match_score, pred, golds))
    assert abs(ours_f1 - ref_f1) <= 1e-4
    assert abs(ours_em - ref_em) <= 1e-4


def test_both_empty_diverges_from_reference_on_purpose():
    assert token_f1("the", "a") == 1.0
    assert oracle.f1_score("the", "a") == 0
    assert exact_match("the", "a") is True


@pytest.mark.parametrize("s,tokens", [
    ("The Cat, the HAT!", ["cat", "hat"]),
    ("an  apple\ta day", ["apple", "day"]),
    ("Theatre", ["theatre"]),
    ("", []),
])
def test_normalize_examples(s, tokens):
    assert normalize_for_metric(s) == tokens


_words = st.text(alphabet="abcdeht .,'-AN", max_size=25)


@settings(max_examples=400, deadline=None)
@given(_words, _words)
def test_oracle_parity_random(pred, gold):
    if not oracle.normalize_answer(pred) and not oracle.normalize_answer(gold):
        return
    assert abs(token_f1(pred, gold) - oracle.f1_score(pred, gold)) <= 1e-12
    assert exact_match(pred, gold) == oracle.exact_match_score(pred, gold)


@settings(max_examples=200, deadline=None)
@given(_words, _words)
def test_f1_bounds_and_symmetry(a, b):
    f = token_f1(a, b)
    assert 0.0 <= f <= 1.0
    assert f == pytest.approx(token_f1(b, a))
    if exact_match(a, b):
        assert f == 1.0


def _qs(*golds):
    return [SourceQuestion(f"q{i}", "Q?", tuple(g)) for i, g in enumerate(golds)]


def test_score_predictions_best_alias_and_missing():
    qs = _qs(["Shirley Conran", "Conran"], ["potato"], ["Paris"])
    preds = [PredictionRecord("q0", "conran"), PredictionRecord("q1", "King Edward potato")]
    s = score_predictions(qs, preds)
    assert s.n == 3 and s.missing == 1
    assert s.f1 == pytest.approx(100 * (1.0 + 0.5 + 0.0) / 3)
    assert s.em == pytest.approx(100 / 3)


def test_alias_max_and_empty_predictions():
    qs = _qs(["Froghopper", "Spittlebugs"])
    assert score_predictions(qs, [PredictionRecord("q0", "Spittlebugs")]).em == 100.0
    qs = _qs(["a cat"], ["dog"], ["Paris"])
    s = score_predictions(qs, [PredictionRecord(q.question_id, "") for q in qs])
    assert (s.f1, s.em, s.n) == (0.0, 0.0, 3)


def test_score_predictions_rejects_unknown_and_duplicate():
    qs = _qs(["a b"])
    with pytest.raises(DataError):
        score_predictions(qs, [PredictionRecord("zz", "x")])
    with pytest.raises(DataError):
        score_predictions(qs, [PredictionRecord("q0", "x"), PredictionRecord("q0", "y")])


def test_table2_ood_average():
    avg = aggregate_ood({k: {"f1": v, "em": 0.0} for k, v in TABLE2_CF_OOD_F1.items()}, list(TABLE2_CF_OOD_F1))
    assert abs(avg["f1"] - 65.7) <= 0.05
    assert avg["f1"] == pytest.approx(394.3 / 6)


def test_table8_ood_average():
    avg = aggregate_ood({k: {"f1": 0.0, "em": v} for k, v in TABLE8_TRIVIAQA_OOD_EM.items()},
                        list(TABLE8_TRIVIAQA_OOD_EM))
    assert abs(avg["em"] - 50.4) <= 0.05 + 1e-9
    assert avg["em"] == pytest.approx(302.7 / 6)


def test_ood_errors():
    with pytest.raises(DataError):
        aggregate_ood({"A": DatasetScore(1, 1, 1)}, [])
    with pytest.raises(DataError):
        aggregate_ood({"A": DatasetScore(1, 1, 1)}, ["B"])


def test_report_table_and_json():
    r = MetricReport({"TriviaQA": DatasetScore(85.2, 80.9, 10), "SQuAD": DatasetScore(79.6, 68.6, 10),
                      "NQ": DatasetScore(66.5, 50.5, 10)}, ["SQuAD", "NQ"])
    table = r.render_table()
    assert "OOD Avg." in table
    assert "85.2" in table and "50.5" in table
    doc = json.loads(json.dumps(r.to_json()))
    assert doc["ood_average"]["em"] == pytest.approx(59.55)
