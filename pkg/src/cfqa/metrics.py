"""Extractive-QA scoring: token F1 and exact match with SQuAD-style answer normalization."""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .corpus import PredictionRecord, SourceQuestion
from .errors import DataError

_PUNCT = frozenset(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")


@dataclass(frozen=True)
class MetricNormalizationRules:
    lowercase: bool = True
    strip_punctuation: bool = True
    remove_articles: bool = True
    collapse_whitespace: bool = True


SQUAD_RULES = MetricNormalizationRules()


def normalize_for_metric(s: str, rules: MetricNormalizationRules = SQUAD_RULES) -> list[str]:
    if rules.lowercase:
        s = s.lower()
    if rules.strip_punctuation:
        s = "".join(ch for ch in s if ch not in _PUNCT)
    if rules.remove_articles:
        s = _ARTICLES.sub(" ", s)
    if rules.collapse_whitespace:
        return s.split()
    return [t for t in s.split(" ") if t]


def token_f1(prediction: str, gold: str, rules: MetricNormalizationRules = SQUAD_RULES) -> float:
    pred = normalize_for_metric(prediction, rules)
    ref = normalize_for_metric(gold, rules)
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(ref)
    return 2 * precision * recall / (precision + recall)


def exact_match(prediction: str, gold: str, rules: MetricNormalizationRules = SQUAD_RULES) -> bool:
    return " ".join(normalize_for_metric(prediction, rules)) == " ".join(normalize_for_metric(gold, rules))


@dataclass(frozen=True)
class DatasetScore:
    f1: float
    em: float
    n: int
    missing: int = 0

    def to_json(self) -> dict:
        return {"f1": self.f1, "em": self.em, "n": self.n, "missing": self.missing}


def score_predictions(dataset: Sequence[SourceQuestion], predictions: Iterable[PredictionRecord],
                      rules: MetricNormalizationRules = SQUAD_RULES) -> DatasetScore:
    """Best-over-aliases F1/EM per question, averaged and scaled to 0-100.

    Questions without a prediction score 0 and are counted in ``missing``.
    """
    by_id = {q.question_id: q for q in dataset}
    answers: dict[str, str] = {}
    for p in predictions:
        if p.question_id not in by_id:
            raise DataError(f"prediction for unknown question_id {p.question_id!r}")
        if p.question_id in answers:
            raise DataError(f"more than one prediction for question_id {p.question_id!r}")
        answers[p.question_id] = p.predicted_answer
    if not by_id:
        return DatasetScore(0.0, 0.0, 0, 0)
    f1_total = em_total = 0.0
    missing = 0
    for q in dataset:
        pred = answers.get(q.question_id)
        if pred is None:
            missing += 1
            continue
        f1_total += max(token_f1(pred, g, rules) for g in q.gold_answers)
        em_total += max(float(exact_match(pred, g, rules)) for g in q.gold_answers)
    n = len(dataset)
    return DatasetScore(100.0 * f1_total / n, 100.0 * em_total / n, n, missing)


def aggregate_ood(per_dataset: Mapping[str, DatasetScore | Mapping[str, float]],
                  ood_set: Sequence[str]) -> dict[str, float]:
    """Unweighted mean of F1 and EM over the named out-of-domain datasets."""
    if not ood_set:
        raise DataError("out-of-domain set is empty")
    missing = [name for name in ood_set if name not in per_dataset]
    if missing:
        raise DataError(f"out-of-domain datasets not scored: {missing}")

    def get(name, metric):
        score = per_dataset[name]
        return getattr(score, metric) if isinstance(score, DatasetScore) else float(score[metric])

    return {m: sum(get(name, m) for name in ood_set) / len(ood_set) for m in ("f1", "em")}


@dataclass
class MetricReport:
    per_dataset: dict[str, DatasetScore]
    ood_set: list[str] = field(default_factory=list)

    @property
    def ood_average(self) -> dict[str, float] | None:
        return aggregate_ood(self.per_dataset, self.ood_set) if self.ood_set else None

    def to_json(self) -> dict:
        return {
            "per_dataset": {k: v.to_json() for k, v in self.per_dataset.items()},
            "ood_set": list(self.ood_set),
            "ood_average": self.ood_average,
        }

    def render_table(self) -> str:
        """Aligned text table: one column per dataset plus the OOD average, rows F1 and EM."""
        names = list(self.per_dataset)
        header = ["Metric", *names] + (["OOD Avg."] if self.ood_set else [])
        rows = [header]
        avg = self.ood_average
        for metric in ("f1", "em"):
            row = [metric.upper()] + [f"{getattr(self.per_dataset[n], metric):.1f}" for n in names]
            if avg is not None:
                row.append(f"{avg[metric]:.1f}")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = []
        for r in rows:
            cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
            lines.append("  ".join(cells).rstrip())
        return "\n".join(lines) + "\n"
