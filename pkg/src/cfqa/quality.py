"""NLI-based dataset quality: how well each answer is entailed by its document
(attribution) and how strongly the document contradicts the original gold
answer (counterfactuality)."""

from __future__ import annotations

import abc
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .corpus import CounterfactualRecord, iter_jsonl
from .errors import BackendError, CfqaError, ConfigError, DataError, FixtureError
from .gateway import post_json

log = logging.getLogger(__name__)

DISTRIBUTION_EPS = 1e-6


def format_premise(document: str, question: str) -> str:
    if not document or not question:
        raise DataError("premise needs a non-empty document and question")
    return document + "\n\n" + question


def format_hypothesis(question: str, answer: str) -> str:
    if not question or not answer:
        raise DataError("hypothesis needs a non-empty question and answer")
    return question + "\n" + answer


@dataclass(frozen=True)
class NliQuery:
    premise: str
    hypothesis: str

    def __post_init__(self):
        if not self.premise or not self.hypothesis:
            raise DataError("NLI premise and hypothesis must be non-empty")


@dataclass(frozen=True)
class NliDistribution:
    entailment: float
    neutral: float
    contradiction: float

    def check(self, distributional: bool = True) -> "NliDistribution":
        values = (self.entailment, self.neutral, self.contradiction)
        if any(not (0.0 <= v <= 1.0) for v in values):
            raise BackendError(f"NLI scores outside [0, 1]: {values}")
        if distributional and abs(sum(values) - 1.0) > DISTRIBUTION_EPS:
            raise BackendError(f"NLI distribution does not sum to 1: {values}")
        return self


class NliScorer(abc.ABC):
    scorer_id: str
    distributional: bool = True

    @abc.abstractmethod
    def score(self, query: NliQuery) -> NliDistribution: ...


class MockNliScorer(NliScorer):
    """Looks up scores by exact (premise, hypothesis) from a JSONL fixture.

    Fixture lines: ``{"premise", "hypothesis", "entailment", "neutral", "contradiction"}``.
    Unknown pairs get ``default`` if given, otherwise raise.
    """

    def __init__(self, table: dict[tuple[str, str], NliDistribution] | None = None,
                 default: NliDistribution | None = None, scorer_id: str = "mock-nli"):
        self.table = dict(table or {})
        self.default = default
        self.scorer_id = scorer_id
        self.calls = 0

    @classmethod
    def from_fixture(cls, path: str | os.PathLike, **kwargs) -> "MockNliScorer":
        table = {}
        for lineno, _, obj in iter_jsonl(path):
            try:
                dist = NliDistribution(float(obj["entailment"]), float(obj["neutral"]), float(obj["contradiction"]))
                table[(obj["premise"], obj["hypothesis"])] = dist.check()
            except (KeyError, TypeError, ValueError, BackendError) as e:
                raise FixtureError(f"{path}:{lineno}: bad NLI fixture entry: {e}") from None
        return cls(table, **kwargs)

    def score(self, query: NliQuery) -> NliDistribution:
        self.calls += 1
        dist = self.table.get((query.premise, query.hypothesis), self.default)
        if dist is None:
            raise BackendError("mock NLI scorer has no entry for this premise/hypothesis")
        return dist


class LexicalNliScorer(NliScorer):
    """Deterministic stand-in for an NLI model, for desk-scale runs.

    Entailment is the fraction of the answer's normalized tokens found in the
    document; contradiction is the complement. It only makes sense for the
    premise/hypothesis layout produced by :func:`format_premise` and
    :func:`format_hypothesis`.
    """

    scorer_id = "lexical-nli"

    def score(self, query: NliQuery) -> NliDistribution:
        from .metrics import normalize_for_metric

        document = query.premise.rsplit("\n\n", 1)[0]
        answer = query.hypothesis.rsplit("\n", 1)[-1]
        doc_tokens = set(normalize_for_metric(document))
        answer_tokens = normalize_for_metric(answer)
        if not answer_tokens:
            return NliDistribution(0.0, 1.0, 0.0)
        coverage = sum(t in doc_tokens for t in answer_tokens) / len(answer_tokens)
        return NliDistribution(coverage, 0.0, 1.0 - coverage)


class HttpNliScorer(NliScorer):
    """``POST {base_url}/nli`` with ``{premise, hypothesis}`` returning the three class probabilities."""

    def __init__(self, base_url: str, scorer_id: str = "http-nli", api_key_env: str | None = None,
                 timeout: float = 60.0):
        if not base_url:
            raise ConfigError("NLI scorer endpoint (base_url) is not configured")
        self.base_url = base_url.rstrip("/")
        self.scorer_id = scorer_id
        self.timeout = timeout
        self._headers = {}
        if api_key_env:
            key = os.environ.get(api_key_env)
            if key is None:
                raise ConfigError(f"environment variable {api_key_env} is not set")
            self._headers["Authorization"] = f"Bearer {key}"

    def score(self, query: NliQuery) -> NliDistribution:
        out = post_json(f"{self.base_url}/nli", {"premise": query.premise, "hypothesis": query.hypothesis},
                        self._headers, self.timeout)
        try:
            return NliDistribution(float(out["entailment"]), float(out["neutral"]), float(out["contradiction"]))
        except (KeyError, TypeError, ValueError):
            raise BackendError(f"{self.base_url}: malformed NLI response") from None


def make_scorer(spec: dict | None, base_dir: Path | None = None) -> NliScorer:
    """Build a scorer from a config block: ``{"type": "http" | "mock" | "lexical", ...}``."""
    if not spec or "type" not in spec:
        raise ConfigError("no NLI scorer configured")
    kind = spec["type"]
    if kind == "lexical":
        return LexicalNliScorer()
    if kind == "mock":
        if not spec.get("fixture"):
            raise ConfigError("mock NLI scorer needs a fixture path")
        path = Path(spec["fixture"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        default = spec.get("default")
        return MockNliScorer.from_fixture(
            path, default=NliDistribution(**default).check() if default else None)
    if kind == "http":
        return HttpNliScorer(spec.get("base_url", ""), spec.get("id", "http-nli"), spec.get("api_key_env"),
                             float(spec.get("timeout", 60.0)))
    raise ConfigError(f"unknown NLI scorer type {kind!r}")


@dataclass(frozen=True)
class ExampleQuality:
    question_id: str
    entailment_vs_generated: float
    contradiction_vs_gold: float


@dataclass
class QualityReport:
    attribution_mean: float
    counterfactuality_mean: float
    n: int
    skipped: int = 0
    per_example: list[ExampleQuality] = field(default_factory=list)
    aggregate: str = "mean"

    def to_json(self) -> dict:
        return {
            "attribution_mean": self.attribution_mean,
            "counterfactuality_mean": self.counterfactuality_mean,
            "n": self.n,
            "skipped": self.skipped,
            "aggregate": self.aggregate,
            "per_example": [
                {"qid": e.question_id, "entailment_vs_generated": e.entailment_vs_generated,
                 "contradiction_vs_gold": e.contradiction_vs_gold}
                for e in self.per_example
            ],
        }


def _aggregate(values: Sequence[float], how: str, threshold: float) -> float:
    if how == "mean":
        return sum(values) / len(values)
    if how == "fraction_above":
        return sum(v >= threshold for v in values) / len(values)
    raise ConfigError(f"unknown aggregate {how!r}")


def score_dataset(records: Sequence[CounterfactualRecord], scorer: NliScorer, *, aggregate: str = "mean",
                  threshold: float = 0.5, max_workers: int = 1) -> QualityReport:
    """Score every record against its generated answer and its original gold answer.

    A record whose scorer call fails is skipped and counted; aggregates cover
    the scored records only.
    """
    if not records:
        raise DataError("cannot score an empty dataset")
    if aggregate not in ("mean", "fraction_above"):
        raise ConfigError(f"unknown aggregate {aggregate!r}")

    def one(r: CounterfactualRecord) -> ExampleQuality | None:
        premise = format_premise(r.document, r.question_text)
        try:
            attribution = scorer.score(NliQuery(premise, format_hypothesis(r.question_text, r.answer)))
            counter = scorer.score(NliQuery(premise, format_hypothesis(r.question_text, r.original_gold_answer)))
            attribution.check(scorer.distributional)
            counter.check(scorer.distributional)
        except CfqaError as e:
            log.warning("NLI scoring failed for %s: %s", r.question_id, e)
            return None
        return ExampleQuality(r.question_id, attribution.entailment, counter.contradiction)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(one, records))
    else:
        results = [one(r) for r in records]
    scored = [e for e in results if e is not None]
    skipped = len(results) - len(scored)
    if not scored:
        raise DataError(f"all {skipped} records failed NLI scoring")
    return QualityReport(
        attribution_mean=_aggregate([e.entailment_vs_generated for e in scored], aggregate, threshold),
        counterfactuality_mean=_aggregate([e.contradiction_vs_gold for e in scored], aggregate, threshold),
        n=len(scored),
        skipped=skipped,
        per_example=scored,
        aggregate=aggregate,
    )
