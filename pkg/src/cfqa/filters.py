"""Factuality and attribution filtering, and best-candidate selection.

Judging (backend calls) and filtering (pure threshold logic over the collected
verdicts) are kept apart so filter decisions can be replayed from stage files.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .corpus import CounterfactualRecord, FilterVerdict, RecitationCandidate, ScoredCandidate, SourceQuestion
from .errors import BackendError, CapabilityError, ConfigError, DataError, UndefinedVerdictError
from .gateway import Gateway

log = logging.getLogger(__name__)

COUNTERFACTUAL = "counterfactual"
FACTUAL = "factual"

FACTUALITY_FIELDS = ("question", "gold_answer", "generated_answer")
ATTRIBUTION_FIELDS = ("question", "document", "answer")


def _simple_fold(ch: str) -> str:
    folded = ch.casefold()
    return folded if len(folded) == 1 else ch.lower()


def normalize_answer_surface(s: str) -> str:
    """Case-fold, collapse whitespace runs, trim. Punctuation and accents are kept."""
    return " ".join("".join(_simple_fold(c) for c in s).split())


def surface_form_match(answer: str, gold_aliases: Sequence[str]) -> bool:
    if not gold_aliases:
        raise DataError("gold_aliases must be non-empty")
    target = normalize_answer_surface(answer)
    return any(normalize_answer_surface(g) == target for g in gold_aliases)


def normalized_yes(p_yes: float, p_no: float) -> float:
    for p in (p_yes, p_no):
        if not (0.0 <= p <= 1.0):
            raise DataError(f"probability outside [0, 1]: {p}")
    total = p_yes + p_no
    if total == 0:
        raise UndefinedVerdictError("judge assigned zero probability to both Yes and No")
    return p_yes / total


# -- judge templates --------------------------------------------------------


@dataclass(frozen=True)
class JudgeExemplar:
    values: Mapping[str, str]
    label: str


@dataclass(frozen=True)
class JudgeTemplate:
    """Few-shot Yes/No prompt. ``markers`` maps each field name and ``verdict`` to its line prefix."""

    fields: tuple[str, ...]
    preamble: str
    exemplars: tuple[JudgeExemplar, ...]
    markers: Mapping[str, str]

    def __post_init__(self):
        object.__setattr__(self, "exemplars", tuple(self.exemplars))
        needed = (*self.fields, "verdict")
        missing = [k for k in needed if not self.markers.get(k)]
        if missing:
            raise ConfigError(f"judge template missing markers: {missing}")
        if len({self.markers[k] for k in needed}) != len(needed):
            raise ConfigError("judge template markers must be distinct")
        for ex in self.exemplars:
            if ex.label not in ("Yes", "No"):
                raise ConfigError(f"exemplar label must be Yes or No, got {ex.label!r}")
            if set(ex.values) != set(self.fields):
                raise ConfigError(f"exemplar fields {sorted(ex.values)} != {sorted(self.fields)}")

    @classmethod
    def from_json(cls, obj: dict, fields: tuple[str, ...]) -> "JudgeTemplate":
        exemplars = tuple(
            JudgeExemplar({k: e[k] for k in fields}, e["label"]) for e in obj.get("exemplars", [])
        )
        return cls(fields, obj.get("preamble", ""), exemplars, dict(obj["markers"]))

    def _block(self, values: Mapping[str, str]) -> str:
        return "\n".join(f"{self.markers[k]} {values[k]}" for k in self.fields)

    def render(self, values: Mapping[str, str]) -> str:
        for k in self.fields:
            if not values.get(k):
                raise DataError(f"judge prompt field {k!r} must be non-empty")
        parts = [self.preamble] if self.preamble else []
        verdict = self.markers["verdict"]
        parts.extend(f"{self._block(e.values)}\n{verdict} {e.label}" for e in self.exemplars)
        # The prompt ends at the verdict marker so the next token is the Yes/No decision.
        parts.append(f"{self._block(values)}\n{verdict}")
        return "\n\n".join(parts)


def _load_judge(name: str, path, fields) -> JudgeTemplate:
    if path is None:
        text = resources.files("cfqa.templates").joinpath(name).read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        return JudgeTemplate.from_json(json.loads(text), fields)
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ConfigError(f"bad judge template {path or name}: {e!r}") from None


def load_factuality_template(path: str | Path | None = None) -> JudgeTemplate:
    return _load_judge("factuality.json", path, FACTUALITY_FIELDS)


def load_attribution_template(path: str | Path | None = None) -> JudgeTemplate:
    return _load_judge("attribution.json", path, ATTRIBUTION_FIELDS)


def build_factuality_prompt(template: JudgeTemplate, question: str, generated_answer: str, gold_answer: str) -> str:
    """Asks whether the generated answer is the same answer as the gold one. No document is shown."""
    return template.render({"question": question, "gold_answer": gold_answer, "generated_answer": generated_answer})


def build_attribution_prompt(template: JudgeTemplate, question: str, document: str, answer: str) -> str:
    return template.render({"question": question, "document": document, "answer": answer})


# -- config -----------------------------------------------------------------


@dataclass(frozen=True)
class FilterConfig:
    factuality_threshold: float = 0.5
    attribution_threshold: float = 0.5
    factuality_exemplars: int = 8
    attribution_exemplars: int = 5
    yes_variants: tuple[str, ...] = ("Yes", " Yes")
    no_variants: tuple[str, ...] = ("No", " No")
    mode: str = COUNTERFACTUAL
    # "all": every gold alias counts for surface matching; "canonical": only the first.
    surface_aliases: str = "all"
    # Filters switched off for ablation runs: subset of {"factuality", "attribution"}.
    ablate: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "yes_variants", tuple(self.yes_variants))
        object.__setattr__(self, "no_variants", tuple(self.no_variants))
        object.__setattr__(self, "ablate", frozenset(self.ablate))
        for name in ("factuality_threshold", "attribution_threshold"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.mode not in (COUNTERFACTUAL, FACTUAL):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.surface_aliases not in ("all", "canonical"):
            raise ConfigError("surface_aliases must be 'all' or 'canonical'")
        if not self.yes_variants or not self.no_variants:
            raise ConfigError("yes_variants and no_variants must be non-empty")
        tokens = self.yes_variants + self.no_variants
        if len(set(tokens)) != len(tokens):
            raise ConfigError("Yes/No token variants must be mutually distinct")
        if not self.ablate <= {"factuality", "attribution"}:
            raise ConfigError(f"unknown ablation {sorted(self.ablate)}")

    def check_templates(self, factuality: JudgeTemplate, attribution: JudgeTemplate) -> None:
        if len(factuality.exemplars) != self.factuality_exemplars:
            raise ConfigError(f"factuality template has {len(factuality.exemplars)} exemplars, "
                              f"expected {self.factuality_exemplars}")
        if len(attribution.exemplars) != self.attribution_exemplars:
            raise ConfigError(f"attribution template has {len(attribution.exemplars)} exemplars, "
                              f"expected {self.attribution_exemplars}")


def judge_verdict(gateway: Gateway, prompt: str, config: FilterConfig) -> FilterVerdict:
    """Query the judge's next-token mass, summed over the Yes and No spelling variants."""
    if not prompt:
        raise DataError("judge prompt must be non-empty")
    dist = gateway.next_token_probabilities(prompt, config.yes_variants + config.no_variants)
    p_yes = min(1.0, sum(dist.get(t) for t in config.yes_variants))
    p_no = min(1.0, sum(dist.get(t) for t in config.no_variants))
    return FilterVerdict(p_yes, p_no, normalized_yes(p_yes, p_no))


# Yes from the factuality judge means "same answer as gold", i.e. factual.
factuality_verdict = judge_verdict
attribution_verdict = judge_verdict


# -- scoring ----------------------------------------------------------------


def gold_for_matching(question: SourceQuestion, config: FilterConfig) -> tuple[str, ...]:
    return question.gold_answers if config.surface_aliases == "all" else question.gold_answers[:1]


def score_surface(candidates: Iterable[RecitationCandidate], questions: Mapping[str, SourceQuestion],
                  config: FilterConfig) -> list[ScoredCandidate]:
    """Wrap parsed candidates, recording whether each answer matches a gold alias verbatim."""
    out = []
    for c in candidates:
        if not c.parsed:
            continue
        q = questions[c.question_id]
        out.append(ScoredCandidate(c, surface_form_match(c.answer, gold_for_matching(q, config))))
    return out


def _map(fn: Callable, items: list, max_workers: int) -> list:
    if max_workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(fn, items))


def _safe_verdict(gateway: Gateway, prompt: str, config: FilterConfig) -> tuple[FilterVerdict | None, str | None]:
    try:
        return judge_verdict(gateway, prompt, config), None
    except UndefinedVerdictError:
        return None, "undefined_verdict"
    except CapabilityError:
        raise
    except BackendError as e:
        log.warning("judge call failed: %s", e)
        return None, "backend_error"


def needs_factuality_judge(sc: ScoredCandidate, config: FilterConfig) -> bool:
    return config.mode == COUNTERFACTUAL and "factuality" not in config.ablate and not sc.surface_match


def judge_factuality(gateway: Gateway, template: JudgeTemplate, scored: Sequence[ScoredCandidate],
                     questions: Mapping[str, SourceQuestion], config: FilterConfig,
                     max_workers: int = 1) -> list[ScoredCandidate]:
    """Attach factuality verdicts to candidates that passed the surface pre-filter.

    Judges against the canonical gold answer. Candidates that do not need a
    verdict (surface matches, factual mode, ablation) are returned untouched.
    """

    def one(sc: ScoredCandidate) -> ScoredCandidate:
        if not needs_factuality_judge(sc, config):
            return sc
        q = questions[sc.question_id]
        prompt = build_factuality_prompt(template, q.question_text, sc.answer, q.canonical_gold)
        verdict, err = _safe_verdict(gateway, prompt, config)
        return replace(sc, factuality=verdict, factuality_error=err)

    return _map(one, list(scored), max_workers)


def apply_factuality_filter(candidates: Sequence[ScoredCandidate], config: FilterConfig) -> list[ScoredCandidate]:
    """Counterfactual mode drops surface matches, unjudged candidates, and
    verdicts at or above the threshold. Factual mode keeps exactly the surface
    matches without consulting the judge."""
    if "factuality" in config.ablate:
        return list(candidates)
    if config.mode == FACTUAL:
        return [c for c in candidates if c.surface_match]
    return [
        c for c in candidates
        if not c.surface_match
        and c.factuality is not None
        and c.factuality.normalized_yes < config.factuality_threshold
    ]


def surface_prefilter(candidates: Sequence[ScoredCandidate], config: FilterConfig) -> list[ScoredCandidate]:
    """The verbatim-match half of the factuality step, on its own."""
    if "factuality" in config.ablate:
        return list(candidates)
    if config.mode == FACTUAL:
        return [c for c in candidates if c.surface_match]
    return [c for c in candidates if not c.surface_match]


def judge_attribution(gateway: Gateway, template: JudgeTemplate, scored: Sequence[ScoredCandidate],
                      questions: Mapping[str, SourceQuestion], config: FilterConfig,
                      max_workers: int = 1) -> list[ScoredCandidate]:
    if "attribution" in config.ablate:
        return list(scored)

    def one(sc: ScoredCandidate) -> ScoredCandidate:
        q = questions[sc.question_id]
        prompt = build_attribution_prompt(template, q.question_text, sc.document, sc.answer)
        verdict, err = _safe_verdict(gateway, prompt, config)
        return replace(sc, attribution=verdict, attribution_error=err)

    return _map(one, list(scored), max_workers)


def apply_attribution_filter(candidates: Sequence[ScoredCandidate], config: FilterConfig) -> list[ScoredCandidate]:
    """Drop candidates whose normalized Yes is strictly below the threshold (exactly 0.5 survives)."""
    if "attribution" in config.ablate:
        return list(candidates)
    return [
        c for c in candidates
        if c.attribution is not None and c.attribution.normalized_yes >= config.attribution_threshold
    ]


def _selection_key(c: ScoredCandidate):
    score = c.attribution.normalized_yes if c.attribution is not None else float("-inf")
    return (-score, c.sample_index, c.answer)


def select_best_per_question(candidates: Iterable[ScoredCandidate],
                             questions: Mapping[str, SourceQuestion],
                             config: FilterConfig | None = None) -> list[CounterfactualRecord]:
    """One record per question: highest attribution score, then lowest sample
    index, then lexicographically smallest answer. Output sorted by question id."""
    config = config or FilterConfig()
    groups: dict[str, list[ScoredCandidate]] = {}
    for c in candidates:
        groups.setdefault(c.question_id, []).append(c)
    records = []
    for qid in sorted(groups, key=lambda s: s.encode("utf-8")):
        best = min(groups[qid], key=_selection_key)
        q = questions[qid]
        if best.factuality is not None:
            factuality = best.factuality.normalized_yes
        elif config.mode == FACTUAL and "factuality" not in config.ablate:
            factuality = 1.0  # verbatim gold match
        else:
            factuality = None
        records.append(CounterfactualRecord(
            question_id=qid,
            question_text=q.question_text,
            document=best.document,
            answer=best.answer,
            original_gold_answer=q.canonical_gold,
            attribution_score=best.attribution.normalized_yes if best.attribution is not None else None,
            factuality_score=factuality,
            provenance=best.candidate.provenance,
        ))
    return records
