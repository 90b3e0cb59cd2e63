"""Recitation prompts, k-way sampled generation, and strict completion parsing."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import FORMAT_VIOLATION, PARSED, Provenance, RecitationCandidate, SourceQuestion, prompt_hash
from .errors import BackendError, ConfigError, TemplateAmbiguityError
from .gateway import CompletionRequest, Gateway

log = logging.getLogger(__name__)

VIOLATION_REASONS = (
    "missing_blank_line",
    "missing_answer_marker",
    "empty_document",
    "empty_answer",
    "trailing_garbage",
)
BACKEND_ERROR = "backend_error"


@dataclass(frozen=True)
class RecitationExemplar:
    question: str
    document: str
    answer: str


@dataclass(frozen=True)
class RecitationPromptTemplate:
    preamble: str
    exemplars: tuple[RecitationExemplar, ...]
    question_marker: str = "Question:"
    document_intro_marker: str = "Document:"
    answer_marker: str = "Answer:"
    min_exemplars: int = 1

    def __post_init__(self):
        object.__setattr__(self, "exemplars", tuple(self.exemplars))
        markers = self.markers
        if any(not m for m in markers):
            raise ConfigError("template markers must be non-empty")
        if len(set(markers)) != len(markers):
            raise ConfigError("template markers must be mutually distinct")
        if len(self.exemplars) < self.min_exemplars:
            raise ConfigError(f"template needs at least {self.min_exemplars} exemplar(s)")
        for ex in self.exemplars:
            for text in (ex.question, ex.document, ex.answer):
                self.check_marker_free(text)
            if not ex.document.strip() or not ex.answer.strip() or "\n" in ex.answer:
                raise ConfigError("exemplar documents and answers must be non-empty; answers single-line")

    @property
    def markers(self) -> tuple[str, str, str]:
        return (self.question_marker, self.document_intro_marker, self.answer_marker)

    def check_marker_free(self, text: str) -> None:
        for m in self.markers:
            if m in text:
                raise TemplateAmbiguityError(f"text contains template marker {m!r}: {text[:60]!r}")

    @classmethod
    def from_json(cls, obj: dict, min_exemplars: int = 1) -> "RecitationPromptTemplate":
        markers = obj.get("markers", {})
        return cls(
            preamble=obj.get("preamble", ""),
            exemplars=tuple(RecitationExemplar(e["question"], e["document"], e["answer"])
                            for e in obj.get("exemplars", [])),
            question_marker=markers.get("question", "Question:"),
            document_intro_marker=markers.get("document_intro", "Document:"),
            answer_marker=markers.get("answer", "Answer:"),
            min_exemplars=min_exemplars,
        )


def load_recitation_template(path: str | Path | None = None) -> RecitationPromptTemplate:
    """Load a template file, or the packaged default when ``path`` is None."""
    if path is None:
        text = resources.files("cfqa.templates").joinpath("recitation.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        return RecitationPromptTemplate.from_json(json.loads(text))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ConfigError(f"bad recitation template {path or '<default>'}: {e!r}") from None


@dataclass(frozen=True)
class RecitationConfig:
    k_samples: int = 24
    temperature: float = 0.7
    max_output_units: int = 512
    stop_sequences: tuple[str, ...] = ("\n\nQuestion:",)
    multiline_answer: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))
        if self.k_samples < 1:
            raise ConfigError("k_samples must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")


def _render_block(t: RecitationPromptTemplate, question: str, document: str, answer: str) -> str:
    return f"{t.question_marker} {question}\n{t.document_intro_marker}\n{document}\n\n{t.answer_marker} {answer}"


def build_recitation_prompt(template: RecitationPromptTemplate, question: SourceQuestion | str) -> str:
    text = question.question_text if isinstance(question, SourceQuestion) else question
    template.check_marker_free(text)
    parts = [template.preamble] if template.preamble else []
    parts.extend(_render_block(template, e.question, e.document, e.answer) for e in template.exemplars)
    parts.append(f"{template.question_marker} {text}\n{template.document_intro_marker}\n")
    return "\n\n".join(parts)


def render_as_completion(document: str, answer: str, template: RecitationPromptTemplate) -> str:
    """The completion text a well-behaved model produces for ``(document, answer)``."""
    return f"{document}\n\n{template.answer_marker} {answer}"


@dataclass(frozen=True)
class ParseResult:
    document: str | None = None
    answer: str | None = None
    violation: str | None = None

    @property
    def ok(self) -> bool:
        return self.violation is None


def parse_recitation(raw_completion: str, template: RecitationPromptTemplate,
                     multiline_answer: bool = False) -> ParseResult:
    """Split a completion into (document, answer) or name the format violation.

    Accepted shape: a non-empty document, a blank line, a line starting with
    the answer marker carrying a non-empty answer, then only whitespace or the
    start of a new question block. A second answer line counts as trailing garbage.
    """
    if not raw_completion.strip():
        return ParseResult(violation="empty_document")
    lines = raw_completion.split("\n")
    am, qm = template.answer_marker, template.question_marker
    answer_at = next((i for i, line in enumerate(lines) if line.lstrip().startswith(am)), None)
    if answer_at is None:
        return ParseResult(violation="missing_answer_marker")
    document = "\n".join(lines[:answer_at]).strip()
    if not document:
        return ParseResult(violation="empty_document")
    if lines[answer_at - 1].strip():
        return ParseResult(violation="missing_blank_line")

    answer_lines = [lines[answer_at].lstrip()[len(am):]]
    rest = lines[answer_at + 1:]
    if multiline_answer:
        while rest and rest[0].strip() and not rest[0].lstrip().startswith(qm):
            answer_lines.append(rest.pop(0))
    answer = "\n".join(answer_lines).strip()
    if not answer:
        return ParseResult(violation="empty_answer")
    tail = "\n".join(rest).strip()
    if tail and not tail.startswith(qm):
        return ParseResult(violation="trailing_garbage")
    return ParseResult(document=document, answer=answer)


@dataclass
class GenerationJob:
    """Everything needed to produce one sampled candidate."""

    question: SourceQuestion
    prompt: str
    sample_index: int
    seed: int


def _run_job(gateway: Gateway, template: RecitationPromptTemplate, config: RecitationConfig,
             job: GenerationJob) -> RecitationCandidate:
    request = CompletionRequest(
        prompt=job.prompt,
        temperature=config.temperature,
        max_output_units=config.max_output_units,
        stop_sequences=config.stop_sequences,
        sample_index=job.sample_index,
        seed=job.seed,
    )
    h = prompt_hash(job.prompt)
    try:
        resp = gateway.complete(request)
    except BackendError as e:
        log.warning("question %s sample %d: %s", job.question.question_id, job.sample_index, e)
        prov = Provenance(gateway.backend_id, h, config.temperature, job.sample_index, gateway.backend.timestamp())
        return RecitationCandidate(job.question.question_id, job.sample_index, "", FORMAT_VIOLATION, prov,
                                   violation=BACKEND_ERROR)
    prov = Provenance(resp.backend_id, h, config.temperature, job.sample_index, resp.created_at or "")
    parsed = parse_recitation(resp.text, template, config.multiline_answer)
    if parsed.ok:
        return RecitationCandidate(job.question.question_id, job.sample_index, resp.text, PARSED, prov,
                                   document=parsed.document, answer=parsed.answer)
    return RecitationCandidate(job.question.question_id, job.sample_index, resp.text, FORMAT_VIOLATION, prov,
                               violation=parsed.violation)


def generate_many(gateway: Gateway, template: RecitationPromptTemplate, config: RecitationConfig,
                  questions: Sequence[SourceQuestion], seed: int = 0,
                  max_workers: int = 1) -> list[RecitationCandidate]:
    """k candidates per question, ordered by (input question order, sample_index).

    Work fans out over ``max_workers`` threads; output order does not depend on
    completion order.
    """
    jobs = []
    for q in questions:
        prompt = build_recitation_prompt(template, q)
        jobs.extend(GenerationJob(q, prompt, i, seed) for i in range(config.k_samples))
    if max_workers <= 1:
        return [_run_job(gateway, template, config, j) for j in jobs]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda j: _run_job(gateway, template, config, j), jobs))


def generate_recitations(gateway: Gateway, template: RecitationPromptTemplate, config: RecitationConfig,
                         question: SourceQuestion, seed: int = 0, max_workers: int = 1) -> list[RecitationCandidate]:
    return generate_many(gateway, template, config, [question], seed, max_workers)


def unique_answers_per_question(candidates: Iterable[RecitationCandidate]) -> float:
    """Mean count of distinct (surface-normalized) parsed answers over questions with any."""
    from .filters import normalize_answer_surface

    answers: dict[str, set[str]] = {}
    for c in candidates:
        if c.parsed:
            answers.setdefault(c.question_id, set()).add(normalize_answer_surface(c.answer))
    if not answers:
        return 0.0
    return sum(len(v) for v in answers.values()) / len(answers)
