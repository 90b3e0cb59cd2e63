"""Data model shared by every pipeline stage, plus JSONL/JSON ingestion and emission.

Text is kept byte-exact on the way in; normalization only happens inside the
matching and metric code.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .errors import DataError, DuplicateIdError, MalformedRecordError

SOURCE_FORMATS = ("triviaqa-mrqa", "generic-jsonl")

PARSED = "parsed"
FORMAT_VIOLATION = "format_violation"

# Pipeline order; raw_samples is the k-fold fan-out of questions_in.
STAGES = (
    "questions_in",
    "raw_samples",
    "parsed",
    "post_surface",
    "post_factuality",
    "post_attribution",
    "selected",
)

CF_RECORD_KEYS = (
    "qid",
    "question",
    "document",
    "answer",
    "original_gold_answer",
    "attribution_score",
    "factuality_score",
    "provenance",
)
PROVENANCE_KEYS = ("backend_id", "prompt_hash", "temperature", "sample_index", "created_at")


def prompt_hash(prompt: str) -> str:
    """SHA-256 hex digest of the exact UTF-8 prompt bytes."""
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class SourceQuestion:
    question_id: str
    question_text: str
    gold_answers: tuple[str, ...]
    source_dataset: str = ""

    def __post_init__(self):
        if not isinstance(self.gold_answers, tuple):
            object.__setattr__(self, "gold_answers", tuple(self.gold_answers))
        if not self.question_id:
            raise DataError("question_id must be non-empty")
        if not self.gold_answers:
            raise DataError(f"question {self.question_id!r} has no gold answers")
        for alias in self.gold_answers:
            if not isinstance(alias, str) or not alias.strip():
                raise DataError(f"question {self.question_id!r} has an empty gold answer")

    @property
    def canonical_gold(self) -> str:
        return self.gold_answers[0]


@dataclass(frozen=True)
class Provenance:
    backend_id: str
    prompt_hash: str
    temperature: float
    sample_index: int
    created_at: str

    def __post_init__(self):
        if len(self.prompt_hash) != 64 or any(c not in "0123456789abcdef" for c in self.prompt_hash):
            raise DataError(f"prompt_hash must be 64 lowercase hex chars, got {self.prompt_hash!r}")
        if self.temperature < 0:
            raise DataError("temperature must be >= 0")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in PROVENANCE_KEYS}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Provenance":
        return cls(
            backend_id=obj["backend_id"],
            prompt_hash=obj["prompt_hash"],
            temperature=float(obj["temperature"]),
            sample_index=int(obj["sample_index"]),
            created_at=obj["created_at"],
        )


@dataclass(frozen=True)
class RecitationCandidate:
    question_id: str
    sample_index: int
    raw_completion: str
    parse_status: str
    provenance: Provenance
    document: str | None = None
    answer: str | None = None
    violation: str | None = None

    def __post_init__(self):
        if self.parse_status == PARSED:
            if not self.document or not self.answer:
                raise DataError("parsed candidate needs a non-empty document and answer")
            if self.violation is not None:
                raise DataError("parsed candidate cannot carry a violation reason")
        elif self.parse_status == FORMAT_VIOLATION:
            if self.document is not None or self.answer is not None:
                raise DataError("format-violation candidate cannot carry document/answer")
            if not self.violation:
                raise DataError("format-violation candidate needs a reason")
        else:
            raise DataError(f"unknown parse_status {self.parse_status!r}")

    @property
    def parsed(self) -> bool:
        return self.parse_status == PARSED

    def key(self) -> tuple[str, int, str]:
        return (self.question_id, self.sample_index, self.provenance.backend_id)

    def to_json(self) -> dict:
        return {
            "qid": self.question_id,
            "sample_index": self.sample_index,
            "parse_status": self.parse_status,
            "violation": self.violation,
            "document": self.document,
            "answer": self.answer,
            "raw_completion": self.raw_completion,
            "provenance": self.provenance.to_json(),
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "RecitationCandidate":
        return cls(
            question_id=obj["qid"],
            sample_index=int(obj["sample_index"]),
            raw_completion=obj["raw_completion"],
            parse_status=obj["parse_status"],
            provenance=Provenance.from_json(obj["provenance"]),
            document=obj.get("document"),
            answer=obj.get("answer"),
            violation=obj.get("violation"),
        )


@dataclass(frozen=True)
class FilterVerdict:
    """Judge output: raw Yes/No mass (summed over token variants) and the normalized Yes share."""

    p_yes_raw: float
    p_no_raw: float
    normalized_yes: float

    def to_json(self) -> dict:
        return {"p_yes_raw": self.p_yes_raw, "p_no_raw": self.p_no_raw, "normalized_yes": self.normalized_yes}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any] | None) -> "FilterVerdict | None":
        if obj is None:
            return None
        return cls(float(obj["p_yes_raw"]), float(obj["p_no_raw"]), float(obj["normalized_yes"]))


@dataclass(frozen=True)
class ScoredCandidate:
    candidate: RecitationCandidate
    surface_match: bool
    factuality: FilterVerdict | None = None
    attribution: FilterVerdict | None = None
    # Set when a judge call failed or returned zero Yes/No mass.
    factuality_error: str | None = None
    attribution_error: str | None = None

    def __post_init__(self):
        if not self.candidate.parsed:
            raise DataError("only parsed candidates can be scored")

    @property
    def question_id(self) -> str:
        return self.candidate.question_id

    @property
    def sample_index(self) -> int:
        return self.candidate.sample_index

    @property
    def answer(self) -> str:
        return self.candidate.answer  # type: ignore[return-value]

    @property
    def document(self) -> str:
        return self.candidate.document  # type: ignore[return-value]

    def to_json(self) -> dict:
        return {
            "candidate": self.candidate.to_json(),
            "surface_match": self.surface_match,
            "factuality": self.factuality.to_json() if self.factuality else None,
            "factuality_error": self.factuality_error,
            "attribution": self.attribution.to_json() if self.attribution else None,
            "attribution_error": self.attribution_error,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "ScoredCandidate":
        return cls(
            candidate=RecitationCandidate.from_json(obj["candidate"]),
            surface_match=bool(obj["surface_match"]),
            factuality=FilterVerdict.from_json(obj.get("factuality")),
            attribution=FilterVerdict.from_json(obj.get("attribution")),
            factuality_error=obj.get("factuality_error"),
            attribution_error=obj.get("attribution_error"),
        )


@dataclass(frozen=True)
class CounterfactualRecord:
    question_id: str
    question_text: str
    document: str
    answer: str
    original_gold_answer: str
    # None only in ablation runs where the corresponding filter was switched off.
    attribution_score: float | None
    factuality_score: float | None
    provenance: Provenance

    def to_json(self) -> dict:
        values = {
            "qid": self.question_id,
            "question": self.question_text,
            "document": self.document,
            "answer": self.answer,
            "original_gold_answer": self.original_gold_answer,
            "attribution_score": self.attribution_score,
            "factuality_score": self.factuality_score,
            "provenance": self.provenance.to_json(),
        }
        return {k: values[k] for k in CF_RECORD_KEYS}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "CounterfactualRecord":
        def _score(v):
            return None if v is None else float(v)

        return cls(
            question_id=obj["qid"],
            question_text=obj["question"],
            document=obj["document"],
            answer=obj["answer"],
            original_gold_answer=obj["original_gold_answer"],
            attribution_score=_score(obj["attribution_score"]),
            factuality_score=_score(obj["factuality_score"]),
            provenance=Provenance.from_json(obj["provenance"]),
        )


@dataclass(frozen=True)
class PredictionRecord:
    question_id: str
    predicted_answer: str


@dataclass
class DatasetManifest:
    stage_counts: dict[str, int]
    config_snapshot: dict[str, Any]
    seed: int
    stats: dict[str, Any] = field(default_factory=dict)

    @property
    def retention_rates(self) -> dict[str, float]:
        return retention_rates(self.stage_counts)

    def to_json(self) -> dict:
        counts = {s: self.stage_counts[s] for s in STAGES if s in self.stage_counts}
        return {
            "stage_counts": counts,
            "retention_rates": self.retention_rates,
            "stats": self.stats,
            "seed": self.seed,
            "config_snapshot": self.config_snapshot,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "DatasetManifest":
        return cls(
            stage_counts=dict(obj["stage_counts"]),
            config_snapshot=dict(obj.get("config_snapshot", {})),
            seed=int(obj["seed"]),
            stats=dict(obj.get("stats", {})),
        )


def retention_rates(stage_counts: Mapping[str, int]) -> dict[str, float]:
    """Ratio of each stage count to the preceding one, from ``parsed`` onward.

    ``raw_samples / questions_in`` is the fan-out factor, not a retention, so it
    is left out. An empty predecessor yields 0.0.
    """
    rates: dict[str, float] = {}
    for prev, cur in zip(STAGES[1:], STAGES[2:]):
        if prev in stage_counts and cur in stage_counts:
            den = stage_counts[prev]
            rates[cur] = float(Fraction(stage_counts[cur], den)) if den else 0.0
    return rates


def check_stage_counts(stage_counts: Mapping[str, int], k_samples: int | None = None) -> None:
    for name, value in stage_counts.items():
        if name not in STAGES:
            raise DataError(f"unknown stage {name!r}")
        if not isinstance(value, int) or value < 0:
            raise DataError(f"stage count {name} must be a non-negative integer")
    present = [s for s in STAGES[1:] if s in stage_counts]
    for prev, cur in zip(present, present[1:]):
        if stage_counts[cur] > stage_counts[prev]:
            raise DataError(
                f"stage counts not monotone: {cur}={stage_counts[cur]} > {prev}={stage_counts[prev]}"
            )
    if "selected" in stage_counts and "questions_in" in stage_counts:
        if stage_counts["selected"] > stage_counts["questions_in"]:
            raise DataError("more selected records than input questions")
    if k_samples is not None and {"questions_in", "raw_samples"} <= stage_counts.keys():
        if stage_counts["raw_samples"] != stage_counts["questions_in"] * k_samples:
            raise DataError(
                f"raw_samples={stage_counts['raw_samples']} != questions_in x k "
                f"({stage_counts['questions_in']} x {k_samples})"
            )


# -- low-level io -----------------------------------------------------------


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_line(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "), allow_nan=False)


def write_jsonl(path: str | os.PathLike, rows: Iterable[Mapping[str, Any]]) -> None:
    data = "".join(dumps_line(r) + "\n" for r in rows)
    atomic_write_bytes(path, data.encode("utf-8"))


def _open_binary(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return path.open("rb")


def iter_jsonl(path: str | os.PathLike) -> Iterator[tuple[int, int, Any]]:
    """Yield ``(line_number, byte_offset, object)``; blank lines are skipped."""
    path = Path(path)
    offset = 0
    with _open_binary(path) as f:
        for lineno, raw in enumerate(f, start=1):
            start = offset
            offset += len(raw)
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise MalformedRecordError(path, lineno, start, f"invalid JSON: {e}") from None
            yield lineno, start, obj


def read_jsonl(path: str | os.PathLike) -> list[Any]:
    return [obj for _, _, obj in iter_jsonl(path)]


# -- source datasets --------------------------------------------------------


def _string_list(value, path, lineno, offset, what) -> list[str]:
    if not isinstance(value, list) or not value or not all(isinstance(a, str) for a in value):
        raise MalformedRecordError(path, lineno, offset, f"{what} must be a non-empty list of strings")
    if any(not a.strip() for a in value):
        raise MalformedRecordError(path, lineno, offset, f"{what} contains an empty entry")
    return value


def _mrqa_questions(obj, path, lineno, offset, dataset) -> list[SourceQuestion]:
    # Nested MRQA shared-task layout: {"context": ..., "qas": [{"qid", "question", "answers"}]}
    if "qas" in obj:
        out = []
        for qa in obj["qas"]:
            out.extend(_mrqa_questions(qa, path, lineno, offset, dataset))
        return out
    for key in ("qid", "question", "answers"):
        if key not in obj:
            raise MalformedRecordError(path, lineno, offset, f"missing field {key!r}")
    if not isinstance(obj["qid"], str) or not isinstance(obj["question"], str):
        raise MalformedRecordError(path, lineno, offset, "qid and question must be strings")
    answers = _string_list(obj["answers"], path, lineno, offset, "answers")
    return [SourceQuestion(obj["qid"], obj["question"], tuple(answers), dataset)]


def _generic_question(obj, path, lineno, offset, dataset) -> SourceQuestion:
    for key in ("question_id", "question_text", "gold_answers"):
        if key not in obj:
            raise MalformedRecordError(path, lineno, offset, f"missing field {key!r}")
    answers = _string_list(obj["gold_answers"], path, lineno, offset, "gold_answers")
    return SourceQuestion(
        str(obj["question_id"]), obj["question_text"], tuple(answers), obj.get("source_dataset", dataset)
    )


def load_source_dataset(path: str | os.PathLike, format: str = "triviaqa-mrqa") -> list[SourceQuestion]:
    """Load questions in file order, rejecting malformed lines and duplicate ids.

    ``triviaqa-mrqa`` accepts flat ``{"qid", "question", "answers"}`` lines as
    well as the nested MRQA layout (header line plus ``qas`` lists); any
    ``context`` is ignored. ``generic-jsonl`` uses the field names of
    :class:`SourceQuestion`.
    """
    if format not in SOURCE_FORMATS:
        raise DataError(f"unknown source format {format!r}; expected one of {SOURCE_FORMATS}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"source file not found: {path}")
    dataset = path.name.split(".")[0]
    questions: list[SourceQuestion] = []
    seen: set[str] = set()
    for lineno, offset, obj in iter_jsonl(path):
        if not isinstance(obj, dict):
            raise MalformedRecordError(path, lineno, offset, "expected a JSON object")
        if "header" in obj:
            dataset = obj["header"].get("dataset", dataset) if isinstance(obj["header"], dict) else dataset
            continue
        try:
            if format == "triviaqa-mrqa":
                batch = _mrqa_questions(obj, path, lineno, offset, dataset)
            else:
                batch = [_generic_question(obj, path, lineno, offset, dataset)]
        except DataError as e:
            if isinstance(e, MalformedRecordError):
                raise
            raise MalformedRecordError(path, lineno, offset, str(e)) from None
        for q in batch:
            if q.question_id in seen:
                raise DuplicateIdError(q.question_id)
            seen.add(q.question_id)
            questions.append(q)
    return questions


def load_predictions(path: str | os.PathLike) -> list[PredictionRecord]:
    """Predictions file: JSONL of ``{"qid": str, "answer": str}``."""
    out = []
    for lineno, offset, obj in iter_jsonl(path):
        if not isinstance(obj, dict) or not isinstance(obj.get("qid"), str) or not isinstance(obj.get("answer"), str):
            raise MalformedRecordError(path, lineno, offset, 'expected {"qid": str, "answer": str}')
        out.append(PredictionRecord(obj["qid"], obj["answer"]))
    return out


# -- counterfactual dataset -------------------------------------------------


def validate_cf_records(
    records: Iterable[CounterfactualRecord],
    attribution_threshold: float = 0.5,
    gold_aliases: Mapping[str, Iterable[str]] | None = None,
    require_counterfactual: bool = True,
    allow_unscored: bool = False,
) -> None:
    from .filters import surface_form_match

    seen: set[str] = set()
    for r in records:
        if r.question_id in seen:
            raise DuplicateIdError(r.question_id)
        seen.add(r.question_id)
        if not r.document or not r.answer:
            raise DataError(f"record {r.question_id!r}: empty document or answer")
        for name in ("attribution_score", "factuality_score"):
            value = getattr(r, name)
            if value is None:
                if not allow_unscored:
                    raise DataError(f"record {r.question_id!r}: {name} missing")
            elif not (0.0 <= value <= 1.0) or math.isnan(value):
                raise DataError(f"record {r.question_id!r}: {name}={value} outside [0, 1]")
        if r.attribution_score is not None and r.attribution_score < attribution_threshold:
            raise DataError(
                f"record {r.question_id!r}: attribution_score {r.attribution_score} < {attribution_threshold}"
            )
        if require_counterfactual:
            aliases = list(gold_aliases.get(r.question_id, ())) if gold_aliases else []
            aliases.append(r.original_gold_answer)
            if surface_form_match(r.answer, aliases):
                raise DataError(f"record {r.question_id!r}: answer matches a gold alias")


def write_cf_dataset(records: Iterable[CounterfactualRecord], path: str | os.PathLike, **validation) -> None:
    """Emit one JSONL line per record, sorted by question id (byte order).

    All records are validated before anything is written; keyword arguments go
    to :func:`validate_cf_records`.
    """
    records = list(records)
    validate_cf_records(records, **validation)
    records.sort(key=lambda r: r.question_id.encode("utf-8"))
    write_jsonl(path, (r.to_json() for r in records))


def load_cf_dataset(path: str | os.PathLike) -> list[CounterfactualRecord]:
    out = []
    for lineno, offset, obj in iter_jsonl(path):
        try:
            out.append(CounterfactualRecord.from_json(obj))
        except (KeyError, TypeError, ValueError, DataError) as e:
            raise MalformedRecordError(path, lineno, offset, f"bad record: {e!r}") from None
    return out


# -- stage files ------------------------------------------------------------


def write_candidates(candidates: Iterable[RecitationCandidate], path: str | os.PathLike) -> None:
    write_jsonl(path, (c.to_json() for c in candidates))


def load_candidates(path: str | os.PathLike) -> list[RecitationCandidate]:
    out = []
    seen = set()
    for lineno, offset, obj in iter_jsonl(path):
        try:
            c = RecitationCandidate.from_json(obj)
        except (KeyError, TypeError, ValueError, DataError) as e:
            raise MalformedRecordError(path, lineno, offset, f"bad candidate: {e!r}") from None
        if c.key() in seen:
            raise DataError(f"duplicate candidate {c.key()}")
        seen.add(c.key())
        out.append(c)
    return out


def write_scored(candidates: Iterable[ScoredCandidate], path: str | os.PathLike) -> None:
    write_jsonl(path, (c.to_json() for c in candidates))


def load_scored(path: str | os.PathLike) -> list[ScoredCandidate]:
    out = []
    for lineno, offset, obj in iter_jsonl(path):
        try:
            out.append(ScoredCandidate.from_json(obj))
        except (KeyError, TypeError, ValueError, DataError) as e:
            raise MalformedRecordError(path, lineno, offset, f"bad scored candidate: {e!r}") from None
    return out


# -- manifest ---------------------------------------------------------------


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    k = manifest.config_snapshot.get("recitation", {}).get("k_samples")
    check_stage_counts(manifest.stage_counts, k)
    text = json.dumps(manifest.to_json(), indent=2, ensure_ascii=False, allow_nan=False) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid manifest JSON: {e}") from None
    return DatasetManifest.from_json(obj)
