"""Stage orchestration: generate -> filter -> select, with JSONL files between stages.

Each stage reads its inputs from the output directory, writes its outputs
atomically, and updates ``manifest.json``. Backend responses go through the
on-disk cache, so rerunning or resuming a stage never repeats a completed call.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .config import PipelineConfig
from .corpus import (
    DatasetManifest,
    SourceQuestion,
    load_candidates,
    load_manifest,
    load_scored,
    load_source_dataset,
    write_candidates,
    write_cf_dataset,
    write_manifest,
    write_scored,
)
from .errors import ConfigError, TransportError
from .filters import (
    COUNTERFACTUAL,
    apply_attribution_filter,
    apply_factuality_filter,
    gold_for_matching,
    judge_attribution,
    judge_factuality,
    load_attribution_template,
    load_factuality_template,
    score_surface,
    select_best_per_question,
    surface_prefilter,
)
from .gateway import Backend, DiskCache, Gateway, HttpBackend, RateLimiter, mock_backend
from .recitation import BACKEND_ERROR, generate_many, load_recitation_template, unique_answers_per_question

log = logging.getLogger(__name__)

CANDIDATES = "candidates.jsonl"
POST_SURFACE = "post_surface.jsonl"
FACTUALITY_JUDGED = "factuality_judged.jsonl"
POST_FACTUALITY = "post_factuality.jsonl"
ATTRIBUTION_JUDGED = "attribution_judged.jsonl"
POST_ATTRIBUTION = "post_attribution.jsonl"
DATASET = "cf_dataset.jsonl"
MANIFEST = "manifest.json"


def build_backend(spec: dict, seed: int) -> Backend:
    kind = spec.get("type")
    if kind == "mock":
        return mock_backend(spec.get("fixture"), seed, strict=bool(spec.get("strict", True)),
                            backend_id=spec.get("id", "mock"))
    if kind == "http":
        return HttpBackend(spec.get("base_url", ""), spec.get("id", "http"), spec.get("api_key_env"),
                           float(spec.get("timeout", 60.0)), bool(spec.get("supports_token_probs", True)))
    raise ConfigError(f"unknown backend type {kind!r}")


def build_gateway(backend: Backend, cfg: PipelineConfig) -> Gateway:
    return Gateway(
        backend=backend,
        cache=DiskCache(cfg.cache_dir),
        max_retries=cfg.max_retries,
        backoff_base=cfg.backoff_base,
        limiter=RateLimiter(cfg.max_inflight, cfg.requests_per_second),
    )


@dataclass
class Pipeline:
    """Runs stages for one configuration. Backends may be injected (tests, custom adapters)."""

    cfg: PipelineConfig
    generator: Backend | None = None
    judge: Backend | None = None

    def __post_init__(self):
        self.out = Path(self.cfg.output_dir)
        self._questions: list[SourceQuestion] | None = None

    # -- helpers ------------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.out / name

    @property
    def questions(self) -> list[SourceQuestion]:
        if self._questions is None:
            self._questions = load_source_dataset(self.cfg.source, self.cfg.source_format)
        return self._questions

    def question_map(self) -> dict[str, SourceQuestion]:
        return {q.question_id: q for q in self.questions}

    def _gateway(self, role: str) -> Gateway:
        if role == "generator":
            if self.generator is None:
                self.generator = build_backend(self.cfg.generator_backend, self.cfg.seed)
            return build_gateway(self.generator, self.cfg)
        if self.judge is None:
            self.judge = build_backend(self.cfg.judge_backend, self.cfg.seed)
        return build_gateway(self.judge, self.cfg)

    def _manifest(self) -> DatasetManifest:
        p = self.path(MANIFEST)
        if p.exists():
            m = load_manifest(p)
            m.config_snapshot = self.cfg.snapshot()
            m.seed = self.cfg.seed
            return m
        return DatasetManifest({}, self.cfg.snapshot(), self.cfg.seed)

    def _save(self, manifest: DatasetManifest) -> None:
        write_manifest(manifest, self.path(MANIFEST))

    # -- stages -------------------------------------------------------------

    def generate(self) -> DatasetManifest:
        template = load_recitation_template(self.cfg.recitation_template)
        gateway = self._gateway("generator")
        questions = self.questions
        candidates = generate_many(gateway, template, self.cfg.recitation, questions, self.cfg.seed,
                                   self.cfg.max_inflight)
        write_candidates(candidates, self.path(CANDIDATES))

        violations = Counter(c.violation for c in candidates if not c.parsed)
        per_question_failures = Counter(c.question_id for c in candidates if c.violation == BACKEND_ERROR)
        all_failed = sorted(qid for qid, n in per_question_failures.items() if n == self.cfg.recitation.k_samples)
        manifest = DatasetManifest(
            stage_counts={
                "questions_in": len(questions),
                "raw_samples": len(candidates),
                "parsed": sum(c.parsed for c in candidates),
            },
            config_snapshot=self.cfg.snapshot(),
            seed=self.cfg.seed,
            stats={
                "format_violations": dict(sorted(violations.items())),
                "all_backend_failure_qids": all_failed,
                "unique_answers_per_question": unique_answers_per_question(candidates),
            },
        )
        self._save(manifest)
        if candidates and violations.get(BACKEND_ERROR, 0) == len(candidates):
            raise TransportError("every generation request failed; see log for backend errors")
        return manifest

    def filter(self, candidates_path: str | Path | None = None) -> DatasetManifest:
        cfg = self.cfg
        fact_t = load_factuality_template(cfg.factuality_template)
        attr_t = load_attribution_template(cfg.attribution_template)
        cfg.filters.check_templates(fact_t, attr_t)
        questions = self.question_map()
        candidates = load_candidates(candidates_path or self.path(CANDIDATES))

        scored = score_surface(candidates, questions, cfg.filters)
        post_surface = surface_prefilter(scored, cfg.filters)
        write_scored(post_surface, self.path(POST_SURFACE))

        needs_judge = (cfg.filters.mode == COUNTERFACTUAL and "factuality" not in cfg.filters.ablate) \
            or "attribution" not in cfg.filters.ablate
        judge = self._gateway("judge") if needs_judge else None
        judged = judge_factuality(judge, fact_t, post_surface, questions, cfg.filters, cfg.max_inflight) \
            if judge is not None else post_surface
        write_scored(judged, self.path(FACTUALITY_JUDGED))
        post_factuality = apply_factuality_filter(judged, cfg.filters)
        write_scored(post_factuality, self.path(POST_FACTUALITY))

        attributed = judge_attribution(judge, attr_t, post_factuality, questions, cfg.filters, cfg.max_inflight) \
            if judge is not None else post_factuality
        write_scored(attributed, self.path(ATTRIBUTION_JUDGED))
        post_attribution = apply_attribution_filter(attributed, cfg.filters)
        write_scored(post_attribution, self.path(POST_ATTRIBUTION))

        manifest = self._manifest()
        manifest.stage_counts.update({
            "parsed": len(scored),
            "post_surface": len(post_surface),
            "post_factuality": len(post_factuality),
            "post_attribution": len(post_attribution),
        })
        manifest.stage_counts.pop("selected", None)
        manifest.stats["verdict_errors"] = {
            "factuality": sum(c.factuality_error is not None for c in judged),
            "attribution": sum(c.attribution_error is not None for c in attributed),
        }
        manifest.stats["surface_matches"] = sum(c.surface_match for c in scored)
        self._save(manifest)
        return manifest

    def select(self, post_attribution_path: str | Path | None = None) -> DatasetManifest:
        cfg = self.cfg
        questions = self.question_map()
        survivors = load_scored(post_attribution_path or self.path(POST_ATTRIBUTION))
        records = select_best_per_question(survivors, questions, cfg.filters)
        counterfactual = cfg.filters.mode == COUNTERFACTUAL and "factuality" not in cfg.filters.ablate
        write_cf_dataset(
            records,
            self.path(DATASET),
            attribution_threshold=cfg.filters.attribution_threshold,
            gold_aliases={qid: gold_for_matching(q, cfg.filters) for qid, q in questions.items()},
            require_counterfactual=counterfactual,
            allow_unscored=bool(cfg.filters.ablate),
        )

        manifest = self._manifest()
        manifest.stage_counts["selected"] = len(records)
        selected = {r.question_id for r in records}
        parsed_qids = set()
        cand_path = self.path(CANDIDATES)
        if cand_path.exists():
            parsed_qids = {c.question_id for c in load_candidates(cand_path) if c.parsed}
        else:
            parsed_qids = {c.question_id for c in survivors}
        manifest.stats["terminal"] = {
            "selected": len(selected),
            "no_survivors": sum(1 for q in questions if q in parsed_qids and q not in selected),
            "all_parse_failures": sum(1 for q in questions if q not in parsed_qids),
        }
        self._save(manifest)
        return manifest

    def run(self) -> DatasetManifest:
        self.generate()
        self.filter()
        return self.select()
