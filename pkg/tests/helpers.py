"""Desk-scale worlds: a small source set, a scripted mock fixture whose judge is
consistent with lexical grounding and with surface matching, and a config."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from cfqa.corpus import SourceQuestion, write_jsonl
from cfqa.filters import (
    build_attribution_prompt,
    build_factuality_prompt,
    load_attribution_template,
    load_factuality_template,
)
from cfqa.gateway import FixtureBuilder
from cfqa.recitation import build_recitation_prompt, load_recitation_template, render_as_completion

NAMES = ["Mara", "Tobias", "Ines", "Hugo", "Lena", "Oskar", "Petra", "Ravi"]

# Completion kinds and how the scripted judge treats them.
KINDS = ["gold", "gold_upper", "factual_variant", "cf_grounded", "cf_ungrounded", "malformed"]

YES_FACTUAL = {"Yes": 0.85, " Yes": 0.05, "No": 0.05}
NO_FACTUAL = {"Yes": 0.08, "No": 0.7, " No": 0.1}
NOT_GROUNDED = {"Yes": 0.1, "No": 0.8}


def make_question(i: int) -> SourceQuestion:
    return SourceQuestion(
        question_id=f"q{i:03d}",
        question_text=f"Who founded the guild of clockmakers number {i}?",
        gold_answers=(f"Ada Gold{i}", f"Gold{i}"),
        source_dataset="desk",
    )


def answer_for(kind: str, q: SourceQuestion, j: int) -> str:
    i = int(q.question_id[1:])
    if kind == "gold":
        return q.gold_answers[0]
    if kind == "gold_upper":
        return q.gold_answers[0].upper()
    if kind == "factual_variant":
        return f"A. Gold{i}"
    if kind == "cf_grounded":
        return f"{NAMES[j % len(NAMES)]} Alt{i}"
    if kind == "cf_ungrounded":
        return f"Nobody{i} Else"
    raise ValueError(kind)


def document_for(kind: str, q: SourceQuestion, answer: str, j: int) -> str:
    i = int(q.question_id[1:])
    if kind == "cf_ungrounded":
        return f"Guild {i} keeps its founding charter in a locked vault. Version {j} of the story names no founder."
    return f"Guild {i} keeps its founding charter in a locked vault. Version {j} of the story says it was founded by {answer}."


@dataclass
class DeskWorld:
    questions: list[SourceQuestion]
    builder: FixtureBuilder
    k: int
    # (qid, sample_index) -> (kind, document, answer) for parsed samples
    script: dict = field(default_factory=dict)

    def backend(self, seed: int = 0, **kwargs):
        return self.builder.build(seed=seed, **kwargs)

    def write(self, root: Path, *, seed: int = 0, k: int | None = None, mode: str = "counterfactual",
              ablate=(), extra: dict | None = None) -> Path:
        root.mkdir(parents=True, exist_ok=True)
        write_jsonl(root / "source.jsonl", [
            {"qid": q.question_id, "question": q.question_text, "answers": list(q.gold_answers)}
            for q in self.questions
        ])
        self.builder.write(root / "fixture.jsonl")
        cfg = {
            "source": "source.jsonl",
            "backends": {"generator": {"type": "mock", "fixture": "fixture.jsonl", "strict": True, "id": "mock-L"}},
            "recitation": {"k_samples": k or self.k, "temperature": 0.7},
            "filters": {"mode": mode, "ablate": list(ablate)},
            "scorer": {"type": "lexical"},
            "cache_dir": "cache",
            "output_dir": "out",
            "seed": seed,
            "max_inflight": 4,
        }
        cfg.update(extra or {})
        (root / "config.json").write_text(json.dumps(cfg, indent=2), encoding="utf-8")
        return root / "config.json"


def build_world(n_questions: int = 10, k: int = 24, seed: int = 0, backend_id: str = "mock-L",
                failing: dict | None = None) -> DeskWorld:
    """Script k completions per question, plus judge verdicts for every prompt the pipeline will render.

    Factuality judge: Yes for gold-equivalent answers, No otherwise.
    Attribution judge: Yes (with a per-candidate score) iff the answer appears in the document.
    """
    rng = random.Random(seed)
    rec_t = load_recitation_template()
    fact_t = load_factuality_template()
    attr_t = load_attribution_template()
    questions = [make_question(i) for i in range(n_questions)]
    builder = FixtureBuilder()
    world = DeskWorld(questions, builder, k)
    for q in questions:
        prompt = build_recitation_prompt(rec_t, q)
        for s in range(k):
            if failing and (q.question_id, s) in failing:
                builder.add_error(prompt, s, failing[(q.question_id, s)])
                continue
            kind = rng.choices(KINDS, weights=[3, 1, 2, 5, 3, 1])[0]
            j = rng.randrange(4)
            if kind == "malformed":
                builder.add_completion(prompt, f"Guild notes without structure\nAnswer: Someone{s}", s)
                continue
            answer = answer_for(kind, q, j)
            doc = document_for(kind, q, answer, j)
            builder.add_completion(prompt, render_as_completion(doc, answer, rec_t), s)
            world.script[(q.question_id, s)] = (kind, doc, answer)

            fp = build_factuality_prompt(fact_t, q.question_text, answer, q.canonical_gold)
            factual = kind in ("gold", "gold_upper", "factual_variant")
            builder.add_token_probs(fp, YES_FACTUAL if factual else NO_FACTUAL)

            ap = build_attribution_prompt(attr_t, q.question_text, doc, answer)
            if kind == "cf_ungrounded":
                builder.add_token_probs(ap, NOT_GROUNDED)
            else:
                score_rng = random.Random(f"{q.question_id}|{doc}|{answer}")
                p_yes = round(score_rng.uniform(0.55, 0.95), 3)
                builder.add_token_probs(ap, {"Yes": p_yes, "No": round(1 - p_yes, 3)})
    return world
