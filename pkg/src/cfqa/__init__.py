"""Counterfactual open-book QA dataset construction from LLM hallucinations.

The pipeline samples (document, answer) recitations for each source question,
drops answers that are factually equivalent to the gold answer, drops answers
not grounded in their document, and keeps the best-grounded pair per question.
Evaluation helpers score dataset quality with an NLI model and score QA
predictions with token F1 / exact match.
"""

__version__ = "0.1.0"
