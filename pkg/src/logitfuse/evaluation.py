"""Grading and pass@k evaluation over decoded completions.

Answers are read out of the last ``\\boxed{...}`` group and compared by
exact string match after a small normalization pipeline. This is a
deliberately narrow grader: semantic math equivalence (``0.5`` vs
``\\frac{1}{2}``) is out of scope, and every normalization rule is listed in
:func:`normalize_answer` so the divergences are explicit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

RESULTS_SCHEMA_VERSION = 1

_BOXED = "\\boxed{"


def extract_boxed(text: str) -> str | None:
    """Content of the last ``\\boxed{...}`` group, or None.

    Braces are matched by plain counting (escaped braces come in pairs in
    well-formed LaTeX, so counting still nests correctly); an unbalanced
    final group yields None. Returned content always has balanced braces.
    """
    start = text.rfind(_BOXED)
    if start < 0:
        return None
    begin = start + len(_BOXED)
    depth = 1
    for j in range(begin, len(text)):
        ch = text[j]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[begin:j]
    return None


def normalize_answer(answer: str) -> str:
    """Normalization applied to both sides before exact match.

    Rules: drop ``$``; drop ``\\left``/``\\right``; ``\\dfrac`` -> ``\\frac``;
    remove all whitespace (not significant in math answers); strip trailing
    ``.`` and ``\\%``. Idempotent by construction.
    """
    s = answer.replace("$", "")
    s = s.replace("\\left", "").replace("\\right", "")
    s = s.replace("\\dfrac", "\\frac")
    s = "".join(s.split())
    while True:
        if s.endswith("\\%"):
            s = s[:-2]
        elif s.endswith("."):
            s = s[:-1]
        else:
            break
    return s


def grade(extracted: str | None, gold: str) -> bool:
    """Exact match after normalization; a missing answer is wrong."""
    if not gold:
        raise ValueError("gold answer must be non-empty")
    if extracted is None:
        return False
    return normalize_answer(extracted) == normalize_answer(gold)


def pass_at_k_any(correct_flags: Sequence[bool], k: int) -> int:
    """1 iff any of the first k flags is true."""
    if not (1 <= k <= len(correct_flags)):
        raise ValueError(f"k must be in [1, {len(correct_flags)}], got {k}")
    return int(any(correct_flags[:k]))


def pass_at_k_unbiased(n: int, c: int, k: int) -> float:
    """Unbiased estimator 1 - C(n-c, k)/C(n, k), in safe product form."""
    if not (0 <= c <= n):
        raise ValueError(f"c must be in [0, {n}], got {c}")
    if not (1 <= k <= n):
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if n - c < k:
        return 1.0
    frac = Fraction(1)
    for i in range(k):
        frac *= Fraction(n - c - i, n - i)
    return float(1 - frac)


@dataclass(frozen=True)
class EvalQuestion:
    id: str
    prompt: str
    gold_answer: str
    source: str = "default"
    prompt_tokens: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if not self.gold_answer:
            raise ValueError(f"question {self.id!r} has an empty gold answer")


@dataclass(frozen=True)
class Completion:
    text: str
    token_count: int
    extracted: str | None
    correct: bool


@dataclass
class EvalRecord:
    question_id: str
    dataset: str
    completions: list[Completion]
    pass_at: dict[int, float] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(self.completions)

    @property
    def n_correct(self) -> int:
        return sum(1 for c in self.completions if c.correct)

    @property
    def avg_tokens(self) -> float:
        if not self.completions:
            return 0.0
        return sum(c.token_count for c in self.completions) / len(self.completions)

    def to_json(self) -> dict:
        return {
            "schema_version": RESULTS_SCHEMA_VERSION,
            "question_id": self.question_id,
            "dataset": self.dataset,
            "n_samples": self.n_samples,
            "n_correct": self.n_correct,
            "avg_tokens": self.avg_tokens,
            "pass_at": {str(k): v for k, v in sorted(self.pass_at.items())},
            "completions": [
                {
                    "text": c.text,
                    "token_count": c.token_count,
                    "extracted": c.extracted,
                    "correct": c.correct,
                }
                for c in self.completions
            ],
        }


def evaluate_question(
    question: EvalQuestion,
    completions: Sequence[tuple[str, int]],
    ks: Iterable[int] = (1, 8),
) -> EvalRecord:
    """Grade (text, token_count) completions and fill pass@k fields.

    pass@k uses the unbiased estimator, which coincides with mean sample
    correctness at k=1 and with any-of at k=n.
    """
    graded = []
    for text, token_count in completions:
        extracted = extract_boxed(text)
        graded.append(Completion(text, token_count, extracted, grade(extracted, question.gold_answer)))
    record = EvalRecord(question_id=question.id, dataset=question.source, completions=graded)
    n, c = record.n_samples, record.n_correct
    for k in ks:
        if 1 <= k <= n:
            record.pass_at[k] = pass_at_k_unbiased(n, c, k)
    return record


@dataclass(frozen=True)
class SummaryRow:
    dataset: str
    n_questions: int
    n_samples: int
    pass_at_1: float
    pass_at_8: float | None
    avg_tokens: float


def aggregate(records: Sequence[EvalRecord]) -> list[SummaryRow]:
    """Dataset-level means.

    pass@1 is mean per-sample correctness across all samples and questions;
    pass@8 is the mean any-of-8 indicator and is omitted (None) when any
    question has fewer than 8 samples; avg tokens is the mean over all
    completions.
    """
    by_dataset: dict[str, list[EvalRecord]] = {}
    for rec in records:
        by_dataset.setdefault(rec.dataset, []).append(rec)
    rows = []
    for dataset in sorted(by_dataset):
        group = by_dataset[dataset]
        total_samples = sum(r.n_samples for r in group)
        total_correct = sum(r.n_correct for r in group)
        total_tokens = sum(c.token_count for r in group for c in r.completions)
        pass1 = total_correct / total_samples if total_samples else 0.0
        if group and all(r.n_samples >= 8 for r in group):
            pass8 = sum(
                pass_at_k_any([c.correct for c in r.completions], 8) for r in group
            ) / len(group)
        else:
            pass8 = None
        rows.append(
            SummaryRow(
                dataset=dataset,
                n_questions=len(group),
                n_samples=max((r.n_samples for r in group), default=0),
                pass_at_1=pass1,
                pass_at_8=pass8,
                avg_tokens=total_tokens / total_samples if total_samples else 0.0,
            )
        )
    return rows


def load_questions(path: str | Path) -> list[EvalQuestion]:
    """Questions JSONL: {id, prompt, answer[, source, prompt_tokens]}."""
    questions: list[EvalQuestion] = []
    seen: set[str] = set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            qid = str(rec["id"])
            question = EvalQuestion(
                id=qid,
                prompt=str(rec.get("prompt", "")),
                gold_answer=str(rec["answer"]),
                source=str(rec.get("source", "default")),
                prompt_tokens=tuple(rec["prompt_tokens"]) if "prompt_tokens" in rec else None,
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
        if qid in seen:
            raise ValueError(f"{path}:{lineno}: duplicate question id {qid!r}")
        seen.add(qid)
        questions.append(question)
    return questions


def write_records(path: str | Path, records: Sequence[EvalRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def write_graded_completions(
    path: str | Path, records: Sequence[EvalRecord], origin: str, prompts: Mapping[str, str]
) -> None:
    """Export graded completions for preference-pair construction."""
    if origin not in ("L", "S"):
        raise ValueError(f"origin must be 'L' or 'S', got {origin!r}")
    with open(path, "w") as fh:
        for rec in records:
            for comp in rec.completions:
                fh.write(
                    json.dumps(
                        {
                            "question_id": rec.question_id,
                            "origin": origin,
                            "prompt": prompts.get(rec.question_id, ""),
                            "text": comp.text,
                            "correct": comp.correct,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
