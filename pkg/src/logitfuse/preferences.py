"""Preference-pair construction from graded completions of two models.

Pairs come in three kinds, all correct-vs-incorrect within one question:

* ``type1`` — target-correct over guider-incorrect (keeps the guidance from
  breaking what the big model already gets right),
* ``type2`` — guider-correct over target-incorrect (teaches the guider to
  fix the big model's mistakes),
* ``guider_only`` — guider-correct over guider-incorrect (single-model
  ablation variant).

Pairing is the full Cartesian product per question; duplicates are kept
unless deduplication is explicitly requested.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAIR_TYPES = ("type1", "type2", "guider_only")

ORIGIN_TARGET = "L"
ORIGIN_GUIDER = "S"


@dataclass(frozen=True)
class GradedCompletion:
    question_id: str
    origin: str  # "L" (target) or "S" (guider)
    text: str
    correct: bool
    prompt: str = ""

    def __post_init__(self) -> None:
        if self.origin not in (ORIGIN_TARGET, ORIGIN_GUIDER):
            raise ValueError(f"origin must be 'L' or 'S', got {self.origin!r}")


@dataclass(frozen=True)
class PreferencePair:
    question_id: str
    prompt: str
    chosen: str
    rejected: str
    pair_type: str

    def __post_init__(self) -> None:
        if self.pair_type not in PAIR_TYPES:
            raise ValueError(f"pair_type must be one of {PAIR_TYPES}, got {self.pair_type!r}")


@dataclass(frozen=True)
class PairCounts:
    n_type1: int = 0
    n_type2: int = 0
    n_guider_only: int = 0

    @property
    def total(self) -> int:
        return self.n_type1 + self.n_type2 + self.n_guider_only

    def to_json(self) -> dict:
        out = {
            "n_type1": self.n_type1,
            "n_type2": self.n_type2,
            "n_guider_only": self.n_guider_only,
            "n_total": self.total,
        }
        if self.n_type1 + self.n_type2 > 0:
            lam = compute_lambda(self.n_type1, self.n_type2)
            out["lambda"] = lam
            out["proportions"] = {
                "type1": self.n_type1 / (self.n_type1 + self.n_type2),
                "type2": self.n_type2 / (self.n_type1 + self.n_type2),
            }
        return out


def _group_by_question(
    completions: Iterable[GradedCompletion],
) -> dict[str, list[GradedCompletion]]:
    groups: dict[str, list[GradedCompletion]] = {}
    for comp in completions:
        groups.setdefault(comp.question_id, []).append(comp)
    return groups


def build_pairs(
    completions: Iterable[GradedCompletion], dedup: bool = False
) -> tuple[list[PreferencePair], PairCounts]:
    """Cartesian type1/type2 pairing per question.

    type1 = {target correct} x {guider incorrect};
    type2 = {guider correct} x {target incorrect}.
    Output order is deterministic: question id, then completion indices.
    Questions lacking a needed category contribute zero pairs.
    """
    groups = _group_by_question(completions)
    pairs: list[PreferencePair] = []
    n1 = n2 = 0
    for qid in sorted(groups):
        group = groups[qid]
        prompt = next((c.prompt for c in group if c.prompt), "")
        l_ok = [c for c in group if c.origin == ORIGIN_TARGET and c.correct]
        l_bad = [c for c in group if c.origin == ORIGIN_TARGET and not c.correct]
        s_ok = [c for c in group if c.origin == ORIGIN_GUIDER and c.correct]
        s_bad = [c for c in group if c.origin == ORIGIN_GUIDER and not c.correct]
        for chosen in l_ok:
            for rejected in s_bad:
                pairs.append(PreferencePair(qid, prompt, chosen.text, rejected.text, "type1"))
                n1 += 1
        for chosen in s_ok:
            for rejected in l_bad:
                pairs.append(PreferencePair(qid, prompt, chosen.text, rejected.text, "type2"))
                n2 += 1
    if dedup:
        pairs, n1, n2 = _dedup(pairs)
    return pairs, PairCounts(n_type1=n1, n_type2=n2)


def build_guider_only_pairs(
    completions: Iterable[GradedCompletion],
) -> tuple[list[PreferencePair], PairCounts]:
    """Guider-correct x guider-incorrect pairs within each question."""
    groups = _group_by_question(completions)
    pairs: list[PreferencePair] = []
    for qid in sorted(groups):
        group = groups[qid]
        prompt = next((c.prompt for c in group if c.prompt), "")
        s_ok = [c for c in group if c.origin == ORIGIN_GUIDER and c.correct]
        s_bad = [c for c in group if c.origin == ORIGIN_GUIDER and not c.correct]
        for chosen in s_ok:
            for rejected in s_bad:
                pairs.append(PreferencePair(qid, prompt, chosen.text, rejected.text, "guider_only"))
    return pairs, PairCounts(n_guider_only=len(pairs))


def _dedup(pairs: list[PreferencePair]) -> tuple[list[PreferencePair], int, int]:
    seen: set[tuple] = set()
    out: list[PreferencePair] = []
    n1 = n2 = 0
    for p in pairs:
        key = (p.question_id, p.chosen, p.rejected, p.pair_type)
        if key in seen:
            continue
        seen.add(key)
        out.append(p)
        n1 += p.pair_type == "type1"
        n2 += p.pair_type == "type2"
    return out, n1, n2


def compute_lambda(n_type1: int, n_type2: int) -> float:
    """Default mixture weight: the type1 share of all pairs."""
    if n_type1 < 0 or n_type2 < 0:
        raise ValueError("pair counts must be non-negative")
    if n_type1 + n_type2 == 0:
        raise ValueError("cannot compute lambda with zero pairs")
    return n_type1 / (n_type1 + n_type2)


def subsample(
    pairs: Sequence[PreferencePair], n: int, seed: int
) -> tuple[list[PreferencePair], PairCounts]:
    """Seeded uniform subset of size n, preserving original order."""
    if n > len(pairs):
        raise ValueError(f"cannot subsample {n} from {len(pairs)} pairs")
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = sorted(rng.choice(len(pairs), size=n, replace=False).tolist())
    chosen = [pairs[i] for i in idx]
    counts = PairCounts(
        n_type1=sum(1 for p in chosen if p.pair_type == "type1"),
        n_type2=sum(1 for p in chosen if p.pair_type == "type2"),
        n_guider_only=sum(1 for p in chosen if p.pair_type == "guider_only"),
    )
    return chosen, counts


def read_graded(path: str | Path) -> list[GradedCompletion]:
    """Graded-completions JSONL: {question_id, origin, text, correct[, prompt]}."""
    out: list[GradedCompletion] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        try:
            out.append(
                GradedCompletion(
                    question_id=str(rec["question_id"]),
                    origin=str(rec["origin"]),
                    text=str(rec["text"]),
                    correct=bool(rec["correct"]),
                    prompt=str(rec.get("prompt", "")),
                )
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_pairs(path: str | Path, pairs: Iterable[PreferencePair]) -> None:
    """Pairs JSONL: {prompt, chosen, rejected, type, question_id}."""
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(
                json.dumps(
                    {
                        "prompt": p.prompt,
                        "chosen": p.chosen,
                        "rejected": p.rejected,
                        "type": p.pair_type,
                        "question_id": p.question_id,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_pairs(path: str | Path) -> list[PreferencePair]:
    out: list[PreferencePair] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        try:
            out.append(
                PreferencePair(
                    question_id=str(rec["question_id"]),
                    prompt=str(rec.get("prompt", "")),
                    chosen=str(rec["chosen"]),
                    rejected=str(rec["rejected"]),
                    pair_type=str(rec["type"]),
                )
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out
