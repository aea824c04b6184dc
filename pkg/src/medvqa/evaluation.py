"""Answer scoring: normalization, exact match, semantic-equivalence rules,
review-session construction and accuracy aggregation.

The rule layer is a machine pre-filter over generated/ground-truth pairs:
exact matches are settled, containment/synonym/context-completion pairs are
suggested correct, everything else stays unresolved for the two human
annotators. Accuracies are reported per answer type and overall, rounded
half-up to one decimal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

EXACT = "EXACT"
RULE_CORRECT = "RULE_CORRECT"
UNRESOLVED = "UNRESOLVED"

CORRECT = "CORRECT"
INCORRECT = "INCORRECT"

_ARTICLES = ("a", "an", "the")
_TERMINAL_PUNCT = ".,;:!?"

DEFAULT_SYNONYMS = (
    ("both", "bilateral"),
    ("yes", "yeah"),
    ("yes", "yep"),
    ("no", "nope"),
)


def normalize(answer: str) -> str:
    """Lowercase, collapse whitespace, strip closing punctuation and leading
    articles. Idempotent."""
    tokens = answer.lower().split()
    while tokens and tokens[0] in _ARTICLES:
        tokens = tokens[1:]
    text = " ".join(tokens)
    return text.rstrip(_TERMINAL_PUNCT).strip()


def exact_match(pred: str, gt: str) -> bool:
    return normalize(pred) == normalize(gt)


class SynonymTable:
    """Unordered word-pair equivalences over normalized strings."""

    def __init__(self, pairs=DEFAULT_SYNONYMS):
        self._pairs = {frozenset((normalize(a), normalize(b))) for a, b in pairs}

    @classmethod
    def from_file(cls, path: str | Path) -> "SynonymTable":
        pairs = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(tuple(DEFAULT_SYNONYMS) + tuple(tuple(p) for p in pairs))

    def is_synonym(self, a: str, b: str) -> bool:
        return frozenset((normalize(a), normalize(b))) in self._pairs


@dataclass(frozen=True)
class Prediction:
    id: str
    question: str
    ground_truth: str
    generated: str
    answer_type: str
    image: str | None = None

    def __post_init__(self):
        if self.answer_type not in ("open", "closed"):
            raise ValueError(f"unknown answer_type {self.answer_type!r}")


def _token_contained(a: str, b: str) -> bool:
    """True when one string occurs in the other on token boundaries."""
    if not a or not b:
        return False
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    return f" {short} " in f" {long_} "


def _context_completion(pred_n: str, gt_n: str, question: str) -> bool:
    """The shorter answer's tokens all appear in the question plus the longer
    answer, i.e. the missing context is already given by the question."""
    if not pred_n or not gt_n:
        return False
    short, long_ = (pred_n, gt_n) if len(pred_n) <= len(gt_n) else (gt_n, pred_n)
    available = set(long_.split()) | set(normalize(question).split())
    return set(short.split()) <= available


def rule_classify(p: Prediction, synonyms: SynonymTable | None = None) -> str:
    """EXACT, RULE_CORRECT (containment / synonym / context completion) or
    UNRESOLVED, in that priority order."""
    synonyms = synonyms or SynonymTable()
    pred_n, gt_n = normalize(p.generated), normalize(p.ground_truth)
    if pred_n == gt_n:
        return EXACT
    if _token_contained(pred_n, gt_n):
        return RULE_CORRECT
    if synonyms.is_synonym(pred_n, gt_n):
        return RULE_CORRECT
    if _context_completion(pred_n, gt_n, p.question):
        return RULE_CORRECT
    return UNRESOLVED


@dataclass
class Verdict:
    """Machine classification plus the human layer for one prediction."""

    auto: str
    human: dict[str, str] = field(default_factory=dict)
    final: str | None = None

    def __post_init__(self):
        if self.auto == EXACT and self.final is None:
            self.final = CORRECT


def classify_predictions(predictions: list[Prediction],
                         synonyms: SynonymTable | None = None) -> dict[str, Verdict]:
    ids = [p.id for p in predictions]
    if len(set(ids)) != len(ids):
        raise ValueError("prediction ids are not unique")
    return {p.id: Verdict(auto=rule_classify(p, synonyms)) for p in predictions}


@dataclass
class HumanEvalSession:
    """Everything the review workflow needs: all predictions, their machine
    verdicts, and the ordered ids still requiring human eyes (the non-exact
    set; rule-correct entries arrive pre-suggested but human-confirmable)."""

    predictions: list[Prediction]
    verdicts: dict[str, Verdict]
    review_ids: list[str]

    @property
    def n_exact(self) -> int:
        return len(self.predictions) - len(self.review_ids)


def build_human_session(predictions: list[Prediction],
                        synonyms: SynonymTable | None = None) -> HumanEvalSession:
    if not predictions:
        raise ValueError("cannot build a review session from zero predictions")
    verdicts = classify_predictions(predictions, synonyms)
    review = [p.id for p in predictions if verdicts[p.id].auto != EXACT]
    return HumanEvalSession(list(predictions), verdicts, review)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def round_tenths(numerator: int, denominator: int) -> int:
    """Half-up integer tenths of a percent: round(1000 * num / den)."""
    if denominator == 0:
        return 0
    return (2000 * numerator + denominator) // (2 * denominator)


@dataclass(frozen=True)
class MetricsReport:
    n_open: int
    n_closed: int
    correct_open: int
    correct_closed: int
    acc_open: float
    acc_closed: float
    acc_overall: float

    @classmethod
    def from_counts(cls, n_open: int, n_closed: int,
                    correct_open: int, correct_closed: int) -> "MetricsReport":
        if not (0 <= correct_open <= n_open and 0 <= correct_closed <= n_closed):
            raise ValueError("correct counts exceed totals")
        return cls(
            n_open=n_open, n_closed=n_closed,
            correct_open=correct_open, correct_closed=correct_closed,
            acc_open=round_tenths(correct_open, n_open) / 10.0,
            acc_closed=round_tenths(correct_closed, n_closed) / 10.0,
            acc_overall=round_tenths(correct_open + correct_closed,
                                     n_open + n_closed) / 10.0,
        )

    def to_dict(self) -> dict:
        return {
            "n_open": self.n_open, "n_closed": self.n_closed,
            "correct_open": self.correct_open, "correct_closed": self.correct_closed,
            "acc_open": self.acc_open, "acc_closed": self.acc_closed,
            "acc_overall": self.acc_overall,
        }


def aggregate(predictions: list[Prediction],
              finals: dict[str, str]) -> MetricsReport:
    """Accuracy report from final verdicts; every prediction must have one."""
    missing = [p.id for p in predictions if finals.get(p.id) not in (CORRECT, INCORRECT)]
    if missing:
        raise ValueError(f"missing final verdicts for ids {missing[:10]}")
    n = {"open": 0, "closed": 0}
    c = {"open": 0, "closed": 0}
    for p in predictions:
        n[p.answer_type] += 1
        c[p.answer_type] += finals[p.id] == CORRECT
    return MetricsReport.from_counts(n["open"], n["closed"], c["open"], c["closed"])


def exact_finals(verdicts: dict[str, Verdict]) -> dict[str, str]:
    """Exact-only regime: correct iff the strings matched exactly."""
    return {pid: CORRECT if v.auto == EXACT else INCORRECT
            for pid, v in verdicts.items()}


def assisted_finals(verdicts: dict[str, Verdict]) -> dict[str, str]:
    """Human-assisted regime: exact matches plus human final verdicts."""
    out = {}
    for pid, v in verdicts.items():
        if v.auto == EXACT:
            out[pid] = CORRECT
        elif v.final is not None:
            out[pid] = v.final
    return out


def score_predictions(predictions: list[Prediction], regime: str,
                      finals: dict[str, str] | None = None,
                      synonyms: SynonymTable | None = None) -> MetricsReport:
    """Score a prediction set under the exact or the human-assisted regime."""
    verdicts = classify_predictions(predictions, synonyms)
    if regime == "exact":
        return aggregate(predictions, exact_finals(verdicts))
    if regime == "assisted":
        merged = exact_finals(verdicts)
        for pid, v in verdicts.items():
            if v.auto != EXACT:
                merged[pid] = (finals or {}).get(pid, "")
        return aggregate(predictions, merged)
    raise ValueError(f"unknown regime {regime!r}; expected 'exact' or 'assisted'")


# ---------------------------------------------------------------------------
# Inter-annotator agreement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgreementStats:
    n_items: int
    n_agree: int
    percent_agreement: float
    kappa: float


def agreement_stats(pairs: list[tuple[str, str]]) -> AgreementStats:
    """Percent agreement and Cohen's kappa over two annotators' verdicts.

    With a degenerate chance-agreement of 1 (both annotators single-valued),
    kappa is 1 for perfect agreement and 0 otherwise.
    """
    n = len(pairs)
    if n == 0:
        return AgreementStats(0, 0, 0.0, 0.0)
    agree = sum(a == b for a, b in pairs)
    po = agree / n
    pa = sum(a == CORRECT for a, _ in pairs) / n
    pb = sum(b == CORRECT for _, b in pairs) / n
    pe = pa * pb + (1 - pa) * (1 - pb)
    if pe == 1.0:
        kappa = 1.0 if po == 1.0 else 0.0
    else:
        kappa = (po - pe) / (1 - pe)
    return AgreementStats(n, agree, 100.0 * agree / n, kappa)


# ---------------------------------------------------------------------------
# File formats (line-delimited JSON, UTF-8)
# ---------------------------------------------------------------------------

def read_predictions_file(path: str | Path) -> list[Prediction]:
    preds = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                preds.append(Prediction(
                    id=str(obj["id"]), question=obj["question"],
                    ground_truth=obj["ground_truth"], generated=obj["generated"],
                    answer_type=obj["answer_type"], image=obj.get("image")))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed prediction: {exc}") from None
    if not preds:
        raise ValueError(f"{path}: no predictions")
    ids = [p.id for p in preds]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate prediction ids")
    return preds


def write_predictions_file(path: str | Path, predictions: list[Prediction]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in predictions:
            row = {"id": p.id, "question": p.question, "ground_truth": p.ground_truth,
                   "generated": p.generated, "answer_type": p.answer_type}
            if p.image:
                row["image"] = p.image
            fh.write(json.dumps(row) + "\n")


def read_verdicts_file(path: str | Path) -> dict[str, str]:
    """Verdict rows: {"id": ..., "final": "CORRECT"|"INCORRECT"}."""
    finals = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            final = obj.get("final")
            if final not in (CORRECT, INCORRECT):
                raise ValueError(f"{path}:{lineno}: bad final verdict {final!r}")
            finals[str(obj["id"])] = final
    return finals


def write_verdicts_file(path: str | Path, finals: dict[str, str]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for pid, final in finals.items():
            fh.write(json.dumps({"id": pid, "final": final}) + "\n")
