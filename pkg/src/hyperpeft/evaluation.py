"""Entity-level micro-F1 under the CoNLL exact-match convention.

An entity is a (start, end, type) triple recovered from sBIO tags; a
prediction counts only if all three fields match the gold data exactly.
Counts are pooled over all sentences of a task (micro average); the
cross-task "average" reported next to the per-task rows is the
arithmetic mean of per-task F1 scores, with the fully pooled variant
exposed alongside it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import torch

from .codec import TaggedSequence, decode_output_detailed, encode_input, sbio_to_spans
from .errors import ContractViolationError
from .host import Vocabulary, encode_texts, greedy_decode
from .peft import Instrumentation


def extract_entities(labels: Sequence[str]) -> set[tuple[int, int, str]]:
    """Exact-boundary typed triples of every maximal labelled span."""
    return {(span.start, span.end, span.label) for span in sbio_to_spans(labels)}


def count_matches(
    preds: Sequence[Sequence[str]], golds: Sequence[Sequence[str]]
) -> tuple[int, int, int]:
    """(correct, n_pred, n_gold) pooled over all sentences."""
    if len(preds) != len(golds):
        raise ContractViolationError(
            f"{len(preds)} predictions for {len(golds)} gold sequences"
        )
    correct = n_pred = n_gold = 0
    for i, (pred, gold) in enumerate(zip(preds, golds)):
        if len(pred) != len(gold):
            raise ContractViolationError(
                f"length mismatch at index {i}: {len(pred)} predicted tags "
                f"for {len(gold)} gold tags"
            )
        p = extract_entities(pred)
        g = extract_entities(gold)
        correct += len(p & g)
        n_pred += len(p)
        n_gold += len(g)
    return correct, n_pred, n_gold


def prf_from_counts(correct: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0  # empty-vs-empty corpus convention
    precision = correct / n_pred if n_pred else 0.0
    recall = correct / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def micro_f1(
    preds: Sequence[Sequence[str]], golds: Sequence[Sequence[str]]
) -> tuple[float, float, float]:
    """(precision, recall, F1) pooled over all sentences."""
    return prf_from_counts(*count_matches(preds, golds))


@dataclass(frozen=True)
class TaskScore:
    task: str
    precision: float
    recall: float
    f1: float
    n_gold: int
    n_pred: int
    n_correct: int
    malformed_slot_count: int = 0
    quality_alarm: bool = False


@dataclass(frozen=True)
class EvalReport:
    tasks: tuple[TaskScore, ...]
    average_f1: float  # arithmetic mean of per-task micro-F1
    pooled_f1: float   # micro-F1 from counts pooled across tasks

    def to_json(self) -> str:
        payload = {
            "tasks": [asdict(t) for t in self.tasks],
            "average_f1": self.average_f1,
            "pooled_f1": self.pooled_f1,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def format_table(self) -> str:
        header = f"{'Task':<16}{'P':>8}{'R':>8}{'F1':>8}  {'gold':>6}{'pred':>6}{'ok':>6}  flags"
        lines = [header, "-" * len(header)]
        for row in self.tasks:
            flags = []
            if row.malformed_slot_count:
                flags.append(f"malformed={row.malformed_slot_count}")
            if row.quality_alarm:
                flags.append("ALARM")
            lines.append(
                f"{row.task:<16}{row.precision:>8.4f}{row.recall:>8.4f}{row.f1:>8.4f}  "
                f"{row.n_gold:>6}{row.n_pred:>6}{row.n_correct:>6}  {' '.join(flags)}"
            )
        lines.append("-" * len(header))
        lines.append(f"{'Average':<16}{'':>8}{'':>8}{self.average_f1:>8.4f}")
        return "\n".join(lines)


def build_report(scores: Sequence[TaskScore]) -> EvalReport:
    mean = sum(s.f1 for s in scores) / len(scores) if scores else 0.0
    pooled = prf_from_counts(
        sum(s.n_correct for s in scores),
        sum(s.n_pred for s in scores),
        sum(s.n_gold for s in scores),
    )[2]
    return EvalReport(tasks=tuple(scores), average_f1=mean, pooled_f1=pooled)


def average_of_f1(values: Sequence[float]) -> float:
    """Arithmetic mean used by the cross-task Average row."""
    return sum(values) / len(values)


@torch.no_grad()
def evaluate_task(
    instrumentation: Instrumentation,
    vocab: Vocabulary,
    task_name: str,
    task_index: int,
    examples: Sequence[TaggedSequence],
    batch_size: int = 64,
) -> TaskScore:
    """Encode, greedy-decode and score one task's test split."""
    instrumentation.set_active_task(task_index)
    host = instrumentation.host
    namer = vocab.sentinel_namer
    preds: list[list[str]] = []
    golds: list[list[str]] = []
    malformed = 0
    total_slots = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        texts = [encode_input(ex.tokens, namer) for ex in chunk]
        src_ids, src_mask = encode_texts(vocab, texts)
        max_new = max(2 * len(ex) + 2 for ex in chunk)
        outputs = greedy_decode(host, src_ids, src_mask, max_new_tokens=max_new)
        for ex, out_ids in zip(chunk, outputs):
            decoded = decode_output_detailed(vocab.decode(out_ids), len(ex), namer)
            preds.append(list(decoded.labels))
            golds.append(list(ex.labels))
            malformed += decoded.malformed_slots
            total_slots += len(ex)
    correct, n_pred, n_gold = count_matches(preds, golds)
    precision, recall, f1 = prf_from_counts(correct, n_pred, n_gold)
    return TaskScore(
        task=task_name,
        precision=precision,
        recall=recall,
        f1=f1,
        n_gold=n_gold,
        n_pred=n_pred,
        n_correct=correct,
        malformed_slot_count=malformed,
        quality_alarm=bool(total_slots and malformed >= total_slots),
    )


def evaluate_model(
    instrumentation: Instrumentation,
    vocab: Vocabulary,
    test_splits: Mapping[str, Sequence[TaggedSequence]],
    batch_size: int = 64,
) -> EvalReport:
    """Score every task (indices follow lexicographic task-name order)."""
    scores = []
    for task_index, name in enumerate(sorted(test_splits)):
        scores.append(
            evaluate_task(instrumentation, vocab, name, task_index,
                          test_splits[name], batch_size=batch_size)
        )
    return build_report(scores)
