"""Corpus loading, split protocol and low-resource down-sampling.

On-disk formats:

* ``conll_tsv``: two tab-separated columns ``TOKEN<TAB>TAG`` with blank
  lines between sentences. Tags may be classic BIO (``B-X``/``I-X``/``O``)
  or already sBIO; BIO is converted on load (``B-X`` -> ``X``,
  ``I-X`` -> ``I``).
* ``json_lines``: one JSON object per line with ``tokens`` (list of
  strings) and ``spans`` (list of ``[start, end, label]``), optional
  ``task``.

Splits are sampled uniformly without replacement with round-half-up
counts, deterministically from (seed, task name), and every sampling
decision can be written to a JSON manifest that rebuilds the exact same
split later. Duplicated sentences in the source files are kept.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .codec import INSIDE_TAG, OUTSIDE_TAG, Span, TaggedSequence, spans_to_sbio
from .errors import ConfigError, CorpusFormatError

logger = logging.getLogger(__name__)

CORPUS_FORMATS = ("conll_tsv", "json_lines")


@dataclass(frozen=True)
class TaskDescriptor:
    """Per-task statistics used by the sampler and the task embedding."""

    name: str
    label_set: tuple[str, ...]
    n_train: int
    n_val: int
    n_test: int
    task_index: int


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[TaggedSequence, ...]
    val: tuple[TaggedSequence, ...]
    test: tuple[TaggedSequence, ...]

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "val", tuple(self.val))
        object.__setattr__(self, "test", tuple(self.test))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _task_rng(seed: int, task: str, stage: str) -> random.Random:
    # string seeding keeps per-task draws independent and reproducible
    return random.Random(f"{seed}:{task}:{stage}")


def _bio_to_sbio(tag: str, path, line: int, state: dict) -> str:
    if tag == OUTSIDE_TAG:
        state["open"] = None
        return OUTSIDE_TAG
    if tag.startswith("B-") and len(tag) > 2:
        state["open"] = tag[2:]
        return tag[2:]
    if tag.startswith("I-") and len(tag) > 2:
        if state["open"] is None:
            logger.warning("%s:%d: continuation tag %r with no open span", path, line, tag)
        elif state["open"] != tag[2:]:
            logger.warning(
                "%s:%d: continuation type %r inside %r span", path, line, tag[2:], state["open"]
            )
        return INSIDE_TAG
    if tag == INSIDE_TAG:
        return INSIDE_TAG
    # bare type tag: file is already sBIO
    state["open"] = tag
    return tag


def _load_conll(path: Path, task: str) -> list[TaggedSequence]:
    sequences: list[TaggedSequence] = []
    tokens: list[str] = []
    tags: list[str] = []
    state: dict = {"open": None}

    def flush():
        if tokens:
            sequences.append(TaggedSequence(tuple(tokens), tuple(tags), task))
            tokens.clear()
            tags.clear()
        state["open"] = None

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush()
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                # tolerate space-separated two-column files
                parts = line.split()
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise CorpusFormatError(
                    f"expected TOKEN<TAB>TAG, got {line!r}", path=path, line=lineno
                )
            tokens.append(parts[0])
            tags.append(_bio_to_sbio(parts[1], path, lineno, state))
    flush()
    return sequences


def _load_json_lines(path: Path, task: str) -> list[TaggedSequence]:
    sequences: list[TaggedSequence] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
                toks = [str(t) for t in obj["tokens"]]
                spans = [Span(int(s), int(e), str(lab)) for s, e, lab in obj.get("spans", [])]
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise CorpusFormatError(f"bad json-lines record ({exc})", path=path, line=lineno)
            labels = spans_to_sbio(spans, len(toks))
            sequences.append(TaggedSequence(tuple(toks), tuple(labels), obj.get("task", task)))
    return sequences


def load_corpus(path, format: str = "conll_tsv", task: str | None = None) -> list[TaggedSequence]:
    """Load one split file as a list of tagged sequences (duplicates kept)."""
    path = Path(path)
    if task is None:
        task = path.stem
    if not path.exists():
        raise CorpusFormatError("file not found", path=path)
    if format == "conll_tsv":
        return _load_conll(path, task)
    if format == "json_lines":
        return _load_json_lines(path, task)
    raise ConfigError(f"unknown corpus format {format!r}; expected one of {CORPUS_FORMATS}")


def sample_indices(n: int, count: int, rng: random.Random) -> list[int]:
    """Uniform sample without replacement, returned in ascending order."""
    return sorted(rng.sample(range(n), count))


def make_validation_split(
    train: Sequence[TaggedSequence], fraction: float, seed: int
) -> tuple[list[TaggedSequence], list[TaggedSequence]]:
    """Carve a validation subset out of a raw training partition."""
    if not train:
        raise ConfigError("cannot split an empty training set")
    if not 0 < fraction < 1:
        raise ConfigError(f"validation fraction must be in (0, 1), got {fraction}")
    n_val = round_half_up(fraction * len(train))
    if n_val == 0 or n_val == len(train):
        raise ConfigError(
            f"fraction {fraction} of {len(train)} examples leaves an empty partition"
        )
    rng = _task_rng(seed, train[0].task, "val_split")
    val_idx = set(sample_indices(len(train), n_val, rng))
    train_out = [ex for i, ex in enumerate(train) if i not in val_idx]
    val_out = [train[i] for i in sorted(val_idx)]
    return train_out, val_out


def downsample(split: CorpusSplit, fraction: float, seed: int) -> CorpusSplit:
    """Down-sample train and val to ``fraction``; the test partition is untouched."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"down-sampling fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return split
    if not split.train:
        raise ConfigError("cannot down-sample an empty training set")
    task = split.train[0].task

    def pick(examples: tuple[TaggedSequence, ...], stage: str) -> tuple[TaggedSequence, ...]:
        if not examples:
            return examples
        count = round_half_up(fraction * len(examples))
        if stage == "train" and count == 0:
            raise ConfigError(f"fraction {fraction} empties the training set of {task!r}")
        rng = _task_rng(seed, task, f"downsample_{stage}")
        return tuple(examples[i] for i in sample_indices(len(examples), count, rng))

    return CorpusSplit(train=pick(split.train, "train"), val=pick(split.val, "val"), test=split.test)


def _label_set(split: CorpusSplit) -> tuple[str, ...]:
    labels = set()
    for part in (split.train, split.val, split.test):
        for ex in part:
            labels.update(ex.labels)
    labels -= {INSIDE_TAG, OUTSIDE_TAG}
    return tuple(sorted(labels))


def corpus_stats(splits: Mapping[str, CorpusSplit]) -> list[TaskDescriptor]:
    """Build descriptors with task indices assigned in lexicographic name order."""
    descriptors = []
    for index, name in enumerate(sorted(splits)):
        split = splits[name]
        descriptors.append(
            TaskDescriptor(
                name=name,
                label_set=_label_set(split),
                n_train=len(split.train),
                n_val=len(split.val),
                n_test=len(split.test),
                task_index=index,
            )
        )
    return descriptors


def check_label_closure(split: CorpusSplit, descriptor: TaskDescriptor) -> None:
    allowed = set(descriptor.label_set) | {INSIDE_TAG, OUTSIDE_TAG}
    for part_name, part in (("train", split.train), ("val", split.val), ("test", split.test)):
        for ex in part:
            extra = set(ex.labels) - allowed
            if extra:
                raise CorpusFormatError(
                    f"{part_name} example uses labels outside the task set: {sorted(extra)}"
                )


# ---------------------------------------------------------------------------
# Split manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitManifest:
    """Everything needed to rebuild a split from the raw corpus files.

    ``val_source_indices`` lists raw-train indices moved into validation
    (empty when the corpus ships its own validation file). ``train_indices``
    and ``val_indices`` index the post-validation-split partitions kept
    after down-sampling.
    """

    task: str
    seed: int
    fraction: float
    val_fraction: float | None
    val_source_indices: tuple[int, ...]
    train_indices: tuple[int, ...]
    val_indices: tuple[int, ...]
    n_test: int

    def to_json(self) -> str:
        payload = asdict(self)
        for key in ("val_source_indices", "train_indices", "val_indices"):
            payload[key] = list(payload[key])
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        obj = json.loads(text)
        return cls(
            task=obj["task"],
            seed=int(obj["seed"]),
            fraction=float(obj["fraction"]),
            val_fraction=None if obj["val_fraction"] is None else float(obj["val_fraction"]),
            val_source_indices=tuple(obj["val_source_indices"]),
            train_indices=tuple(obj["train_indices"]),
            val_indices=tuple(obj["val_indices"]),
            n_test=int(obj["n_test"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_split(
    raw_train: Sequence[TaggedSequence],
    raw_val: Sequence[TaggedSequence] | None,
    raw_test: Sequence[TaggedSequence],
    fraction: float,
    seed: int,
    val_fraction: float = 0.1,
) -> tuple[CorpusSplit, SplitManifest]:
    """Apply the full split protocol and record it as a manifest.

    Corpora without a shipped validation partition get one carved from
    raw train first; everything is then down-sampled to ``fraction``.
    """
    if not raw_train:
        raise ConfigError("raw training partition is empty")
    task = raw_train[0].task

    if raw_val is None:
        train_base, val_base = make_validation_split(raw_train, val_fraction, seed)
        rng = _task_rng(seed, task, "val_split")
        val_source = tuple(sample_indices(len(raw_train), len(val_base), rng))
        used_val_fraction: float | None = val_fraction
    else:
        train_base, val_base = list(raw_train), list(raw_val)
        val_source = ()
        used_val_fraction = None

    base = CorpusSplit(train=tuple(train_base), val=tuple(val_base), test=tuple(raw_test))
    sampled = downsample(base, fraction, seed)

    if fraction == 1.0:
        train_idx = tuple(range(len(base.train)))
        val_idx = tuple(range(len(base.val)))
    else:
        train_idx = tuple(
            sample_indices(len(base.train), len(sampled.train), _task_rng(seed, task, "downsample_train"))
        )
        val_idx = tuple(
            sample_indices(len(base.val), len(sampled.val), _task_rng(seed, task, "downsample_val"))
        ) if base.val else ()

    manifest = SplitManifest(
        task=task,
        seed=seed,
        fraction=fraction,
        val_fraction=used_val_fraction,
        val_source_indices=val_source,
        train_indices=train_idx,
        val_indices=val_idx,
        n_test=len(raw_test),
    )
    return sampled, manifest


def apply_manifest(
    manifest: SplitManifest,
    raw_train: Sequence[TaggedSequence],
    raw_val: Sequence[TaggedSequence] | None,
    raw_test: Sequence[TaggedSequence],
) -> CorpusSplit:
    """Rebuild the exact split a manifest records."""
    if manifest.val_fraction is not None:
        val_set = set(manifest.val_source_indices)
        train_base = [ex for i, ex in enumerate(raw_train) if i not in val_set]
        val_base = [raw_train[i] for i in manifest.val_source_indices]
    else:
        if raw_val is None:
            raise ConfigError(f"manifest for {manifest.task!r} expects a shipped validation file")
        train_base, val_base = list(raw_train), list(raw_val)
    return CorpusSplit(
        train=tuple(train_base[i] for i in manifest.train_indices),
        val=tuple(val_base[i] for i in manifest.val_indices),
        test=tuple(raw_test),
    )


def write_conll(examples: Iterable[TaggedSequence], path) -> None:
    """Write sequences in the canonical two-column sBIO format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            for tok, tag in zip(ex.tokens, ex.labels):
                fh.write(f"{tok}\t{tag}\n")
            fh.write("\n")
