"""SentT' / sBIO codec.

A labelled sentence of L whitespace tokens is serialized as two strings
that interleave the tokens with L+1 sentinel markers:

    input :  s_0 tok_1 s_1 tok_2 ... tok_L s_L
    output:  s_0 tag_1 s_1 tag_2 ... tag_L s_L

Tags use the simplified BIO scheme: a type tag (any whitespace-free
string) opens a span, the single untyped tag ``I`` continues it, and
``O`` marks tokens outside every span.

Sentinel naming is injected as a function ``index -> string`` so the
codec works with any host vocabulary; the default follows the T5
convention ``<extra_id_N>`` with the pretrained limit of 100 markers.
Encoding a sequence that needs more sentinels than the namer provides
raises :class:`SentinelCapacityError` rather than silently wrapping.

Decoding is total: ``decode_output`` never raises on model output,
recovers what it can slot by slot, and reports how many slots were
malformed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .errors import (
    InvalidAnnotationError,
    InvalidLabelError,
    InvalidTokenError,
    SentinelCapacityError,
)

INSIDE_TAG = "I"
OUTSIDE_TAG = "O"
RESERVED_TAGS = frozenset({INSIDE_TAG, OUTSIDE_TAG})

T5_SENTINEL_LIMIT = 100

SentinelNamer = Callable[[int], str]


def make_sentinel_namer(limit: int, template: str = "<extra_id_{}>") -> SentinelNamer:
    """Return a namer for sentinels 0..limit-1; out-of-range indices raise."""

    def namer(index: int) -> str:
        if not 0 <= index < limit:
            raise SentinelCapacityError(
                f"sentinel index {index} outside the reserved range [0, {limit})"
            )
        return template.format(index)

    return namer


#: Default namer matching the 100 sentinel tokens of the T5 vocabulary.
t5_sentinel_namer: SentinelNamer = make_sentinel_namer(T5_SENTINEL_LIMIT)


@dataclass(frozen=True)
class TaggedSequence:
    """Tokens plus aligned sBIO labels for one example of one task."""

    tokens: tuple[str, ...]
    labels: tuple[str, ...]
    task: str

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.tokens) != len(self.labels):
            raise InvalidAnnotationError(
                f"{len(self.tokens)} tokens but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True, order=True)
class Span:
    """Half-open token span [start, end) carrying a type tag."""

    start: int
    end: int
    label: str


@dataclass(frozen=True)
class SentTPair:
    """Input/output strings of one example in the sentinel-interleaved format."""

    input_text: str
    output_text: str


@dataclass(frozen=True)
class DecodeResult:
    labels: tuple[str, ...]
    malformed_slots: int = 0


def _check_token(token: str, kind: str) -> None:
    if not token:
        raise InvalidTokenError(f"empty {kind}")
    if any(ch.isspace() for ch in token):
        raise InvalidTokenError(f"{kind} contains whitespace: {token!r}")


def _check_label(label: str) -> None:
    if not label:
        raise InvalidLabelError("empty label")
    if any(ch.isspace() for ch in label):
        raise InvalidLabelError(f"label contains whitespace: {label!r}")


def encode_input(tokens: Sequence[str], sentinel_namer: SentinelNamer = t5_sentinel_namer) -> str:
    """Interleave surface tokens with sentinels: ``s_0 tok_1 s_1 ... tok_L s_L``."""
    if not tokens:
        raise InvalidTokenError("cannot encode an empty token sequence")
    for tok in tokens:
        _check_token(tok, "token")
    parts = [sentinel_namer(0)]
    for i, tok in enumerate(tokens, start=1):
        parts.append(tok)
        parts.append(sentinel_namer(i))
    return " ".join(parts)


def encode_output(labels: Sequence[str], sentinel_namer: SentinelNamer = t5_sentinel_namer) -> str:
    """Interleave sBIO tags with the same sentinel sequence as the input side."""
    if not labels:
        raise InvalidLabelError("cannot encode an empty label sequence")
    for lab in labels:
        _check_label(lab)
    parts = [sentinel_namer(0)]
    for i, lab in enumerate(labels, start=1):
        parts.append(lab)
        parts.append(sentinel_namer(i))
    return " ".join(parts)


def encode_pair(seq: TaggedSequence, sentinel_namer: SentinelNamer = t5_sentinel_namer) -> SentTPair:
    return SentTPair(
        input_text=encode_input(seq.tokens, sentinel_namer),
        output_text=encode_output(seq.labels, sentinel_namer),
    )


def spans_to_sbio(spans: Iterable[Span], length: int) -> list[str]:
    """Render non-overlapping spans as sBIO tags over ``length`` positions."""
    labels = [OUTSIDE_TAG] * length
    prev_end = -1
    for span in sorted(spans):
        if not 0 <= span.start < span.end <= length:
            raise InvalidAnnotationError(
                f"span [{span.start}, {span.end}) out of bounds for length {length}"
            )
        if span.start < prev_end:
            raise InvalidAnnotationError(f"overlapping span at index {span.start}")
        if span.label in RESERVED_TAGS:
            raise InvalidAnnotationError(f"span label {span.label!r} is reserved")
        _check_label(span.label)
        labels[span.start] = span.label
        for i in range(span.start + 1, span.end):
            labels[i] = INSIDE_TAG
        prev_end = span.end
    return labels


def sbio_to_spans(labels: Sequence[str]) -> list[Span]:
    """Recover spans from sBIO tags.

    Total on syntactically valid tags: a type tag opens a span, ``I``
    extends the open span, ``O`` closes it. A stray ``I`` with no open
    span carries no type to promote and is treated as ``O``.
    """
    spans: list[Span] = []
    start = -1
    current = ""
    for i, tag in enumerate(labels):
        if tag == INSIDE_TAG:
            if start >= 0:
                continue  # extends the open span
            # stray continuation: nothing to attach it to
        elif tag != OUTSIDE_TAG:
            if start >= 0:
                spans.append(Span(start, i, current))
            start, current = i, tag
            continue
        if start >= 0:
            spans.append(Span(start, i, current))
            start = -1
    if start >= 0:
        spans.append(Span(start, len(labels), current))
    return spans


def _find_sentinels(text: str, sentinels: Sequence[str]) -> list[tuple[int, int, int]]:
    """All occurrences of any recognized sentinel as (start, end, index)."""
    if not sentinels:
        return []
    by_string = {}
    for idx, s in enumerate(sentinels):
        by_string.setdefault(s, idx)  # first index wins if a namer repeats strings
    # longest-first so a sentinel that is a prefix of another cannot shadow it
    pattern = "|".join(re.escape(s) for s in sorted(by_string, key=len, reverse=True))
    return [
        (m.start(), m.end(), by_string[m.group(0)])
        for m in re.finditer(pattern, text)
    ]


def decode_output(
    generated_text: str,
    expected_length: int,
    sentinel_namer: SentinelNamer = t5_sentinel_namer,
) -> list[str]:
    """Parse generated SentT' output into exactly ``expected_length`` tags."""
    return list(decode_output_detailed(generated_text, expected_length, sentinel_namer).labels)


def decode_output_detailed(
    generated_text: str,
    expected_length: int,
    sentinel_namer: SentinelNamer = t5_sentinel_namer,
) -> DecodeResult:
    """Slot-by-slot parse of possibly imperfect model output.

    The tag for position ``j`` is anchored by sentinel ``s_j``: it is the
    text between ``s_j`` and the next recognized sentinel. A slot whose
    anchor is missing, whose content is not exactly one token, or whose
    terminator appears out of order yields ``O`` and counts as malformed.
    When intermediate sentinels are missing entirely the first token after
    the anchor is salvaged, so a single dropped sentinel corrupts only the
    position it anchors.
    """
    sentinels = [sentinel_namer(i) for i in range(expected_length + 1)]
    occurrences = _find_sentinels(generated_text, sentinels)
    first_at: dict[int, tuple[int, int]] = {}
    for start, end, idx in occurrences:
        if idx not in first_at:
            first_at[idx] = (start, end)

    labels: list[str] = []
    malformed = 0
    for j in range(expected_length):
        anchor = first_at.get(j)
        if anchor is None:
            labels.append(OUTSIDE_TAG)
            malformed += 1
            continue
        _, anchor_end = anchor
        nxt = next((occ for occ in occurrences if occ[0] >= anchor_end), None)
        if nxt is None:
            chunk, nxt_index = generated_text[anchor_end:], None
        else:
            chunk, nxt_index = generated_text[anchor_end:nxt[0]], nxt[2]
        tokens = chunk.split()
        if nxt_index is not None and nxt_index <= j:
            # duplicated or out-of-order sentinel: slot content untrustworthy
            labels.append(OUTSIDE_TAG)
            malformed += 1
        elif nxt_index == j + 1:
            if len(tokens) == 1:
                labels.append(tokens[0])
            else:
                labels.append(OUTSIDE_TAG)
                malformed += 1
        else:
            # terminator missing (gap or end of text): salvage the adjacent token
            if tokens:
                labels.append(tokens[0])
            else:
                labels.append(OUTSIDE_TAG)
                malformed += 1
    return DecodeResult(labels=tuple(labels), malformed_slots=malformed)
