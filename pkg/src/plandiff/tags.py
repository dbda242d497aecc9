"""Control-tag vocabulary, document structure, parsing and validation.

Token ids are laid out as::

    0..8      control tokens (PAD, MASK, BOS, EOS, <topic>, </topic>, <async>, </async>, <sync/>)
    9..520    length tokens for predicted span lengths 1..512
    521..     content words of a closed vocabulary

A response is a sequence of stages. Each stage is a plan (one or more
``<topic> label.. length </topic>`` blocks) followed by one ``<async>..</async>``
block per declared span and a terminator (``<sync/>`` or, for the last stage,
``<eos/>``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np


class ControlToken(IntEnum):
    PAD = 0
    MASK = 1
    BOS = 2
    EOS = 3
    TOPIC_OPEN = 4
    TOPIC_CLOSE = 5
    ASYNC_OPEN = 6
    ASYNC_CLOSE = 7
    SYNC = 8


PAD, MASK, BOS, EOS = ControlToken.PAD, ControlToken.MASK, ControlToken.BOS, ControlToken.EOS
TOPIC_OPEN, TOPIC_CLOSE = ControlToken.TOPIC_OPEN, ControlToken.TOPIC_CLOSE
ASYNC_OPEN, ASYNC_CLOSE, SYNC = ControlToken.ASYNC_OPEN, ControlToken.ASYNC_CLOSE, ControlToken.SYNC

N_CONTROL = len(ControlToken)
MAX_LENGTH = 512
LENGTH_BASE = N_CONTROL
WORD_BASE = LENGTH_BASE + MAX_LENGTH
MAX_TOPIC_WORDS = 3

CONTROL_TEXT = {
    PAD: "[PAD]",
    MASK: "[MASK]",
    BOS: "<bos>",
    EOS: "<eos/>",
    TOPIC_OPEN: "<topic>",
    TOPIC_CLOSE: "</topic>",
    ASYNC_OPEN: "<async>",
    ASYNC_CLOSE: "</async>",
    SYNC: "<sync/>",
}
_TEXT_CONTROL = {v: k for k, v in CONTROL_TEXT.items()}
_TEXT_CONTROL["<eos>"] = EOS


class TagError(ValueError):
    """Base class for structural errors; ``rule`` names the violated rule."""

    rule = "balance"

    def __init__(self, message: str, position: int = -1, rule: str | None = None):
        super().__init__(message)
        self.position = position
        if rule is not None:
            self.rule = rule


class MalformedTag(TagError):
    rule = "balance"


class MissingAttribute(TagError):
    rule = "missing-attribute"


class AttributeRange(TagError):
    rule = "length-range"


class MissingSpan(TagError):
    rule = "span-count"


class OOVError(TagError):
    rule = "oov"


def is_control(tok: int) -> bool:
    return 0 <= tok < N_CONTROL


def is_length(tok: int) -> bool:
    return LENGTH_BASE <= tok < WORD_BASE


def is_word(tok: int) -> bool:
    return tok >= WORD_BASE


def length_token(n: int) -> int:
    if not 1 <= n <= MAX_LENGTH:
        raise AttributeRange(f"length {n} outside [1, {MAX_LENGTH}]")
    return LENGTH_BASE + n - 1


def length_value(tok: int) -> int:
    return tok - LENGTH_BASE + 1


@dataclass(frozen=True)
class Vocabulary:
    """Closed word vocabulary on top of the reserved control and length ids."""

    words: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        index = {w: WORD_BASE + i for i, w in enumerate(self.words)}
        if len(index) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        for w in self.words:
            if w in _TEXT_CONTROL or not w or any(c.isspace() for c in w):
                raise ValueError(f"invalid vocabulary word {w!r}")
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return WORD_BASE + len(self.words)

    def word_id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise OOVError(f"out-of-vocabulary word {word!r}") from None

    def ids(self, words: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.word_id(w) for w in words)

    def token_text(self, tok: int) -> str:
        if is_control(tok):
            return CONTROL_TEXT[ControlToken(tok)]
        if is_length(tok):
            return str(length_value(tok))
        return self.words[tok - WORD_BASE]

    def decode(self, tokens: Iterable[int]) -> str:
        return " ".join(self.token_text(int(t)) for t in tokens)

    def encode(self, text: str) -> list[int]:
        """Tokenize whitespace-separated text, recognizing literal control tags.

        Inside a topic block the item right before ``</topic>`` is the integer length.
        """
        items = text.split()
        out: list[int] = []
        in_topic = False
        for pos, item in enumerate(items):
            ctl = _TEXT_CONTROL.get(item)
            if ctl is not None:
                if ctl == TOPIC_OPEN:
                    in_topic = True
                elif ctl == TOPIC_CLOSE:
                    if in_topic and (not out or not is_length(out[-1])):
                        raise MissingAttribute("topic block has no integer length", len(out))
                    in_topic = False
                out.append(int(ctl))
            elif in_topic and pos + 1 < len(items) and items[pos + 1] == "</topic>":
                if not _is_int(item):
                    raise MissingAttribute(f"topic length {item!r} is not an integer", len(out))
                value = int(item)
                if not 1 <= value <= MAX_LENGTH:
                    raise AttributeRange(f"length {value} outside [1, {MAX_LENGTH}]", len(out))
                out.append(length_token(value))
            else:
                out.append(self.word_id(item))
        return out


def _is_int(s: str) -> bool:
    return s.lstrip("+-").isdigit()


@dataclass(frozen=True)
class SpanDecl:
    topic: tuple[int, ...]
    predicted_len: int


@dataclass(frozen=True)
class Plan:
    spans: tuple[SpanDecl, ...]
    terminator: ControlToken

    @property
    def num_spans(self) -> int:
        return len(self.spans)

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(s.predicted_len for s in self.spans)


@dataclass(frozen=True)
class Stage:
    plan: Plan
    spans: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class AnnotatedDocument:
    prompt: tuple[int, ...]
    stages: tuple[Stage, ...]

    def tokens(self) -> list[int]:
        return serialize(self)

    def content(self) -> list[int]:
        return [t for st in self.stages for body in st.spans for t in body if t != PAD]


@dataclass
class ValidationReport:
    violations: list[tuple[str, int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def first(self) -> tuple[str, int, str] | None:
        return self.violations[0] if self.violations else None


def serialize(doc: AnnotatedDocument) -> list[int]:
    out = [int(BOS), *doc.prompt]
    for stage in doc.stages:
        for decl in stage.plan.spans:
            out += [int(TOPIC_OPEN), *decl.topic, length_token(decl.predicted_len), int(TOPIC_CLOSE)]
        for body in stage.spans:
            out += [int(ASYNC_OPEN), *body, int(ASYNC_CLOSE)]
        out.append(int(stage.plan.terminator))
    return out


def parse_document(tokens: Sequence[int]) -> AnnotatedDocument:
    toks = [int(t) for t in tokens]
    n = len(toks)
    if n == 0 or toks[0] != BOS:
        raise MalformedTag("document must begin with <bos>", 0)
    if toks[-1] != EOS:
        raise MalformedTag("document must end with <eos/>", n - 1)

    i = 1
    prompt = []
    while i < n and not is_control(toks[i]):
        if is_length(toks[i]):
            raise MalformedTag("length attribute outside a topic block", i)
        prompt.append(toks[i])
        i += 1

    stages = []
    while True:
        decls = []
        while i < n and toks[i] == TOPIC_OPEN:
            decl, i = _parse_topic(toks, i)
            decls.append(decl)
        if not decls:
            raise MalformedTag("expected <topic> to open a plan", i, "coverage" if i < n and not is_control(toks[i]) else "balance")
        bodies = []
        while i < n and toks[i] == ASYNC_OPEN:
            body, i = _parse_async(toks, i)
            bodies.append(body)
        if len(bodies) < len(decls):
            raise MissingSpan(f"plan declares {len(decls)} spans but {len(bodies)} async blocks follow", i)
        if i >= n:
            raise MalformedTag("document ended inside a stage", n - 1)
        tok = toks[i]
        if tok == EOS:
            if i != n - 1:
                raise MalformedTag("tokens after <eos/>", i + 1)
            stages.append(Stage(Plan(tuple(decls), EOS), tuple(bodies)))
            break
        if tok == SYNC:
            stages.append(Stage(Plan(tuple(decls), SYNC), tuple(bodies)))
            i += 1
            continue
        if not is_control(tok) and not is_length(tok):
            raise MalformedTag("content token outside any async span", i, "coverage")
        raise MalformedTag(f"unexpected {CONTROL_TEXT.get(tok, tok)} where a terminator was expected", i)
    return AnnotatedDocument(tuple(prompt), tuple(stages))


def _parse_topic(toks: list[int], i: int) -> tuple[SpanDecl, int]:
    start = i
    i += 1
    inner = []
    while i < len(toks) and toks[i] != TOPIC_CLOSE:
        if is_control(toks[i]):
            raise MalformedTag("unclosed <topic> block", i)
        inner.append(toks[i])
        i += 1
    if i >= len(toks):
        raise MalformedTag("unclosed <topic> block", start)
    if not inner or not is_length(inner[-1]):
        raise MissingAttribute("topic block lacks a length attribute", i)
    label = inner[:-1]
    if not label:
        raise MissingAttribute("topic block lacks a topic label", i)
    if any(is_length(t) for t in label):
        raise MalformedTag("length attribute inside the topic label", start + 1, "attribute-type")
    return SpanDecl(tuple(label), length_value(inner[-1])), i + 1


def parse_plan(tokens: Sequence[int], terminator: ControlToken = EOS) -> Plan:
    """Parse a run of topic blocks (no async blocks) into a Plan."""
    toks = [int(t) for t in tokens]
    decls, i = [], 0
    while i < len(toks):
        if toks[i] != TOPIC_OPEN:
            raise MalformedTag("expected <topic>", i)
        decl, i = _parse_topic(toks, i)
        if len(decl.topic) > MAX_TOPIC_WORDS:
            raise MalformedTag(f"topic label longer than {MAX_TOPIC_WORDS} tokens", i, "topic-length")
        if any(not is_word(t) for t in decl.topic):
            raise MalformedTag("topic label contains a non-word token", i, "attribute-type")
        decls.append(decl)
    if not decls:
        raise MissingSpan("plan declares no spans", 0, "span-count")
    return Plan(tuple(decls), terminator)


def _parse_async(toks: list[int], i: int) -> tuple[tuple[int, ...], int]:
    start = i
    i += 1
    body = []
    while i < len(toks) and toks[i] != ASYNC_CLOSE:
        t = toks[i]
        if is_control(t) and t not in (PAD, MASK):
            raise MalformedTag("unclosed or nested <async> block", i)
        if is_length(t):
            raise MalformedTag("length attribute inside an async span", i, "nesting")
        body.append(t)
        i += 1
    if i >= len(toks):
        raise MalformedTag("unclosed <async> block", start)
    return tuple(body), i + 1


def validate(doc: AnnotatedDocument) -> ValidationReport:
    rep = ValidationReport()
    add = rep.violations.append
    pos = 1
    for j, t in enumerate(doc.prompt):
        if not is_word(t):
            add(("balance", pos + j, "non-word token in prompt"))
    pos += len(doc.prompt)
    if not doc.stages:
        add(("span-count", pos, "document has no stages"))
    for s, stage in enumerate(doc.stages):
        if not stage.plan.spans:
            add(("span-count", pos, f"stage {s} plan declares no spans"))
        for decl in stage.plan.spans:
            if not decl.topic:
                add(("missing-attribute", pos + 1, "empty topic label"))
            elif len(decl.topic) > MAX_TOPIC_WORDS:
                add(("topic-length", pos + 1, f"topic label has {len(decl.topic)} tokens (max {MAX_TOPIC_WORDS})"))
            if any(not is_word(t) for t in decl.topic):
                add(("attribute-type", pos + 1, "topic label contains a non-word token"))
            if not (isinstance(decl.predicted_len, (int, np.integer)) and 1 <= decl.predicted_len <= MAX_LENGTH):
                add(("length-range", pos + 1 + len(decl.topic), f"predicted length {decl.predicted_len!r} not in [1, {MAX_LENGTH}]"))
            pos += len(decl.topic) + 3
        for body in stage.spans:
            if not body:
                add(("coverage", pos, "empty async span"))
            seen_pad = False
            for j, t in enumerate(body):
                p = pos + 1 + j
                if t == MASK:
                    add(("mask-token", p, "MASK inside a clean document"))
                elif t == PAD:
                    seen_pad = True
                elif not is_word(t):
                    add(("nesting", p, "control or attribute token inside an async span"))
                elif seen_pad:
                    add(("pad-position", p, "content after padding"))
            if body and all(t == PAD for t in body):
                add(("coverage", pos, "span holds only padding"))
            pos += len(body) + 2
        if len(stage.spans) != len(stage.plan.spans):
            add(("span-count", pos, f"stage {s} declares {len(stage.plan.spans)} spans but has {len(stage.spans)} async blocks"))
        last = s == len(doc.stages) - 1
        want = EOS if last else SYNC
        if stage.plan.terminator != want:
            add(("terminator", pos, f"stage {s} must end with {CONTROL_TEXT[want]}"))
        pos += 1
    return rep


def validate_tokens(tokens: Sequence[int]) -> ValidationReport:
    """Parse then validate; parse failures become a single violation."""
    try:
        doc = parse_document(tokens)
    except TagError as e:
        return ValidationReport([(e.rule, e.position, str(e))])
    return validate(doc)


def strip_control(tokens: Iterable[int]) -> list[int]:
    """Drop control tags, padding, masks and the attributes inside topic blocks."""
    out = []
    in_topic = False
    for t in tokens:
        t = int(t)
        if t == TOPIC_OPEN:
            in_topic = True
        elif t == TOPIC_CLOSE:
            in_topic = False
        elif not in_topic and is_word(t):
            out.append(t)
    return out


def round_up10(n: int) -> int:
    return -(-n // 10) * 10


def insert_stochastic_padding(doc: AnnotatedDocument, rng: np.random.Generator, max_pad: int = 10) -> AnnotatedDocument:
    """Append 0..max_pad PAD tokens to every span, then fill to a multiple of ten.

    Each span's declared length becomes its padded length, so the number of
    masks allocated from the plan at inference equals the training span size.
    """
    stages = []
    for stage in doc.stages:
        bodies, decls = [], []
        for decl, body in zip(stage.plan.spans, stage.spans):
            k = int(rng.integers(0, max_pad + 1))
            target = min(round_up10(len(body) + k), MAX_LENGTH)
            target = max(target, len(body))
            bodies.append(tuple(body) + (int(PAD),) * (target - len(body)))
            decls.append(SpanDecl(decl.topic, target))
        # blocks beyond the declared count are left untouched
        bodies += list(stage.spans[len(bodies):])
        decls += list(stage.plan.spans[len(decls):])
        stages.append(Stage(Plan(tuple(decls), stage.plan.terminator), tuple(bodies)))
    return AnnotatedDocument(doc.prompt, tuple(stages))
