"""Synthetic annotated corpus, JSONL ingestion and noised training examples."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import MaskMode, Role, RoleSequence, assign_roles, canvas_roles, causal_roles
from .errors import ConfigError
from .tags import (
    EOS, MASK, PAD, SYNC, TOPIC_CLOSE, TOPIC_OPEN, AnnotatedDocument, Plan, SpanDecl, Stage, TagError,
    Vocabulary, is_length, is_word, round_up10, serialize, strip_control, validate,
)

T_MIN = 0.01

SUBJECTS = (
    "apple", "river", "castle", "garden", "robot", "violin",
    "desert", "comet", "forest", "harbor", "lantern", "glacier",
)
TOPICS = (
    "color", "origin", "use", "size", "history", "sound",
    "texture", "habitat", "value", "danger", "shape", "future",
)
ATTRIBUTES = (
    "red", "blue", "green", "gold", "north", "south", "east", "west",
    "tiny", "huge", "ancient", "modern", "sweet", "bitter", "smooth", "rough",
    "calm", "wild", "cheap", "costly", "safe", "risky", "round", "square",
)
FILLER = (
    "the", "is", "and", "of", "with", "very", "often", "near", "has", "its",
    "a", "known", "for", "by", "many", "people", "in", "old", "new", "bright",
    "dark", "soft", "hard", "long", "short", "warm", "cold", "small", "large", "quiet",
    "loud", "rare", "common", "found", "made", "seen", "used", "kept", "built", "grown",
    "each", "every", "day", "night", "water", "stone", "light", "air", "fire", "wood",
)
PROMPT_WORDS = (
    "list", "facts", "about", "describe", "define", "examples", "write", "sections", "on",
    ":", "then", "summarize", "summary", "definition", "notes", "section", "in", "kind",
)
KINDS = ("thing", "place", "machine", "plant", "event", "object")


def default_vocabulary() -> Vocabulary:
    words: list[str] = []
    for group in (SUBJECTS, TOPICS, ATTRIBUTES, FILLER, PROMPT_WORDS, KINDS):
        for w in group:
            if w not in words:
                words.append(w)
    return Vocabulary(tuple(words))


class Template(str, Enum):
    LISTING = "listing"
    DEFINITION = "definition-then-examples"
    SECTIONS = "multi-section"


@dataclass(frozen=True)
class TaskSpec:
    template_id: Template = Template.LISTING
    num_spans: int = 3
    span_len_range: tuple[int, int] = (14, 26)
    sync_probability: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "template_id", Template(self.template_id))
        object.__setattr__(self, "span_len_range", tuple(int(x) for x in self.span_len_range))
        lo, hi = self.span_len_range
        if not 1 <= self.num_spans <= 6:
            raise ConfigError(f"num_spans must be in [1, 6], got {self.num_spans}")
        if self.template_id == Template.DEFINITION and self.num_spans < 2:
            raise ConfigError("definition-then-examples needs at least 2 spans")
        if not (1 <= lo <= hi <= 200):
            raise ConfigError(f"span_len_range must satisfy 1 <= min <= max <= 200, got {self.span_len_range}")
        if lo < 4:
            raise ConfigError("synthetic spans need at least 4 tokens")
        if not 0.0 <= self.sync_probability <= 1.0:
            raise ConfigError("sync_probability must be in [0, 1]")


def _h(*parts: str) -> int:
    return int.from_bytes(hashlib.sha256("|".join(parts).encode()).digest()[:8], "little")


def _template_words(key: str, n: int) -> list[str]:
    rng = np.random.default_rng(_h("template", key))
    return [FILLER[i] for i in rng.integers(0, len(FILLER), n)]


def attribute(subject: str, topic: str) -> str:
    return ATTRIBUTES[(SUBJECTS.index(subject) * 7 + TOPICS.index(topic) * 5) % len(ATTRIBUTES)]


def span_length(key: str, lo: int, hi: int) -> int:
    return lo + _h("len", key) % (hi - lo + 1)


def span_words(template: Template, subject: str, topic: str, lo: int, hi: int) -> list[str]:
    """Content of one span: a function of the subject (from the prompt) and the span's topic only."""
    if topic == "definition":
        n = span_length("definition", lo, hi)
        kind = KINDS[SUBJECTS.index(subject) % len(KINDS)]
        return ([subject, "is", "a", kind] + _template_words("definition", n))[:n]
    n = span_length(topic, lo, hi)
    head = [subject, "has", attribute(subject, topic)]
    if template == Template.SECTIONS:
        head = ["section", topic] + head
    return (head + _template_words(topic, n))[:n]


def _summary_words(subject: str, topics: Sequence[str]) -> list[str]:
    """Second-stage content: each stage-1 topic followed by the attribute its span stated."""
    out = ["in", "summary", subject]
    for t in topics:
        if t in TOPICS:
            out += [t, attribute(subject, t)]
    return out


def _prompt_words(template: Template, subject: str, topics: Sequence[str], with_sync: bool) -> list[str]:
    if template == Template.LISTING:
        head = ["list", "facts", "about", subject, ":"]
    elif template == Template.DEFINITION:
        head = ["define", subject, "with", "examples", ":"]
    else:
        head = ["write", "sections", "on", subject, ":"]
    tail = ["then", "summarize"] if with_sync else []
    return head + list(topics) + tail


def _label(template: Template, topic: str) -> list[str]:
    return [topic, "notes"] if template == Template.SECTIONS and topic != "definition" else [topic]


def generate_synthetic(spec: TaskSpec, n: int, rng: np.random.Generator,
                       vocab: Vocabulary | None = None) -> list[AnnotatedDocument]:
    vocab = vocab or default_vocabulary()
    lo, hi = spec.span_len_range
    docs = []
    for _ in range(n):
        subject = SUBJECTS[int(rng.integers(len(SUBJECTS)))]
        n_topics = spec.num_spans - (1 if spec.template_id == Template.DEFINITION else 0)
        topics = [TOPICS[i] for i in rng.choice(len(TOPICS), size=n_topics, replace=False)]
        with_sync = bool(rng.random() < spec.sync_probability)
        span_topics = (["definition"] if spec.template_id == Template.DEFINITION else []) + topics

        decls, bodies = [], []
        for topic in span_topics:
            body = span_words(spec.template_id, subject, topic, lo, hi)
            decls.append(SpanDecl(vocab.ids(_label(spec.template_id, topic)), round_up10(len(body))))
            bodies.append(vocab.ids(body))
        stages = [Stage(Plan(tuple(decls), SYNC if with_sync else EOS), tuple(bodies))]
        if with_sync:
            body = vocab.ids(_summary_words(subject, topics))
            stages.append(Stage(Plan((SpanDecl(vocab.ids(["summary"]), round_up10(len(body))),), EOS), (body,)))
        prompt = vocab.ids(_prompt_words(spec.template_id, subject, topics, with_sync))
        doc = AnnotatedDocument(prompt, tuple(stages))
        assert validate(doc).ok
        docs.append(doc)
    return docs


def default_mixture(span_len_range: tuple[int, int] = (20, 40), sync_probability: float = 0.3) -> list[TaskSpec]:
    """The task mix used for the toy experiments: every prompt asks for 3 to 5 independent spans."""
    return [
        TaskSpec(Template.LISTING, 3, span_len_range, sync_probability),
        TaskSpec(Template.LISTING, 4, span_len_range, sync_probability),
        TaskSpec(Template.LISTING, 5, span_len_range, sync_probability),
        TaskSpec(Template.DEFINITION, 4, span_len_range, sync_probability),
        TaskSpec(Template.SECTIONS, 3, span_len_range, sync_probability),
        TaskSpec(Template.SECTIONS, 4, span_len_range, sync_probability),
    ]


def generate_mixture(specs: Sequence[TaskSpec], n: int, rng: np.random.Generator,
                     vocab: Vocabulary | None = None, exclude: set | None = None) -> list[AnnotatedDocument]:
    """n documents spread evenly over ``specs`` in shuffled order.

    Documents whose prompt is in ``exclude`` are redrawn, which keeps held-out
    prompts disjoint from a training set.
    """
    docs = []
    for i, spec in enumerate(specs):
        want = n // len(specs) + (1 if i < n % len(specs) else 0)
        got = []
        while len(got) < want:
            for d in generate_synthetic(spec, want - len(got), rng, vocab):
                if exclude is None or d.prompt not in exclude:
                    got.append(d)
        docs += got
    order = rng.permutation(len(docs))
    return [docs[i] for i in order]


# ---------------------------------------------------------------- JSONL I/O

def document_to_json(doc: AnnotatedDocument, vocab: Vocabulary) -> dict:
    toks = serialize(doc)
    n_prompt = len(doc.prompt)
    response = toks[1 + n_prompt:-1]  # no <bos>, prompt, or final <eos/>
    return {"prompt": vocab.decode(doc.prompt), "response": vocab.decode(response)}


def write_jsonl(path: str | Path, docs: Sequence[AnnotatedDocument], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for doc in docs:
            f.write(json.dumps(document_to_json(doc, vocab), ensure_ascii=False) + "\n")


def document_from_json(obj: dict, vocab: Vocabulary) -> AnnotatedDocument:
    from .tags import BOS, parse_document

    prompt = vocab.encode(obj["prompt"])
    for i, t in enumerate(prompt):
        if not is_word(t):
            raise TagError("control tag or attribute inside prompt", 1 + i)
    response = vocab.encode(obj["response"])
    return parse_document([int(BOS), *prompt, *response, int(EOS)])


def load_jsonl(path: str | Path, vocab: Vocabulary | None = None):
    """Returns (documents, rejects); a reject is (line_no, raw line, (rule, position, message))."""
    vocab = vocab or default_vocabulary()
    docs, rejects = [], []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for line_no, raw in enumerate(f, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict) or not isinstance(obj.get("prompt"), str) or not isinstance(obj.get("response"), str):
                    raise ValueError("line must be an object with string fields prompt and response")
                doc = document_from_json(obj, vocab)
            except TagError as e:
                rejects.append((line_no, line, (e.rule, e.position, str(e))))
                continue
            except ValueError as e:
                rejects.append((line_no, line, ("json", -1, str(e))))
                continue
            rep = validate(doc)
            if rep.ok:
                docs.append(doc)
            else:
                rejects.append((line_no, line, rep.first))
    return docs, rejects


def write_manifest(path: str | Path, entries: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for k, v in entries.items():
            f.write(f"{k} = {v}\n")


def read_manifest(path: str | Path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# ------------------------------------------------------- forward process

def corrupt(tokens: Sequence[int], t: float, rng: np.random.Generator) -> np.ndarray:
    """Absorbing-mask corruption: each position becomes MASK with probability t."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"noise level must be in (0, 1), got {t}")
    x = np.asarray(tokens, dtype=np.int64)
    if (x == MASK).any():
        raise ValueError("input already contains MASK tokens")
    hit = rng.random(x.shape) < t
    return np.where(hit, int(MASK), x)


def sample_t(rng: np.random.Generator, eps: float = T_MIN) -> float:
    return float(rng.uniform(eps, 1.0))


@dataclass(frozen=True)
class AblationFlags:
    strip_topics: bool = False
    strip_syncs: bool = False


@dataclass
class TrainingExample:
    clean: np.ndarray
    roles: RoleSequence
    noised: np.ndarray
    t: float
    loss_weight: np.ndarray
    mask_mode: MaskMode = MaskMode.SPAN_ISOLATED
    ablation: AblationFlags = field(default_factory=AblationFlags)

    @property
    def n_y(self) -> int:
        """|Y|: positions that belong to the response (plan or content)."""
        return int((self.roles.kind != Role.PROMPT).sum())

    @property
    def plan_targets(self) -> np.ndarray:
        return np.flatnonzero((self.loss_weight > 0) & (self.roles.kind != Role.CONTENT))

    @property
    def content_targets(self) -> np.ndarray:
        return np.flatnonzero((self.loss_weight > 0) & (self.roles.kind == Role.CONTENT))


def apply_ablation(tokens: Sequence[int], flags: AblationFlags) -> list[int]:
    out = []
    in_topic = False
    for t in tokens:
        t = int(t)
        if t == TOPIC_OPEN:
            in_topic = True
        elif t == TOPIC_CLOSE:
            in_topic = False
        elif flags.strip_topics and in_topic and not is_length(t):
            continue
        if flags.strip_syncs and t == SYNC:
            continue
        out.append(t)
    return out


def plan_weights(roles: RoleSequence) -> np.ndarray:
    """1 for plan positions trained autoregressively, else 0.

    A plan token is a next-token target of the row before it unless that row is
    span content (closing tags are placed by the scaffold, never sampled).
    """
    kind = roles.kind
    w = np.zeros(len(kind))
    is_plan = (kind == Role.PLAN) | (kind == Role.BARRIER)
    w[1:] = (is_plan[1:] & (kind[:-1] != Role.CONTENT)).astype(float)
    return w


def _noise_content(clean: np.ndarray, roles: RoleSequence, t: float, rng: np.random.Generator):
    content = np.flatnonzero(roles.kind == Role.CONTENT)
    noised = clean.copy()
    noised[content] = corrupt(clean[content], t, rng)
    w = plan_weights(roles)
    w[content] = np.where(noised[content] == MASK, 1.0 / t, 0.0)
    return noised, w


def make_training_example(doc: AnnotatedDocument, t: float, mask_mode: MaskMode = MaskMode.SPAN_ISOLATED,
                          ablation: AblationFlags | None = None,
                          rng: np.random.Generator | None = None) -> TrainingExample:
    ablation = ablation or AblationFlags()
    rng = rng if rng is not None else np.random.default_rng()
    clean = np.asarray(apply_ablation(serialize(doc), ablation), dtype=np.int64)
    roles = assign_roles(clean)
    noised, w = _noise_content(clean, roles, t, rng)
    return TrainingExample(clean, roles, noised, t, w, MaskMode(mask_mode), ablation)


def make_ar_example(doc: AnnotatedDocument) -> TrainingExample:
    """Tag-free autoregressive example: <bos> prompt content <eos/>."""
    clean = np.asarray([serialize(doc)[0], *doc.prompt, *strip_control(doc.content()), int(EOS)], dtype=np.int64)
    roles = causal_roles(len(clean), len(doc.prompt))
    return TrainingExample(clean, roles, clean.copy(), 1.0, plan_weights(roles))


def make_diffusion_example(doc: AnnotatedDocument, t: float, rng: np.random.Generator,
                           canvas_len: int | None = None) -> TrainingExample:
    """Tag-free diffusion example: causal prompt then one canvas of content padded with PAD."""
    content = strip_control(doc.content())
    if canvas_len is None:
        canvas_len = round_up10(len(content) + int(rng.integers(0, 11)))
    canvas_len = max(canvas_len, len(content))
    prefix = [serialize(doc)[0], *doc.prompt]
    clean = np.asarray(prefix + content + [int(PAD)] * (canvas_len - len(content)), dtype=np.int64)
    roles = canvas_roles(len(prefix), canvas_len)
    noised, w = _noise_content(clean, roles, t, rng)
    w[: len(prefix)] = 0.0
    return TrainingExample(clean, roles, noised, t, w, MaskMode.SPAN_ISOLATED)


def spec_to_dict(spec: TaskSpec) -> dict:
    d = asdict(spec)
    d["template_id"] = spec.template_id.value
    d["span_len_range"] = list(spec.span_len_range)
    return d
