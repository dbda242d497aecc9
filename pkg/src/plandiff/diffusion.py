"""Parallel denoising of async spans: step schedule, unmask selection and sampling."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .attention import MaskMode, RoleSequence, assign_roles, build_mask
from .errors import ConfigError
from .tags import ASYNC_CLOSE, ASYNC_OPEN, MASK, PAD, WORD_BASE, Plan


class UnmaskMode(str, Enum):
    ENTROPY = "entropy"
    CONFIDENCE = "confidence"


@dataclass(frozen=True)
class DenoisePolicy:
    """How a scaffold is denoised.

    ``ordering="span"`` ranks and budgets masked positions within each span;
    ``"global"`` ranks all masked scaffold positions together under one budget
    (kept for sensitivity runs; it couples sibling spans).
    """

    mode: UnmaskMode = UnmaskMode.ENTROPY
    steps_ratio: float = 1.0
    confidence: float = 0.9
    temperature: float = 0.2
    top_p: float = 0.95
    ordering: str = "span"

    def __post_init__(self):
        object.__setattr__(self, "mode", UnmaskMode(self.mode))
        if not 0.0 < self.steps_ratio <= 1.0:
            raise ConfigError(f"steps_ratio must be in (0, 1], got {self.steps_ratio}")
        if not 0.0 < self.confidence < 1.0:
            raise ConfigError(f"confidence threshold must be in (0, 1), got {self.confidence}")
        if self.temperature < 0:
            raise ConfigError("temperature must be non-negative")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError("top_p must be in (0, 1]")
        if self.ordering not in ("span", "global"):
            raise ConfigError(f"unknown ordering {self.ordering!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


def scaled_length(n: int, scale: float) -> int:
    """Round half up, at least one mask per span."""
    return max(1, int(math.floor(n * scale + 0.5)))


@dataclass
class Scaffold:
    """A token buffer whose spans hold MASK until denoised.

    ``extents`` are (start, length) of each span's content, tags excluded.
    """

    tokens: np.ndarray
    base_len: int
    extents: list[tuple[int, int]]

    @classmethod
    def from_plan(cls, prefix: Sequence[int], plan: Plan | Sequence[int], length_scale: float = 1.0) -> "Scaffold":
        lengths = plan.lengths if isinstance(plan, Plan) else tuple(plan)
        toks = [int(t) for t in prefix]
        base = len(toks)
        extents = []
        for n in lengths:
            n = scaled_length(n, length_scale)
            toks.append(int(ASYNC_OPEN))
            extents.append((len(toks), n))
            toks.extend([int(MASK)] * n)
            toks.append(int(ASYNC_CLOSE))
        return cls(np.asarray(toks, dtype=np.int64), base, extents)

    @property
    def lengths(self) -> tuple[int, ...]:
        return tuple(n for _, n in self.extents)

    def span_positions(self, k: int) -> np.ndarray:
        s, n = self.extents[k]
        return np.arange(s, s + n)

    def span_tokens(self, k: int) -> np.ndarray:
        s, n = self.extents[k]
        return self.tokens[s:s + n]


def schedule_steps(lengths: Plan | Sequence[int], r: float) -> int:
    lengths = lengths.lengths if isinstance(lengths, Plan) else tuple(lengths)
    if not lengths:
        raise ValueError("plan declares no spans")
    if not 0.0 < r <= 1.0:
        raise ValueError(f"steps ratio must be in (0, 1], got {r}")
    # rounding guards against r * L landing a hair above an integer
    return max(1, math.ceil(round(r * max(lengths), 9)))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def entropy(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    p = np.exp(logp)
    return -(p * np.where(p > 0, logp, 0.0)).sum(axis=-1)


def confidence(logits: np.ndarray) -> np.ndarray:
    return _softmax(np.asarray(logits, dtype=np.float64)).max(axis=-1)


def select_unmask_entropy(logits: np.ndarray, masked_positions: Sequence[int], k: int) -> np.ndarray:
    """The k lowest-entropy masked positions, ties to the lower index.

    ``logits`` rows are indexed by position.
    """
    pos = np.asarray(masked_positions, dtype=np.int64)
    if k < 1 or len(pos) == 0:
        raise ValueError("need k >= 1 and at least one masked position")
    h = entropy(np.asarray(logits)[pos])
    order = np.lexsort((pos, h))
    return np.sort(pos[order[:k]])


def select_unmask_confidence(logits: np.ndarray, masked_positions: Sequence[int], tau: float,
                             at_least: int = 1) -> np.ndarray:
    """Masked positions with top probability >= tau; at least ``at_least`` by confidence."""
    pos = np.asarray(masked_positions, dtype=np.int64)
    if len(pos) == 0:
        raise ValueError("no masked positions")
    c = confidence(np.asarray(logits)[pos])
    n = max(int((c >= tau).sum()), min(at_least, len(pos)), 1)
    order = np.lexsort((pos, -c))
    return np.sort(pos[order[:n]])


def sample_token(logits: np.ndarray, temperature: float, top_p: float, rng: np.random.Generator) -> int:
    """Temperature 0 is argmax; otherwise nucleus sampling, one uniform draw per call."""
    logits = np.asarray(logits, dtype=np.float64)
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if temperature == 0:
        return int(np.argmax(logits))
    p = _softmax(logits / temperature)
    order = np.argsort(-p, kind="stable")
    sorted_p = p[order]
    cum = np.cumsum(sorted_p)
    keep = int(np.searchsorted(cum, top_p * cum[-1] - 1e-12) + 1)
    kept = sorted_p[:keep]
    u = rng.random() * kept.sum()
    idx = min(int(np.searchsorted(np.cumsum(kept), u, side="right")), keep - 1)
    return int(order[idx])


def content_logit_mask(vocab_size: int) -> np.ndarray:
    """Tokens a span position may take: words and PAD."""
    ok = np.zeros(vocab_size, dtype=bool)
    ok[WORD_BASE:] = True
    ok[PAD] = True
    return ok


def span_streams(seed: int, stage: int, n_spans: int) -> list[np.random.Generator]:
    return [np.random.default_rng([seed, stage, k]) for k in range(n_spans)]


@dataclass
class DenoiseResult:
    tokens: np.ndarray
    forwards: int
    steps: int
    trace: list[dict] = field(default_factory=list)

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.trace)


# logits for every scaffold position, given the current buffer
StepFn = Callable[[np.ndarray], np.ndarray]


def model_step_fn(model, roles: RoleSequence, mask_mode: MaskMode | str, cache=None,
                  recorder=None) -> StepFn:
    """One uncommitted forward over the buffer; rows below the cache frontier are NaN."""
    from .model import forward

    mask = build_mask(roles, mask_mode)

    def step(tokens: np.ndarray) -> np.ndarray:
        logits, _ = forward(model, tokens, mask, cache, slots=roles.slot, kind="denoise")
        out = logits.double().numpy()
        start = len(tokens) - out.shape[0]
        if recorder is not None:
            recorder(tokens.copy(), mask.allowed, roles.slot, start, out)
        if start:
            out = np.concatenate([np.full((start, out.shape[1]), np.nan), out])
        return out

    return step


def denoise_spans(model, scaffold: Scaffold, roles: RoleSequence | None, policy: DenoisePolicy,
                  mask_mode: MaskMode | str = MaskMode.SPAN_ISOLATED,
                  rngs: np.random.Generator | Sequence[np.random.Generator] | None = None, *,
                  cache=None, active: Sequence[int] | None = None, recorder=None,
                  step_fn: StepFn | None = None) -> DenoiseResult:
    """Fill every MASK of the scaffold's spans, one forward per step.

    The step count comes from all spans of the scaffold; ``active`` restricts
    which spans are filled (the rest stay MASK), which is how spans are
    denoised one at a time. Each span draws from its own rng stream.
    """
    buf = scaffold.tokens.copy()
    n_spans = len(scaffold.extents)
    active = list(range(n_spans)) if active is None else sorted(int(k) for k in active)
    if rngs is None:
        rngs = span_streams(0, 0, n_spans)
    elif isinstance(rngs, np.random.Generator):
        rngs = rngs.spawn(n_spans)
    if len(rngs) < n_spans:
        raise ValueError("need one rng stream per span")
    for k in active:
        if (scaffold.span_tokens(k) != MASK).any():
            raise ValueError(f"span {k} is not fully masked")
    if not scaffold.extents:
        return DenoiseResult(buf, 0, 0)
    if step_fn is None:
        roles = roles if roles is not None else assign_roles(buf)
        step_fn = model_step_fn(model, roles, mask_mode, cache, recorder)

    s = schedule_steps(scaffold.lengths, policy.steps_ratio)
    trace = []
    forwards = 0
    allowed_tok = None
    step = 0
    while True:
        remaining = {k: scaffold.span_positions(k)[buf[scaffold.span_positions(k)] == MASK] for k in active}
        if not any(len(v) for v in remaining.values()):
            break
        logits = step_fn(buf)
        forwards += 1
        if allowed_tok is None:
            allowed_tok = content_logit_mask(logits.shape[1])
        logits = np.where(allowed_tok, logits, -np.inf)
        steps_left = max(1, s - step)
        last = step >= s - 1 and policy.mode == UnmaskMode.ENTROPY

        chosen: dict[int, np.ndarray] = {}
        if policy.ordering == "global":
            pool = np.concatenate([remaining[k] for k in active])
            budget = len(pool) if last else math.ceil(len(pool) / steps_left)
            pick = (select_unmask_entropy(logits, pool, budget) if policy.mode == UnmaskMode.ENTROPY
                    else select_unmask_confidence(logits, pool, policy.confidence, budget))
            for k in active:
                chosen[k] = pick[np.isin(pick, remaining[k])]
        else:
            for k in active:
                pos = remaining[k]
                if not len(pos):
                    continue
                budget = len(pos) if last else math.ceil(len(pos) / steps_left)
                if policy.mode == UnmaskMode.ENTROPY:
                    chosen[k] = select_unmask_entropy(logits, pos, budget)
                else:
                    chosen[k] = select_unmask_confidence(logits, pos, policy.confidence, budget)

        unmasked, span_ids = [], []
        for k in active:
            for p in chosen.get(k, ()):
                buf[p] = sample_token(logits[p], policy.temperature, policy.top_p, rngs[k])
                unmasked.append(int(p))
                span_ids.append(k)
        step += 1
        trace.append({"step": step, "forwards_so_far": forwards, "unmasked_positions": unmasked,
                      "span_ids": span_ids, "policy": policy.to_dict()})
    return DenoiseResult(buf, forwards, s, trace)
