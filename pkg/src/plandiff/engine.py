"""Planned generation (plan autoregressively, then denoise spans in parallel) and baselines.

Every forward pass is recorded as a trace event, so the critical path (the
number of sequential forwards) can be read off any run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attention import MaskMode, Role, assign_roles, build_mask, canvas_roles, causal_mask
from .diffusion import DenoisePolicy, Scaffold, denoise_spans, sample_token, span_streams
from .errors import ConfigError, LengthOverflow, PlanParseError
from .model import KVCache, Transformer, forward
from .tags import (
    ASYNC_CLOSE, ASYNC_OPEN, BOS, EOS, LENGTH_BASE, MASK, MAX_LENGTH, MAX_TOPIC_WORDS, SYNC, TOPIC_CLOSE,
    TOPIC_OPEN, WORD_BASE, Plan, TagError, is_control, is_length, is_word, parse_plan, strip_control,
)

PLAN_TOKEN = "PLAN_TOKEN"
DENOISE_STEP = "DENOISE_STEP"
SYNC_EVENT = "SYNC"
EOS_EVENT = "EOS"
PLAN_RETRIES = 3


@dataclass(frozen=True)
class GenerationConfig:
    policy: DenoisePolicy = field(default_factory=DenoisePolicy)
    length_scale: float = 1.0
    mask_mode: MaskMode = MaskMode.SPAN_ISOLATED
    max_total_len: int = 2048
    max_stages: int = 8
    plan_temperature: float = 0.2
    plan_top_p: float = 0.95
    seed: int = 0
    grammar: bool = True
    max_spans: int = 8
    use_cache: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mask_mode", MaskMode(self.mask_mode))
        if self.length_scale <= 0:
            raise ConfigError("length_scale must be positive")
        if self.max_total_len < 2 or self.max_stages < 1 or self.max_spans < 1:
            raise ConfigError("max_total_len, max_stages and max_spans must be positive")


@dataclass
class TraceEvent:
    kind: str
    forwards: int
    positions: list[int]
    stage: int = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "forwards": self.forwards, "positions": self.positions, "stage": self.stage}


@dataclass
class GenerationTrace:
    events: list[TraceEvent] = field(default_factory=list)
    mask_mode: str = MaskMode.SPAN_ISOLATED.value
    denoise_records: list[dict] = field(default_factory=list)

    def add(self, kind: str, positions=(), stage: int = 0) -> None:
        forwards = 1 if kind in (PLAN_TOKEN, DENOISE_STEP) else 0
        self.events.append(TraceEvent(kind, forwards, [int(p) for p in positions], stage))

    @property
    def critical_path(self) -> int:
        return sum(e.kind in (PLAN_TOKEN, DENOISE_STEP) for e in self.events)

    def count(self, kind: str) -> int:
        return sum(e.kind == kind for e in self.events)


@dataclass
class GenerationResult:
    tokens: list[int]
    prompt_len: int
    trace: GenerationTrace
    plans: list[Plan] = field(default_factory=list)
    truncated: bool = False
    fallback: bool = False
    cache_history: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def raw(self) -> list[int]:
        """Response tokens, tags included (no <bos> or prompt)."""
        return self.tokens[1 + self.prompt_len:]

    @property
    def stripped(self) -> list[int]:
        return strip_control(self.raw)

    def totals(self) -> dict:
        return {"critical_path": self.trace.critical_path, "tokens_generated": len(self.raw),
                "content_tokens": len(self.stripped)}


# called with (tokens, allowed, slots, start, logits) after every forward
Recorder = Callable[[np.ndarray, np.ndarray, np.ndarray, int, np.ndarray], None]


class LogitsRecorder:
    """Keeps every forward's inputs and logits so they can be replayed without a cache."""

    def __init__(self):
        self.records = []

    def __call__(self, tokens, allowed, slots, start, logits):
        self.records.append((np.asarray(tokens).copy(), np.asarray(allowed).copy(),
                             None if slots is None else np.asarray(slots).copy(), int(start),
                             np.asarray(logits, dtype=np.float64).copy()))

    def max_relative_error(self, model: Transformer) -> float:
        """Largest row-wise max|cached - fresh| / max|fresh| over all recorded rows."""
        worst = 0.0
        for tokens, allowed, slots, start, logits in self.records:
            fresh, _ = forward(model, tokens, allowed, None, slots=slots)
            fresh = fresh.double().numpy()[start:]
            err = np.abs(logits - fresh).max(axis=1) / np.maximum(np.abs(fresh).max(axis=1), 1e-12)
            worst = max(worst, float(err.max(initial=0.0)))
        return worst


class PlanGrammar:
    """Which tokens may come next while a plan is being sampled."""

    def __init__(self, vocab_size: int, max_spans: int = 8):
        self.vocab_size = vocab_size
        self.max_spans = max_spans
        self.state = "start"
        self.n_topics = 0
        self.n_label = 0

    def allowed(self) -> np.ndarray:
        ok = np.zeros(self.vocab_size, dtype=bool)
        if self.state == "start":
            ok[[TOPIC_OPEN, EOS]] = True
        elif self.state == "label":
            if self.n_label < MAX_TOPIC_WORDS:
                ok[WORD_BASE:] = True
            if self.n_label:
                ok[LENGTH_BASE:LENGTH_BASE + MAX_LENGTH] = True
        elif self.state == "length":
            ok[TOPIC_CLOSE] = True
        elif self.state == "closed":
            ok[ASYNC_OPEN] = True
            if self.n_topics < self.max_spans:
                ok[TOPIC_OPEN] = True
        return ok

    def advance(self, tok: int) -> None:
        if tok == TOPIC_OPEN:
            self.state, self.n_label = "label", 0
        elif self.state == "label" and is_word(tok):
            self.n_label += 1
        elif self.state == "label" and is_length(tok):
            self.state = "length"
        elif tok == TOPIC_CLOSE:
            self.state = "closed"
            self.n_topics += 1
        else:
            self.state = "done"


def _restrict(logits: np.ndarray, ok: np.ndarray) -> np.ndarray:
    return np.where(ok, logits, -np.inf)


class _Runner:
    """Shared state of one generation: token buffer, cache, trace and rng."""

    def __init__(self, model: Transformer, prompt: Sequence[int], cfg: GenerationConfig,
                 recorder: Recorder | None):
        if cfg.max_total_len > model.cfg.max_seq_len:
            raise ConfigError(f"max_total_len={cfg.max_total_len} exceeds max_seq_len={model.cfg.max_seq_len}")
        self.model = model
        self.cfg = cfg
        self.recorder = recorder
        self.tokens = [int(BOS), *(int(t) for t in prompt)]
        self.prompt_len = len(self.tokens) - 1
        if len(self.tokens) >= cfg.max_total_len:
            raise LengthOverflow(f"prompt of {self.prompt_len} tokens leaves no room under max_total_len={cfg.max_total_len}")
        self.cache = KVCache(model.cfg.n_layers) if cfg.use_cache else None
        self.trace = GenerationTrace(mask_mode=cfg.mask_mode.value)
        self.rng = np.random.default_rng(cfg.seed)
        self.vocab = model.cfg.vocab_size
        self.t0 = time.perf_counter()

    def step(self, mask, slots, stage: int, kind: str = "plan") -> np.ndarray:
        """Feed all uncached tokens, commit them, return logits of the last row."""
        toks = np.asarray(self.tokens, dtype=np.int64)
        allowed = mask.allowed if hasattr(mask, "allowed") else mask
        if self.cache is not None and self.cache.length == len(toks):
            # after a rollback everything may be cached; re-feed the last token for its logits
            self.cache.truncate(len(toks) - 1)
        commit = len(toks) - self.cache.length if self.cache is not None else 0
        logits, _ = forward(self.model, toks, allowed, self.cache, slots=slots, commit=commit,
                            kind=kind, stage=stage)
        out = logits.double().numpy()
        if self.recorder is not None:
            self.recorder(toks, allowed, slots, len(toks) - out.shape[0], out)
        self.trace.add(PLAN_TOKEN, [len(toks) - 1], stage)
        return out[-1]

    def sample(self, logits: np.ndarray, ok: np.ndarray | None) -> int:
        if ok is not None:
            logits = _restrict(logits, ok[: len(logits)])
        return sample_token(logits, self.cfg.plan_temperature, self.cfg.plan_top_p, self.rng)

    def planned_step(self, stage: int) -> np.ndarray:
        roles = assign_roles(self.tokens)
        return self.step(build_mask(roles, self.cfg.mask_mode), roles.slot, stage)

    def result(self, plans=(), truncated=False, fallback=False) -> GenerationResult:
        return GenerationResult(list(self.tokens), self.prompt_len, self.trace, list(plans), truncated, fallback,
                                [] if self.cache is None else list(self.cache.history),
                                time.perf_counter() - self.t0)


def _sample_plan(run: _Runner, stage: int) -> list[int] | None:
    """Sample one plan; returns its tokens (ending with the sampled <async>) or None at the length cap.

    The plan tokens are appended to ``run.tokens`` except the final <async>.
    """
    cfg = run.cfg
    grammar = PlanGrammar(run.vocab, cfg.max_spans)
    plan = []
    max_plan = cfg.max_spans * (MAX_TOPIC_WORDS + 3) + 1
    while True:
        if len(run.tokens) >= cfg.max_total_len:
            return None
        logits = run.planned_step(stage)
        if cfg.grammar:
            tok = run.sample(logits, grammar.allowed())
        else:
            ok = np.ones(run.vocab, dtype=bool)
            ok[[MASK, BOS]] = False
            tok = run.sample(logits, ok)
        plan.append(tok)
        grammar.advance(tok)
        if tok in (ASYNC_OPEN, EOS, SYNC) or len(plan) > max_plan:
            return plan
        run.tokens.append(tok)


def generate_planned(model: Transformer, prompt: Sequence[int], cfg: GenerationConfig | None = None,
                     recorder: Recorder | None = None) -> GenerationResult:
    cfg = cfg or GenerationConfig()
    run = _Runner(model, prompt, cfg, recorder)
    plans: list[Plan] = []
    stage = 0
    while True:
        plan_start = len(run.tokens)
        plan = None
        for attempt in range(PLAN_RETRIES + 1):
            try:
                sampled = _sample_plan(run, stage)
            except TagError:
                # an ungrammatical token left the prefix without a role layout
                sampled = [int(MASK)]
            if sampled is None:
                return run.result(plans, truncated=True)
            if sampled == [EOS]:
                run.tokens.append(int(EOS))
                run.trace.add(EOS_EVENT, [len(run.tokens) - 1], stage)
                return run.result(plans)
            try:
                if sampled[-1] != ASYNC_OPEN:
                    raise PlanParseError(f"plan ended with token {sampled[-1]} instead of <async>")
                plan = parse_plan(sampled[:-1])
                break
            except (TagError, PlanParseError):
                del run.tokens[plan_start:]
                if run.cache is not None:
                    run.cache.truncate(min(run.cache.length, plan_start))
        if plan is None:
            return _ar_fallback(run, stage, plans)

        scaffold = Scaffold.from_plan(run.tokens, plan, cfg.length_scale)
        if len(scaffold.tokens) + 1 > cfg.max_total_len:
            raise LengthOverflow(f"scaffold of {len(scaffold.tokens)} tokens exceeds max_total_len={cfg.max_total_len}")
        roles = assign_roles(scaffold.tokens)
        res = denoise_spans(model, scaffold, roles, cfg.policy, cfg.mask_mode,
                            span_streams(cfg.seed, stage, len(scaffold.extents)),
                            cache=run.cache, recorder=recorder)
        for rec in res.trace:
            run.trace.add(DENOISE_STEP, rec["unmasked_positions"], stage)
            run.trace.denoise_records.append({**rec, "stage": stage})
        run.tokens = [int(t) for t in res.tokens]

        # one forward over the filled spans caches them and yields the terminator
        logits = run.step(build_mask(roles, cfg.mask_mode), roles.slot, stage, kind="commit")
        ok = np.zeros(run.vocab, dtype=bool)
        ok[[SYNC, EOS]] = True
        term = run.sample(logits, ok)
        plans.append(Plan(plan.spans, term))
        run.tokens.append(term)
        if term == EOS:
            run.trace.add(EOS_EVENT, [len(run.tokens) - 1], stage)
            return run.result(plans)
        run.trace.add(SYNC_EVENT, [len(run.tokens) - 1], stage)
        stage += 1
        if stage >= cfg.max_stages or len(run.tokens) >= cfg.max_total_len:
            return run.result(plans, truncated=True)


def _ar_fallback(run: _Runner, stage: int, plans: list[Plan]) -> GenerationResult:
    """Continue with plain words under a causal mask after repeated plan failures."""
    ok = np.zeros(run.vocab, dtype=bool)
    ok[WORD_BASE:] = True
    ok[EOS] = True
    prefix = len(run.tokens)
    base = build_mask(assign_roles(run.tokens), run.cfg.mask_mode).allowed
    while len(run.tokens) < run.cfg.max_total_len:
        # cached rows keep their planned mask; fallback rows are plain causal
        allowed = causal_mask(len(run.tokens)).allowed
        allowed[:prefix, :prefix] = base
        tok = run.sample(run.step(allowed, None, stage, kind="fallback"), ok)
        run.tokens.append(tok)
        if tok == EOS:
            run.trace.add(EOS_EVENT, [len(run.tokens) - 1], stage)
            return run.result(plans, fallback=True)
    return run.result(plans, truncated=True, fallback=True)


def generate_ar(model: Transformer, prompt: Sequence[int], cfg: GenerationConfig | None = None,
                recorder: Recorder | None = None) -> GenerationResult:
    """Tag-free autoregressive baseline: one cached forward per generated token."""
    cfg = cfg or GenerationConfig()
    run = _Runner(model, prompt, cfg, recorder)
    ok = np.zeros(run.vocab, dtype=bool)
    ok[WORD_BASE:] = True
    ok[EOS] = True
    while len(run.tokens) < cfg.max_total_len:
        tok = run.sample(run.step(causal_mask(len(run.tokens)), None, 0, kind="ar"), ok if cfg.grammar else None)
        run.tokens.append(tok)
        if tok == EOS:
            run.trace.add(EOS_EVENT, [len(run.tokens) - 1])
            return run.result()
    return run.result(truncated=True)


def generate_diffusion(model: Transformer, prompt: Sequence[int], canvas_len: int,
                       cfg: GenerationConfig | None = None, recorder: Recorder | None = None) -> GenerationResult:
    """Tag-free diffusion baseline: one bidirectional all-MASK canvas after the prompt."""
    cfg = cfg or GenerationConfig()
    run = _Runner(model, prompt, GenerationConfig(**{**cfg.__dict__, "use_cache": False}), recorder)
    n_prefix = len(run.tokens)
    if n_prefix + canvas_len > cfg.max_total_len:
        raise LengthOverflow(f"canvas of {canvas_len} after {n_prefix} prefix tokens exceeds max_total_len")
    if canvas_len <= 0:
        return run.result()
    scaffold = Scaffold(np.asarray(run.tokens + [int(MASK)] * canvas_len, dtype=np.int64), n_prefix,
                        [(n_prefix, canvas_len)])
    roles = canvas_roles(n_prefix, canvas_len)
    res = denoise_spans(model, scaffold, roles, cfg.policy, MaskMode.SPAN_ISOLATED,
                        span_streams(cfg.seed, 0, 1), recorder=recorder)
    for rec in res.trace:
        run.trace.add(DENOISE_STEP, rec["unmasked_positions"], 0)
        run.trace.denoise_records.append({**rec, "stage": 0})
    run.tokens = [int(t) for t in res.tokens]
    return run.result()


@dataclass
class AuditReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def cache_audit(trace: GenerationTrace, history: Sequence, tokens: Sequence[int]) -> AuditReport:
    """Check the cache invariants of one instrumented generation.

    No MASK is ever cached, cached tokens never change afterwards, the cache
    is always a contiguous prefix, every plan forward of stage s >= 1 reuses
    the whole of stages < s, and AR decoding grows the cache by one per forward.
    """
    rep = AuditReport()
    add = rep.violations.append
    tokens = [int(t) for t in tokens]
    syncs = [i for i, t in enumerate(tokens) if t == SYNC]
    # a later rollback discards what an event cached above the truncation point
    keep = [len(tokens)] * len(history)
    floor = len(tokens)
    for i in range(len(history) - 1, -1, -1):
        keep[i] = floor
        if history[i].kind == "truncate":
            floor = min(floor, history[i].start)
    length = 0
    for i, ev in enumerate(history):
        if ev.kind == "truncate":
            length = ev.start
            continue
        if ev.cache_len_before != length or ev.start != length:
            add(f"event {i}: forward starts at {ev.start} but cache holds {length} positions")
        if MASK in ev.tokens:
            add(f"event {i}: MASK committed to the cache")
        end = min(ev.start + ev.committed, keep[i])
        if list(ev.tokens[:max(0, end - ev.start)]) != tokens[ev.start:end]:
            add(f"event {i}: cached tokens differ from the final sequence")
        if ev.kind == "plan" and ev.stage >= 1:
            need = syncs[ev.stage - 1] if ev.stage - 1 < len(syncs) else len(tokens)
            if ev.cache_len_before < need:
                add(f"event {i}: stage {ev.stage} plan forward reuses {ev.cache_len_before} < {need} cached positions")
        if ev.kind == "ar" and i > 0 and (ev.n_new != 1 or ev.committed != 1):
            add(f"event {i}: AR forward fed {ev.n_new} and cached {ev.committed} positions")
        if ev.kind == "denoise" and ev.committed:
            add(f"event {i}: denoise forward committed positions")
        length += ev.committed
    n_forwards = sum(ev.kind != "truncate" for ev in history)
    if history and n_forwards != trace.critical_path:
        add(f"{n_forwards} cached forwards but critical path {trace.critical_path}")
    return rep
