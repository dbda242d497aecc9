"""Per-position roles and the hybrid causal/bidirectional attention mask.

Async tags belong to their span's bidirectional block (the ``<async>`` and
``</async>`` rows attend the whole block), even though their role is PLAN.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Sequence

import numpy as np

from .tags import (
    ASYNC_CLOSE, ASYNC_OPEN, BOS, EOS, MASK, PAD, SYNC, TOPIC_CLOSE, TOPIC_OPEN,
    MalformedTag, is_control, is_length, is_word,
)


class Role(IntEnum):
    PROMPT = 0
    PLAN = 1
    CONTENT = 2
    BARRIER = 3


class MaskMode(str, Enum):
    SPAN_ISOLATED = "isolated"
    DENSE = "dense"


@dataclass(frozen=True)
class RoleSequence:
    """Structural labels for every position of a (possibly partial) document.

    ``block`` numbers async blocks globally (tags included, -1 outside blocks);
    ``wave`` groups blocks that are denoised together; ``span_id`` counts blocks
    within a stage; ``slot`` pairs the k-th topic of a plan with the k-th block
    of the wave that follows it (1-based, 0 elsewhere).
    """

    kind: np.ndarray
    stage: np.ndarray
    block: np.ndarray
    wave: np.ndarray
    span_id: np.ndarray
    slot: np.ndarray

    def __len__(self) -> int:
        return len(self.kind)

    @property
    def stage_boundaries(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.kind == Role.BARRIER)]

    @property
    def epoch(self) -> np.ndarray:
        """Number of barriers at or before each position."""
        return self.stage + (self.kind == Role.BARRIER)

    def block_extents(self) -> list[tuple[int, int]]:
        """(start, end) of each block, tags included, end exclusive."""
        out = []
        for b in range(int(self.block.max(initial=-1)) + 1):
            idx = np.flatnonzero(self.block == b)
            out.append((int(idx[0]), int(idx[-1]) + 1))
        return out


def assign_roles(tokens: Sequence[int]) -> RoleSequence:
    toks = [int(t) for t in tokens]
    n = len(toks)
    kind = np.zeros(n, dtype=np.int8)
    stage = np.zeros(n, dtype=np.int64)
    block = np.full(n, -1, dtype=np.int64)
    wave = np.full(n, -1, dtype=np.int64)
    span_id = np.full(n, -1, dtype=np.int64)
    slot = np.zeros(n, dtype=np.int64)
    if n == 0:
        return RoleSequence(kind, stage, block, wave, span_id, slot)
    if toks[0] != BOS:
        rule = "coverage" if is_word(toks[0]) else "balance"
        raise MalformedTag("sequence must begin with <bos>", 0, rule)

    kind[0] = Role.PLAN
    i = 1
    while i < n and is_word(toks[i]):
        kind[i] = Role.PROMPT
        i += 1

    cur_stage = 0
    n_blocks = -1
    n_waves = -1
    stage_spans = 0
    topic_count = 0
    wave_count = 0
    state = "outside"
    prev_closed_block = False
    done = False
    for p in range(i, n):
        t = toks[p]
        stage[p] = cur_stage
        if done:
            raise MalformedTag("tokens after <eos/>", p)
        if state == "topic":
            kind[p] = Role.PLAN
            slot[p] = topic_count
            if t == TOPIC_CLOSE:
                state = "outside"
            elif is_control(t):
                raise MalformedTag("unclosed <topic> block", p)
            continue
        if state == "async":
            block[p], wave[p], span_id[p], slot[p] = n_blocks, n_waves, stage_spans - 1, wave_count
            if t == ASYNC_CLOSE:
                kind[p] = Role.PLAN
                state = "outside"
                prev_closed_block = True
            elif is_word(t) or t in (PAD, MASK):
                kind[p] = Role.CONTENT
            else:
                raise MalformedTag("unclosed or nested <async> block", p)
            continue
        # outside any block
        if t == ASYNC_OPEN:
            if not prev_closed_block:
                n_waves += 1
                wave_count = 0
            n_blocks += 1
            wave_count += 1
            stage_spans += 1
            topic_count = 0
            kind[p] = Role.PLAN
            block[p], wave[p], span_id[p], slot[p] = n_blocks, n_waves, stage_spans - 1, wave_count
            state = "async"
            continue
        prev_closed_block = False
        if t == TOPIC_OPEN:
            topic_count += 1
            kind[p] = Role.PLAN
            slot[p] = topic_count
            state = "topic"
        elif t == SYNC:
            kind[p] = Role.BARRIER
            cur_stage += 1
            stage_spans = 0
            topic_count = 0
        elif t == EOS:
            kind[p] = Role.PLAN
            done = True
        elif is_word(t) or t in (PAD, MASK):
            raise MalformedTag("content token outside any async span", p, "coverage")
        elif is_length(t):
            raise MalformedTag("length attribute outside a topic block", p, "attribute-type")
        else:
            raise MalformedTag(f"unexpected control token {t}", p)
    return RoleSequence(kind, stage, block, wave, span_id, slot)


def causal_roles(n: int, n_prompt: int = 0) -> RoleSequence:
    """Roles for a tag-free sequence: BOS, ``n_prompt`` prompt tokens, then AR tokens."""
    kind = np.full(n, Role.PLAN, dtype=np.int8)
    kind[1:1 + n_prompt] = Role.PROMPT
    z = np.zeros(n, dtype=np.int64)
    neg = np.full(n, -1, dtype=np.int64)
    return RoleSequence(kind, z.copy(), neg.copy(), neg.copy(), neg.copy(), z.copy())


def canvas_roles(n_prefix: int, canvas_len: int) -> RoleSequence:
    """Roles for a causal prefix followed by one bidirectional canvas."""
    n = n_prefix + canvas_len
    kind = np.full(n, Role.PROMPT, dtype=np.int8)
    kind[0] = Role.PLAN
    kind[n_prefix:] = Role.CONTENT
    block = np.full(n, -1, dtype=np.int64)
    block[n_prefix:] = 0
    slot = np.zeros(n, dtype=np.int64)
    slot[n_prefix:] = 1
    return RoleSequence(kind, np.zeros(n, dtype=np.int64), block, block.copy(), block.copy(), slot)


@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray
    mode: MaskMode = MaskMode.SPAN_ISOLATED

    @property
    def n(self) -> int:
        return self.allowed.shape[0]

    def to_text(self) -> str:
        return "\n".join("".join("1" if v else "0" for v in row) for row in self.allowed)

    @classmethod
    def from_text(cls, text: str, mode: MaskMode = MaskMode.SPAN_ISOLATED) -> "AttentionMask":
        rows = [r.strip() for r in text.strip().splitlines() if r.strip()]
        return cls(np.array([[c == "1" for c in r] for r in rows], dtype=bool), mode)


def build_mask(roles: RoleSequence, mode: MaskMode | str = MaskMode.SPAN_ISOLATED) -> AttentionMask:
    mode = MaskMode(mode)
    n = len(roles)
    idx = np.arange(n)
    in_block = roles.block >= 0
    epoch = roles.epoch

    # j is visible from i if j is outside every block or its stage was closed by a barrier at or before i
    settled = ~in_block[None, :] | (epoch[:, None] > roles.stage[None, :])
    allowed = (idx[None, :] <= idx[:, None]) & settled

    if in_block.any():
        wave_start = np.full(int(roles.wave.max()) + 1, n)
        for w in range(len(wave_start)):
            wave_start[w] = np.flatnonzero(roles.wave == w)[0]
        rows = np.flatnonzero(in_block)
        ws = wave_start[roles.wave[rows]]
        same_block = roles.block[rows][:, None] == roles.block[None, :]
        before_wave = idx[None, :] < ws[:, None]
        block_rows = same_block | (before_wave & settled[rows])
        if mode == MaskMode.DENSE:
            block_rows |= roles.wave[rows][:, None] == roles.wave[None, :]
        allowed[rows] = block_rows
    return AttentionMask(allowed, mode)


def causal_mask(n: int) -> AttentionMask:
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)))
