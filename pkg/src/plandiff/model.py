"""A small decoder transformer that runs under an arbitrary attention mask.

One network serves both generation modes: next-token logits for plan tokens
(read at the row before the target) and clean-token logits for masked span
content (read at the masked row itself).
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import AttentionMask, Role
from .corpus import TrainingExample
from .errors import CacheMismatch, ConfigError, NonFiniteLoss, SequenceTooLong
from .tags import MASK


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 640
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 2048
    positional: str = "rotary"
    n_slots: int = 8
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 256:
            raise ConfigError("max_seq_len must be at least 256")
        if self.positional not in ("rotary", "learned"):
            raise ConfigError(f"unknown positional scheme {self.positional!r}")
        if self.positional == "rotary" and (self.d_model // self.n_heads) % 2:
            raise ConfigError("rotary embeddings need an even head dimension")
        if min(self.vocab_size, self.d_model, self.n_layers, self.d_ff) <= 0 or self.n_slots < 0:
            raise ConfigError("model sizes must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def _rope(x: torch.Tensor, pos: torch.Tensor, base: float) -> torch.Tensor:
    # x: [B, H, T, D]; pos: [B, T]
    d = x.shape[-1]
    inv = base ** (-torch.arange(0, d, 2, dtype=x.dtype, device=x.device) / d)
    ang = pos.to(x.dtype)[:, None, :, None] * inv
    cos, sin = ang.cos(), ang.sin()
    x1, x2 = x[..., : d // 2], x[..., d // 2:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, bias=False)
        self.out = nn.Linear(cfg.d_model, cfg.d_model, bias=False)

    def forward(self, x, allowed, pos, past=None):
        B, T, _ = x.shape
        H, D = self.cfg.n_heads, self.cfg.head_dim
        q, k, v = self.qkv(x).view(B, T, 3, H, D).permute(2, 0, 3, 1, 4)
        if self.cfg.positional == "rotary":
            q = _rope(q, pos, self.cfg.rope_base)
            k = _rope(k, pos, self.cfg.rope_base)
        new_kv = (k, v)
        if past is not None:
            k = torch.cat([past[0].expand(B, -1, -1, -1), k], dim=2)
            v = torch.cat([past[1].expand(B, -1, -1, -1), v], dim=2)
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed[:, None])
        return self.out(y.transpose(1, 2).reshape(B, T, H * D)), new_kv


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(nn.Linear(cfg.d_model, cfg.d_ff), nn.GELU(), nn.Linear(cfg.d_ff, cfg.d_model))

    def forward(self, x, allowed, pos, past=None):
        a, kv = self.attn(self.ln1(x), allowed, pos, past)
        x = x + a
        return x + self.mlp(self.ln2(x)), kv


class Transformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.slot = nn.Embedding(cfg.n_slots + 1, cfg.d_model) if cfg.n_slots else None
        self.pos = nn.Embedding(cfg.max_seq_len, cfg.d_model) if cfg.positional == "learned" else None
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    def forward(self, tokens, allowed, pos=None, slots=None, past=None):
        """tokens [B, T]; allowed [B, T, P+T] over cached + new keys.

        Returns logits [B, T, V] and the per-layer (k, v) of the new positions.
        """
        B, T = tokens.shape
        if pos is None:
            pos = torch.arange(T, device=tokens.device).expand(B, T)
        x = self.tok(tokens)
        if self.slot is not None:
            # no slot ids: every position is outside a span (slot 0), as in training
            slots = torch.zeros_like(tokens) if slots is None else slots
            x = x + self.slot(slots.clamp(max=self.cfg.n_slots))
        if self.pos is not None:
            x = x + self.pos(pos)
        kvs = []
        for i, blk in enumerate(self.blocks):
            x, kv = blk(x, allowed, pos, None if past is None else past[i])
            kvs.append(kv)
        return self.head(self.ln_f(x)), kvs


def init_params(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> Transformer:
    """Fan-in scaled normal init, bit-identical for a given seed."""
    model = Transformer(cfg)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif p.ndim == 1:
                p.fill_(1.0)
            elif isinstance(_owner(model, name), nn.Embedding):
                p.copy_(torch.randn(p.shape, generator=g) * 0.02)
            else:
                p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(p.shape[1]))
    return model.to(dtype)


def _owner(model: nn.Module, name: str) -> nn.Module:
    mod = model
    for part in name.split(".")[:-1]:
        mod = getattr(mod, part)
    return mod


# ------------------------------------------------------------------ inference

@dataclass
class CacheEvent:
    kind: str
    start: int
    n_new: int
    committed: int
    cache_len_before: int
    tokens: tuple = ()
    stage: int = 0


@dataclass
class KVCache:
    """Keys and values for a committed prefix of one sequence.

    Only positions whose mask row is final may be committed; a committed row
    never attends past the committed frontier.
    """

    n_layers: int
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    tokens: list = field(default_factory=list)
    roles: list = field(default_factory=list)
    rows: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=bool))
    history: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.tokens)

    def past(self):
        if not self.keys or self.length == 0:
            return None
        return list(zip(self.keys, self.values))

    def truncate(self, n: int) -> None:
        """Drop cached positions from ``n`` on (used to roll back a rejected plan)."""
        self.keys = [k[:, :, :n] for k in self.keys]
        self.values = [v[:, :, :n] for v in self.values]
        del self.tokens[n:]
        del self.roles[n:]
        self.rows = self.rows[:n, :n].copy()
        self.history.append(CacheEvent("truncate", n, 0, 0, n))


def _as_long(x, device=None) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.int64), device=device)


def forward(model: Transformer, tokens: Sequence[int], mask: AttentionMask | np.ndarray,
            cache: KVCache | None = None, *, slots=None, commit: int = 0, roles=None,
            kind: str = "forward", stage: int = 0) -> tuple[torch.Tensor, KVCache | None]:
    """Logits for positions ``cache.length .. len(tokens)-1`` of a single sequence.

    With a cache, cached keys/values stand in for the prefix; the first
    ``commit`` new positions are appended to the cache afterwards.
    """
    allowed = mask.allowed if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)
    n = len(tokens)
    if n > model.cfg.max_seq_len:
        raise SequenceTooLong(f"sequence of {n} tokens exceeds max_seq_len={model.cfg.max_seq_len}")
    if allowed.shape != (n, n):
        raise ValueError(f"mask shape {allowed.shape} does not match {n} tokens")
    start = 0
    if cache is not None:
        start = cache.length
        if start > n:
            raise CacheMismatch("cache is longer than the sequence")
        if list(cache.tokens) != [int(t) for t in tokens[:start]]:
            raise CacheMismatch("cached tokens differ from the sequence prefix")
        if not np.array_equal(allowed[:start, :start], cache.rows) or allowed[:start, start:].any():
            raise CacheMismatch("mask rows of cached positions changed")
        if commit and allowed[start:start + commit, start + commit:].any():
            raise CacheMismatch("committed positions attend beyond the commit frontier")
    if commit and cache is None:
        raise ValueError("commit requires a cache")

    device = next(model.parameters()).device
    tok = _as_long(tokens[start:], device)[None]
    pos = torch.arange(start, n, device=device)[None]
    sl = None if slots is None else _as_long(slots[start:], device)[None]
    am = torch.as_tensor(allowed[start:, :n], device=device)[None]
    with torch.no_grad():
        logits, kvs = model(tok, am, pos, sl, None if cache is None else cache.past())
    if cache is not None:
        cache.history.append(CacheEvent(kind, start, n - start, commit, start,
                                        tuple(int(t) for t in tokens[start:start + commit]), stage))
        if commit:
            for layer, (k, v) in enumerate(kvs):
                k, v = k[:, :, :commit], v[:, :, :commit]
                if len(cache.keys) <= layer:
                    cache.keys.append(k)
                    cache.values.append(v)
                else:
                    cache.keys[layer] = torch.cat([cache.keys[layer], k], dim=2)
                    cache.values[layer] = torch.cat([cache.values[layer], v], dim=2)
            cache.tokens.extend(int(t) for t in tokens[start:start + commit])
            if roles is not None:
                cache.roles.extend(int(r) for r in roles[start:start + commit])
            cache.rows = allowed[: start + commit, : start + commit].copy()
    return logits[0], cache


# ------------------------------------------------------------------ training

def _padded(seqs, T):
    """Stack (tokens, allowed, slots) rows into a right-padded batch."""
    B = len(seqs)
    tokens = np.zeros((B, T), dtype=np.int64)
    slots = np.zeros((B, T), dtype=np.int64)
    allowed = np.zeros((B, T, T), dtype=bool)
    allowed[:, np.arange(T), np.arange(T)] = True
    for b, (tok, am, sl) in enumerate(seqs):
        n = len(tok)
        tokens[b, :n] = tok
        slots[b, :n] = sl
        allowed[b, :n, :n] = am
    return torch.from_numpy(tokens), torch.from_numpy(allowed), torch.from_numpy(slots)


def batch_loss(model: Transformer, examples: Sequence[TrainingExample], clean_plan_pass: bool = False) -> torch.Tensor:
    """Mean over examples of the joint plan + masked-content objective.

    Plan targets are scored on the clean sequence (prediction from the row
    before); masked content is scored on the noised sequence at its own row,
    weighted by 1/t. Each example is normalized by its response length |Y|.

    Plan targets are read from the same noised pass by default, so plan rows
    after a barrier see noised earlier spans. With ``clean_plan_pass`` they are
    scored on an extra clean pass instead, added only for examples where some
    plan row can see a masked position.
    """
    from .attention import build_mask

    device = next(model.parameters()).device
    seqs, clean_row = [], {}
    masks = [build_mask(e.roles, e.mask_mode).allowed for e in examples]
    for e, am in zip(examples, masks):
        seqs.append((e.noised, am, e.roles.slot))
    for b, (e, am) in enumerate(zip(examples, masks)):
        plan = e.plan_targets
        hidden = e.noised == MASK
        if clean_plan_pass and len(plan) and am[plan - 1][:, hidden].any():
            clean_row[b] = len(seqs)
            seqs.append((e.clean, am, e.roles.slot))
    T = max(len(s[0]) for s in seqs)
    tokens, allowed, slots = _padded(seqs, T)
    logits, _ = model(tokens.to(device), allowed.to(device), None, slots.to(device))
    logp = F.log_softmax(logits, dim=-1)

    total = logp.new_zeros(())
    for b, e in enumerate(examples):
        w = torch.as_tensor(e.loss_weight, dtype=logp.dtype, device=device)
        target = torch.as_tensor(e.clean, device=device)
        plan = torch.as_tensor(e.plan_targets, device=device)
        content = torch.as_tensor(e.content_targets, device=device)
        src = clean_row.get(b, b)
        term = logp.new_zeros(())
        if len(plan):
            term = term - (w[plan] * logp[src, plan - 1, target[plan]]).sum()
        if len(content):
            term = term - (w[content] * logp[b, content, target[content]]).sum()
        total = total + term / e.n_y
    return total / len(examples)


def loss(model: Transformer, ex: TrainingExample, clean_plan_pass: bool = False) -> torch.Tensor:
    return batch_loss(model, [ex], clean_plan_pass)


@dataclass
class LinearSchedule:
    """Linear warmup to ``peak`` then linear decay to zero at ``total_steps``."""

    peak: float
    total_steps: int
    warmup: int = 0

    def __call__(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.peak * (step + 1) / self.warmup
        span = max(1, self.total_steps - self.warmup)
        return self.peak * max(0.0, (self.total_steps - step) / span)


def make_optimizer(model: Transformer, lr: float = 1e-3, weight_decay: float = 0.01,
                   betas=(0.9, 0.98)) -> torch.optim.AdamW:
    decay = [p for n, p in model.named_parameters() if p.ndim >= 2]
    other = [p for n, p in model.named_parameters() if p.ndim < 2]
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": weight_decay}, {"params": other, "weight_decay": 0.0}],
        lr=lr, betas=betas,
    )


def grad_step(model: Transformer, opt: torch.optim.Optimizer, batch: Sequence[TrainingExample],
              schedule: Callable[[int], float], step: int, clip: float | None = 1.0,
              clean_plan_pass: bool = False) -> float:
    """One decoupled-weight-decay Adam update on the mean batch loss; mutates model and opt."""
    if not batch:
        raise ValueError("empty batch")
    model.train()
    value = batch_loss(model, batch, clean_plan_pass)
    if not torch.isfinite(value):
        raise NonFiniteLoss(f"loss is {value.item()} at step {step}")
    opt.zero_grad(set_to_none=True)
    value.backward()
    if clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
    lr = schedule(step)
    for group in opt.param_groups:
        group["lr"] = lr
    opt.step()
    return float(value.detach())


def finite_difference_check(model: Transformer, ex: TrainingExample, k: int = 50, seed: int = 0,
                            h: float = 1e-4, floor: float = 1e-6) -> float:
    """Max relative error between autograd and central differences at k random coordinates.

    Runs on a float64 copy. Relative error is |a - n| / max(|a|, |n|, floor).
    """
    if k == 0:
        return 0.0
    m = copy.deepcopy(model).double()
    params = [p for p in m.parameters()]
    names = [n for n, _ in m.named_parameters()]
    m.zero_grad()
    loss(m, ex).backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(k):
        pi = int(rng.integers(len(params)))
        p = params[pi]
        flat = int(rng.integers(p.numel()))
        analytic = float(p.grad.reshape(-1)[flat])
        with torch.no_grad():
            orig = float(p.reshape(-1)[flat])
            p.view(-1)[flat] = orig + h
            up = float(loss(m, ex))
            p.view(-1)[flat] = orig - h
            down = float(loss(m, ex))
            p.view(-1)[flat] = orig
        numeric = (up - down) / (2 * h)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    del names
    return worst
