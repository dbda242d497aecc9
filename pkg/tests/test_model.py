import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from plandiff.attention import build_mask, assign_roles, causal_mask
from plandiff.corpus import default_mixture, generate_mixture, make_training_example
from plandiff.errors import CacheMismatch, ConfigError, NonFiniteLoss, SequenceTooLong
from plandiff.model import (
    KVCache, LinearSchedule, ModelConfig, batch_loss, finite_difference_check, forward, grad_step,
    init_params, loss, make_optimizer,
)
from plandiff.tags import BOS, MASK, serialize

from oracles import reachability, uniform_loss
from strategies import documents


def _value(fn, *args, **kwargs):
    with torch.no_grad():
        return float(fn(*args, **kwargs))


def test_init_is_deterministic(tiny_cfg):
    a, b = init_params(tiny_cfg, seed=3), init_params(tiny_cfg, seed=3)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    c = init_params(tiny_cfg, seed=4)
    assert not torch.equal(a.tok.weight, c.tok.weight)


@pytest.mark.parametrize("kwargs", [dict(d_model=30, n_heads=4), dict(n_layers=0), dict(positional="sinusoid")])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_forward_shapes_and_length_guard(tiny_model, tiny_cfg):
    toks = [BOS, 600, 601]
    logits, _ = forward(tiny_model, toks, causal_mask(3))
    assert logits.shape == (3, tiny_cfg.vocab_size)
    with pytest.raises(SequenceTooLong):
        forward(tiny_model, [BOS] * (tiny_cfg.max_seq_len + 1), causal_mask(tiny_cfg.max_seq_len + 1))
    with pytest.raises(ValueError):
        forward(tiny_model, toks, causal_mask(2))


@settings(max_examples=25)
@given(documents(max_stages=2, max_spans=3, max_len=4), st.integers(0, 10_000))
def test_unreachable_tokens_do_not_change_logits(tiny_model, vocab, doc, seed):
    toks = np.asarray(serialize(doc))
    roles = assign_roles(toks)
    mask = build_mask(roles)
    reach = reachability(mask.allowed)
    rng = np.random.default_rng(seed)
    base, _ = forward(tiny_model, toks, mask, slots=roles.slot)
    probe = int(rng.integers(len(toks)))
    hidden = np.flatnonzero(~reach[probe])
    if not len(hidden):
        return
    bumped = toks.copy()
    j = int(rng.choice(hidden))
    bumped[j] = 600 + (int(bumped[j]) + 1) % 40
    out, _ = forward(tiny_model, bumped, mask, slots=roles.slot)
    assert torch.equal(out[probe], base[probe])


def test_reachable_tokens_do_change_logits(tiny_model, layout_tokens):
    roles = assign_roles(layout_tokens)
    mask = build_mask(roles)
    base, _ = forward(tiny_model, layout_tokens, mask, slots=roles.slot)
    bumped = list(layout_tokens)
    bumped[10] += 1  # A, visible to row 25 after the barrier
    out, _ = forward(tiny_model, bumped, mask, slots=roles.slot)
    assert not torch.equal(out[25], base[25])
    assert torch.equal(out[14], base[14])


def test_uniform_model_loss_matches_oracle(tiny_cfg, vocab):
    model = init_params(tiny_cfg, seed=0)
    with torch.no_grad():
        model.head.weight.zero_()
    docs = generate_mixture(default_mixture(), 3, np.random.default_rng(0), vocab)
    exs = [make_training_example(d, 0.4, rng=np.random.default_rng(i)) for i, d in enumerate(docs)]
    want = np.mean([uniform_loss(len(e.plan_targets), e.loss_weight[e.content_targets], e.n_y, tiny_cfg.vocab_size)
                    for e in exs])
    assert _value(batch_loss, model, exs) == pytest.approx(want, rel=1e-5)
    # batching is the mean of single-example losses
    single = np.mean([_value(loss, model, e) for e in exs])
    assert _value(batch_loss, model, exs) == pytest.approx(single, rel=1e-5)


def test_batch_padding_does_not_leak(tiny_model, vocab):
    docs = generate_mixture(default_mixture(), 4, np.random.default_rng(2), vocab)
    exs = [make_training_example(d, 0.5, rng=np.random.default_rng(i)) for i, d in enumerate(docs)]
    joint = _value(batch_loss, tiny_model, exs)
    single = np.mean([_value(loss, tiny_model, e) for e in exs])
    assert joint == pytest.approx(single, rel=1e-4)


def test_missing_slots_mean_slot_zero(tiny_model, layout_tokens):
    # AR and fallback decoding pass no slots; training always feeds slot 0 there
    n = len(layout_tokens)
    mask = causal_mask(n)
    bare, _ = forward(tiny_model, layout_tokens, mask)
    zero, _ = forward(tiny_model, layout_tokens, mask, slots=np.zeros(n, dtype=np.int64))
    assert torch.equal(bare, zero)


def test_clean_plan_pass_only_changes_plan_terms(tiny_model, vocab):
    docs = generate_mixture(default_mixture(span_len_range=(8, 12), sync_probability=1.0), 2,
                            np.random.default_rng(0), vocab)
    ex = make_training_example(docs[0], 0.9, rng=np.random.default_rng(0))
    a, b = _value(loss, tiny_model, ex), _value(loss, tiny_model, ex, clean_plan_pass=True)
    assert math.isfinite(a) and math.isfinite(b) and a != b


def test_gradient_matches_finite_differences(vocab):
    cfg = ModelConfig(vocab_size=vocab.size, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=256)
    model = init_params(cfg, seed=1)
    doc = generate_mixture(default_mixture(span_len_range=(8, 12)), 1, np.random.default_rng(0), vocab)[0]
    ex = make_training_example(doc, 0.5, rng=np.random.default_rng(0))
    assert finite_difference_check(model, ex, k=10, seed=0) < 1e-3


def test_grad_step_reduces_loss(tiny_cfg, vocab):
    model = init_params(tiny_cfg, seed=0)
    opt = make_optimizer(model, lr=3e-3)
    docs = generate_mixture(default_mixture(span_len_range=(8, 12)), 4, np.random.default_rng(0), vocab)
    batch = [make_training_example(d, 0.5, rng=np.random.default_rng(i)) for i, d in enumerate(docs)]
    sched = LinearSchedule(3e-3, 30)
    first = grad_step(model, opt, batch, sched, 0)
    for s in range(1, 30):
        last = grad_step(model, opt, batch, sched, s)
    assert last < first * 0.7


def test_grad_step_rejects_nan(tiny_cfg, vocab):
    model = init_params(tiny_cfg, seed=0)
    with torch.no_grad():
        model.head.weight.fill_(float("nan"))
    doc = generate_mixture(default_mixture(), 1, np.random.default_rng(0), vocab)[0]
    ex = make_training_example(doc, 0.5, rng=np.random.default_rng(0))
    with pytest.raises(NonFiniteLoss):
        grad_step(model, make_optimizer(model), [ex], LinearSchedule(1e-3, 10), 0)


def test_schedule_shape():
    s = LinearSchedule(1.0, 100, warmup=10)
    assert s(0) == pytest.approx(0.1)
    assert s(9) == pytest.approx(1.0)
    assert s(55) == pytest.approx(0.5)
    assert s(100) == 0.0


def test_weight_decay_skips_vectors(tiny_model):
    opt = make_optimizer(tiny_model, weight_decay=0.1)
    decayed = {id(p) for g in opt.param_groups if g["weight_decay"] > 0 for p in g["params"]}
    for name, p in tiny_model.named_parameters():
        assert (id(p) in decayed) == (p.ndim >= 2), name


def test_cache_matches_full_forward(tiny_model, layout_tokens):
    roles = assign_roles(layout_tokens)
    mask = build_mask(roles)
    full, _ = forward(tiny_model, layout_tokens, mask, slots=roles.slot)
    cache = KVCache(tiny_model.cfg.n_layers)
    # commit the first stage (through the barrier), then run the rest
    _, cache = forward(tiny_model, layout_tokens[:18], mask.allowed[:18, :18], cache, slots=roles.slot[:18], commit=18)
    rest, _ = forward(tiny_model, layout_tokens, mask, cache, slots=roles.slot)
    torch.testing.assert_close(rest, full[18:], rtol=1e-4, atol=1e-5)
    assert cache.length == 18 and cache.history[0].committed == 18


def test_cache_guards(tiny_model, layout_tokens):
    roles = assign_roles(layout_tokens)
    mask = build_mask(roles)
    cache = KVCache(tiny_model.cfg.n_layers)
    forward(tiny_model, layout_tokens[:5], mask.allowed[:5, :5], cache, slots=roles.slot[:5], commit=5)
    other = list(layout_tokens)
    other[2] += 1
    with pytest.raises(CacheMismatch):
        forward(tiny_model, other, mask, cache, slots=roles.slot)
    # committing a span row that sees its own (uncommitted) tail is refused
    with pytest.raises(CacheMismatch):
        forward(tiny_model, layout_tokens[:12], mask.allowed[:12, :12], cache, slots=roles.slot[:12], commit=6)
    cache.truncate(3)
    assert cache.length == 3 and cache.history[-1].kind == "truncate"
    with pytest.raises(ValueError):
        forward(tiny_model, layout_tokens, mask, None, commit=2)
    assert MASK not in cache.tokens
