"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line.

Criteria 6 to 11 decode with the toy PD and AR models from ``plandiff.toy``;
they are trained on first use and cached under ``artifacts/``.
"""

import math
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
import torch

from plandiff.attention import MaskMode, assign_roles, build_mask
from plandiff.bench import Cell, CellResult, generation_config, reference, run_cell, run_one
from plandiff.corpus import corrupt, make_training_example
from plandiff.diffusion import DenoisePolicy, Scaffold, UnmaskMode, denoise_spans, span_streams
from plandiff.engine import DENOISE_STEP, GenerationConfig, LogitsRecorder, generate_planned
from plandiff.model import finite_difference_check, forward, init_params
from plandiff.tags import (BOS, EOS, MASK, PAD, SYNC, TOPIC_CLOSE, TOPIC_OPEN, WORD_BASE, AnnotatedDocument, Plan,
                           SpanDecl, Stage, length_token, serialize)
from plandiff.toy import ToySetup, load, train_seconds

from oracles import rule_mask

RESULTS = {}
N_MAIN = 200
N_SWEEP = 60


def report(num, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] C{num:<2} {name}: {detail}"
    RESULTS[num] = line
    print(line)
    assert ok, line


def random_document(rng, max_tokens=64, n_words=60):
    """A random well-formed document (prompt, stages of topic/async pairs) of at most max_tokens."""
    while True:
        prompt = tuple(int(w) for w in rng.integers(WORD_BASE, WORD_BASE + n_words, rng.integers(0, 4)))
        n_stages = int(rng.integers(1, 4))
        stages = []
        for s in range(n_stages):
            decls, bodies = [], []
            for _ in range(int(rng.integers(1, 4))):
                topic = tuple(int(w) for w in rng.integers(WORD_BASE, WORD_BASE + n_words, rng.integers(1, 3)))
                body = [int(w) for w in rng.integers(WORD_BASE, WORD_BASE + n_words, rng.integers(1, 6))]
                body += [int(PAD)] * int(rng.integers(0, 3))
                decls.append(SpanDecl(topic, len(body)))
                bodies.append(tuple(body))
            stages.append(Stage(Plan(tuple(decls), SYNC if s < n_stages - 1 else EOS), tuple(bodies)))
        doc = AnnotatedDocument(prompt, tuple(stages))
        if len(serialize(doc)) <= max_tokens:
            return doc


# -- shared toy artifacts ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def setup():
    return ToySetup()


@pytest.fixture(scope="module")
def heldout(setup):
    return setup.heldout_docs()


@pytest.fixture(scope="module")
def pd_model(setup):
    return load("pd", setup).model


@pytest.fixture(scope="module")
def ar_model(setup):
    return load("ar", setup).model


class CellCache:
    """Memoised bench cells; a smaller request reuses the prefix of a larger run."""

    def __init__(self, models, docs):
        self.models, self.docs, self.runs = models, docs, {}

    def get(self, cell, n):
        have = self.runs.get(cell)
        if have is None or have.n < n:
            have = run_cell(self.models[cell.checkpoint_family], self.docs[:n], cell, GenerationConfig())
            self.runs[cell] = have
        per = have.per_prompt[:n]
        mean = lambda k: float(np.mean([p[k] for p in per]))
        return CellResult(cell, n, mean("critical_path"), mean("tokens"), mean("wall_time"), mean("exact"),
                          mean("well_formed"), mean("denoise_forwards"), sum(p["overflow"] for p in per), per)


@pytest.fixture(scope="module")
def cells(pd_model, ar_model, heldout):
    return CellCache({"pd": pd_model, "ar": ar_model}, heldout)


# -- criteria ----------------------------------------------------------------------------------

def test_c1_mask_rules(layout_tokens):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    bad = 0
    for _ in range(500):
        toks = serialize(random_document(rng))
        roles = assign_roles(toks)
        for mode, dense in ((MaskMode.SPAN_ISOLATED, False), (MaskMode.DENSE, True)):
            bad += not np.array_equal(build_mask(roles, mode).allowed, rule_mask(toks, dense))
    allowed = build_mask(assign_roles(layout_tokens)).allowed
    row14 = set(np.flatnonzero(allowed[14])) == set(range(9)) | set(range(13, 17))
    row17 = set(np.flatnonzero(allowed[17])) == set(range(18))
    secs = time.perf_counter() - t0
    report(1, "mask rules", bad == 0 and row14 and row17 and secs < 60,
           f"{bad}/1000 mismatching masks, layout row14={row14} row17={row17}, {secs:.1f}s")


def test_c2_masking_soundness(pd_model):
    rng = np.random.default_rng(2)
    vocab = pd_model.cfg.vocab_size
    trials = changed = 0
    with torch.no_grad():
        while trials < 1000:
            toks = np.asarray(serialize(random_document(rng, max_tokens=96)), dtype=np.int64)
            roles = assign_roles(toks)
            mask = build_mask(roles, MaskMode.DENSE if rng.random() < 0.5 else MaskMode.SPAN_ISOLATED)
            hidden = np.argwhere(~mask.allowed)
            if not len(hidden):
                continue
            base, _ = forward(pd_model, toks, mask, slots=roles.slot)
            for probe, j in hidden[rng.choice(len(hidden), size=min(5, len(hidden)), replace=False)]:
                other = toks.copy()
                other[j] = (toks[j] + rng.integers(1, vocab)) % vocab
                out, _ = forward(pd_model, other, mask, slots=roles.slot)
                changed += not torch.equal(out[probe], base[probe])
                trials += 1
    report(2, "masking soundness", changed == 0, f"{changed}/{trials} perturbations reached the probe row")


def test_c3_gradients(setup, heldout):
    t0 = time.perf_counter()
    model = init_params(setup.model_config(), seed=0)
    ex = make_training_example(heldout[0], 0.5, rng=np.random.default_rng(3))
    err = finite_difference_check(model, ex, k=50, seed=3)
    secs = time.perf_counter() - t0
    report(3, "gradient check", err < 1e-3 and secs < 120, f"max relative error {err:.2e} (float64), {secs:.1f}s")


def test_c4_forward_process():
    rng = np.random.default_rng(4)
    x = rng.integers(WORD_BASE, WORD_BASE + 100, 10_000)
    y = corrupt(x, 0.3, rng)
    frac = float((y == MASK).mean())
    clean = bool(((y == x) | (y == MASK)).all())
    report(4, "forward process", 0.2863 <= frac <= 0.3137 and clean,
           f"masked fraction {frac:.4f} in [0.2863, 0.3137], only MASK substitutions={clean}")


def test_c5_joint_equals_one_at_a_time(pd_model, heldout):
    rng = np.random.default_rng(5)
    differ = 0
    for trial in range(100):
        doc = heldout[int(rng.integers(len(heldout)))]
        decls = doc.stages[0].plan.spans
        n = int(rng.integers(1, min(4, len(decls)) + 1))
        prefix = [int(BOS), *doc.prompt]
        lengths = []
        for d in decls[:n]:
            lengths.append(int(rng.integers(1, 41)))
            prefix += [int(TOPIC_OPEN), *d.topic, length_token(lengths[-1]), int(TOPIC_CLOSE)]
        sc = Scaffold.from_plan(prefix, lengths)
        policy = DenoisePolicy(mode=UnmaskMode.ENTROPY if trial % 2 else UnmaskMode.CONFIDENCE,
                               steps_ratio=float(rng.choice([0.25, 0.5, 1.0])), temperature=0.7)
        joint = denoise_spans(pd_model, sc, None, policy, MaskMode.SPAN_ISOLATED, span_streams(trial, 0, n))
        for k in range(n):
            one = denoise_spans(pd_model, sc, None, policy, MaskMode.SPAN_ISOLATED, span_streams(trial, 0, n),
                                active=[k])
            pos = sc.span_positions(k)
            differ += not np.array_equal(joint.tokens[pos], one.tokens[pos])
    report(5, "joint vs one-at-a-time", differ == 0, f"{differ} differing spans over 100 scaffolds")


def test_c6_cache_equivalence(pd_model, heldout):
    greedy = GenerationConfig(policy=DenoisePolicy(temperature=0.0), plan_temperature=0.0)
    worst, same = 0.0, 0
    for i, doc in enumerate(heldout[:50]):
        rec = LogitsRecorder()
        cached = generate_planned(pd_model, doc.prompt, replace(greedy, seed=i), rec)
        worst = max(worst, rec.max_relative_error(pd_model))
        fresh = generate_planned(pd_model, doc.prompt, replace(greedy, seed=i, use_cache=False))
        same += cached.tokens == fresh.tokens
    report(6, "KV-cache equivalence", worst <= 1e-4 and same == 50,
           f"max relative logit error {worst:.2e}, {same}/50 identical outputs without cache")


def expected_steps(lengths, r):
    return max(1, math.ceil(Fraction(str(r)) * max(lengths)))


def test_c7_step_schedule(pd_model, heldout):
    ratios = (0.25, 0.5, 0.75, 1.0)
    cells_ = [Cell("pd", r) for r in ratios] + [Cell("pd-tau", r, 0.7) for r in ratios]
    bad_steps = bad_counts = 0
    path = {}
    first_stage = {}
    for cell in cells_:
        path[cell] = []
        for i, doc in enumerate(heldout[:30]):
            res = run_one(pd_model, doc, cell, generation_config(cell, GenerationConfig(seed=i)))
            ev = [e for e in res.cache_history if e.kind != "truncate"]
            bad_counts += len(ev) != res.trace.critical_path
            recs = res.trace.denoise_records
            for s, plan in enumerate(res.plans):
                want = expected_steps(plan.lengths, cell.steps_ratio)
                got = sum(e.kind == DENOISE_STEP and e.stage == s for e in res.trace.events)
                fw = [r["forwards_so_far"] for r in recs if r["stage"] == s]
                bad_counts += fw != list(range(1, got + 1))
                bad_steps += (got != want) if cell.confidence is None else (got > want)
                if s == 0:
                    first_stage[(cell, i)] = got
            path[cell].append(res.trace.critical_path)
    means = {c: float(np.mean(v)) for c, v in path.items()}
    mono = True
    for fam in ((Cell("pd", r) for r in ratios), (Cell("pd-tau", r, 0.7) for r in ratios)):
        fam = list(fam)
        mono &= all(means[a] <= means[b] for a, b in zip(fam, fam[1:]))
        mono &= all(first_stage.get((a, i), 0) <= first_stage.get((b, i), 0)
                    for a, b in zip(fam, fam[1:]) for i in range(30) if (a, i) in first_stage and (b, i) in first_stage)
    curve = ", ".join(f"r={c.steps_ratio:g}{'' if c.confidence is None else '/tau'}:{means[c]:.1f}" for c in cells_)
    report(7, "step schedule", bad_steps == 0 and bad_counts == 0 and mono,
           f"{bad_steps} schedule and {bad_counts} forward-count mismatches; mean forwards {curve}")


def test_c8_end_to_end(cells, setup):
    res = cells.get(Cell("pd"), N_MAIN)
    secs = train_seconds("pd", setup)
    ok = res.well_formed >= 0.99 and res.exact_match >= 0.9 and secs <= 1800
    report(8, "end-to-end learning", ok,
           f"well-formed {res.well_formed:.3f} (>=0.99), exact {res.exact_match:.3f} (>=0.90) on {res.n} "
           f"held-out prompts, trained in {secs / 60:.1f} min")


def test_c9_critical_path(cells, heldout):
    keep = [i for i, d in enumerate(heldout[:N_MAIN]) if max(len(s.plan.spans) for s in d.stages) >= 3]
    pd = cells.get(Cell("pd"), N_MAIN).per_prompt
    ar_res = cells.get(Cell("ar"), N_MAIN)
    pd_path = float(np.mean([pd[i]["critical_path"] for i in keep]))
    ar_path = float(np.mean([ar_res.per_prompt[i]["critical_path"] for i in keep]))
    # an AR decoder that emits exactly the reference needs one forward per word plus <eos/>
    ideal = float(np.mean([len(reference(heldout[i])) + 1 for i in keep]))
    ratio, ideal_ratio = pd_path / ar_path, pd_path / ideal
    report(9, "critical path vs AR", ratio <= 0.67 and ideal_ratio <= 0.67,
           f"PD {pd_path:.1f} vs AR {ar_path:.1f} forwards, ratio {ratio:.3f} (<=0.67) on {len(keep)} prompts; "
           f"vs reference-length AR {ideal:.1f}: {ideal_ratio:.3f}; AR exact {ar_res.exact_match:.3f}")


def test_c10_length_scale(cells):
    scales = (0.5, 1.0, 1.5, 2.0, 2.5)
    res = {s: cells.get(Cell("pd", length_scale=s), N_SWEEP) for s in scales}
    path = [res[s].mean_critical_path for s in scales[1:]]
    rising = all(a <= b for a, b in zip(path, path[1:]))
    peak = res[1.0].exact_match >= res[0.5].exact_match and res[1.0].exact_match >= res[2.5].exact_match
    curve = ", ".join(f"{s:g}: path {res[s].mean_critical_path:.1f} exact {res[s].exact_match:.2f}" for s in scales)
    report(10, "length-scale sweep", rising and peak, curve)


def test_c11_confidence_sweep(cells):
    taus = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    res = {t: cells.get(Cell("pd-tau", 1.0, t), N_SWEEP) for t in taus}
    fw = [res[t].mean_critical_path for t in taus]
    mono = all(a <= b for a, b in zip(fw, fw[1:]))
    curve = ", ".join(f"{t:g}: forwards {res[t].mean_critical_path:.1f} exact {res[t].exact_match:.2f}" for t in taus)
    report(11, "confidence sweep", mono, curve)
