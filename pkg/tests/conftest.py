import re
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from plandiff.corpus import default_vocabulary
from plandiff.model import ModelConfig, init_params
from plandiff.tags import Vocabulary

from oracles import LAYOUT_TEXT, LAYOUT_WORDS

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def vocab():
    return default_vocabulary()


@pytest.fixture(scope="session")
def layout_vocab():
    return Vocabulary(LAYOUT_WORDS)


@pytest.fixture(scope="session")
def layout_tokens(layout_vocab):
    return layout_vocab.encode(LAYOUT_TEXT)


@pytest.fixture(scope="session")
def tiny_cfg(vocab):
    return ModelConfig(vocab_size=vocab.size, d_model=32, n_layers=2, n_heads=4, d_ff=64, max_seq_len=256)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return init_params(tiny_cfg, seed=0).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_docs(vocab):
    from plandiff.corpus import default_mixture, generate_mixture
    return generate_mixture(default_mixture((8, 12), 0.5), 300, np.random.default_rng(0), vocab)


@pytest.fixture(scope="session")
def small_pd(vocab, small_docs):
    """A briefly trained planner: emits well-formed short plans, content is noise."""
    from plandiff.train import TrainConfig, train
    cfg = ModelConfig(vocab_size=vocab.size, d_model=32, n_layers=2, n_heads=4, d_ff=64, max_seq_len=512)
    model, _ = train(small_docs, cfg, TrainConfig(steps=150, batch_size=8, lr=3e-3, warmup=20))
    return model


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    lines = dict(mod.RESULTS)
    for outcome in ("failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_c(\d+)_(\w+)", rep.nodeid)
            if m and int(m.group(1)) not in lines:
                lines[int(m.group(1))] = f"[FAIL] C{m.group(1):<2} {m.group(2)}: raised before its check"
    if lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(lines):
            terminalreporter.write_line(lines[num])
