"""The desk-scale experiment: one synthetic corpus, one PD model and one AR baseline.

Checkpoints are cached under ``<root>/<digest>/<method>/`` so the scripts and the
acceptance suite share a single training run per setup.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .corpus import default_mixture, default_vocabulary, generate_mixture
from .model import ModelConfig
from .tags import AnnotatedDocument
from .train import TrainConfig, train

DEFAULT_ROOT = Path(__file__).resolve().parents[2] / "artifacts"


@dataclass(frozen=True)
class ToySetup:
    seed: int = 0
    n_train: int = 3000
    heldout_seed: int = 99
    n_heldout: int = 200
    span_len_range: tuple[int, int] = (20, 40)
    sync_probability: float = 0.3
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    batch_size: int = 16
    lr: float = 2e-3
    warmup: int = 100
    steps: dict = field(default_factory=lambda: {"pd": 2800, "ar": 800})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["span_len_range"] = list(self.span_len_range)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]

    def specs(self):
        return default_mixture(self.span_len_range, self.sync_probability)

    def train_docs(self) -> list[AnnotatedDocument]:
        return generate_mixture(self.specs(), self.n_train, np.random.default_rng(self.seed), default_vocabulary())

    def heldout_docs(self, train_docs: list[AnnotatedDocument] | None = None) -> list[AnnotatedDocument]:
        """Held-out documents whose prompts never occur in the training set."""
        train_docs = self.train_docs() if train_docs is None else train_docs
        return generate_mixture(self.specs(), self.n_heldout, np.random.default_rng(self.heldout_seed),
                                default_vocabulary(), exclude={d.prompt for d in train_docs})

    def model_config(self) -> ModelConfig:
        return ModelConfig(vocab_size=default_vocabulary().size, d_model=self.d_model, n_layers=self.n_layers,
                           n_heads=self.n_heads, d_ff=self.d_ff)

    def train_config(self, method: str) -> TrainConfig:
        return TrainConfig(method=method, steps=self.steps[method], batch_size=self.batch_size, lr=self.lr,
                           warmup=self.warmup, seed=self.seed, log_every=100)


def artifact_root(root: str | Path | None = None) -> Path:
    return Path(root or os.environ.get("PLANDIFF_ARTIFACTS") or DEFAULT_ROOT)


def run_dir(setup: ToySetup, method: str, root: str | Path | None = None) -> Path:
    return artifact_root(root) / setup.digest() / method


def prepare(setup: ToySetup | None = None, methods=("pd", "ar"), root: str | Path | None = None,
            log: Callable[[str], None] | None = print) -> dict[str, Path]:
    """Train whatever is missing and return the final checkpoint path per method."""
    setup = setup or ToySetup()
    docs = None
    out = {}
    for method in methods:
        d = run_dir(setup, method, root)
        ckpt = d / "final.ckpt"
        if not ckpt.exists():
            docs = docs if docs is not None else setup.train_docs()
            if log:
                log(f"training {method} for {setup.steps[method]} steps into {d}")
            t0 = time.perf_counter()
            train(docs, setup.model_config(), setup.train_config(method), d, log=log,
                  meta={"setup": setup.to_dict()})
            seconds = time.perf_counter() - t0
            (d / "train_meta.json").write_text(json.dumps(
                {"method": method, "wall_seconds": round(seconds, 1), "setup": setup.to_dict()}, indent=2) + "\n")
        out[method] = ckpt
    return out


def load(method: str, setup: ToySetup | None = None, root: str | Path | None = None) -> Checkpoint:
    setup = setup or ToySetup()
    path = prepare(setup, (method,), root)[method]
    ck = load_checkpoint(path)
    ck.model.eval()
    return ck


def train_seconds(method: str, setup: ToySetup | None = None, root: str | Path | None = None) -> float:
    meta = json.loads((run_dir(setup or ToySetup(), method, root) / "train_meta.json").read_text())
    return float(meta["wall_seconds"])
