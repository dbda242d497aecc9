"""Training loop shared by the CLI and the experiment scripts."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .attention import MaskMode
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import (
    TrainingExample, make_ar_example, make_diffusion_example, make_training_example, sample_t,
)
from .errors import ConfigError
from .model import LinearSchedule, ModelConfig, Transformer, grad_step, init_params, make_optimizer
from .tags import AnnotatedDocument, insert_stochastic_padding

METHODS = ("pd", "pd-da", "ar", "diffusion")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "pd"
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.01
    clip: float = 1.0
    seed: int = 0
    log_every: int = 10
    clean_plan_pass: bool = False
    checkpoint_epochs: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "checkpoint_epochs", tuple(int(e) for e in self.checkpoint_epochs))
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("steps, batch_size and lr must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checkpoint_epochs"] = list(self.checkpoint_epochs)
        return d


def make_example(doc: AnnotatedDocument, method: str, rng: np.random.Generator) -> TrainingExample:
    if method == "ar":
        return make_ar_example(doc)
    t = sample_t(rng)
    if method == "diffusion":
        return make_diffusion_example(doc, t, rng)
    mode = MaskMode.DENSE if method == "pd-da" else MaskMode.SPAN_ISOLATED
    return make_training_example(insert_stochastic_padding(doc, rng), t, mode, rng=rng)


def batch_indices(n_docs: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of the docs in one step's batch: shuffled epochs, a pure function of (seed, step)."""
    per_epoch = max(1, n_docs // batch_size)
    epoch, b = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, 0, epoch]).permutation(n_docs)
    return perm[b * batch_size:(b + 1) * batch_size]


def steps_per_epoch(n_docs: int, batch_size: int) -> int:
    return max(1, n_docs // batch_size)


def train(docs: Sequence[AnnotatedDocument], model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir: str | Path | None = None, resume: str | Path | None = None,
          log: Callable[[str], None] | None = None, meta: dict | None = None,
          on_step: Callable[[int, Transformer], None] | None = None) -> tuple[Transformer, list[dict]]:
    """Train from scratch (or resume) and return the model and the loss log rows.

    With ``out_dir`` a loss log CSV and checkpoints (at each epoch mark and at
    the end) are written there.
    """
    if not docs:
        raise ConfigError("empty training corpus")
    torch.manual_seed(cfg.seed)
    model = init_params(model_cfg, cfg.seed)
    opt = make_optimizer(model, cfg.lr, cfg.weight_decay)
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume, lambda m: make_optimizer(m, cfg.lr, cfg.weight_decay))
        model, opt, start = ck.model, ck.optimizer_state["optimizer"], ck.step
    schedule = LinearSchedule(cfg.lr, cfg.steps, min(cfg.warmup, cfg.steps - 1))
    per_epoch = steps_per_epoch(len(docs), cfg.batch_size)
    marks = {e * per_epoch: e for e in cfg.checkpoint_epochs}
    out = Path(out_dir) if out_dir is not None else None
    rows: list[dict] = []
    writer = None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "loss_log.csv"
        fh = open(log_path, "a" if resume is not None and log_path.exists() else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=["step", "loss", "lr", "t_mean"])
        if fh.tell() == 0:
            writer.writeheader()
    meta = {**(meta or {}), "train": cfg.to_dict()}
    t0 = time.perf_counter()
    try:
        for step in range(start, cfg.steps):
            rng = np.random.default_rng([cfg.seed, 1, step])
            batch = [make_example(docs[i], cfg.method, rng)
                     for i in batch_indices(len(docs), cfg.batch_size, cfg.seed, step)]
            value = grad_step(model, opt, batch, schedule, step, cfg.clip, cfg.clean_plan_pass)
            row = {"step": step + 1, "loss": value, "lr": schedule(step), "t_mean": float(np.mean([e.t for e in batch]))}
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
            if log is not None and ((step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps):
                log(f"step {step + 1}/{cfg.steps} loss {value:.4f} lr {row['lr']:.2e} "
                    f"({time.perf_counter() - t0:.0f}s)")
            if on_step is not None:
                on_step(step + 1, model)
            if out is not None and (step + 1) in marks:
                save_checkpoint(out / f"epoch{marks[step + 1]}.ckpt", model, opt, step + 1, cfg.seed, meta)
        if out is not None:
            save_checkpoint(out / "final.ckpt", model, opt, cfg.steps, cfg.seed, meta)
    finally:
        if fh is not None:
            fh.close()
    model.eval()
    return model, rows


def moving_average(values: Sequence[float], window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    return np.convolve(v, np.ones(window) / window, mode="valid")


def total_epochs(n_docs: int, cfg: TrainConfig) -> float:
    return cfg.steps / steps_per_epoch(n_docs, cfg.batch_size)


def epochs_to_steps(epochs: float, n_docs: int, batch_size: int) -> int:
    return max(1, math.ceil(epochs * steps_per_epoch(n_docs, batch_size)))
