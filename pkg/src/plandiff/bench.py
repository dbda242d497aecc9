"""Benchmark cells (method x decoding setting) over a shared held-out prompt set."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attention import MaskMode
from .diffusion import DenoisePolicy, UnmaskMode
from .engine import GenerationConfig, GenerationResult, generate_ar, generate_diffusion, generate_planned
from .errors import LengthOverflow
from .model import Transformer
from .tags import AnnotatedDocument, round_up10, strip_control, validate_tokens

METHOD_NAMES = {"ar": "AR", "diffusion": "DIFFUSION", "pd": "PD", "pd-da": "PD-DA", "pd-tau": "PD+tau"}


@dataclass(frozen=True)
class Cell:
    method: str
    steps_ratio: float = 1.0
    confidence: float | None = None
    length_scale: float = 1.0

    @property
    def checkpoint_family(self) -> str:
        """Which trained model the cell decodes with."""
        return {"pd-tau": "pd"}.get(self.method, self.method)

    def label(self) -> str:
        tau = "-" if self.confidence is None else f"{self.confidence:g}"
        return f"{self.method} r={self.steps_ratio:g} tau={tau} scale={self.length_scale:g}"


@dataclass
class CellResult:
    cell: Cell
    n: int
    mean_critical_path: float
    mean_tokens: float
    mean_wall_time: float
    exact_match: float
    well_formed: float
    mean_denoise_forwards: float
    overflow: int = 0
    per_prompt: list[dict] = field(default_factory=list)

    def row(self) -> dict:
        return {
            "method": METHOD_NAMES.get(self.cell.method, self.cell.method),
            "steps_ratio": self.cell.steps_ratio,
            "confidence": "" if self.cell.confidence is None else self.cell.confidence,
            "length_scale": self.cell.length_scale,
            "n": self.n,
            "mean_critical_path": round(self.mean_critical_path, 4),
            "mean_tokens": round(self.mean_tokens, 4),
            "mean_wall_time": round(self.mean_wall_time, 6),
            "exact_match": round(self.exact_match, 4),
            "well_formed": round(self.well_formed, 4),
            "mean_denoise_forwards": round(self.mean_denoise_forwards, 4),
            "overflow": self.overflow,
        }


def reference(doc: AnnotatedDocument) -> list[int]:
    """Ground-truth stripped output of a synthetic document."""
    return strip_control(doc.content())


def diffusion_canvas(doc: AnnotatedDocument) -> int:
    return round_up10(len(reference(doc)))


def generation_config(cell: Cell, base: GenerationConfig) -> GenerationConfig:
    if cell.confidence is not None:
        policy = replace(base.policy, mode=UnmaskMode.CONFIDENCE, confidence=cell.confidence,
                         steps_ratio=cell.steps_ratio)
    else:
        policy = replace(base.policy, mode=UnmaskMode.ENTROPY, steps_ratio=cell.steps_ratio)
    mode = MaskMode.DENSE if cell.method == "pd-da" else MaskMode.SPAN_ISOLATED
    return replace(base, policy=policy, length_scale=cell.length_scale, mask_mode=mode)


def run_one(model: Transformer, doc: AnnotatedDocument, cell: Cell, cfg: GenerationConfig) -> GenerationResult:
    if cell.method == "ar":
        return generate_ar(model, doc.prompt, cfg)
    if cell.method == "diffusion":
        canvas = max(1, int(np.floor(diffusion_canvas(doc) * cell.length_scale + 0.5)))
        return generate_diffusion(model, doc.prompt, canvas, cfg)
    return generate_planned(model, doc.prompt, cfg)


def run_cell(model: Transformer, docs: Sequence[AnnotatedDocument], cell: Cell,
             base: GenerationConfig | None = None) -> CellResult:
    base = base or GenerationConfig()
    per = []
    overflow = 0
    for i, doc in enumerate(docs):
        cfg = replace(generation_config(cell, base), seed=base.seed + i)
        try:
            res = run_one(model, doc, cell, cfg)
        except LengthOverflow:
            overflow += 1
            per.append({"prompt": i, "critical_path": 0, "tokens": 0, "wall_time": 0.0, "exact": False,
                        "well_formed": False, "denoise_forwards": 0, "overflow": True})
            continue
        planned = cell.method not in ("ar", "diffusion")
        per.append({
            "prompt": i,
            "critical_path": res.trace.critical_path,
            "tokens": len(res.raw),
            "wall_time": res.wall_time,
            "exact": res.stripped == reference(doc),
            "well_formed": validate_tokens(res.tokens).ok if planned else True,
            "denoise_forwards": res.trace.count("DENOISE_STEP"),
            "overflow": False,
        })
    def mean(key):
        return float(np.mean([p[key] for p in per])) if per else 0.0
    return CellResult(cell, len(per), mean("critical_path"), mean("tokens"), mean("wall_time"), mean("exact"),
                      mean("well_formed"), mean("denoise_forwards"), overflow, per)


@dataclass(frozen=True)
class BenchConfig:
    methods: tuple[str, ...] = ("ar", "diffusion", "pd", "pd-da", "pd-tau")
    steps_ratios: tuple[float, ...] = (1.0,)
    confidences: tuple[float, ...] = (0.9,)
    length_scales: tuple[float, ...] = (1.0,)
    workers: int = 1

    def cells(self) -> list[Cell]:
        out = []
        for m in self.methods:
            if m in ("ar",):
                out.append(Cell(m))
            elif m == "pd-tau":
                out += [Cell(m, r, tau, 1.0) for r in self.steps_ratios for tau in self.confidences]
            elif m == "diffusion":
                out += [Cell(m, r) for r in self.steps_ratios]
            else:
                out += [Cell(m, r, None, s) for r in self.steps_ratios for s in self.length_scales]
        return out


@dataclass
class BenchReport:
    rows: list[dict]
    config: dict
    checkpoints: dict

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "checkpoints": self.checkpoints, "rows": self.rows}, indent=2)

    def write(self, out_dir: str | Path, stem: str = "bench") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        with open(csv_path, "w", newline="") as fh:
            fh.write(f"# config: {json.dumps(self.config, sort_keys=True)}\n")
            fh.write(f"# checkpoints: {json.dumps(self.checkpoints, sort_keys=True)}\n")
            if self.rows:
                w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
                w.writeheader()
                w.writerows(self.rows)
        json_path.write_text(self.to_json() + "\n")
        return csv_path, json_path


def run_bench(models: Mapping[str, Transformer], docs: Sequence[AnnotatedDocument], cfg: BenchConfig,
              base: GenerationConfig | None = None, config_echo: dict | None = None,
              checkpoints: dict | None = None) -> tuple[BenchReport, list[CellResult]]:
    """Run every requested cell over the same prompts; cells run in a thread pool."""
    cells = [c for c in cfg.cells() if c.checkpoint_family in models]
    missing = sorted({c.checkpoint_family for c in cfg.cells()} - set(models))
    if missing:
        raise KeyError(f"no checkpoint for methods {missing}")

    def job(cell):
        return run_cell(models[cell.checkpoint_family], docs, cell, base)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(job, cells))
    else:
        results = [job(c) for c in cells]
    report = BenchReport([r.row() for r in results], {**(config_echo or {}), "bench": asdict(cfg)},
                         checkpoints or {})
    return report, results
