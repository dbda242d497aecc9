"""Checkpoint container: magic line, one JSON header line, then raw float32 arrays.

Arrays are little-endian float32 written in header order: model parameters
first, then the optimizer's first and second moments for each parameter.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, Transformer, init_params

MAGIC = b"PLANDIFF-CKPT v1\n"


@dataclass
class Checkpoint:
    model: Transformer
    step: int
    seed: int
    meta: dict
    optimizer_state: dict | None
    content_hash: str


def content_hash(data: bytes) -> str:
    """Git blob id of the bytes."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_hash(path: str | Path) -> str:
    return content_hash(Path(path).read_bytes())


def _le32(t: torch.Tensor) -> bytes:
    return t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()


def save_checkpoint(path: str | Path, model: Transformer, optimizer: torch.optim.Optimizer | None = None,
                    step: int = 0, seed: int = 0, meta: dict | None = None) -> str:
    """Write the checkpoint and return its content hash."""
    names = [n for n, _ in model.named_parameters()]
    params = dict(model.named_parameters())
    arrays = [(n, params[n]) for n in names]
    opt_step = {}
    if optimizer is not None:
        by_id = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if st:
                    n = by_id[id(p)]
                    arrays.append((f"{n}#exp_avg", st["exp_avg"]))
                    arrays.append((f"{n}#exp_avg_sq", st["exp_avg_sq"]))
                    opt_step[n] = float(st["step"])
    header = {
        "config": model.cfg.to_dict(),
        "step": int(step),
        "seed": int(seed),
        "dtype": "float32-le",
        "fields": [{"name": n, "shape": list(t.shape)} for n, t in arrays],
        "optimizer_step": opt_step,
        "meta": meta or {},
    }
    blob = MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + b"".join(_le32(t) for _, t in arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return content_hash(blob)


def load_checkpoint(path: str | Path, optimizer_factory=None) -> Checkpoint:
    """Read a checkpoint; with ``optimizer_factory(model)`` the moments are restored too."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    end = data.index(b"\n", len(MAGIC))
    header = json.loads(data[len(MAGIC):end])
    offset = end + 1
    tensors = {}
    for f in header["fields"]:
        n = int(np.prod(f["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(f["shape"])
        offset += 4 * n
        tensors[f["name"]] = torch.from_numpy(arr.astype(np.float32))
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")

    cfg = ModelConfig(**header["config"])
    model = init_params(cfg, 0)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(tensors[name])
    opt_state = None
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model)
        for name, p in model.named_parameters():
            if f"{name}#exp_avg" in tensors:
                optimizer.state[p] = {
                    "step": torch.tensor(header["optimizer_step"][name]),
                    "exp_avg": tensors[f"{name}#exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"{name}#exp_avg_sq"].clone(),
                }
        opt_state = {"optimizer": optimizer}
    return Checkpoint(model, header["step"], header["seed"], header.get("meta", {}), opt_state, content_hash(data))
