"""Checkpoint directories: one ``.vtsr`` file per tensor plus ``metadata.json``.

Writes go to a sibling temp directory that is renamed into place, so an
interrupted save leaves either the old checkpoint or a ``.tmp-*`` directory,
never a half-written checkpoint.
"""
from __future__ import annotations

import base64
import contextlib
import json
import os
import shutil
import uuid
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn as nn

from .. import tensorio
from .optim import AdamState

FORMAT = "audiomanifold-checkpoint/1"


class CheckpointError(RuntimeError):
    pass


@contextlib.contextmanager
def atomic_directory(target: str | os.PathLike) -> Iterator[Path]:
    """Yield a scratch directory that replaces ``target`` on clean exit."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.parent / f".{target.name}.tmp-{uuid.uuid4().hex[:8]}"
    tmp.mkdir()
    yield tmp
    old = None
    if target.exists():
        old = target.parent / f".{target.name}.old-{uuid.uuid4().hex[:8]}"
        os.replace(target, old)
    os.replace(tmp, target)
    if old is not None:
        shutil.rmtree(old)


def _safe_name(name: str) -> str:
    return name.replace("/", "_")


def save_checkpoint(
    path: str | os.PathLike,
    model: nn.Module,
    metadata: dict,
    optimizer: AdamState | None = None,
    extra_files: dict[str, dict] | None = None,
) -> Path:
    """Save ``model`` state plus optional optimizer state atomically."""
    path = Path(path)
    state = model.state_dict()
    tensors, int_buffers = {}, {}
    with atomic_directory(path) as tmp:
        (tmp / "params").mkdir()
        for name, value in state.items():
            if value.is_floating_point():
                tensorio.save(tmp / "params" / f"{_safe_name(name)}.vtsr", value.detach().cpu().numpy())
                tensors[name] = list(value.shape)
            else:
                int_buffers[name] = value.tolist()
        opt_meta = None
        if optimizer is not None:
            (tmp / "optim").mkdir()
            for i, (m, v) in enumerate(zip(optimizer.exp_avg, optimizer.exp_avg_sq)):
                tensorio.save(tmp / "optim" / f"m_{i:04d}.vtsr", m.detach().cpu().numpy())
                tensorio.save(tmp / "optim" / f"v_{i:04d}.vtsr", v.detach().cpu().numpy())
            opt_meta = {
                "lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                "eps": optimizer.eps, "step": optimizer.step, "n_moments": len(optimizer.exp_avg),
            }
        meta = dict(metadata)
        meta.update(format=FORMAT, tensors=tensors, int_buffers=int_buffers, optimizer=opt_meta)
        if "rng_state" not in meta:
            meta["rng_state"] = base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode()
        (tmp / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        for fname, payload in (extra_files or {}).items():
            (tmp / fname).write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def read_metadata(path: str | os.PathLike) -> dict:
    meta_path = Path(path) / "metadata.json"
    if not meta_path.is_file():
        raise CheckpointError(f"no checkpoint metadata at {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    return meta


def load_state(path: str | os.PathLike, model: nn.Module) -> dict:
    """Load tensors into ``model`` in place; returns the metadata."""
    path = Path(path)
    meta = read_metadata(path)
    expected = model.state_dict()
    state = {}
    for name, ref in expected.items():
        if name in meta["tensors"]:
            arr = tensorio.load(path / "params" / f"{_safe_name(name)}.vtsr")
            if list(arr.shape) != list(ref.shape):
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != model shape {tuple(ref.shape)}")
            state[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
        elif name in meta["int_buffers"]:
            state[name] = torch.tensor(meta["int_buffers"][name], dtype=ref.dtype)
        else:
            raise CheckpointError(f"checkpoint at {path} lacks tensor {name}")
    model.load_state_dict(state)
    return meta


def load_optimizer(path: str | os.PathLike, meta: dict | None = None) -> AdamState | None:
    path = Path(path)
    meta = meta or read_metadata(path)
    om = meta.get("optimizer")
    if om is None:
        return None
    state = AdamState(lr=om["lr"], beta1=om["beta1"], beta2=om["beta2"], eps=om["eps"], step=om["step"])
    for i in range(om["n_moments"]):
        state.exp_avg.append(torch.from_numpy(tensorio.load(path / "optim" / f"m_{i:04d}.vtsr").copy()))
        state.exp_avg_sq.append(torch.from_numpy(tensorio.load(path / "optim" / f"v_{i:04d}.vtsr").copy()))
    return state


def restore_rng(meta: dict) -> None:
    raw = base64.b64decode(meta["rng_state"])
    torch.set_rng_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))
