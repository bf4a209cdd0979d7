"""
checkpoint.py
=============
A checkpoint is a directory holding

    manifest.json   model config, role, trainer state, and one entry per
                    stored array: name, shape, byte offset
    tensors.bin     little-endian float64 values in manifest order

Arrays are the model parameters followed by the first and second Adam
moments of each optimizer state. The manifest carries the blob's SHA-256 and
is written last, so a torn write never loads.
"""

import hashlib
import json
import logging
import re
import shutil
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..errors import CheckpointError
from .kvtext import atomic_write_bytes, atomic_write_text
from .model import LanguageModel, TransformerConfig
from .numerics import AdamState, ParameterSet
from .training import TrainerState

logger = logging.getLogger(__name__)

FORMAT = "bambino-checkpoint v1"
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
WIRE_DTYPE = np.dtype("<f8")
_STEP_DIR = re.compile(r"^step-(\d+)$")


def step_dir(out_dir, step: int) -> Path:
    return Path(out_dir) / f"step-{step:07d}"


def _optimizer_header(opt: AdamState) -> dict:
    return {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step}


def save_checkpoint(path, model: LanguageModel, state: Optional[TrainerState] = None,
                    extra: Optional[dict] = None) -> Path:
    path = Path(path)
    arrays: List[Tuple[str, np.ndarray]] = [(name, p.data) for name, p in model.params.items()]
    optimizers = {}
    if state is not None:
        for label, opt in (("clm", state.clm_opt), ("ppo", state.ppo_opt)):
            if opt is None:
                continue
            optimizers[label] = _optimizer_header(opt)
            for name in model.params:
                arrays.append((f"opt.{label}.m.{name}", opt.m[name]))
                arrays.append((f"opt.{label}.v.{name}", opt.v[name]))

    entries, chunks, offset = [], [], 0
    for name, data in arrays:
        raw = np.ascontiguousarray(data, dtype=WIRE_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)

    manifest = {
        "format": FORMAT,
        "role": model.role,
        "config": model.config.model_dump(),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "blob_bytes": len(blob),
        "trainer": None if state is None else {
            "step": state.step, "epoch": state.epoch, "iterator": state.iterator},
        "optimizers": optimizers,
        "extra": extra or {},
        "tensors": entries,
    }
    atomic_write_bytes(path / BLOB, blob)
    atomic_write_text(path / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    logger.info("wrote %s checkpoint %s (%d arrays)", model.role, path, len(entries))
    return path


def read_manifest(path) -> dict:
    manifest_path = Path(path) / MANIFEST
    if not manifest_path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{manifest_path}: {e}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path, expected_config: Optional[TransformerConfig] = None,
                    role: Optional[str] = None) -> Tuple[LanguageModel, Optional[TrainerState], dict]:
    """(model, trainer state or None, extra) from a checkpoint directory."""
    path = Path(path)
    manifest = read_manifest(path)
    config = TransformerConfig(**manifest["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"{path}: checkpoint config does not match the requested model config")

    blob = (path / BLOB).read_bytes() if (path / BLOB).is_file() else b""
    if len(blob) != manifest["blob_bytes"] or hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"{path}: tensor blob is missing or does not match its manifest")

    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(blob, dtype=WIRE_DTYPE, count=count, offset=entry["offset"])
        arrays[entry["name"]] = values.astype(np.float64).reshape(shape)

    model = LanguageModel(config, role or manifest["role"])
    for name, p in model.params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: parameter {name!r} missing")
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {arrays[name].shape}, expected {p.shape}")
        p.data = arrays[name]

    state = None
    if manifest["trainer"] is not None:
        optimizers = {}
        for label, header in manifest["optimizers"].items():
            opt = AdamState(**header)
            for name in model.params:
                opt.m[name] = arrays[f"opt.{label}.m.{name}"]
                opt.v[name] = arrays[f"opt.{label}.v.{name}"]
            optimizers[label] = opt
        trainer = manifest["trainer"]
        state = TrainerState(step=trainer["step"], epoch=trainer["epoch"],
                             iterator=trainer["iterator"],
                             clm_opt=optimizers.get("clm"), ppo_opt=optimizers.get("ppo"))
    return model, state, manifest["extra"]


def latest_checkpoint(out_dir) -> Optional[Path]:
    """Highest `step-N` directory under out_dir that has a manifest."""
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        return None
    found = []
    for child in out_dir.iterdir():
        match = _STEP_DIR.match(child.name)
        if match and (child / MANIFEST).is_file():
            found.append((int(match.group(1)), child))
    return max(found)[1] if found else None


def clear_checkpoints(out_dir) -> List[Path]:
    """Remove every `step-N` directory under out_dir, complete or torn."""
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        return []
    removed = sorted(child for child in out_dir.iterdir()
                     if child.is_dir() and _STEP_DIR.match(child.name))
    for child in removed:
        shutil.rmtree(child)
    if removed:
        logger.info("removed %d stale checkpoint(s) from %s", len(removed), out_dir)
    return removed


def checkpoint_checksum(path) -> str:
    return read_manifest(path)["blob_sha256"]


def parameters_checksum(params: ParameterSet) -> str:
    digest = hashlib.sha256()
    for name, p in params.items():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(p.data, dtype=WIRE_DTYPE).tobytes())
    return digest.hexdigest()
