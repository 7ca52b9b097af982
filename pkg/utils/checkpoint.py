# utils/checkpoint.py
"""
TriggerTune - Checkpoint Container
Versioned, self-describing tensor file: magic, JSON header, little-endian float64 payload
"""
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch
from pydantic import ValidationError

from models.config import ModelConfig
from utils.errors import CheckpointError
from utils.features import NormalizerStats
from utils.transformer import TriggerTransformer

logger = logging.getLogger(__name__)

MAGIC = b"TTCK"
FORMAT_VERSION = 1
# magic, uint32 version, uint64 header byte length
PREAMBLE = struct.Struct("<4sIQ")
PAYLOAD_DTYPE = np.dtype("<f8")


def write_container(path: Union[str, Path], tensors: Dict[str, torch.Tensor], meta: Dict[str, Any]) -> Path:
    """
    Write named tensors and JSON metadata into one container file

    Args:
        path (Union[str, Path]): Output file (replaced atomically)
        tensors (Dict[str, torch.Tensor]): Tensors stored in sorted-name order
        meta (Dict[str, Any]): JSON-serialisable metadata

    Returns:
        Path: Written file
    """
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        array = tensors[name].detach().cpu().numpy().astype(PAYLOAD_DTYPE)
        entries.append({"name": name, "shape": list(array.shape), "offset": offset, "count": int(array.size)})
        chunks.append(np.ascontiguousarray(array).tobytes())
        offset += int(array.size)
    header = dict(meta, format="triggertune-checkpoint", version=FORMAT_VERSION, tensors=entries)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for chunk in chunks:
            f.write(chunk)
    os.replace(tmp, path)
    return path


def read_container(path: Union[str, Path]) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    """Read a container written by write_container"""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < PREAMBLE.size:
        raise CheckpointError(f"{path} is too short to be a checkpoint")
    magic, version, header_len = PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a TriggerTune checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    start = PREAMBLE.size + header_len
    try:
        header = json.loads(raw[PREAMBLE.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has a corrupt header: {e}") from e
    payload = np.frombuffer(raw, dtype=PAYLOAD_DTYPE, offset=start) if len(raw) > start else np.zeros(0)
    if (len(raw) - start) % PAYLOAD_DTYPE.itemsize:
        raise CheckpointError(f"{path} payload is not a whole number of float64 values")

    tensors = {}
    for entry in header.pop("tensors", []):
        lo, count = entry["offset"], entry["count"]
        if lo + count > payload.size or int(np.prod(entry["shape"], dtype=np.int64)) != count:
            raise CheckpointError(f"{path}: tensor {entry['name']} lies outside the payload")
        tensors[entry["name"]] = torch.from_numpy(payload[lo:lo + count].copy()).reshape(entry["shape"])
    return tensors, header


@dataclass
class Checkpoint:
    """A loaded model with its feature normalizer and metadata"""
    model: TriggerTransformer
    normalizer: Optional[NormalizerStats]
    meta: Dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path: Union[str, Path], model: TriggerTransformer,
                    normalizer: Optional[NormalizerStats] = None, **extras) -> Path:
    """
    Save model tensors, model config, normalizer and extra metadata

    Example:
        save_checkpoint(run_dir / "baseline.ckpt", model, stats, stage="baseline")
    """
    meta = dict(extras)
    meta["model_config"] = json.loads(model.cfg.model_dump_json())
    if normalizer is not None:
        meta["normalizer"] = {"mean": normalizer.mean.tolist(), "std": normalizer.std.tolist()}
    tensors = {name: p for name, p in model.named_parameters()}
    written = write_container(path, tensors, meta)
    logger.info("saved checkpoint %s (%d tensors)", written, len(tensors))
    return written


def load_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None) -> Checkpoint:
    """
    Rebuild a model from a checkpoint

    Args:
        path (Union[str, Path]): Checkpoint file
        expected (ModelConfig, optional): Configuration the checkpoint must match

    Raises:
        CheckpointError: on a corrupt file or a configuration mismatch
    """
    tensors, meta = read_container(path)
    try:
        cfg = ModelConfig(**meta.pop("model_config"))
    except (KeyError, TypeError, ValidationError) as e:
        raise CheckpointError(f"{path} has no valid model config: {e}") from e
    if expected is not None:
        # tap_layer is a runtime choice; the tensors do not depend on it
        stored = cfg.model_dump(exclude={"tap_layer", "speaker_dropout", "block_dropout"})
        wanted = expected.model_dump(exclude={"tap_layer", "speaker_dropout", "block_dropout"})
        if stored != wanted:
            diff = {k: (stored[k], wanted[k]) for k in stored if stored[k] != wanted[k]}
            raise CheckpointError(f"checkpoint {path} is incompatible with the configuration: {diff}")
        cfg = expected.model_copy(update={"tap_layer": cfg.tap_layer})

    model = TriggerTransformer(cfg).to(torch.float64)
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        unexpected = sorted(set(tensors) - set(params))
        raise CheckpointError(f"checkpoint {path} tensor names differ: missing {missing}, unexpected {unexpected}")
    with torch.no_grad():
        for name, p in params.items():
            if tuple(p.shape) != tuple(tensors[name].shape):
                raise CheckpointError(f"tensor {name} has shape {tuple(tensors[name].shape)}, expected {tuple(p.shape)}")
            p.copy_(tensors[name])

    normalizer = None
    if "normalizer" in meta:
        stats = meta.pop("normalizer")
        normalizer = NormalizerStats(mean=np.asarray(stats["mean"]), std=np.asarray(stats["std"]))
    return Checkpoint(model=model, normalizer=normalizer, meta=meta)


def encoder_checksum(model: TriggerTransformer) -> str:
    """SHA-256 over the encoder tensors' float64 bytes in name order"""
    digest = hashlib.sha256()
    for name, p in sorted(model.encoder_named_parameters()):
        digest.update(name.encode("utf-8"))
        digest.update(p.detach().cpu().numpy().astype(PAYLOAD_DTYPE).tobytes())
    return digest.hexdigest()


def file_checksum(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
