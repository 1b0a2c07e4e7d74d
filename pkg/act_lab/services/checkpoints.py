"""
Checkpoint persistence for ACT Lab.

Container layout (all integers little-endian):

    magic        8 bytes   b"ACTCKPT\\0"
    version      u32
    header_len   u32
    header       header_len bytes of canonical JSON:
                 {"meta": {...}, "spec": {...},
                  "tensors": [{"name", "dtype": "<f8", "shape"}, ...]}
    payloads     one little-endian float64 block per tensor, in header order
    digest       32-byte SHA-256 of every preceding byte
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np

from ..core.models import Classifier, ModelParams, ModelSpec, ModelSpecError
from ..core.tensor import Tensor
from .integrity import DIGEST_SIZE, atomic_write_bytes, get_digest_service

logger = logging.getLogger(__name__)

MAGIC = b"ACTCKPT\x00"
FORMAT_VERSION = 1
PAYLOAD_DTYPE = "<f8"
_PREFIX = struct.Struct("<8sII")


class CheckpointError(Exception):
    """Exception raised for unreadable, corrupted or incompatible checkpoints."""

    pass


@dataclass
class Checkpoint:
    """
    A persisted model.

    ``meta`` carries training metadata such as the plan digest, epoch, seed,
    method and model role; it must be JSON-serializable.
    """

    spec: ModelSpec
    params: ModelParams
    meta: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def classifier(self, name: str = "") -> Classifier:
        return Classifier(self.spec, self.params, name or str(self.meta.get("name", "model")))

    def equals(self, other: "Checkpoint") -> bool:
        return (
            self.version == other.version
            and self.spec == other.spec
            and self.meta == other.meta
            and self.params.equals(other.params)
        )


def _canonical(document: Any) -> bytes:
    return json.dumps(document, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """
    Serialize a checkpoint to bytes.

    Raises:
        CheckpointError: If the metadata is not JSON-serializable
    """
    table = []
    payloads = []
    for name, tensor in checkpoint.params.items():
        array = np.ascontiguousarray(tensor.data, dtype=PAYLOAD_DTYPE)
        table.append({"name": name, "dtype": PAYLOAD_DTYPE, "shape": list(array.shape)})
        payloads.append(array.tobytes())
    try:
        header = _canonical(
            {"meta": checkpoint.meta, "spec": checkpoint.spec.to_descriptor(), "tensors": table}
        )
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"Checkpoint metadata is not serializable: {e}")

    body = _PREFIX.pack(MAGIC, checkpoint.version, len(header)) + header + b"".join(payloads)
    return body + get_digest_service().digest(body)


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    """
    Parse and verify checkpoint bytes.

    Args:
        data: Raw content
        source: Name used in diagnostics

    Returns:
        The stored checkpoint

    Raises:
        CheckpointError: On bad magic, version mismatch, truncation or digest mismatch
    """
    if len(data) < _PREFIX.size + DIGEST_SIZE:
        raise CheckpointError(f"{source}: truncated checkpoint ({len(data)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{source}: format version {version} is not supported (expected {FORMAT_VERSION})"
        )

    header_end = _PREFIX.size + header_len
    if header_end + DIGEST_SIZE > len(data):
        raise CheckpointError(f"{source}: truncated checkpoint header")
    try:
        header = json.loads(data[_PREFIX.size : header_end].decode("utf-8"))
        table = header["tensors"]
        sizes = [8 * int(np.prod(entry["shape"], dtype=np.int64)) for entry in table]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        logger.error(f"Corrupt checkpoint header in {source}: {e}")
        raise CheckpointError(f"{source}: corrupt checkpoint header: {e}")

    expected = header_end + sum(sizes) + DIGEST_SIZE
    if len(data) != expected:
        raise CheckpointError(
            f"{source}: truncated or padded checkpoint ({len(data)} bytes, expected {expected})"
        )
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if not get_digest_service().verify(body, digest):
        raise CheckpointError(f"{source}: digest mismatch, checkpoint is corrupted")

    tensors: dict[str, Tensor] = {}
    offset = header_end
    for entry, size in zip(table, sizes):
        name = entry["name"]
        if entry.get("dtype") != PAYLOAD_DTYPE:
            raise CheckpointError(f"{source}: tensor {name} has unsupported dtype {entry.get('dtype')}")
        if name in tensors:
            raise CheckpointError(f"{source}: duplicate tensor name {name}")
        array = np.frombuffer(data, dtype=PAYLOAD_DTYPE, count=size // 8, offset=offset)
        tensors[name] = Tensor(array.reshape(entry["shape"]).astype(np.float64))
        offset += size

    try:
        spec = ModelSpec.from_descriptor(header["spec"])
    except (KeyError, ModelSpecError) as e:
        raise CheckpointError(f"{source}: invalid model descriptor: {e}")
    meta = header.get("meta", {})
    return Checkpoint(spec, ModelParams(tensors, int(meta.get("seed", 0) or 0)), meta, version)


def save_checkpoint(model: Classifier, meta: dict[str, Any], path: Union[str, Path]) -> Path:
    """
    Atomically write a model and its metadata.

    Args:
        model: Spec and parameters to persist
        meta: JSON-serializable training metadata
        path: Destination file

    Returns:
        The written path

    Raises:
        CheckpointError: If encoding or writing fails
    """
    data = encode_checkpoint(Checkpoint(model.spec, model.params, dict(meta)))
    try:
        atomic_write_bytes(path, data)
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {e}")
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}")
    logger.info(f"Saved checkpoint {path} ({len(data)} bytes)")
    return Path(path)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read and verify a checkpoint file.

    Raises:
        CheckpointError: If the file is missing, truncated, corrupted or of another version
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        logger.error(f"Failed to read checkpoint {path}: {e}")
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    checkpoint = decode_checkpoint(data, str(path))
    logger.info(f"Loaded checkpoint {path}")
    return checkpoint
