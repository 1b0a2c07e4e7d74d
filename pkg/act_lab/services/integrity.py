"""
Integrity service for ACT Lab.
Content digests for checkpoints, datasets and plans, and atomic file writes.
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Optional, Union

from cryptography.hazmat.primitives import constant_time, hashes

logger = logging.getLogger(__name__)

DIGEST_SIZE = 32


class DigestService:
    """Service computing and verifying SHA-256 content digests."""

    def __init__(self) -> None:
        self.algorithm = hashes.SHA256()
        logger.debug("Digest service initialized (sha256)")

    def digest(self, data: bytes) -> bytes:
        """
        Compute the raw digest of a byte string.

        Args:
            data: Content to hash

        Returns:
            32-byte SHA-256 digest
        """
        h = hashes.Hash(self.algorithm)
        h.update(data)
        return h.finalize()

    def hexdigest(self, data: bytes) -> str:
        return self.digest(data).hex()

    def digest_json(self, document: Any) -> str:
        """Hex digest of the canonical (sorted-key, compact) JSON encoding."""
        canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
        return self.hexdigest(canonical.encode("utf-8"))

    def verify(self, data: bytes, expected: bytes) -> bool:
        """
        Check data against an expected raw digest in constant time.

        Returns:
            True if the digests match
        """
        return constant_time.bytes_eq(self.digest(data), expected)


# Global digest service instance
_digest_service: Optional[DigestService] = None


def get_digest_service() -> DigestService:
    """
    Get or create global digest service instance.

    Returns:
        DigestService instance
    """
    global _digest_service

    if _digest_service is None:
        _digest_service = DigestService()

    return _digest_service


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> Path:
    """
    Write bytes to a temporary sibling file, then rename it over the target.

    A reader never observes a partially written file.

    Args:
        path: Destination file
        data: Content

    Returns:
        The destination path

    Raises:
        OSError: If the write or rename fails (the temporary file is removed)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.debug(f"Wrote {len(data)} bytes to {path}")
    return path


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))
