"""Content digests and stable seed derivation."""

import json
from typing import Any

from cryptography.hazmat.primitives import hashes


def sha256_hex(data: bytes) -> str:
    digest = hashes.Hash(hashes.SHA256())
    digest.update(data)
    return digest.finalize().hex()


def canonical_json(value: Any) -> bytes:
    """Sorted keys, no whitespace; the byte form every config digest is taken over."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def json_digest(value: Any) -> str:
    return sha256_hex(canonical_json(value))


def file_digest(path) -> str:
    digest = hashes.Hash(hashes.SHA256())
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.finalize().hex()


def derive_seed(master: int, *labels) -> int:
    """Stable 63-bit seed from a master seed and any number of labels.

    Uses the first 8 bytes of SHA-256 over the joined labels, so the value is
    independent of Python's per-process hash randomization.
    """
    text = "/".join([str(int(master))] + [str(label) for label in labels])
    digest = hashes.Hash(hashes.SHA256())
    digest.update(text.encode("utf-8"))
    return int.from_bytes(digest.finalize()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
