"""
Error types, seeded random streams and content hashing shared across the package.
"""
import hashlib
from typing import Any, Dict, Type

import numpy as np

from ren.logger import get_logger

logger = get_logger()


class RenError(Exception):
    """Base class for every failure the package raises on purpose."""

    def __init__(self, detail: str, **context: Any):
        super().__init__(detail)
        self.detail = detail
        self.context: Dict[str, Any] = context

    def __str__(self) -> str:
        return self.detail


class ShapeError(RenError):
    pass


class DomainError(RenError):
    pass


class NonFiniteError(RenError):
    pass


class ConfigError(RenError):
    def __init__(self, detail: str, violations=None, **context: Any):
        super().__init__(detail, **context)
        self.violations = list(violations or [detail])


class IdxFormatError(RenError):
    pass


class CheckpointError(RenError):
    pass


def ren_error(error_cls: Type[RenError], detail: str, **context: Any) -> RenError:
    """Log the failure and hand the exception back for the caller to raise."""
    logger.error(f"{error_cls.__name__}: {detail}")
    return error_cls(detail, **context)


def _label_words(label: Any) -> int:
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def rng_stream(seed: int, *labels: Any) -> np.random.Generator:
    """Child generator of the root seed, keyed by labels.

    Streams with different labels are independent, so adding a consumer never
    shifts the draws of another one.
    """
    spawn_key = tuple(_label_words(label) for label in labels)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key))


def content_hash(payload: bytes) -> str:
    """Git-style blob hash of a byte string."""
    header = f"blob {len(payload)}\0".encode("ascii")
    return hashlib.sha1(header + payload).hexdigest()


def file_hash(path: str) -> str:
    with open(path, "rb") as f:
        return content_hash(f.read())
