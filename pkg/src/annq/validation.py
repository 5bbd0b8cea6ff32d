"""Shared input checks and error types."""

from __future__ import annotations

import zlib

import numpy as np

__all__ = [
    "FormatError",
    "check_vectors",
    "check_query",
    "check_codes",
    "substream",
]


class FormatError(ValueError):
    """Structural problem in a data file or byte stream.

    ``exit_code`` steers the CLI exit-code scheme: 2 for "wrong kind of
    file was supplied" (bad magic, mismatched shapes between inputs),
    3 for mid-file corruption (truncation, inconsistent records).
    """

    def __init__(self, message, exit_code=3):
        super().__init__(message)
        self.exit_code = exit_code


def check_vectors(X, *, name="X", dtype=np.float32, allow_empty=False) -> np.ndarray:
    """Validate a 2-D set of finite vectors, returning a contiguous array.

    Accepts anything array-like; a single vector must be passed as shape
    (1, d). Raises ValueError on non-finite values or bad shape.
    """
    X = np.ascontiguousarray(X, dtype=dtype)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D (n, d), got shape {X.shape}")
    n, d = X.shape
    if n == 0 and not allow_empty:
        raise ValueError(f"{name} must contain at least one vector")
    if n > 0 and d < 1:
        raise ValueError(f"{name} must have dimensionality >= 1, got d={d}")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_query(q, dim, *, name="q") -> np.ndarray:
    """Validate a single query vector of the expected dimensionality."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != dim:
        raise ValueError(f"{name} has dimension {q.shape[0]}, expected {dim}")
    if not np.isfinite(q).all():
        raise ValueError(f"{name} contains non-finite values")
    return q


def check_codes(codes, k_count, *, m_count=None, name="codes") -> np.ndarray:
    """Validate an (n, M) index matrix with every entry in [0, K)."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError(f"{name} must be 2-D (n, M), got shape {codes.shape}")
    if m_count is not None and codes.shape[1] != m_count:
        raise ValueError(
            f"{name} has {codes.shape[1]} parts per row, expected {m_count}"
        )
    if codes.size and (codes.min() < 0 or codes.max() >= k_count):
        raise ValueError(f"{name} contains indices outside [0, {k_count})")
    return codes


def substream(seed, name: str) -> np.random.Generator:
    """Named deterministic random substream derived from one root seed."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode()),))
    )
