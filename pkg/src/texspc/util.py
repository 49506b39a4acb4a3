"""Small shared helpers: the project-wide empirical quantile convention,
digests, deterministic file writing."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile

import numpy as np


def quantile_index(q: float, n: int) -> int:
    """0-based index of the q-quantile in a sorted sample of size n.

    Convention used everywhere in this project: the q-quantile of n sorted
    values is the element at 1-based position ceil(q*n), i.e. the smallest
    order statistic whose empirical fraction is >= q.  Valid for 0 < q <= 1.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile probability must be in (0, 1], got {q}")
    if n < 1:
        raise ValueError("empty sample has no quantiles")
    x = q * n
    # Snap to the exact integer when q*n is an integer up to float noise,
    # so e.g. q=0.5, n=10 lands on position 5 and not 6.
    nearest = round(x)
    if nearest >= 1 and math.isclose(x, nearest, rel_tol=0.0, abs_tol=1e-9):
        k = nearest
    else:
        k = math.ceil(x)
    return min(max(k, 1), n) - 1


def empirical_quantile(sorted_values: np.ndarray, q: float) -> float:
    """q-quantile of an ascending array under the project convention."""
    return float(sorted_values[quantile_index(q, len(sorted_values))])


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def array_digest(arr: np.ndarray) -> str:
    """Digest of an array's contents and shape (C-order float64 bytes)."""
    a = np.ascontiguousarray(arr, dtype=np.float64)
    h = hashlib.sha256()
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    return h.hexdigest()


def dump_json(obj) -> str:
    """Deterministic JSON: sorted keys, no float rounding surprises."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename.

    Guarantees no partial artifact exists at `path` on failure.
    """
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def substream(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a named position in the experiment.

    Identical (seed, key) always yields the same stream, and distinct
    keys yield independent streams, so parallel generation order cannot
    affect results.
    """
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=key))
