"""Small shared helpers: seed splitting and atomic file writes."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np


def derive_seed(root: int, *path: int) -> int:
    """Counter-based child seed: the same (root, path) always yields the same value."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(root: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(root), spawn_key=tuple(int(p) for p in path)))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
