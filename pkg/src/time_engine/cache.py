"""Content-addressed embedding cache (memory, optionally backed by a directory)."""
from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np

CACHE_ENV = "TIME_CACHE_DIR"


def cache_key(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            h.update(str(p.dtype).encode())
            h.update(str(p.shape).encode())
            h.update(np.ascontiguousarray(p).tobytes())
        else:
            h.update(repr(p).encode())
        h.update(b"\x1f")
    return h.hexdigest()


class EmbeddingCache:
    def __init__(self, root: Optional[os.PathLike] = None, use_env: bool = True):
        if root is None and use_env:
            root = os.environ.get(CACHE_ENV) or None
        self.root = Path(root) if root else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
        self._memory: Dict[str, np.ndarray] = {}
        self.hits = 0
        self.misses = 0

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.npy"

    def get(self, key: str) -> Optional[np.ndarray]:
        if key in self._memory:
            return self._memory[key]
        if self.root is not None:
            path = self._path(key)
            if path.exists():
                arr = np.load(path)
                self._memory[key] = arr
                return arr
        return None

    def put(self, key: str, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr)
        self._memory[key] = arr
        if self.root is None:
            return
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        # write-temp-then-rename keeps concurrent readers from seeing partial files
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "wb") as f:
            np.save(f, arr)
        os.replace(tmp, path)

    def get_or_compute(self, key: str, fn: Callable[[], np.ndarray]) -> np.ndarray:
        arr = self.get(key)
        if arr is not None:
            self.hits += 1
            return arr
        self.misses += 1
        arr = fn()
        self.put(key, arr)
        return arr
