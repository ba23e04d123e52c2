"""
Content-addressed cache of raw backend responses.
"""

import hashlib
import json
import os
import tempfile
import threading
import time
from pathlib import Path
from typing import Any, Dict, Optional, Union

from scopeagent.utils import logger


def cache_key(model_id: str, prompt_bytes: bytes) -> str:
    """sha256 over the model id, a NUL separator and the serialized prompt."""
    h = hashlib.sha256()
    h.update(model_id.encode("utf-8"))
    h.update(b"\0")
    h.update(prompt_bytes)
    return h.hexdigest()


class ResponseCache:
    """Raw response files plus a JSON metadata sidecar per key.

    Reads are lock-free; writes are serialized and land atomically via rename.
    """

    def __init__(self, cache_dir: Union[str, Path]):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.stats = {"hits": 0, "misses": 0, "writes": 0}
        self._lock = threading.Lock()
        logger.debug("Response cache initialized", path=str(self.cache_dir))

    def _paths(self, key: str):
        shard = self.cache_dir / key[:2]
        return shard / f"{key}.txt", shard / f"{key}.json"

    def get(self, key: str) -> Optional[str]:
        raw_path, _ = self._paths(key)
        try:
            raw = raw_path.read_bytes().decode("utf-8")
        except FileNotFoundError:
            with self._lock:
                self.stats["misses"] += 1
            return None
        except OSError as e:
            logger.error("Error reading from cache", path=str(raw_path), error=str(e))
            with self._lock:
                self.stats["misses"] += 1
            return None
        with self._lock:
            self.stats["hits"] += 1
        return raw

    def metadata(self, key: str) -> Optional[Dict[str, Any]]:
        _, meta_path = self._paths(key)
        try:
            with open(meta_path, "r", encoding="utf-8") as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError):
            return None

    def put(self, key: str, raw: str, meta: Optional[Dict[str, Any]] = None) -> None:
        raw_path, meta_path = self._paths(key)
        sidecar = {"key": key, "bytes": len(raw.encode("utf-8")), "timestamp": time.time(), **(meta or {})}
        with self._lock:
            try:
                raw_path.parent.mkdir(parents=True, exist_ok=True)
                self._atomic_write(meta_path, json.dumps(sidecar, indent=2, sort_keys=True).encode("utf-8"))
                self._atomic_write(raw_path, raw.encode("utf-8"))
                self.stats["writes"] += 1
            except OSError as e:
                logger.error("Error writing to cache", path=str(raw_path), error=str(e))

    def __contains__(self, key: str) -> bool:
        return self._paths(key)[0].is_file()

    @staticmethod
    def _atomic_write(path: Path, data: bytes) -> None:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def log_stats(self) -> None:
        total = self.stats["hits"] + self.stats["misses"]
        if total:
            logger.info("Response cache statistics", hits=self.stats["hits"], misses=self.stats["misses"],
                        hit_rate=f"{self.stats['hits'] / total:.2%}")
