"""On-disk store: content-addressed description cache and append-only run files.

Layout under the store root::

    cache/<first two hex chars>/<digest>.json
    runs/<run_id>/run.json
    runs/<run_id>/results.jsonl
"""

from __future__ import annotations

import errno
import hashlib
import json
import logging
import os
import tempfile
import threading
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

from .errors import IntegrityError, PermanentError

logger = logging.getLogger(__name__)

STORE_ENV = "PRISM_STORE"
DEFAULT_STORE = "prism-store"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def cache_key(model: str, image_digest: str, instruction: str, params_canonical: str) -> str:
    payload = canonical_json([model, image_digest, instruction, params_canonical])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass(frozen=True)
class CacheEntry:
    key: str
    description: str
    finish_reason: str
    created_at: str
    model: str = ""


def resolve_store_root(flag: str | None = None, config_value: str | None = None) -> Path:
    return Path(flag or os.environ.get(STORE_ENV) or config_value or DEFAULT_STORE)


class Store:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.cache_dir = self.root / "cache"
        self.runs_dir = self.root / "runs"
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.runs_dir.mkdir(parents=True, exist_ok=True)

    def _entry_path(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.json"

    def cache_get(self, key: str) -> CacheEntry | None:
        path = self._entry_path(key)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            entry = CacheEntry(**data)
        except FileNotFoundError:
            return None
        except (OSError, ValueError, TypeError) as exc:
            logger.warning("ignoring corrupt cache entry %s: %s", path, exc)
            return None
        if entry.key != key:
            logger.warning("ignoring cache entry %s with mismatched key", path)
            return None
        return entry

    def cache_put(self, entry: CacheEntry) -> bool:
        """Write ``entry`` unless the key already exists. Returns True if written.

        The entry is written to a temp file and hard-linked into place, so
        concurrent writers of one key cannot tear it and the first link wins.
        """
        path = self._entry_path(entry.key)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    fh.write(json.dumps(asdict(entry), ensure_ascii=False, indent=1))
                    fh.flush()
                    os.fsync(fh.fileno())
                try:
                    os.link(tmp, path)
                except FileExistsError:
                    existing = self.cache_get(entry.key)
                    if existing is None:
                        # corrupt entry on disk; replace it
                        os.replace(tmp, path)
                        tmp = None
                        return True
                    if existing.description != entry.description:
                        logger.warning("cache key %s already holds a different description; keeping the first",
                                       entry.key[:16])
                    return False
            finally:
                if tmp is not None:
                    os.unlink(tmp)
        except OSError as exc:
            if exc.errno in (errno.ENOSPC, errno.EDQUOT, errno.EROFS, errno.EACCES):
                raise PermanentError(f"cannot write cache entry: {exc}") from exc
            raise
        return True

    def run_dir(self, run_id: str) -> Path:
        return self.runs_dir / run_id


def append_outcome(run_path: str | Path, record: dict) -> None:
    """Append one record as a single write; the line lands whole or not at all."""
    line = json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n"
    data = line.encode("utf-8")
    fd = os.open(run_path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        written = os.write(fd, data)
        if written != len(data):
            raise OSError(errno.EIO, f"short write to {run_path}")
        os.fsync(fd)
    except OSError as exc:
        if exc.errno in (errno.ENOSPC, errno.EDQUOT):
            raise PermanentError(f"cannot append to {run_path}: {exc}") from exc
        raise
    finally:
        os.close(fd)


def read_records(run_path: str | Path) -> tuple[list[dict], int]:
    """Parse a results file. Returns (records, byte offset of the end of the last good line).

    A trailing line that is unterminated or unparseable is treated as a torn
    write and ignored; a bad line anywhere else means the file is corrupt.
    """
    path = Path(run_path)
    if not path.exists():
        return [], 0
    raw = path.read_bytes()
    lines = raw.split(b"\n")
    records, offset = [], 0
    for i, line in enumerate(lines):
        is_last = i == len(lines) - 1
        if is_last and line == b"":
            break
        try:
            if is_last:
                raise ValueError("unterminated line")
            rec = json.loads(line.decode("utf-8"))
            if not isinstance(rec, dict):
                raise ValueError("record is not an object")
        except (ValueError, UnicodeDecodeError) as exc:
            trailing = is_last or (i == len(lines) - 2 and lines[-1] == b"")
            if trailing:
                logger.warning("ignoring partial trailing record in %s", path)
                break
            raise IntegrityError(f"{path}: line {i + 1} is corrupt ({exc})") from None
        records.append(rec)
        offset += len(line) + 1
    return records, offset


def load_completed(run_path: str | Path) -> set[str]:
    records, _ = read_records(run_path)
    return {r["question_id"] for r in records if r.get("type", "outcome") == "outcome"}


def repair_tail(run_path: str | Path) -> None:
    """Drop a torn trailing line so further appends start on a clean line."""
    path = Path(run_path)
    if not path.exists():
        return
    _, offset = read_records(path)
    if offset != path.stat().st_size:
        with path.open("r+b") as fh:
            fh.truncate(offset)


class RunWriter:
    """The single serialized writer for one results file."""

    def __init__(self, run_path: str | Path):
        self.path = Path(run_path)
        self._lock = threading.Lock()

    def append(self, record: dict) -> None:
        with self._lock:
            append_outcome(self.path, record)
