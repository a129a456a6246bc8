"""Small shared helpers: atomic writes, seed derivation, JSON logging."""

from __future__ import annotations

import json
import logging
import os
import sys
import tempfile
import zlib
from pathlib import Path

import numpy as np


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def derive_seed(seed: int, *names: str | int) -> np.random.SeedSequence:
    """Child seed for a named stage; every stage can be re-run in isolation.

    Names are hashed with CRC-32 so the derivation is stable across processes
    and platforms (unlike ``hash()``).
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for n in names:
        words.append(n if isinstance(n, int) else zlib.crc32(str(n).encode()))
    return np.random.SeedSequence(words)


def make_rng(seed: int, *names: str | int) -> np.random.Generator:
    """PCG64 generator for ``seed`` and stage ``names``."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *names)))


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        doc = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        extra = getattr(record, "fields", None)
        if extra:
            doc.update(extra)
        return json.dumps(doc, sort_keys=True)


def configure_json_logging(level: int = logging.INFO) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger("hsirefine")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False
