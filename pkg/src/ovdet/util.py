"""Small runtime helpers shared across modules."""

from __future__ import annotations

import json
import os
import tempfile

from .errors import InputError

THREADS_ENV = "OVW_THREADS"


def worker_count() -> int:
    """Worker threads for batch stages, from the environment; default 1."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def write_text_atomic(path: str, text: str) -> None:
    """Write via a temp file and rename, so readers never see partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    """The one JSON serialization used for every artifact the package
    writes; fixed separators and key order make outputs byte-stable."""
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def write_json_atomic(path: str, obj) -> None:
    write_text_atomic(path, dump_json(obj))
