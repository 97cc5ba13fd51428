"""Run manifests: digests, seeds, and effective configuration for replay.

Every CLI run directory gets a manifest.json recording what ran, with which
effective settings and seeds, over which input files (by sha256), producing
which output files (by sha256).  Re-running with the same manifest inputs
must reproduce the same output digests; anything that would break that
(e.g. archive timestamps) is kept out of the output formats.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from contextlib import contextmanager
from pathlib import Path

from .errors import UsageError

_LOCK_NAME = ".certmark-lock"


def file_digest(path: str | Path) -> str:
    """Hex sha256 of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: str | Path, payload: dict) -> None:
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    text = json.dumps(payload, sort_keys=True, indent=2)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text + "\n")


def read_json(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


@contextmanager
def run_lock(out_dir: str | Path):
    """Exclusive lock on a run directory via O_EXCL lock-file creation.

    A stale or concurrent lock raises UsageError instead of corrupting the
    run; the lock is removed on exit even when the body fails.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock_path = out_dir / _LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(
            f"run directory {out_dir} is locked by another run "
            f"(remove {lock_path} if that run is dead)"
        )
    try:
        os.write(fd, f"pid {os.getpid()}\n".encode())
        os.close(fd)
        yield out_dir
    finally:
        try:
            os.unlink(lock_path)
        except FileNotFoundError:
            pass


def write_manifest(
    out_dir: str | Path,
    subcommand: str,
    config: dict,
    seeds: dict,
    inputs: dict[str, str | Path],
    outputs: dict[str, str | Path],
    duration_s: float,
    extra: dict | None = None,
) -> Path:
    """Write manifest.json for one run and return its path.

    ``inputs`` and ``outputs`` map logical names to file paths; both are
    digested.  ``config`` must be the effective configuration (defaults and
    config-file values already merged under the CLI's precedence rules).
    """
    from . import __version__

    out_dir = Path(out_dir)
    manifest = {
        "tool": "certmark",
        "version": __version__,
        "subcommand": subcommand,
        "config": config,
        "seeds": seeds,
        "inputs": {k: {"path": str(v), "sha256": file_digest(v)} for k, v in inputs.items()},
        "outputs": {k: {"path": str(v), "sha256": file_digest(v)} for k, v in outputs.items()},
        "duration_s": round(float(duration_s), 3),
        "written_at_unix": int(time.time()),
    }
    if extra:
        manifest["extra"] = extra
    path = out_dir / "manifest.json"
    write_json(path, manifest)
    return path
