"""CSV/JSON emission and the run manifest."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .hashing import hash_bytes

VERSION = "0.1.0"


def _plain(value):
    # numpy scalars and enums reduce to builtins so repr() gives full precision
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        value = value.item()
    if hasattr(value, "value") and not isinstance(value, (int, float, str, bool)):
        value = value.value
    return value


def _cell(value) -> str:
    value = _plain(value)
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)  # mkstemp creates owner-only files
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def emit_metrics(records: Sequence[Mapping], fmt: str, path, fieldnames: Sequence[str] | None = None) -> Path:
    """Write homogeneous ``records`` as RFC 4180 CSV or as ``{"records": [...]}`` JSON."""
    path = Path(path)
    records = [dict(r) for r in records]
    if fmt == "csv":
        names = list(fieldnames) if fieldnames else (list(records[0]) if records else [])
        for r in records:
            if set(r) != set(names):
                raise ValueError("records are not homogeneous")
        buf = io.StringIO(newline="")
        writer = csv.writer(buf)
        writer.writerow(names)
        for r in records:
            writer.writerow([_cell(r[n]) for n in names])
        _write_atomic(path, buf.getvalue().encode())
    elif fmt == "json":
        body = {"records": [{k: _plain(v) for k, v in r.items()} for r in records]}
        _write_atomic(path, (json.dumps(body, indent=2) + "\n").encode())
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def write_json(data, path) -> Path:
    path = Path(path)
    _write_atomic(path, (json.dumps(data, indent=2, sort_keys=True, default=_plain) + "\n").encode())
    return path


@dataclass
class RunManifest:
    config_digest: str
    seed: int
    subcommand: str
    version: str = VERSION
    outputs: list = field(default_factory=list)
    wall_clock: float = 0.0

    @classmethod
    def for_run(cls, config_bytes: bytes, seed: int, subcommand: str) -> "RunManifest":
        return cls(hash_bytes(config_bytes).hex(), seed, subcommand)

    def write(self, path) -> Path:
        return write_json(asdict(self), path)


def outputs_listing(paths: Iterable) -> list[str]:
    return sorted(Path(p).name for p in paths)
