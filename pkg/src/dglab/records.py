"""Run records: deterministic CSV tables, config hashing and the run manifest."""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

OUT_DIR_ENV = "DGLAB_OUT_DIR"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    if value is None:
        return ""
    return str(value)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def table_bytes(rows: list[dict], columns) -> bytes:
    """CSV with a header row, ``\\n`` line endings and round-trippable floats."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue().encode()


def write_table(path, rows: list[dict], columns) -> Path:
    atomic_write_bytes(path, table_bytes(rows, columns))
    return Path(path)


def read_table(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [dict(zip(header, r)) for r in reader]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    """Git-style blob SHA-1 of the canonical JSON form of ``cfg``."""
    body = canonical_json(cfg).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_default(obj):
    # numpy scalars and arrays that end up in metric summaries
    if hasattr(obj, "tolist"):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def resolve_out_dir(out: str | None, cfg_hash: str) -> Path:
    """``out`` if given, else ``$DGLAB_OUT_DIR``, else ``./runs/<timestamp>-<hash>``."""
    if out:
        return Path(out)
    if os.environ.get(OUT_DIR_ENV):
        return Path(os.environ[OUT_DIR_ENV])
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    return Path("runs") / f"{stamp}-{cfg_hash[:10]}"


@dataclass
class RunManifest:
    """Everything needed to reproduce and audit one command invocation.

    Timestamps live only here; the tables themselves are free of wall-clock
    data so reruns with the same seed produce byte-identical CSVs.
    """

    command: str
    config: dict
    seed: int
    config_hash: str = ""
    started: str = field(default_factory=_now)
    finished: str = ""
    files: dict[str, str] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    status: str = "running"
    version: int = 1

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)

    def add_file(self, path) -> None:
        path = Path(path)
        self.files[path.name] = sha256_file(path)

    def finish(self, status: str = "ok") -> None:
        self.status = status
        self.finished = _now()

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)
        atomic_write_bytes(path, (text + "\n").encode())
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls(**json.load(fh))
