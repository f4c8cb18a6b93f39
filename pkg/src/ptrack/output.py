"""Endpoint, timeseries and pathline writers.

Text files share one schema: a few ``#`` header lines (format version,
config digest, column names) then one whitespace-separated record per line,
floats with 17 significant digits so a decode restores the exact bits.

Timeseries protocols:

``critical_single``
    every worker appends to ``timeseries.dat``; one lock spans exactly one
    record's encode and append.
``consolidated``
    each worker appends fixed-width little-endian records to its own
    ``timeseries.ts.w<k>`` unit; after each output step the driver calls
    :func:`consolidate_step`, which appends the step's records as text to
    ``timeseries.dat`` and truncates the units.
``parallel_exclusive``
    each worker writes text to its own ``timeseries.w<k>.dat``; nothing is
    merged.

Pathlines always use per-worker ``pathline.w<k>.dat`` files.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
import threading
from pathlib import Path

import numpy as np

from .tracking import ParticleArrays, Status

FORMAT_VERSION = 1
TS_MAGIC = "PTRACE-TS"
PATH_MAGIC = "PTRACE-PATH"
EP_MAGIC = "PTRACE-EP"
BIN_MAGIC = b"PTRB"
BIN_HEADER = struct.Struct("<4sIII")  # magic, version, ncols, record bytes

PROTOCOLS = ("critical_single", "consolidated", "parallel_exclusive")
PROTOCOL_ALIASES = {"critical": "critical_single", "single": "critical_single",
                    "binary": "consolidated", "parallel": "parallel_exclusive",
                    "exclusive": "parallel_exclusive"}

_INT_FIELDS = {"time_index", "particle_id", "group", "cell", "layer", "segment"}
TS_FIELDS = ("time_index", "time", "particle_id", "group", "cell", "layer",
             "x", "y", "z", "xloc", "yloc", "zloc")
PATH_FIELDS = TS_FIELDS + ("segment",)


def _dtype(fields):
    return np.dtype([(f, "<i8" if f in _INT_FIELDS else "<f8") for f in fields])


TS_DTYPE = _dtype(TS_FIELDS)
PATH_DTYPE = _dtype(PATH_FIELDS)

EP_FIELDS = ("particle_id", "group", "status", "t0", "cell0", "x0", "y0", "z0",
             "t1", "cell1", "x1", "y1", "z1")
EP_DTYPE = np.dtype([("particle_id", "<i8"), ("group", "<i8"), ("status", "<i8"),
                     ("t0", "<f8"), ("cell0", "<i8"), ("x0", "<f8"), ("y0", "<f8"), ("z0", "<f8"),
                     ("t1", "<f8"), ("cell1", "<i8"), ("x1", "<f8"), ("y1", "<f8"), ("z1", "<f8")])


class OutputFormatError(ValueError):
    pass


def normalize_protocol(kind: str) -> str:
    kind = PROTOCOL_ALIASES.get(kind, kind)
    if kind not in PROTOCOLS:
        raise ValueError(f"unknown output protocol {kind!r}; choose from {PROTOCOLS}")
    return kind


def config_digest(items) -> str:
    """Short stable digest of physics-relevant configuration ``(key, value)`` pairs."""
    text = "\n".join(f"{k}={v!r}" for k, v in sorted(dict(items).items()))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _line_format(dtype) -> str:
    return " ".join("%d" if dtype[n].kind == "i" else "%.17g" for n in dtype.names) + "\n"


def header_text(magic: str, digest: str, fields) -> str:
    return f"# {magic} v{FORMAT_VERSION}\n# config {digest}\n# columns {' '.join(fields)}\n"


def rows_to_records(rows: np.ndarray, dtype=TS_DTYPE) -> np.ndarray:
    """Convert kernel buffer rows (float64, tracking.RECORD_FIELDS order) to records."""
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, rows.shape[-1] if np.ndim(rows) else 1)
    out = np.empty(rows.shape[0], dtype=dtype)
    for c, name in enumerate(dtype.names):
        out[name] = rows[:, c]
    return out


def encode_text(records: np.ndarray) -> str:
    fmt = _line_format(records.dtype)
    return "".join([fmt % r for r in records.tolist()])


# -- protocols -----------------------------------------------------------------


class _WorkerObserver:
    __slots__ = ("protocol", "worker_id")

    def __init__(self, protocol, worker_id):
        self.protocol = protocol
        self.worker_id = worker_id

    def write_block(self, rows):
        self.protocol.write_block(self.worker_id, rows)


class OutputProtocol:
    """Base class; subclasses own the per-run file handles."""

    kind = ""

    def __init__(self, out_dir, n_workers: int, digest: str = "0" * 16, base: str = "timeseries",
                 dtype=TS_DTYPE):
        if n_workers < 1:
            raise ValueError(f"n_workers must be >= 1, got {n_workers}")
        self.out_dir = Path(out_dir)
        self.n_workers = n_workers
        self.digest = digest
        self.base = base
        self.dtype = dtype
        self.magic = PATH_MAGIC if dtype is PATH_DTYPE else TS_MAGIC
        self._handles: list = []

    def header(self) -> str:
        return header_text(self.magic, self.digest, self.dtype.names)

    def open(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self

    def observer(self, worker_id: int) -> _WorkerObserver:
        return _WorkerObserver(self, worker_id)

    def write_block(self, worker_id: int, rows) -> None:
        for rec in rows_to_records(rows, self.dtype):
            self.write_record(worker_id, rec)

    def write_record(self, worker_id: int, record) -> None:
        raise NotImplementedError

    def end_step(self, time_index: int) -> int:
        """Serial hook after each output step; flushes and returns merged count."""
        self.flush()
        return 0

    def flush(self):
        for fh in self._handles:
            fh.flush()

    def close(self):
        for fh in self._handles:
            if not fh.closed:
                fh.close()
        self._handles = []

    def paths(self) -> list[Path]:
        raise NotImplementedError

    def __enter__(self):
        return self.open()

    def __exit__(self, *exc):
        self.close()

    def _text_handle(self, path):
        fh = open(path, "w", buffering=1 << 20)
        fh.write(self.header())
        self._handles.append(fh)
        return fh


class CriticalSingle(OutputProtocol):
    kind = "critical_single"

    def open(self):
        super().open()
        self._lock = threading.Lock()
        self._fmt = _line_format(self.dtype)
        self._fh = self._text_handle(self.paths()[0])
        return self

    def write_record(self, worker_id, record):
        # exclusion region: one record's encode + append
        with self._lock:
            self._fh.write(self._fmt % tuple(record.tolist()))

    def write_block(self, worker_id, rows):
        fmt, fh, lock = self._fmt, self._fh, self._lock
        for rec in rows_to_records(rows, self.dtype).tolist():
            with lock:
                fh.write(fmt % rec)

    def paths(self):
        return [self.out_dir / f"{self.base}.dat"]


class ParallelExclusive(OutputProtocol):
    kind = "parallel_exclusive"

    def open(self):
        super().open()
        self._units = [self._text_handle(p) for p in self.paths()]
        return self

    def write_record(self, worker_id, record):
        self._units[worker_id].write(_line_format(self.dtype) % tuple(record.tolist()))

    def write_block(self, worker_id, rows):
        self._units[worker_id].write(encode_text(rows_to_records(rows, self.dtype)))

    def paths(self):
        return [self.out_dir / f"{self.base}.w{k}.dat" for k in range(self.n_workers)]


class Consolidated(OutputProtocol):
    kind = "consolidated"

    def open(self):
        super().open()
        self._text = self._text_handle(self.paths()[0])
        hdr = BIN_HEADER.pack(BIN_MAGIC, FORMAT_VERSION, len(self.dtype.names), self.dtype.itemsize)
        self._units = []
        for p in self.unit_paths():
            fh = open(p, "w+b", buffering=1 << 20)
            fh.write(hdr)
            self._handles.append(fh)
            self._units.append(fh)
        return self

    def write_record(self, worker_id, record):
        self._units[worker_id].write(np.asarray(record, dtype=self.dtype).tobytes())

    def write_block(self, worker_id, rows):
        self._units[worker_id].write(rows_to_records(rows, self.dtype).tobytes())

    def end_step(self, time_index):
        return consolidate_step(self, time_index, self.paths()[0])

    def unit_paths(self):
        return [self.out_dir / f"{self.base}.ts.w{k}" for k in range(self.n_workers)]

    def paths(self):
        return [self.out_dir / f"{self.base}.dat"]


_PROTOCOL_CLASSES = {"critical_single": CriticalSingle, "consolidated": Consolidated,
                     "parallel_exclusive": ParallelExclusive}


def open_protocol(kind: str, out_dir, n_workers: int, digest: str = "0" * 16,
                  base: str = "timeseries", dtype=TS_DTYPE) -> OutputProtocol:
    cls = _PROTOCOL_CLASSES[normalize_protocol(kind)]
    return cls(out_dir, n_workers, digest, base, dtype).open()


def write_record(protocol: OutputProtocol, worker_id: int, record) -> None:
    protocol.write_record(worker_id, record)


def _read_unit(fh, dtype, worker_id, path):
    fh.flush()
    fh.seek(0)
    raw = fh.read()
    if len(raw) < BIN_HEADER.size:
        raise OutputFormatError(f"{path} (worker {worker_id}): truncated header")
    magic, version, ncols, recsize = BIN_HEADER.unpack_from(raw)
    if magic != BIN_MAGIC or version != FORMAT_VERSION:
        raise OutputFormatError(f"{path} (worker {worker_id}): bad magic/version {magic!r} v{version}")
    if ncols != len(dtype.names) or recsize != dtype.itemsize:
        raise OutputFormatError(f"{path} (worker {worker_id}): schema mismatch ({ncols} cols, {recsize} B)")
    body = memoryview(raw)[BIN_HEADER.size:]
    if len(body) % recsize:
        whole = len(body) // recsize
        raise OutputFormatError(f"{path} (worker {worker_id}): partial record at byte offset "
                                f"{BIN_HEADER.size + whole * recsize}")
    return np.frombuffer(body, dtype=dtype).copy()


def consolidate_step(protocol: Consolidated, time_index: int, consolidated_path=None) -> int:
    """Append all binary records of ``time_index`` to the text file, then reset the units."""
    if not isinstance(protocol, Consolidated):
        raise TypeError("consolidate_step needs a consolidated protocol")
    text = protocol._text
    if consolidated_path is not None and Path(consolidated_path) != protocol.paths()[0]:
        raise ValueError(f"protocol consolidates into {protocol.paths()[0]}, not {consolidated_path}")
    total = 0
    for w, (fh, path) in enumerate(zip(protocol._units, protocol.unit_paths())):
        recs = _read_unit(fh, protocol.dtype, w, path)
        if recs.size:
            bad = np.flatnonzero(recs["time_index"] != time_index)
            if bad.size:
                off = BIN_HEADER.size + int(bad[0]) * protocol.dtype.itemsize
                raise OutputFormatError(
                    f"{path} (worker {w}): record at byte offset {off} has time_index "
                    f"{int(recs['time_index'][bad[0]])}, expected {time_index}")
            text.write(encode_text(recs))
            total += recs.size
        fh.seek(BIN_HEADER.size)
        fh.truncate()
    text.flush()
    return total


# -- decoding ------------------------------------------------------------------


def _decode_text(path, dtype, magic):
    path = Path(path)
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith(f"# {magic} "):
        raise OutputFormatError(f"{path}:1: expected '# {magic} v{FORMAT_VERSION}' header, got {first.strip()!r}")
    if first.split()[2] != f"v{FORMAT_VERSION}":
        raise OutputFormatError(f"{path}:1: unsupported version {first.split()[2]}")
    data = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != len(dtype.names):
                raise OutputFormatError(f"{path}:{lineno}: expected {len(dtype.names)} columns, got {len(parts)}")
            try:
                data.append(tuple(int(p) if dtype[i].kind == "i" else float(p) for i, p in enumerate(parts)))
            except ValueError as exc:
                raise OutputFormatError(f"{path}:{lineno}: {exc}") from None
    return np.array(data, dtype=dtype)


def _paths(path_or_paths):
    if isinstance(path_or_paths, (str, os.PathLike)):
        return [Path(path_or_paths)]
    return [Path(p) for p in path_or_paths]


def decode_timeseries(path_or_paths) -> np.ndarray:
    """Decode text files or binary ``.ts.w<k>`` units; several paths give the union."""
    parts = []
    for p in _paths(path_or_paths):
        if ".ts.w" in p.name:
            with open(p, "rb") as fh:
                parts.append(_read_unit(fh, TS_DTYPE, p.name.rsplit("w", 1)[-1], p))
        else:
            parts.append(_decode_text(p, TS_DTYPE, TS_MAGIC))
    return np.concatenate(parts) if parts else np.empty(0, dtype=TS_DTYPE)


def decode_pathlines(path_or_paths) -> np.ndarray:
    parts = [_decode_text(p, PATH_DTYPE, PATH_MAGIC) for p in _paths(path_or_paths)]
    return np.concatenate(parts) if parts else np.empty(0, dtype=PATH_DTYPE)


def sort_records(records: np.ndarray) -> np.ndarray:
    """Order by (particle_id, time_index, time) for cross-run comparison."""
    keys = [records["time"], records["time_index"], records["particle_id"]]
    return records[np.lexsort(keys)]


# -- endpoints -------------------------------------------------------------------


def endpoint_records(particles: ParticleArrays) -> np.ndarray:
    """One record per particle, ordered by particle id."""
    out = np.empty(len(particles), dtype=EP_DTYPE)
    pos = particles.positions()
    out["particle_id"] = particles.pid
    out["group"] = particles.group
    out["status"] = particles.status
    out["t0"] = particles.init_time
    out["cell0"] = particles.init_cell
    out["x0"], out["y0"], out["z0"] = particles.init_xyz.T
    out["t1"] = particles.time
    out["cell1"] = particles.cells
    out["x1"], out["y1"], out["z1"] = pos.T
    return out[np.argsort(out["particle_id"], kind="stable")]


def write_endpoint_file(records, path, digest: str = "0" * 16) -> None:
    """Write endpoint records (array or :class:`ParticleArrays`) serially."""
    if isinstance(records, ParticleArrays):
        records = endpoint_records(records)
    buf = io.StringIO()
    buf.write(header_text(EP_MAGIC, digest, EP_FIELDS))
    status_names = {int(s): s.name.lower() for s in Status}
    fmt = "%d %d %s %.17g %d %.17g %.17g %.17g %.17g %d %.17g %.17g %.17g\n"
    for r in records.tolist():
        buf.write(fmt % (r[0], r[1], status_names[r[2]], *r[3:]))
    Path(path).write_text(buf.getvalue())


def read_endpoint_file(path) -> np.ndarray:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(f"# {EP_MAGIC} "):
        raise OutputFormatError(f"{path}:1: missing '# {EP_MAGIC}' header")
    codes = {s.name.lower(): int(s) for s in Status}
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        p = line.split()
        if len(p) != len(EP_FIELDS) or p[2] not in codes:
            raise OutputFormatError(f"{path}:{lineno}: malformed endpoint record")
        rows.append((int(p[0]), int(p[1]), codes[p[2]], float(p[3]), int(p[4]), *map(float, p[5:9]),
                     int(p[9]), *map(float, p[10:13])))
    return np.array(rows, dtype=EP_DTYPE)
