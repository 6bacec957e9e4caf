"""On-disk formats.

* checkpoint: ``MOFM``, u32 version, u32 length + UTF-8 JSON config, u32
  tensor count, then per tensor: u32 length + name, u32 length + numpy
  dtype string, u32 ndim, u64 dims, raw little-endian bytes;
* codebook: ``MBK1``, u32 T, u32 D, float32 row-major values;
* tokens: JSON lines ``{"id": ..., "tokens": [...]}``;
* renders: binary PGM (P5), 8-bit;
* scores: CSV ``frame_index,score``; ground truth CSV ``frame_index,label``;
* manifest: JSON with config hash, seed, inputs, outputs and versions.
"""
from __future__ import annotations

import csv
import hashlib
import json
import platform
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MOFM"
VERSION = 1
BOOK_MAGIC = b"MBK1"


class FormatError(ValueError):
    pass


# -- checkpoints ----------------------------------------------------------
def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def write_checkpoint(path, config: dict, tensors: dict) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        a = np.asarray(tensors[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        parts += [_pack_str(name), _pack_str(a.dtype.str), struct.pack("<I", a.ndim),
                  struct.pack(f"<{a.ndim}Q", *a.shape), np.ascontiguousarray(a).tobytes()]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def read_checkpoint(path) -> tuple:
    """Returns ``(config, tensors)``."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        dtype = np.dtype(r.string())
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
        n = int(np.prod(shape)) * dtype.itemsize
        tensors[name] = np.frombuffer(r.take(n), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(r.data):
        raise FormatError(f"{path}: trailing bytes after tensor table")
    return config, tensors


# -- codebook -------------------------------------------------------------
def write_codebook(path, book: np.ndarray) -> None:
    book = np.asarray(book, dtype="<f4")
    if book.ndim != 2:
        raise ValueError("codebook must be (T, D)")
    Path(path).write_bytes(BOOK_MAGIC + struct.pack("<II", *book.shape) + book.tobytes())


def read_codebook(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != BOOK_MAGIC:
        raise FormatError(f"{path}: not a codebook file")
    t, d = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * t * d:
        raise FormatError(f"{path}: expected {t}x{d} values")
    return np.frombuffer(data[12:], dtype="<f4").reshape(t, d).astype(np.float32)


# -- tokens ---------------------------------------------------------------
def write_tokens(path, ids, tokens) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in zip(ids, np.asarray(tokens)):
            fh.write(json.dumps({"id": i, "tokens": [int(t) for t in row]}) + "\n")


def read_tokens(path) -> tuple:
    ids, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ids.append(str(rec["id"]))
                rows.append([int(t) for t in rec["tokens"]])
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{n}: bad token record ({exc})") from None
    if len({len(r) for r in rows}) > 1:
        raise FormatError(f"{path}: token rows differ in length")
    return ids, np.array(rows, dtype=np.int64).reshape(len(rows), -1)


# -- images ---------------------------------------------------------------
def energy_to_gray(energy: np.ndarray) -> np.ndarray:
    return np.round(255.0 * np.clip(np.asarray(energy, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)


def write_pgm(path, energy: np.ndarray) -> None:
    img = energy_to_gray(energy)
    if img.ndim != 2:
        raise ValueError("a PGM render needs a 2D array")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    pix = data[pos + 1:]
    if len(pix) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, found {len(pix)}")
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w)


# -- CSV ------------------------------------------------------------------
def write_scores(path, scores, frames=None) -> None:
    scores = np.asarray(scores, dtype=np.float64)
    frames = np.arange(len(scores)) if frames is None else frames
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "score"])
        for f, s in zip(frames, scores):
            w.writerow([int(f), repr(float(s))])


def _read_two_columns(path, second: str, cast) -> tuple:
    frames, vals = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "frame_index" not in reader.fieldnames or second not in reader.fieldnames:
            raise FormatError(f"{path}: expected header frame_index,{second}")
        for n, row in enumerate(reader, 2):
            try:
                frames.append(int(row["frame_index"]))
                vals.append(cast(row[second]))
            except (TypeError, ValueError):
                raise FormatError(f"{path}:{n}: bad row {row}") from None
    return np.array(frames, dtype=np.int64), np.array(vals)


def read_scores(path) -> tuple:
    return _read_two_columns(path, "score", float)


def read_ground_truth(path) -> tuple:
    return _read_two_columns(path, "label", int)


# -- manifests ------------------------------------------------------------
def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    import scipy

    from . import __version__

    return {"mofm": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(path, command: str, argv, profile, seed: int, outputs=(), inputs=()) -> dict:
    man = {
        "command": command,
        "argv": list(argv),
        "profile": profile.name,
        "config": profile.to_dict(),
        "config_hash": profile.hash(),
        "seed": int(seed),
        "inputs": {str(p): file_digest(p) for p in inputs if Path(p).is_file()},
        "outputs": {str(p): file_digest(p) for p in outputs if Path(p).is_file()},
        "versions": versions(),
    }
    Path(path).write_text(json.dumps(man, indent=2, sort_keys=True, default=list) + "\n", encoding="utf-8")
    return man


__all__ = ["FormatError", "read_checkpoint", "read_codebook", "read_ground_truth", "read_pgm", "read_scores",
           "read_tokens", "write_checkpoint", "write_codebook", "write_manifest", "write_pgm", "write_scores",
           "write_tokens"]
