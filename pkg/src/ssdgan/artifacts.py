"""Persistence: versioned checkpoint container, sample grids, loss CSV.

Checkpoint layout (format version 1): a UTF-8 text header terminated by an
``END_HEADER`` line, newline padding up to a 64-byte boundary, then the raw
payload. Every tensor is little-endian float32, its blob 64-byte aligned
inside the payload, and the header records name, dtype, shape, offset and
byte length plus a SHA-256 of the whole payload. Files are written to a
temporary path and renamed, so a partially written artifact never appears
at the final path.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .data import denormalize_to_uint8
from .errors import CheckpointIntegrityError, CheckpointVersionError, CheckpointError

MAGIC = "SSDCKPT"
FORMAT_VERSION = 1
ALIGNMENT = 64

CSV_HEADER = ["step", "epoch", "d_loss", "g_loss", "d_real_prob", "d_fake_prob", "g_grad_norm"]


def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def _atomic_write(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc
    finally:
        if tmp.exists():
            tmp.unlink()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(tensors: dict, meta: dict, path):
    """Write named float32 tensors plus string metadata, atomically."""
    blobs = {}
    offset = 0
    directory = []
    for name, arr in tensors.items():
        if " " in name:
            raise ValueError(f"tensor name may not contain spaces: {name!r}")
        arr = np.ascontiguousarray(arr)
        if arr.dtype != np.float32:
            raise ValueError(f"checkpoint tensors must be float32, {name!r} is {arr.dtype}")
        blob = arr.astype("<f4", copy=False).tobytes()
        offset = _align(offset)
        shape = ",".join(str(d) for d in arr.shape) or "-"
        directory.append((name, shape, offset, len(blob)))
        blobs[offset] = blob
        offset += len(blob)
    payload_len = offset

    payload = bytearray(payload_len)
    for off, blob in blobs.items():
        payload[off : off + len(blob)] = blob
    digest = hashlib.sha256(bytes(payload)).hexdigest()

    lines = [f"{MAGIC} {FORMAT_VERSION}"]
    for key, value in meta.items():
        if "\n" in str(value) or " " in key:
            raise ValueError(f"invalid meta entry {key!r}")
        lines.append(f"meta {key}={value}")
    for name, shape, off, nbytes in directory:
        lines.append(f"tensor {name} <f4 {shape} {off} {nbytes}")
    lines.append(f"payload_bytes {payload_len}")
    lines.append(f"payload_sha256 {digest}")
    lines.append("END_HEADER")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    pad = b"\n" * (_align(len(header)) - len(header))
    _atomic_write(path, header + pad + bytes(payload))


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors, meta). Verifies the payload hash."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    marker = b"END_HEADER\n"
    pos = raw.find(marker)
    if pos < 0:
        raise CheckpointIntegrityError(f"{path}: missing header terminator")
    header = raw[: pos + len(marker)].decode("utf-8")
    payload_start = _align(pos + len(marker))

    meta = {}
    directory = []
    payload_len = None
    digest = None
    header_lines = header.strip().splitlines()
    first = header_lines[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(first[1]) != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {first[1]} is not supported (reader is {FORMAT_VERSION})"
        )
    for line in header_lines[1:-1]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition("=")
            meta[key] = value
        elif kind == "tensor":
            name, dtype, shape, off, nbytes = rest.split(" ")
            if dtype != "<f4":
                raise CheckpointIntegrityError(f"{path}: unsupported dtype {dtype}")
            dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
            directory.append((name, dims, int(off), int(nbytes)))
        elif kind == "payload_bytes":
            payload_len = int(rest)
        elif kind == "payload_sha256":
            digest = rest
        else:
            raise CheckpointIntegrityError(f"{path}: unknown header record {kind!r}")
    if payload_len is None or digest is None:
        raise CheckpointIntegrityError(f"{path}: incomplete header")

    payload = raw[payload_start : payload_start + payload_len]
    if len(payload) != payload_len:
        raise CheckpointIntegrityError(
            f"{path}: payload truncated ({len(payload)} of {payload_len} bytes)"
        )
    if hashlib.sha256(payload).hexdigest() != digest:
        raise CheckpointIntegrityError(f"{path}: payload checksum mismatch")

    tensors = {}
    for name, dims, off, nbytes in directory:
        expected = int(np.prod(dims, dtype=np.int64)) * 4 if dims else 4
        if nbytes != expected or off + nbytes > payload_len:
            raise CheckpointIntegrityError(f"{path}: bad directory entry for {name!r}")
        tensors[name] = (
            np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off)
            .reshape(dims)
            .copy()
        )
    return tensors, meta


# ---------------------------------------------------------------------------
# Sample grids
# ---------------------------------------------------------------------------

def write_sample_grid(images: np.ndarray, cols: int, path):
    """Tile [-1,1] images into a PNG grid with 2-pixel black separators."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (n,3,H,W) images, got shape {images.shape}")
    n = images.shape[0]
    if n < 1 or cols < 1:
        raise ValueError("need n >= 1 images and cols >= 1")
    size_h, size_w = images.shape[2], images.shape[3]
    rows = (n + cols - 1) // cols
    gap = 2
    canvas = np.zeros(
        (rows * size_h + (rows - 1) * gap, cols * size_w + (cols - 1) * gap, 3),
        dtype=np.uint8,
    )
    tiles = denormalize_to_uint8(images)
    for idx in range(n):
        r, c = divmod(idx, cols)
        y, x = r * (size_h + gap), c * (size_w + gap)
        canvas[y : y + size_h, x : x + size_w] = tiles[idx]
    buf = io.BytesIO()
    Image.fromarray(canvas).save(buf, format="PNG")
    _atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Loss CSV
# ---------------------------------------------------------------------------

def _format_row(record):
    return [
        str(record.step),
        str(record.epoch),
        f"{record.d_loss:.10g}",
        f"{record.g_loss:.10g}",
        f"{record.d_real_prob:.10g}",
        f"{record.d_fake_prob:.10g}",
        f"{record.g_grad_norm:.10g}",
    ]


def write_loss_csv(log, path):
    """One-shot render of a training log, written atomically."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for record in log.records:
        writer.writerow(_format_row(record))
    _atomic_write(path, buf.getvalue().encode("utf-8"))


class LossCsvWriter:
    """Incremental CSV sink used while training is in flight."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(CSV_HEADER)
        self._fh.flush()

    def append(self, record):
        self._writer.writerow(_format_row(record))

    def flush(self):
        self._fh.flush()

    def close(self):
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_loss_csv(path):
    """Parse a loss CSV back into row dicts of floats/ints."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
        rows = []
        for row in reader:
            rows.append({
                "step": int(row["step"]),
                "epoch": int(row["epoch"]),
                **{k: float(row[k]) for k in CSV_HEADER[2:]},
            })
    return rows
