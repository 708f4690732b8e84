"""On-disk formats for rasters and program files.

Packed-bit raster files start with a 16-byte little-endian header::

    offset  size  field
    0       4     magic b"CSGR"
    4       4     uint32 record count
    8       2     uint16 ndim (2 or 3)
    10      2     uint16 dim0 (rows)
    12      2     uint16 dim1 (cols)
    14      2     uint16 dim2 (depth; 1 for 2D)

followed by ``count`` records, each the C-order cell bits packed LSB-first
(``np.packbits(..., bitorder="little")``) and padded to a whole byte.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .lang import GrammarConfig, Program, format_program, parse_program

MAGIC = b"CSGR"
_HEADER = struct.Struct("<4sIHHHH")
assert _HEADER.size == 16


class FormatError(ValueError):
    pass


def pack_rasters(rasters: Sequence[np.ndarray]) -> bytes:
    if len(rasters) == 0:
        raise FormatError("need at least one raster to fix the dimensions")
    shape = rasters[0].shape
    if len(shape) not in (2, 3):
        raise FormatError(f"unsupported raster shape {shape}")
    dims = tuple(shape) + (1,) * (3 - len(shape))
    parts = [_HEADER.pack(MAGIC, len(rasters), len(shape), *dims)]
    for r in rasters:
        if r.shape != shape:
            raise FormatError("all rasters in one file must share a shape")
        parts.append(np.packbits(np.asarray(r, dtype=bool).ravel(), bitorder="little").tobytes())
    return b"".join(parts)


def unpack_rasters(data: bytes) -> list[np.ndarray]:
    if len(data) < _HEADER.size:
        raise FormatError("truncated header")
    magic, count, ndim, d0, d1, d2 = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if ndim not in (2, 3):
        raise FormatError(f"bad ndim {ndim}")
    shape = (d0, d1, d2)[:ndim]
    n = int(np.prod(shape))
    rec = (n + 7) // 8
    if len(data) != _HEADER.size + count * rec:
        raise FormatError("payload size does not match header")
    out = []
    for i in range(count):
        off = _HEADER.size + i * rec
        bits = np.unpackbits(np.frombuffer(data, np.uint8, rec, off), count=n, bitorder="little")
        out.append(bits.astype(bool).reshape(shape))
    return out


def write_rasters(path, rasters: Sequence[np.ndarray]) -> None:
    Path(path).write_bytes(pack_rasters(rasters))


def read_rasters(path) -> list[np.ndarray]:
    return unpack_rasters(Path(path).read_bytes())


def write_pgm(path, raster: np.ndarray) -> None:
    """Binary (P5) PGM with values 0/255."""
    raster = np.asarray(raster, dtype=bool)
    if raster.ndim != 2:
        raise FormatError("PGM holds 2D rasters only")
    h, w = raster.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + (raster.astype(np.uint8) * 255).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise FormatError("only binary PGM (P5) is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise FormatError("16-bit PGM not supported")
    pixels = np.frombuffer(data, np.uint8, w * h, pos + 1)
    return pixels.reshape(h, w) > maxval // 2


def read_programs(path, config: GrammarConfig, enforce_grid: bool = True) -> list[Program]:
    """One program per non-blank line."""
    lines = Path(path).read_text().splitlines()
    return [parse_program(line, config, enforce_grid) for line in lines if line.strip()]


def write_programs(path, programs: Iterable[Program]) -> None:
    Path(path).write_text("".join(format_program(p) + "\n" for p in programs))


def load_targets(path) -> list[np.ndarray]:
    """Rasters from a packed-bit file, a PGM, or a directory of PGMs."""
    path = Path(path)
    if path.is_dir():
        return [read_pgm(p) for p in sorted(path.glob("*.pgm"))]
    if path.suffix == ".pgm":
        return [read_pgm(path)]
    return read_rasters(path)
