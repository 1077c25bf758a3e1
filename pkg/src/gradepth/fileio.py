"""Float map interchange: PFM (grayscale, 32-bit) and plain CSV grids.

Invalid pixels are encoded as NaN in both formats and reappear as
``valid=False``. PFM follows the usual convention: header ``Pf``, a
``width height`` line, a scale line whose sign encodes endianness
(negative means little-endian; the magnitude is not applied), and rows
stored bottom-up. Color ``PF`` maps are rejected.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .grid import DepthMap

__all__ = [
    "PfmFormatError",
    "CsvFormatError",
    "read_pfm",
    "write_pfm",
    "read_depth_pfm",
    "write_depth_pfm",
    "read_csv_map",
    "write_csv_map",
    "atomic_write_bytes",
    "atomic_write_text",
]


class PfmFormatError(ValueError):
    pass


class CsvFormatError(ValueError):
    pass


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temporary file in the target directory plus rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _read_token(fh) -> bytes:
    """Next whitespace-delimited header token."""
    token = b""
    while True:
        c = fh.read(1)
        if not c:
            raise PfmFormatError("unexpected end of file in header")
        if c in b" \t\r\n":
            if token:
                return token
            continue
        token += c


def write_pfm(path: str, values: np.ndarray) -> None:
    """Write a 2-D array as a little-endian grayscale PFM (32-bit floats)."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("PFM writer expects a 2-D map")
    height, width = values.shape
    arr = np.ascontiguousarray(np.flipud(values.astype("<f4")))
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    atomic_write_bytes(path, header + arr.tobytes())


def read_pfm(path: str) -> np.ndarray:
    """Read a grayscale PFM into a float32 (H, W) array (top-down rows)."""
    with open(path, "rb") as fh:
        magic = _read_token(fh)
        if magic == b"PF":
            raise PfmFormatError("color PFM maps are not supported")
        if magic != b"Pf":
            raise PfmFormatError(f"bad magic {magic!r}, expected 'Pf'")
        try:
            width = int(_read_token(fh))
            height = int(_read_token(fh))
            scale = float(_read_token(fh))
        except ValueError as exc:
            raise PfmFormatError(f"malformed header: {exc}") from exc
        if width <= 0 or height <= 0:
            raise PfmFormatError(f"bad dimensions {width}x{height}")
        if scale == 0.0:
            raise PfmFormatError("scale must be nonzero")
        payload = fh.read()
    expected = width * height * 4
    if len(payload) < expected:
        raise PfmFormatError(
            f"truncated payload: {len(payload)} bytes, expected {expected}"
        )
    if len(payload) > expected:
        raise PfmFormatError(
            f"trailing data: {len(payload)} bytes, expected {expected}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return np.flipud(arr.astype(np.float32))


def write_depth_pfm(path: str, depth: DepthMap) -> None:
    """Write a DepthMap as PFM; invalid pixels become NaN."""
    values = depth.values.copy()
    values[~depth.valid] = np.nan
    write_pfm(path, values)


def read_depth_pfm(path: str) -> DepthMap:
    """Read a PFM as a DepthMap; non-finite samples are marked invalid."""
    arr = read_pfm(path).astype(np.float64)
    valid = np.isfinite(arr)
    return DepthMap(np.where(valid, arr, 0.0), valid)


def write_csv_map(path: str, depth: DepthMap) -> None:
    """Plain decimal grid, one row per line, 'nan' for invalid pixels.

    Values are printed at 17 significant digits, which round-trips float64
    exactly.
    """
    lines = []
    for vals, mask in zip(depth.values, depth.valid):
        lines.append(",".join(format(v, ".17g") if ok else "nan"
                              for v, ok in zip(vals, mask)))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_csv_map(path: str) -> DepthMap:
    with open(path, "r", encoding="utf-8") as fh:
        rows = [line.strip() for line in fh if line.strip()]
    if not rows:
        raise CsvFormatError("ragged/empty grid")
    parsed: list[list[float]] = []
    width = None
    for k, row in enumerate(rows):
        try:
            entries = [float(tok) for tok in row.split(",")]
        except ValueError as exc:
            raise CsvFormatError(f"row {k}: {exc}") from exc
        if width is None:
            width = len(entries)
        elif len(entries) != width:
            raise CsvFormatError(
                f"ragged/empty grid: row {k} has {len(entries)} entries, expected {width}"
            )
        parsed.append(entries)
    arr = np.array(parsed, dtype=np.float64)
    valid = np.isfinite(arr)
    return DepthMap(np.where(valid, arr, 0.0), valid)
