"""Reader and writer for the MGF1 binary matrix container.

Layout: 16-byte header (magic ``MGF1``, rows u32, dim u32, dtype code u32,
all little-endian) followed by a row-major little-endian payload. Feature
files always use dtype code 0 (f32); the other codes let the same container
hold neighbor ids, induced edges, parameters, and optimizer moments.
"""

from __future__ import annotations

import struct
from typing import TYPE_CHECKING

import numpy as np

from magnetrec.errors import DataError, InputNotFoundError

if TYPE_CHECKING:
    from pathlib import Path

    from numpy.typing import NDArray

MAGIC = b"MGF1"
HEADER = struct.Struct("<4sIII")

DTYPE_CODES: dict[int, np.dtype[np.generic]] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
}


class MatrixFormatError(DataError):
    """Raised when a file is not a valid MGF1 container."""


class TruncatedFileError(MatrixFormatError):
    """Raised when the payload is shorter than the header implies."""

    def __init__(self, path: Path, expected: int, actual: int) -> None:
        self.path = path
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"Truncated file {path}: expected {expected} payload bytes, found {actual}"
        )


def _code_for(dtype: np.dtype[np.generic]) -> int:
    for code, candidate in DTYPE_CODES.items():
        if candidate == dtype.newbyteorder("<"):
            return code
    msg = f"Unsupported dtype for MGF1: {dtype}"
    raise MatrixFormatError(msg)


def encode_matrix(array: NDArray[np.generic]) -> bytes:
    """Serialize a 2-D array (1-D arrays are stored as a single column)."""
    matrix = array.reshape(-1, 1) if array.ndim == 1 else array
    if matrix.ndim != 2:
        msg = f"MGF1 stores 2-D matrices, got shape {array.shape}"
        raise MatrixFormatError(msg)
    code = _code_for(matrix.dtype)
    payload = np.ascontiguousarray(matrix, dtype=DTYPE_CODES[code]).tobytes()
    return HEADER.pack(MAGIC, matrix.shape[0], matrix.shape[1], code) + payload


def decode_matrix(blob: bytes, path: Path) -> NDArray[np.generic]:
    if len(blob) < HEADER.size:
        raise TruncatedFileError(path, HEADER.size, len(blob))
    magic, rows, dim, code = HEADER.unpack_from(blob)
    if magic != MAGIC:
        msg = f"Bad magic in {path}: {magic!r}"
        raise MatrixFormatError(msg)
    if code not in DTYPE_CODES:
        msg = f"Unknown dtype code {code} in {path}"
        raise MatrixFormatError(msg)
    dtype = DTYPE_CODES[code]
    expected = rows * dim * dtype.itemsize
    payload = blob[HEADER.size :]
    if len(payload) < expected:
        raise TruncatedFileError(path, expected, len(payload))
    values = np.frombuffer(payload, dtype=dtype, count=rows * dim)
    return values.reshape(rows, dim).copy()


def write_matrix(path: Path, array: NDArray[np.generic]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_matrix(array))


def read_matrix(path: Path) -> NDArray[np.generic]:
    """Read an MGF1 file into a native-endian array of its stored dtype.

    Raises:
        InputNotFoundError: If the file does not exist.
        MatrixFormatError: On a bad magic or dtype code.
        TruncatedFileError: If the payload is short.
    """
    if not path.is_file():
        raise InputNotFoundError(path, "matrix file")
    return decode_matrix(path.read_bytes(), path)
