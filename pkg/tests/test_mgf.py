"""Tests for magnetrec.mgf."""

from pathlib import Path

import numpy as np
import pytest

from magnetrec.errors import InputNotFoundError
from magnetrec.mgf import (
    HEADER,
    MAGIC,
    MatrixFormatError,
    TruncatedFileError,
    decode_matrix,
    encode_matrix,
    read_matrix,
    write_matrix,
)


class TestEncodeMatrix:
    """Tests for the MGF1 header and payload layout."""

    def test_header_fields(self) -> None:
        blob = encode_matrix(np.zeros((3, 5), dtype=np.float32))
        magic, rows, dim, code = HEADER.unpack_from(blob)
        assert magic == MAGIC
        assert (rows, dim, code) == (3, 5, 0)
        assert len(blob) == 16 + 3 * 5 * 4

    def test_payload_is_little_endian_row_major(self) -> None:
        values = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        blob = encode_matrix(values)
        assert blob[16:] == np.array([1, 2, 3, 4], dtype="<f4").tobytes()

    def test_dtype_codes(self) -> None:
        assert HEADER.unpack_from(encode_matrix(np.zeros((1, 1), dtype=np.float64)))[3] == 1
        assert HEADER.unpack_from(encode_matrix(np.zeros((1, 1), dtype=np.int64)))[3] == 2

    def test_vector_stored_as_column(self) -> None:
        blob = encode_matrix(np.arange(4, dtype=np.int64))
        assert HEADER.unpack_from(blob)[1:3] == (4, 1)

    def test_unsupported_dtype(self) -> None:
        with pytest.raises(MatrixFormatError, match="Unsupported dtype"):
            encode_matrix(np.zeros((2, 2), dtype=np.int8))


class TestDecodeMatrix:
    """Tests for reading MGF1 blobs."""

    def test_truncated_payload(self) -> None:
        blob = encode_matrix(np.ones((4, 4), dtype=np.float32))
        with pytest.raises(TruncatedFileError, match="expected 64 payload bytes"):
            decode_matrix(blob[:-4], Path("x.mgf"))

    def test_truncated_header(self) -> None:
        with pytest.raises(TruncatedFileError):
            decode_matrix(b"MGF1", Path("x.mgf"))

    def test_bad_magic(self) -> None:
        blob = b"NOPE" + encode_matrix(np.ones((1, 1), dtype=np.float32))[4:]
        with pytest.raises(MatrixFormatError, match="Bad magic"):
            decode_matrix(blob, Path("x.mgf"))

    def test_unknown_dtype_code(self) -> None:
        blob = HEADER.pack(MAGIC, 1, 1, 9) + b"\x00" * 8
        with pytest.raises(MatrixFormatError, match="Unknown dtype code 9"):
            decode_matrix(blob, Path("x.mgf"))


class TestReadWriteMatrix:
    """Tests for file-level helpers."""

    def test_write_creates_parents(self, tmp_path: Path) -> None:
        path = tmp_path / "nested" / "m.mgf"
        values = np.arange(6, dtype=np.float64).reshape(2, 3)
        write_matrix(path, values)
        loaded = read_matrix(path)
        assert loaded.dtype == np.float64
        np.testing.assert_array_equal(loaded, values)

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(InputNotFoundError, match="Missing matrix file"):
            read_matrix(tmp_path / "absent.mgf")
