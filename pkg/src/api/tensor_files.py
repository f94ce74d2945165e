"""Tensor Files - MXT1 (MXFP4 blocks) and F64M (float64 matrix) readers and writers

Both formats are little-endian with a fixed header:
    MXT1: magic, rows u32, cols u32, orientation u8, then one 17-byte record
          per block in row-major block order (16 bytes of packed FP4 codes,
          element 2i in the low nibble and 2i+1 in the high nibble, then the
          E8M0 scale byte)
    F64M: magic, rows u32, cols u32, then row-major float64 values
"""

import struct
from pathlib import Path

import numpy as np

from src.core.errors import FileFormatError
from src.core.mxfp_core import BLOCK_SIZE, MxTensor
from src.utils.log import get_logger

logger = get_logger(__name__)

MXT1_MAGIC = b"MXT1"
F64M_MAGIC = b"F64M"
_MXT1_HEADER = struct.Struct("<4sIIB")
_F64M_HEADER = struct.Struct("<4sII")
_RECORD_BYTES = BLOCK_SIZE // 2 + 1
_ORIENTATION_CODES = {"row": 0, "col": 1}


def _block_elements(tensor):
    """(num_blocks, 32) codes in the order the scale grid is laid out"""
    if tensor.orientation == "row":
        return tensor.codes.reshape(tensor.rows, -1, BLOCK_SIZE).reshape(-1, BLOCK_SIZE)
    padded_rows = tensor.codes.shape[0]
    grid = tensor.codes.reshape(padded_rows // BLOCK_SIZE, BLOCK_SIZE, tensor.cols)
    return grid.transpose(0, 2, 1).reshape(-1, BLOCK_SIZE)


def encode_mxt1(tensor):
    elements = _block_elements(tensor).astype(np.uint8) & 0xF
    packed = elements[:, 0::2] | (elements[:, 1::2] << 4)
    records = np.concatenate([packed, tensor.scales.reshape(-1, 1).astype(np.uint8)], axis=1)
    header = _MXT1_HEADER.pack(
        MXT1_MAGIC, tensor.rows, tensor.cols, _ORIENTATION_CODES[tensor.orientation]
    )
    return header + records.tobytes()


def decode_mxt1(payload):
    if len(payload) < _MXT1_HEADER.size:
        raise FileFormatError("MXT1 payload shorter than its header")
    magic, rows, cols, orientation_code = _MXT1_HEADER.unpack_from(payload)
    if magic != MXT1_MAGIC:
        raise FileFormatError(f"bad MXT1 magic {magic!r}")
    orientations = {code: name for name, code in _ORIENTATION_CODES.items()}
    if orientation_code not in orientations:
        raise FileFormatError(f"bad MXT1 orientation byte {orientation_code}")
    orientation = orientations[orientation_code]

    lanes, length = (rows, cols) if orientation == "row" else (cols, rows)
    blocks_per_lane = max(-(-length // BLOCK_SIZE), 1)
    n_blocks = lanes * blocks_per_lane
    body = payload[_MXT1_HEADER.size:]
    if len(body) != n_blocks * _RECORD_BYTES:
        raise FileFormatError(
            f"MXT1 body has {len(body)} bytes, expected {n_blocks * _RECORD_BYTES} "
            f"for a {rows}x{cols} {orientation}-blocked tensor"
        )
    records = np.frombuffer(body, dtype=np.uint8).reshape(n_blocks, _RECORD_BYTES)
    packed = records[:, :-1]
    elements = np.empty((n_blocks, BLOCK_SIZE), dtype=np.uint8)
    elements[:, 0::2] = packed & 0xF
    elements[:, 1::2] = packed >> 4
    scales = records[:, -1].copy()

    if orientation == "row":
        codes = elements.reshape(rows, blocks_per_lane * BLOCK_SIZE)
        scales = scales.reshape(rows, blocks_per_lane)
    else:
        codes = (
            elements.reshape(blocks_per_lane, cols, BLOCK_SIZE)
            .transpose(0, 2, 1)
            .reshape(blocks_per_lane * BLOCK_SIZE, cols)
        )
        scales = scales.reshape(blocks_per_lane, cols)
    return MxTensor(rows, cols, orientation, np.ascontiguousarray(codes), scales)


def write_mxt1(path, tensor):
    path = Path(path)
    path.write_bytes(encode_mxt1(tensor))
    logger.debug(f"Wrote MXT1 {tensor.rows}x{tensor.cols} ({tensor.orientation}) to {path}")
    return path


def read_mxt1(path):
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise FileFormatError(f"cannot read {path}: {e}") from e
    tensor = decode_mxt1(payload)
    logger.debug(f"Read MXT1 {tensor.rows}x{tensor.cols} from {path}")
    return tensor


def encode_f64m(matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise FileFormatError(f"F64M holds 2-D matrices, got shape {matrix.shape}")
    rows, cols = matrix.shape
    return _F64M_HEADER.pack(F64M_MAGIC, rows, cols) + matrix.astype("<f8").tobytes()


def decode_f64m(payload):
    if len(payload) < _F64M_HEADER.size:
        raise FileFormatError("F64M payload shorter than its header")
    magic, rows, cols = _F64M_HEADER.unpack_from(payload)
    if magic != F64M_MAGIC:
        raise FileFormatError(f"bad F64M magic {magic!r}")
    body = payload[_F64M_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise FileFormatError(f"F64M body has {len(body)} bytes, expected {rows * cols * 8}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_f64m(path, matrix):
    path = Path(path)
    path.write_bytes(encode_f64m(matrix))
    logger.debug(f"Wrote F64M {np.shape(matrix)} to {path}")
    return path


def read_f64m(path):
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise FileFormatError(f"cannot read {path}: {e}") from e
    return decode_f64m(payload)
