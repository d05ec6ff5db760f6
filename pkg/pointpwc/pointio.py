from __future__ import annotations

import struct
from pathlib import Path
from typing import Any

import numpy as np

from pointpwc.autodiff import Tensor
from pointpwc.errors import GeometryError

MAGIC = b"PPWC"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def write_points(path: Path, points: Any, binary: bool = False) -> Path:
    path = Path(path)
    array = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=np.float64)
    if array.ndim != 2 or array.shape[1] != 3:
        raise GeometryError(f"点文件要求 (N, 3) 数组，实际为 {array.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_suffix(path.suffix + ".tmp")
    if binary:
        payload = _HEADER.pack(MAGIC, VERSION, array.shape[0]) + array.astype("<f8").tobytes(order="C")
        temp_file.write_bytes(payload)
    else:
        lines = ["%.17g %.17g %.17g\n" % tuple(row) for row in array]
        temp_file.write_text("".join(lines), encoding="ascii")
    temp_file.replace(path)
    return path


def read_points(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise GeometryError(f"点文件不存在: {path}")
    blob = path.read_bytes()
    if blob[: len(MAGIC)] == MAGIC:
        return _read_binary(path, blob)
    rows = []
    for line_no, line in enumerate(blob.decode("ascii").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 3:
            raise GeometryError(f"{path}:{line_no} 需要 3 个数值，实际为 {len(fields)}")
        try:
            rows.append([float(value) for value in fields])
        except ValueError as exc:
            raise GeometryError(f"{path}:{line_no} 无法解析数值: {exc}") from exc
    if not rows:
        raise GeometryError(f"点文件为空: {path}")
    return np.asarray(rows, dtype=np.float64)


def _read_binary(path: Path, blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise GeometryError(f"二进制点文件头不完整: {path}")
    _magic, version, count = _HEADER.unpack_from(blob, 0)
    if version != VERSION:
        raise GeometryError(f"不支持的二进制点文件版本: {version}")
    expected = _HEADER.size + count * 3 * 8
    if len(blob) != expected:
        raise GeometryError(f"二进制点文件长度不符: {path} ({len(blob)} != {expected})")
    data = np.frombuffer(blob, dtype="<f8", count=count * 3, offset=_HEADER.size)
    return data.reshape(count, 3).astype(np.float64)
