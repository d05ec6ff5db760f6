from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict

import numpy as np

from pointpwc.config import NetworkConfig
from pointpwc.errors import CheckpointError
from pointpwc.network import NetworkParams
from pointpwc.network import param_shapes

MAGIC = b"PPWCCKPT"
VERSION = 1
_DTYPE = np.dtype("<f8")


def write_tensors(path: Path, tensors: Dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        array = np.asarray(value, dtype=_DTYPE)
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(array.tobytes(order="C"))
    temp_file = path.with_suffix(path.suffix + ".tmp")
    temp_file.write_bytes(b"".join(chunks))
    temp_file.replace(path)


def read_tensors(path: Path) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"检查点文件不存在: {path}")
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"不是合法的检查点文件: {path}")
    offset = len(MAGIC)
    try:
        version, count = struct.unpack_from("<II", blob, offset)
        offset += 8
        if version != VERSION:
            raise CheckpointError(f"不支持的检查点版本: {version}")
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
            offset += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(blob, dtype=_DTYPE, count=size, offset=offset)
            offset += size * _DTYPE.itemsize
            tensors[name] = data.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"检查点文件已截断或损坏: {path} ({exc})") from exc
    if offset != len(blob):
        raise CheckpointError(f"检查点文件末尾存在多余数据: {path}")
    return tensors


def save_params(path: Path, params: NetworkParams) -> None:
    write_tensors(path, params.arrays)


def load_params(path: Path, config: NetworkConfig) -> NetworkParams:
    """Load and check every tensor against the layout implied by ``config``."""
    stored = read_tensors(path)
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in stored:
            raise CheckpointError(f"检查点缺少张量: {name}", tensor_name=name)
        if tuple(stored[name].shape) != shape:
            raise CheckpointError(
                f"检查点张量形状与网络配置不一致: {name} {tuple(stored[name].shape)} vs {shape}",
                tensor_name=name,
            )
    for name in stored:
        if name not in expected:
            raise CheckpointError(f"检查点包含网络配置中不存在的张量: {name}", tensor_name=name)
    return NetworkParams(config, {name: stored[name] for name in expected})
