from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.spatial import cKDTree

from pointpwc.autodiff import Tensor
from pointpwc.autodiff import add
from pointpwc.autodiff import as_tensor
from pointpwc.autodiff import divide
from pointpwc.autodiff import gather_rows
from pointpwc.autodiff import multiply
from pointpwc.autodiff import reduce_sum
from pointpwc.autodiff import reshape
from pointpwc.autodiff import sqrt
from pointpwc.autodiff import square
from pointpwc.autodiff import subtract
from pointpwc.errors import GeometryError
from pointpwc.errors import ShapeError

IDW_EPS = 1e-8
IDW_SNAP_EPS = 1e-10
KNN_BACKENDS = ("brute", "kdtree")

SceneFlow = Tensor


class PointCloud:
    __slots__ = ("positions",)

    def __init__(self, positions: Any):
        tensor = as_tensor(positions)
        if len(tensor.shape) != 2 or tensor.shape[1] != 3 or tensor.shape[0] < 1:
            raise GeometryError(f"点云形状必须为 (N>=1, 3)，实际为 {tensor.shape}")
        if not np.all(np.isfinite(tensor.data)):
            raise GeometryError("点云坐标包含非有限值")
        self.positions = tensor

    @property
    def array(self) -> np.ndarray:
        return self.positions.data

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class NeighborIndex:
    indices: np.ndarray

    @property
    def k(self) -> int:
        return int(self.indices.shape[1])

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def as_cloud(value: Any) -> PointCloud:
    if isinstance(value, PointCloud):
        return value
    return PointCloud(value)


def _points(value: Any) -> np.ndarray:
    if isinstance(value, PointCloud):
        return value.array
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def squared_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Fixed per-axis summation order: every caller gets bit-identical distances.
    diff = a - b
    return diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]


def furthest_point_sample(cloud: Any, m: int, start: int = 0) -> np.ndarray:
    points = _points(cloud)
    n = points.shape[0]
    if not 1 <= m <= n:
        raise GeometryError(f"FPS 采样数 m={m} 超出范围 [1, {n}]")
    if not 0 <= start < n:
        raise GeometryError(f"FPS 起始索引 {start} 超出范围 [0, {n})")

    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    min_d2 = squared_distance(points, points[start])
    min_d2[start] = -np.inf
    for index in range(1, m):
        chosen = int(np.argmax(min_d2))
        selected[index] = chosen
        min_d2 = np.minimum(min_d2, squared_distance(points, points[chosen]))
        min_d2[selected[: index + 1]] = -np.inf
    return selected


def _knn_brute(queries: np.ndarray, refs: np.ndarray, k: int) -> np.ndarray:
    d2 = squared_distance(queries[:, None, :], refs[None, :, :])
    return np.argsort(d2, axis=1, kind="stable")[:, :k].astype(np.int64)


def _knn_kdtree(queries: np.ndarray, refs: np.ndarray, k: int) -> np.ndarray:
    tree = cKDTree(refs)
    dist, _ = tree.query(queries, k=k)
    kth = np.asarray(dist, dtype=np.float64).reshape(len(queries), -1)[:, -1]
    radii = kth * (1.0 + 1e-9) + 1e-12
    candidates = tree.query_ball_point(queries, r=radii)
    out = np.empty((len(queries), k), dtype=np.int64)
    for row, found in enumerate(candidates):
        cand = np.asarray(sorted(found), dtype=np.int64)
        d2 = squared_distance(refs[cand], queries[row])
        order = np.argsort(d2, kind="stable")[:k]
        out[row] = cand[order]
    return out


def knn(queries: Any, refs: Any, k: int, backend: str = "brute") -> NeighborIndex:
    query_points = _points(queries)
    ref_points = _points(refs)
    if k < 1 or k > ref_points.shape[0]:
        raise GeometryError(f"KNN k={k} 超出参考点数 {ref_points.shape[0]}")
    if backend == "brute":
        return NeighborIndex(_knn_brute(query_points, ref_points, k))
    if backend == "kdtree":
        return NeighborIndex(_knn_kdtree(query_points, ref_points, k))
    raise GeometryError(f"不支持的 KNN 后端: {backend}")


def knn_excluding_self(cloud: Any, k: int, backend: str = "brute") -> NeighborIndex:
    """k neighbours of every point in its own cloud, the point itself removed."""
    points = _points(cloud)
    n = points.shape[0]
    k = min(k, n - 1)
    if k < 1:
        raise GeometryError(f"点数 {n} 不足以构建不含自身的邻域")
    indices = knn(points, points, k + 1, backend=backend).indices
    is_self = indices == np.arange(n)[:, None]
    keep = ~is_self
    keep[~is_self.any(axis=1), -1] = False
    return NeighborIndex(indices[keep].reshape(n, k))


def interpolate_idw(coarse_pts: Any, coarse_vals: Any, fine_pts: Any, k: int, backend: str = "brute") -> Tensor:
    coarse = as_cloud(coarse_pts)
    fine = as_cloud(fine_pts)
    values = as_tensor(coarse_vals)
    if len(values.shape) != 2 or values.shape[0] != len(coarse):
        raise ShapeError("interpolate_idw", [values.shape, coarse.positions.shape])

    nbrs = knn(fine, coarse, k, backend=backend).indices
    n = len(fine)
    offsets = subtract(gather_rows(coarse.positions, nbrs), reshape(fine.positions, (n, 1, 3)))
    dist = sqrt(reduce_sum(square(offsets), axis=-1))
    weights = divide(1.0, add(dist, IDW_EPS))
    weights = divide(weights, reduce_sum(weights, axis=1, keepdims=True))

    snapped = dist.data < IDW_SNAP_EPS
    snapped_rows = snapped.any(axis=1)
    if snapped_rows.any():
        onehot = np.zeros((n, nbrs.shape[1]), dtype=np.float64)
        rows = np.flatnonzero(snapped_rows)
        onehot[rows, np.argmax(snapped[rows], axis=1)] = 1.0
        keep = (~snapped_rows).astype(np.float64)[:, None]
        weights = add(multiply(weights, keep), onehot)

    weighted = multiply(reshape(weights, (n, nbrs.shape[1], 1)), gather_rows(values, nbrs))
    return reduce_sum(weighted, axis=1)


def warp(cloud: Any, flow: Any) -> PointCloud:
    base = as_cloud(cloud)
    vectors = as_tensor(flow)
    if vectors.shape != base.positions.shape:
        raise ShapeError("warp", [base.positions.shape, vectors.shape])
    return PointCloud(add(base.positions, vectors))
