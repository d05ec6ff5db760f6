from __future__ import annotations

from dataclasses import dataclass
from dataclasses import field
from typing import Any
from typing import List
from typing import Sequence

import numpy as np

from pointpwc.autodiff import Tensor
from pointpwc.autodiff import add
from pointpwc.autodiff import as_tensor
from pointpwc.autodiff import gather_rows
from pointpwc.autodiff import min_axis
from pointpwc.autodiff import reduce_mean
from pointpwc.autodiff import reduce_sum
from pointpwc.autodiff import reshape
from pointpwc.autodiff import scale
from pointpwc.autodiff import sqrt
from pointpwc.autodiff import square
from pointpwc.autodiff import subtract
from pointpwc.errors import ConfigError
from pointpwc.errors import GeometryError
from pointpwc.errors import ShapeError
from pointpwc.geom import NeighborIndex
from pointpwc.geom import PointCloud
from pointpwc.geom import as_cloud
from pointpwc.geom import interpolate_idw
from pointpwc.geom import knn_excluding_self
from pointpwc.geom import warp

NORM_EPS = 1e-12
NORM_FLOOR = float(np.sqrt(NORM_EPS))


@dataclass
class LossWeights:
    alpha: List[float] = field(default_factory=lambda: [0.02, 0.04, 0.08, 0.16])
    beta: List[float] = field(default_factory=lambda: [1.0, 1.0, 0.3])
    k_neighbors: int = 8
    k_interp: int = 3

    def __post_init__(self) -> None:
        if any(a < 0 for a in self.alpha) or not any(a > 0 for a in self.alpha):
            raise ConfigError(f"alpha 必须非负且至少一个 > 0: {self.alpha}")
        if len(self.beta) != 3 or any(b < 0 for b in self.beta):
            raise ConfigError(f"beta 需要 3 个非负值: {self.beta}")


@dataclass
class LaplacianCoords:
    delta: Tensor

    def __len__(self) -> int:
        return self.delta.shape[0]


def _flows(value: Any) -> List[Any]:
    return list(value.flows) if hasattr(value, "flows") else list(value)


def supervised_loss(pred: Any, gt: Any, alpha: Sequence[float]) -> Tensor:
    pred_levels, gt_levels = _flows(pred), _flows(gt)
    if len(pred_levels) != len(gt_levels) or len(alpha) < len(pred_levels):
        raise ShapeError("supervised_loss", [(len(pred_levels),), (len(gt_levels),), (len(alpha),)])
    total: Tensor | None = None
    for weight, flow, target in zip(alpha, pred_levels, gt_levels):
        flow, target = as_tensor(flow), as_tensor(target)
        if flow.shape != target.shape:
            raise ShapeError("supervised_loss", [flow.shape, target.shape])
        if weight == 0:
            continue
        norms = subtract(sqrt(add(reduce_sum(square(subtract(flow, target)), axis=-1), NORM_EPS)), NORM_FLOOR)
        term = scale(reduce_sum(norms), weight)
        total = term if total is None else add(total, term)
    return total if total is not None else Tensor(0.0)


def _cloud_tensor(value: Any) -> Tensor:
    if isinstance(value, PointCloud):
        return value.positions
    tensor = as_tensor(value)
    if len(tensor.shape) != 2 or tensor.shape[1] != 3:
        raise ShapeError("cloud", [tensor.shape, (tensor.shape[0] if tensor.shape else 0, 3)])
    return tensor


def chamfer_loss(P_w: Any, Q: Any) -> Tensor:
    p, q = _cloud_tensor(P_w), _cloud_tensor(Q)
    n, m = p.shape[0], q.shape[0]
    if n == 0 or m == 0:
        raise GeometryError(f"Chamfer 距离要求非空点云 (n={n}, m={m})")
    diff = subtract(reshape(p, (n, 1, 3)), reshape(q, (1, m, 3)))
    d2 = reduce_sum(square(diff), axis=-1)
    forward_min, _ = min_axis(d2, axis=1)
    backward_min, _ = min_axis(d2, axis=0)
    return add(reduce_sum(forward_min), reduce_sum(backward_min))


def _neighbor_table(cloud: Tensor, nbrs: NeighborIndex, operation: str) -> np.ndarray:
    index = nbrs.indices
    if index.ndim != 2 or index.shape[0] != cloud.shape[0]:
        raise ShapeError(operation, [index.shape, cloud.shape])
    return index


def smoothness_loss(flow: Any, cloud: Any, nbrs: NeighborIndex) -> Tensor:
    flow = as_tensor(flow)
    positions = _cloud_tensor(cloud)
    if flow.shape != positions.shape:
        raise ShapeError("smoothness_loss", [flow.shape, positions.shape])
    index = _neighbor_table(positions, nbrs, "smoothness_loss")
    n = flow.shape[0]
    diff = subtract(gather_rows(flow, index), reshape(flow, (n, 1, 3)))
    return reduce_sum(reduce_mean(reduce_sum(square(diff), axis=-1), axis=1))


def laplacian_coords(cloud: Any, nbrs: NeighborIndex) -> LaplacianCoords:
    positions = _cloud_tensor(cloud)
    index = _neighbor_table(positions, nbrs, "laplacian_coords")
    n = positions.shape[0]
    offsets = subtract(gather_rows(positions, index), reshape(positions, (n, 1, 3)))
    return LaplacianCoords(reduce_mean(offsets, axis=1))


def laplacian_reg(
    P_w: Any,
    Q: Any,
    k_inter: int = 3,
    k_neighbors: int = 8,
    p_nbrs: NeighborIndex | None = None,
    q_nbrs: NeighborIndex | None = None,
) -> Tensor:
    p_cloud, q_cloud = as_cloud(P_w), as_cloud(Q)
    if len(p_cloud) < 2 or len(q_cloud) < 2:
        raise GeometryError(f"Laplacian 正则要求每个点云至少 2 个点 (n={len(p_cloud)}, m={len(q_cloud)})")
    if q_nbrs is None:
        q_nbrs = knn_excluding_self(q_cloud, k_neighbors)
    if p_nbrs is None:
        p_nbrs = knn_excluding_self(p_cloud, k_neighbors)
    q_delta = laplacian_coords(q_cloud, q_nbrs).delta
    target = interpolate_idw(q_cloud, q_delta, p_cloud, min(k_inter, len(q_cloud)))
    p_delta = laplacian_coords(p_cloud, p_nbrs).delta
    return reduce_sum(square(subtract(p_delta, target)))


def self_supervised_terms(p_level: Any, q_level: Any, flow: Any, weights: LossWeights) -> List[Tensor]:
    p_cloud = as_cloud(p_level)
    warped = warp(p_cloud, flow)
    p_nbrs = knn_excluding_self(p_cloud, weights.k_neighbors) if len(p_cloud) > 1 else None
    terms = [chamfer_loss(warped, q_level)]
    if p_nbrs is None:
        return terms + [Tensor(0.0), Tensor(0.0)]
    terms.append(smoothness_loss(flow, p_cloud, p_nbrs))
    if len(as_cloud(q_level)) < 2:
        terms.append(Tensor(0.0))
    else:
        terms.append(laplacian_reg(warped, q_level, weights.k_interp, weights.k_neighbors))
    return terms


def self_supervised_loss(P_pyr: Any, Q_pyr: Any, flows: Any, weights: LossWeights) -> Tensor:
    flow_levels = _flows(flows)
    p_levels = [level.cloud for level in P_pyr.levels]
    q_levels = [level.cloud for level in Q_pyr.levels]
    if not (len(flow_levels) == len(p_levels) == len(q_levels)) or len(weights.alpha) < len(flow_levels):
        raise ShapeError("self_supervised_loss", [(len(flow_levels),), (len(p_levels),), (len(q_levels),), (len(weights.alpha),)])
    total: Tensor | None = None
    for level, flow in enumerate(flow_levels):
        alpha = weights.alpha[level]
        if alpha == 0:
            continue
        terms = self_supervised_terms(p_levels[level], q_levels[level], flow, weights)
        level_total: Tensor | None = None
        for beta, term in zip(weights.beta, terms):
            if beta == 0:
                continue
            weighted = scale(term, beta)
            level_total = weighted if level_total is None else add(level_total, weighted)
        if level_total is None:
            continue
        term = scale(level_total, alpha)
        total = term if total is None else add(total, term)
    return total if total is not None else Tensor(0.0)
