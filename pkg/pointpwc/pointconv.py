from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from pointpwc.autodiff import DEFAULT_SLOPE
from pointpwc.autodiff import MlpParams
from pointpwc.autodiff import Tensor
from pointpwc.autodiff import as_tensor
from pointpwc.autodiff import gather_rows
from pointpwc.autodiff import leaky_relu
from pointpwc.autodiff import linear
from pointpwc.autodiff import matmul
from pointpwc.autodiff import mlp_forward
from pointpwc.autodiff import reshape
from pointpwc.autodiff import subtract
from pointpwc.autodiff import swap_last
from pointpwc.errors import ShapeError
from pointpwc.geom import NeighborIndex
from pointpwc.geom import PointCloud
from pointpwc.geom import as_cloud


@dataclass
class FeatureCloud:
    cloud: PointCloud
    features: Tensor

    def __post_init__(self) -> None:
        self.cloud = as_cloud(self.cloud)
        self.features = as_tensor(self.features)
        shape = self.features.shape
        if len(shape) != 2 or shape[0] != len(self.cloud) or shape[1] < 1:
            raise ShapeError("feature_cloud", [self.cloud.positions.shape, shape])

    @property
    def positions(self) -> Tensor:
        return self.cloud.positions

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.cloud)


@dataclass
class PointConvParams:
    weight_net: MlpParams
    projection_weight: Tensor
    projection_bias: Tensor
    k: int
    slope: float = DEFAULT_SLOPE

    def __post_init__(self) -> None:
        if self.weight_net.in_width != 3:
            raise ShapeError("pointconv", [self.weight_net.layers[0][0].shape], "weight_net 输入必须为 3 维方向向量")
        if self.projection_bias.shape != (self.projection_weight.shape[0],):
            raise ShapeError("pointconv", [self.projection_weight.shape, self.projection_bias.shape])
        if self.projection_weight.shape[1] % self.weight_net.out_width:
            raise ShapeError("pointconv", [self.projection_weight.shape], f"输入宽度需为 C_mid={self.weight_net.out_width} 的倍数")

    @property
    def mid_width(self) -> int:
        return self.weight_net.out_width

    @property
    def in_width(self) -> int:
        return self.projection_weight.shape[1] // self.mid_width

    @property
    def out_width(self) -> int:
        return self.projection_weight.shape[0]


def per_point_linear(features: Any, weights: Tensor, bias: Tensor, slope: float | None = DEFAULT_SLOPE) -> Tensor:
    """The same linear map on every row (a 1×1 convolution); ``slope=None`` skips the activation."""
    features = as_tensor(features)
    if not features.shape or features.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeError("per_point_linear", [features.shape, weights.shape, bias.shape])
    out = linear(features, weights, bias)
    if slope is None:
        return out
    return leaky_relu(out, slope)


def pointconv(centers: Any, source: FeatureCloud, nbrs: NeighborIndex, params: PointConvParams) -> FeatureCloud:
    centers = as_cloud(centers)
    m = len(centers)
    if len(nbrs) != m or nbrs.k != params.k:
        raise ShapeError("pointconv", [nbrs.indices.shape, (m, params.k)])
    if source.width != params.in_width:
        raise ShapeError("pointconv", [source.features.shape, params.projection_weight.shape], "特征宽度与参数不匹配")

    index = nbrs.indices
    neighbor_feats = gather_rows(source.features, index)
    directions = subtract(gather_rows(source.positions, index), reshape(centers.positions, (m, 1, 3)))
    weights = mlp_forward(params.weight_net, directions)
    # (m, C_mid, k) @ (m, k, C) accumulates the per-neighbour outer products.
    aggregated = matmul(swap_last(weights), neighbor_feats)
    flat = reshape(aggregated, (m, params.mid_width * source.width))
    out = leaky_relu(linear(flat, params.projection_weight, params.projection_bias), params.slope)
    return FeatureCloud(centers, out)
