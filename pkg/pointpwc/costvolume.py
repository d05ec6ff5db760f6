from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from pointpwc.autodiff import MlpParams
from pointpwc.autodiff import Tensor
from pointpwc.autodiff import as_tensor
from pointpwc.autodiff import concat
from pointpwc.autodiff import gather_rows
from pointpwc.autodiff import mlp_forward
from pointpwc.autodiff import multiply
from pointpwc.autodiff import reduce_sum
from pointpwc.autodiff import reshape
from pointpwc.autodiff import scale
from pointpwc.autodiff import subtract
from pointpwc.errors import GeometryError
from pointpwc.errors import ShapeError
from pointpwc.geom import knn
from pointpwc.pointconv import FeatureCloud

MATCHING_KINDS = ("learned", "correlation")


@dataclass
class CostVolumeParams:
    cost_mlp: MlpParams | None
    wp_net: MlpParams
    wq_net: MlpParams
    k: int = 16
    matching: str = "learned"
    knn_backend: str = "brute"

    def __post_init__(self) -> None:
        if self.matching not in MATCHING_KINDS:
            raise ShapeError("cost_volume", [], f"未知的 matching: {self.matching}")
        if self.wp_net.in_width != 3 or self.wq_net.in_width != 3:
            raise ShapeError("cost_volume", [self.wp_net.layers[0][0].shape, self.wq_net.layers[0][0].shape], "W_P/W_Q 输入必须为 3 维")
        if self.wp_net.out_width != self.wq_net.out_width:
            raise ShapeError("cost_volume", [self.wp_net.layers[-1][0].shape, self.wq_net.layers[-1][0].shape], "W_P/W_Q 输出宽度不一致")
        if self.matching == "learned":
            if self.cost_mlp is None:
                raise ShapeError("cost_volume", [], "learned matching 需要 cost_mlp")
            if self.cost_mlp.out_width != self.depth or (self.cost_mlp.in_width - 3) % 2:
                raise ShapeError("cost_volume", [self.cost_mlp.layers[0][0].shape, self.cost_mlp.layers[-1][0].shape], "cost_mlp 宽度必须为 (2C+3) → D")

    @property
    def depth(self) -> int:
        return self.wq_net.out_width


@dataclass
class CostVolume:
    values: Tensor
    pair_terms: int
    cost_evaluations: int

    def __len__(self) -> int:
        return self.values.shape[0]


def matching_cost(p_feats: Any, q_feats: Any, p_pos: Any, q_pos: Any, params: CostVolumeParams) -> Tensor:
    """cost(p, q) = MLP(concat(f, g, q - p)); rows of the four inputs are aligned."""
    p_feats, q_feats = as_tensor(p_feats), as_tensor(q_feats)
    p_pos, q_pos = as_tensor(p_pos), as_tensor(q_pos)
    if p_feats.shape != q_feats.shape or p_pos.shape != q_pos.shape or p_pos.shape[:-1] != p_feats.shape[:-1] or p_pos.shape[-1] != 3:
        raise ShapeError("matching_cost", [p_feats.shape, q_feats.shape, p_pos.shape, q_pos.shape])
    if params.matching == "correlation":
        return scale(reduce_sum(multiply(p_feats, q_feats), axis=-1, keepdims=True), 1.0 / p_feats.shape[-1])
    assert params.cost_mlp is not None
    if params.cost_mlp.in_width != 2 * p_feats.shape[-1] + 3:
        raise ShapeError("matching_cost", [p_feats.shape, params.cost_mlp.layers[0][0].shape])
    return mlp_forward(params.cost_mlp, concat(p_feats, q_feats, subtract(q_pos, p_pos)))


def cost_volume(p: FeatureCloud, q: FeatureCloud, params: CostVolumeParams) -> CostVolume:
    n1, n2, k = len(p), len(q), params.k
    if k < 1 or k > min(n1, n2):
        raise GeometryError(f"cost volume 邻域 k={k} 超出点数 (n1={n1}, n2={n2})")
    if p.width != q.width:
        raise ShapeError("cost_volume", [p.features.shape, q.features.shape])

    q_index = knn(p.cloud, q.cloud, k, backend=params.knn_backend).indices
    p_index = knn(p.cloud, p.cloud, k, backend=params.knn_backend).indices
    self_index = np.repeat(np.arange(n1, dtype=np.int64)[:, None], k, axis=1)

    # point-to-patch: p_i against its neighbourhood N_Q(p_i) in Q
    p_pos = gather_rows(p.positions, self_index)
    q_pos = gather_rows(q.positions, q_index)
    costs = matching_cost(gather_rows(p.features, self_index), gather_rows(q.features, q_index), p_pos, q_pos, params)
    wq = mlp_forward(params.wq_net, subtract(q_pos, p_pos))
    point_to_patch = reduce_sum(multiply(wq, costs), axis=1)

    # patch-to-patch: aggregate point-to-patch costs over N_P(p_c)
    directions = subtract(gather_rows(p.positions, p_index), reshape(p.positions, (n1, 1, 3)))
    wp = mlp_forward(params.wp_net, directions)
    values = reduce_sum(multiply(wp, gather_rows(point_to_patch, p_index)), axis=1)
    # (centre, p_i, q_j) triples via N_P then N_Q
    pair_terms = int(q_index[p_index].size)
    cost_evaluations = int(np.prod(costs.shape[:-1]))
    return CostVolume(values=values, pair_terms=pair_terms, cost_evaluations=cost_evaluations)
