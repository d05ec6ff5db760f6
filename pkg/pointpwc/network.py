from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass
from typing import Any
from typing import Dict
from typing import Iterator
from typing import List
from typing import Tuple

import numpy as np

from pointpwc.autodiff import Graph
from pointpwc.autodiff import MlpParams
from pointpwc.autodiff import Tensor
from pointpwc.autodiff import add
from pointpwc.autodiff import as_tensor
from pointpwc.autodiff import concat
from pointpwc.autodiff import gather_rows
from pointpwc.config import NetworkConfig
from pointpwc.costvolume import CostVolume
from pointpwc.costvolume import CostVolumeParams
from pointpwc.costvolume import cost_volume
from pointpwc.errors import ConfigError
from pointpwc.errors import GeometryError
from pointpwc.errors import ShapeError
from pointpwc.geom import PointCloud
from pointpwc.geom import as_cloud
from pointpwc.geom import furthest_point_sample
from pointpwc.geom import interpolate_idw
from pointpwc.geom import knn
from pointpwc.geom import warp
from pointpwc.pointconv import FeatureCloud
from pointpwc.pointconv import PointConvParams
from pointpwc.pointconv import per_point_linear
from pointpwc.pointconv import pointconv

INPUT_CHANNELS = 3
COMPONENTS = ("feature_pyramid", "cost_volume", "upsample_warp", "predictor")


def feature_width(config: NetworkConfig, level: int) -> int:
    """Width of the level feature handed to the cost volume and predictor."""
    base = config.pyramid_channels[level - 1]
    if config.use_upsampled_feature and level < config.levels - 1:
        return 2 * base
    return base


def predictor_in_width(config: NetworkConfig, level: int) -> int:
    width = feature_width(config, level) + config.cost_dims[level - 1]
    if level < config.levels - 1:
        width += 3
        if config.use_predictor_feature:
            width += config.predictor_feature_width
    return width


def _mlp_shapes(prefix: str, widths: List[int]) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    for index in range(len(widths) - 1):
        shapes[f"{prefix}.{index}.w"] = (widths[index + 1], widths[index])
        shapes[f"{prefix}.{index}.b"] = (widths[index + 1],)
    return shapes


def _pointconv_shapes(prefix: str, config: NetworkConfig, in_width: int, out_width: int) -> Dict[str, Tuple[int, ...]]:
    shapes = _mlp_shapes(f"{prefix}.weight_net", [3, config.weight_net_hidden, config.weight_net_channels])
    shapes[f"{prefix}.proj.w"] = (out_width, config.weight_net_channels * in_width)
    shapes[f"{prefix}.proj.b"] = (out_width,)
    return shapes


def param_shapes(config: NetworkConfig) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    channels = [INPUT_CHANNELS] + list(config.pyramid_channels)
    last = config.levels - 1
    for level in range(1, config.levels):
        width = channels[level]
        shapes.update(_pointconv_shapes(f"pyramid.{level}.conv", config, channels[level - 1], width))
        shapes[f"pyramid.{level}.linear.w"] = (width, width)
        shapes[f"pyramid.{level}.linear.b"] = (width,)
        if config.use_upsampled_feature and level < last:
            shapes[f"pyramid.{level}.merge.w"] = (width, channels[level + 1])
            shapes[f"pyramid.{level}.merge.b"] = (width,)

    for level in range(1, config.levels):
        depth = config.cost_dims[level - 1]
        if config.matching == "learned":
            shapes.update(_mlp_shapes(f"cost.{level}.mlp", [2 * feature_width(config, level) + 3, depth, depth]))
        shapes.update(_mlp_shapes(f"cost.{level}.wp", [3, config.weight_net_hidden, depth]))
        shapes.update(_mlp_shapes(f"cost.{level}.wq", [3, config.weight_net_hidden, depth]))

    for level in range(1, config.levels):
        width = predictor_in_width(config, level)
        for index, out_width in enumerate(config.predictor_channels):
            shapes.update(_pointconv_shapes(f"predictor.{level}.conv.{index}", config, width, out_width))
            width = out_width
        shapes.update(_mlp_shapes(f"predictor.{level}.head", [width, config.predictor_feature_width, 3]))
    return shapes


def _is_flow_head_output(name: str) -> bool:
    return name.startswith("predictor.") and ".head.1." in name


@dataclass
class NetworkParams:
    config: NetworkConfig
    arrays: Dict[str, np.ndarray]

    def bind(self, graph: Graph | None = None) -> "BoundParams":
        if graph is None:
            tensors = {name: Tensor(value) for name, value in self.arrays.items()}
        else:
            tensors = {name: graph.leaf(value, name=name) for name, value in self.arrays.items()}
        return BoundParams(self.config, tensors)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {name: value.copy() for name, value in self.arrays.items()})

    def zero_flow_heads(self, levels: List[int] | None = None) -> "NetworkParams":
        for name, value in self.arrays.items():
            if _is_flow_head_output(name) and (levels is None or int(name.split(".")[1]) in levels):
                value[...] = 0.0
        return self

    @property
    def size(self) -> int:
        return int(sum(value.size for value in self.arrays.values()))


def init_params(config: NetworkConfig, seed: int = 0) -> NetworkParams:
    rng = np.random.default_rng(seed)
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b") or _is_flow_head_output(name):
            arrays[name] = np.zeros(shape, dtype=np.float64)
            continue
        fan_out, fan_in = shape
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return NetworkParams(config, arrays)


@dataclass
class PredictorParams:
    convs: List[PointConvParams]
    head: MlpParams
    k: int

    @property
    def in_width(self) -> int:
        return self.convs[0].in_width if self.convs else self.head.in_width


class BoundParams:
    def __init__(self, config: NetworkConfig, tensors: Dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def tensor(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise ConfigError(f"缺少网络参数: {name}") from None

    def mlp(self, prefix: str) -> MlpParams:
        layers = []
        index = 0
        while f"{prefix}.{index}.w" in self.tensors:
            layers.append((self.tensor(f"{prefix}.{index}.w"), self.tensor(f"{prefix}.{index}.b")))
            index += 1
        if not layers:
            raise ConfigError(f"缺少网络参数: {prefix}.0.w")
        return MlpParams(layers, slope=self.config.slope)

    def linear(self, prefix: str) -> Tuple[Tensor, Tensor]:
        return self.tensor(f"{prefix}.w"), self.tensor(f"{prefix}.b")

    def pointconv(self, prefix: str, k: int) -> PointConvParams:
        weight, bias = self.linear(f"{prefix}.proj")
        return PointConvParams(self.mlp(f"{prefix}.weight_net"), weight, bias, k=k, slope=self.config.slope)

    def cost_volume(self, level: int, k: int) -> CostVolumeParams:
        cost_mlp = self.mlp(f"cost.{level}.mlp") if self.config.matching == "learned" else None
        return CostVolumeParams(
            cost_mlp=cost_mlp,
            wp_net=self.mlp(f"cost.{level}.wp"),
            wq_net=self.mlp(f"cost.{level}.wq"),
            k=k,
            matching=self.config.matching,
            knn_backend=self.config.knn_backend,
        )

    def predictor(self, level: int, k: int) -> PredictorParams:
        convs = [self.pointconv(f"predictor.{level}.conv.{index}", k) for index in range(len(self.config.predictor_channels))]
        return PredictorParams(convs=convs, head=self.mlp(f"predictor.{level}.head"), k=k)

    def gradients(self, grad_map: Dict[int, Tensor]) -> Dict[str, np.ndarray]:
        return {name: grad_map[tensor.node_id].data for name, tensor in self.tensors.items() if tensor.node_id is not None}


def _as_bound(params: "NetworkParams | BoundParams") -> BoundParams:
    if isinstance(params, BoundParams):
        return params
    return params.bind(None)


@dataclass
class Pyramid:
    levels: List[FeatureCloud]
    sample_maps: List[np.ndarray]

    @property
    def sizes(self) -> List[int]:
        return [len(level) for level in self.levels]

    def cloud(self, level: int) -> PointCloud:
        return self.levels[level].cloud


@dataclass
class FlowPyramid:
    flows: List[Tensor]
    p_pyramid: Pyramid
    q_pyramid: Pyramid

    @property
    def sizes(self) -> List[int]:
        return [flow.shape[0] for flow in self.flows]

    def __len__(self) -> int:
        return len(self.flows)


@contextlib.contextmanager
def _section(graph: Graph | None, timings: Dict[str, float] | None, component: str, label: str) -> Iterator[None]:
    scope = graph.scope(label) if graph is not None else contextlib.nullcontext()
    start = time.perf_counter()
    with scope:
        yield
    if timings is not None:
        timings[component] = timings.get(component, 0.0) + (time.perf_counter() - start) * 1000.0


def build_pyramid(cloud: Any, raw_feats: Any, params: "NetworkParams | BoundParams") -> Pyramid:
    bound = _as_bound(params)
    config = bound.config
    base = as_cloud(cloud)
    n = len(base)
    if n < config.min_points:
        raise GeometryError(f"点数 {n} 少于 {config.levels} 层金字塔所需的最少点数 {config.min_points}")
    feats = as_tensor(raw_feats)
    if feats.shape != (n, INPUT_CHANNELS):
        raise ShapeError("build_pyramid", [feats.shape, (n, INPUT_CHANNELS)])

    down: List[FeatureCloud] = [FeatureCloud(base, feats)]
    sample_maps: List[np.ndarray] = [np.arange(n, dtype=np.int64)]
    for level in range(1, config.levels):
        previous = down[-1]
        count = math.ceil(len(previous) / 4)
        index = furthest_point_sample(previous.cloud, count, start=config.fps_start % len(previous))
        centers = PointCloud(gather_rows(previous.positions, index))
        k = min(config.k_pyramid, len(previous))
        nbrs = knn(centers, previous.cloud, k, backend=config.knn_backend)
        conv = pointconv(centers, previous, nbrs, bound.pointconv(f"pyramid.{level}.conv", k))
        weight, bias = bound.linear(f"pyramid.{level}.linear")
        down.append(FeatureCloud(centers, per_point_linear(conv.features, weight, bias, config.slope)))
        sample_maps.append(index)

    levels: List[FeatureCloud] = [down[0]]
    for level in range(1, config.levels):
        current = down[level]
        if config.use_upsampled_feature and level < config.levels - 1:
            coarser = down[level + 1]
            upsampled = interpolate_idw(coarser.cloud, coarser.features, current.cloud, min(config.k_upsample, len(coarser)), backend=config.knn_backend)
            weight, bias = bound.linear(f"pyramid.{level}.merge")
            merged = per_point_linear(upsampled, weight, bias, config.slope)
            current = FeatureCloud(current.cloud, concat(current.features, merged))
        levels.append(current)
    return Pyramid(levels=levels, sample_maps=sample_maps)


def predict_flow_level(
    p_feats: FeatureCloud,
    cost_vol: "CostVolume | Tensor",
    up_flow: Tensor | None,
    up_pred_feat: Tensor | None,
    level_params: PredictorParams,
) -> Tuple[Tensor, Tensor]:
    values = cost_vol.values if isinstance(cost_vol, CostVolume) else as_tensor(cost_vol)
    parts = [p_feats.features, values]
    if up_flow is not None:
        parts.append(up_flow)
    if up_pred_feat is not None:
        parts.append(up_pred_feat)
    inputs = concat(*parts)
    if inputs.shape[1] != level_params.in_width:
        raise ShapeError("predict_flow_level", [inputs.shape, (len(p_feats), level_params.in_width)])

    hidden = FeatureCloud(p_feats.cloud, inputs)
    if level_params.convs:
        nbrs = knn(p_feats.cloud, p_feats.cloud, level_params.k)
        for conv in level_params.convs:
            hidden = pointconv(p_feats.cloud, hidden, nbrs, conv)
    (hidden_w, hidden_b), (out_w, out_b) = level_params.head.layers
    pred_feat = per_point_linear(hidden.features, hidden_w, hidden_b, level_params.head.slope)
    residual = per_point_linear(pred_feat, out_w, out_b, slope=None)
    if up_flow is None:
        return residual, pred_feat
    return add(up_flow, residual), pred_feat


def forward(
    P: Any,
    Q: Any,
    params: "NetworkParams | BoundParams",
    graph: Graph | None = None,
    timings: Dict[str, float] | None = None,
) -> FlowPyramid:
    if isinstance(params, NetworkParams):
        bound = params.bind(graph)
    else:
        bound = params
    config = bound.config
    p_cloud, q_cloud = as_cloud(P), as_cloud(Q)

    with _section(graph, timings, "feature_pyramid", "feature_pyramid"):
        p_pyr = build_pyramid(p_cloud, p_cloud.positions, bound)
        q_pyr = build_pyramid(q_cloud, q_cloud.positions, bound)

    last = config.levels - 1
    flows: List[Tensor | None] = [None] * config.levels
    pred_feat: Tensor | None = None
    for level in range(last, 0, -1):
        p_level, q_level = p_pyr.levels[level], q_pyr.levels[level]
        up_flow: Tensor | None = None
        up_feat: Tensor | None = None
        warped = p_level.cloud
        if level < last:
            with _section(graph, timings, "upsample_warp", f"upsample_warp/l{level}"):
                coarse = p_pyr.cloud(level + 1)
                k_up = min(config.k_upsample, len(coarse))
                up_flow = interpolate_idw(coarse, flows[level + 1], p_level.cloud, k_up, backend=config.knn_backend)
                if config.use_predictor_feature:
                    up_feat = interpolate_idw(coarse, pred_feat, p_level.cloud, k_up, backend=config.knn_backend)
                warped = warp(p_level.cloud, up_flow)

        with _section(graph, timings, "cost_volume", f"cost_volume/l{level}"):
            k_cost = min(config.k_cost, len(p_level), len(q_level))
            volume = cost_volume(FeatureCloud(warped, p_level.features), q_level, bound.cost_volume(level, k_cost))

        with _section(graph, timings, "predictor", f"predictor/l{level}"):
            predictor = bound.predictor(level, min(config.k_predictor, len(p_level)))
            flows[level], pred_feat = predict_flow_level(p_level, volume, up_flow, up_feat, predictor)

    with _section(graph, timings, "upsample_warp", "upsample_warp/l0"):
        level1 = p_pyr.cloud(1)
        flows[0] = interpolate_idw(level1, flows[1], p_pyr.cloud(0), min(config.k_upsample, len(level1)), backend=config.knn_backend)
    return FlowPyramid(flows=[flow for flow in flows if flow is not None], p_pyramid=p_pyr, q_pyramid=q_pyr)


def gt_pyramid(gt: Any, pyramid: Pyramid) -> List[np.ndarray]:
    levels = [np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)]
    if levels[0].shape != (pyramid.sizes[0], 3):
        raise ShapeError("gt_pyramid", [levels[0].shape, (pyramid.sizes[0], 3)])
    for index in pyramid.sample_maps[1:]:
        levels.append(levels[-1][index])
    return levels


def predict_full_resolution(P: Any, Q: Any, params: NetworkParams) -> np.ndarray:
    return forward(P, Q, params).flows[0].data.copy()


def component_timings(P: Any, Q: Any, params: NetworkParams) -> Dict[str, float]:
    timings = {component: 0.0 for component in COMPONENTS}
    forward(P, Q, params, graph=Graph(), timings=timings)
    return timings
