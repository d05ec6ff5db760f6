from __future__ import annotations

import logging
import time
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from pointpwc.autodiff import Graph
from pointpwc.autodiff import MlpParams
from pointpwc.autodiff import Tensor
from pointpwc.autodiff import backward
from pointpwc.autodiff import multiply
from pointpwc.autodiff import reduce_sum
from pointpwc.config import NetworkConfig
from pointpwc.costvolume import CostVolumeParams
from pointpwc.costvolume import cost_volume
from pointpwc.errors import ConfigError
from pointpwc.geom import PointCloud
from pointpwc.geom import furthest_point_sample
from pointpwc.geom import interpolate_idw
from pointpwc.geom import knn
from pointpwc.geom import knn_excluding_self
from pointpwc.losses import LossWeights
from pointpwc.losses import chamfer_loss
from pointpwc.losses import laplacian_reg
from pointpwc.losses import self_supervised_loss
from pointpwc.losses import smoothness_loss
from pointpwc.losses import supervised_loss
from pointpwc.network import BoundParams
from pointpwc.network import Pyramid
from pointpwc.network import forward
from pointpwc.network import init_params
from pointpwc.pointconv import FeatureCloud
from pointpwc.pointconv import PointConvParams
from pointpwc.pointconv import pointconv
from pointpwc.reporting import write_json

FD_STEP = 1e-5
TOLERANCE = 1e-4
FORWARD_TOLERANCE = 1e-3
MAX_COORDINATES = 48
MIN_POINTS = 16
MAX_POINTS = 64
TINY = 1e-30

ScalarFn = Callable[[Dict[str, Tensor]], Tensor]


@dataclass
class GradcheckCase:
    component: str
    inputs: Dict[str, np.ndarray]
    fn: ScalarFn
    tolerance: float = TOLERANCE


@dataclass
class ComponentResult:
    component: str
    max_rel_error: float
    tolerance: float
    cases: int
    passed: bool


@dataclass
class GradcheckReport:
    seeds: int
    points: int
    step: float = FD_STEP
    components: List[ComponentResult] = field(default_factory=list)
    elapsed_seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.components) and all(item.passed for item in self.components)

    def write(self, output_file: Path) -> None:
        payload = asdict(self)
        payload["passed"] = self.passed
        write_json(output_file, payload)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), TINY)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def check_case(case: GradcheckCase, rng: np.random.Generator, step: float = FD_STEP, max_coordinates: int = MAX_COORDINATES) -> float:
    graph = Graph()
    leaves = {name: graph.leaf(value, name=name) for name, value in case.inputs.items()}
    grads = backward(graph, case.fn(leaves))

    coordinates = [(name, index) for name, value in case.inputs.items() for index in range(value.size)]
    chosen = rng.choice(len(coordinates), size=min(max_coordinates, len(coordinates)), replace=False)
    analytic = np.empty(len(chosen))
    numeric = np.empty(len(chosen))
    for slot, position in enumerate(sorted(chosen)):
        name, index = coordinates[position]
        analytic[slot] = grads[leaves[name].node_id].data.reshape(-1)[index]
        values = []
        for sign in (1.0, -1.0):
            shifted = {key: value.copy() for key, value in case.inputs.items()}
            shifted[name].reshape(-1)[index] += sign * step
            values.append(case.fn({key: Tensor(value) for key, value in shifted.items()}).item())
        numeric[slot] = (values[0] - values[1]) / (2.0 * step)
    return relative_error(analytic, numeric)


def _mlp_arrays(rng: np.random.Generator, prefix: str, widths: List[int]) -> Dict[str, np.ndarray]:
    arrays = {}
    for index in range(len(widths) - 1):
        arrays[f"{prefix}.{index}.w"] = rng.normal(0.0, 1.0 / np.sqrt(widths[index]), size=(widths[index + 1], widths[index]))
        arrays[f"{prefix}.{index}.b"] = rng.normal(0.0, 0.1, size=(widths[index + 1],))
    return arrays


def _mlp(t: Dict[str, Tensor], prefix: str) -> MlpParams:
    layers = []
    index = 0
    while f"{prefix}.{index}.w" in t:
        layers.append((t[f"{prefix}.{index}.w"], t[f"{prefix}.{index}.b"]))
        index += 1
    return MlpParams(layers)


def _projected(out: Tensor, weights: np.ndarray) -> Tensor:
    return reduce_sum(multiply(out, weights))


def _pointconv_case(rng: np.random.Generator, n: int) -> GradcheckCase:
    source = rng.uniform(-1.0, 1.0, size=(n, 3))
    centers = source[furthest_point_sample(source, max(2, n // 4))]
    k = min(6, n)
    nbrs = knn(centers, source, k)
    inputs = {"features": rng.normal(size=(n, 4))}
    inputs.update(_mlp_arrays(rng, "weight_net", [3, 8, 4]))
    inputs["proj.w"] = rng.normal(0.0, 0.25, size=(5, 16))
    inputs["proj.b"] = rng.normal(0.0, 0.1, size=(5,))
    projection = rng.normal(size=(len(centers), 5))

    def fn(t: Dict[str, Tensor]) -> Tensor:
        params = PointConvParams(_mlp(t, "weight_net"), t["proj.w"], t["proj.b"], k=k)
        out = pointconv(centers, FeatureCloud(source, t["features"]), nbrs, params)
        return _projected(out.features, projection)

    return GradcheckCase("pointconv", inputs, fn)


def _cost_volume_case(rng: np.random.Generator, n: int) -> GradcheckCase:
    n1, n2, channels, depth = n // 2, n // 2 + 4, 4, 6
    p_pos = rng.uniform(-1.0, 1.0, size=(n1, 3))
    q_pos = p_pos[rng.integers(0, n1, size=n2)] + rng.normal(0.0, 0.1, size=(n2, 3))
    inputs = {"p_feats": rng.normal(size=(n1, channels)), "q_feats": rng.normal(size=(n2, channels))}
    inputs.update(_mlp_arrays(rng, "mlp", [2 * channels + 3, depth, depth]))
    inputs.update(_mlp_arrays(rng, "wp", [3, 8, depth]))
    inputs.update(_mlp_arrays(rng, "wq", [3, 8, depth]))
    projection = rng.normal(size=(n1, depth))

    def fn(t: Dict[str, Tensor]) -> Tensor:
        params = CostVolumeParams(_mlp(t, "mlp"), _mlp(t, "wp"), _mlp(t, "wq"), k=4)
        volume = cost_volume(FeatureCloud(p_pos, t["p_feats"]), FeatureCloud(q_pos, t["q_feats"]), params)
        return _projected(volume.values, projection)

    return GradcheckCase("cost_volume", inputs, fn)


def _idw_case(rng: np.random.Generator, n: int) -> GradcheckCase:
    inputs = {
        "coarse_pts": rng.uniform(-1.0, 1.0, size=(max(4, n // 4), 3)),
        "coarse_vals": rng.normal(size=(max(4, n // 4), 3)),
        "fine_pts": rng.uniform(-1.0, 1.0, size=(n // 2, 3)),
    }
    projection = rng.normal(size=(n // 2, 3))

    def fn(t: Dict[str, Tensor]) -> Tensor:
        return _projected(interpolate_idw(t["coarse_pts"], t["coarse_vals"], t["fine_pts"], 3), projection)

    return GradcheckCase("interpolate_idw", inputs, fn)


def _supervised_case(rng: np.random.Generator, n: int) -> GradcheckCase:
    gt = [rng.normal(size=(n, 3)), rng.normal(size=(max(1, n // 4), 3))]
    inputs = {"pred0": rng.normal(size=(n, 3)), "pred1": rng.normal(size=(max(1, n // 4), 3))}

    def fn(t: Dict[str, Tensor]) -> Tensor:
        return supervised_loss([t["pred0"], t["pred1"]], gt, [0.5, 1.0])

    return GradcheckCase("supervised_loss", inputs, fn)


def _chamfer_case(rng: np.random.Generator, n: int) -> GradcheckCase:
    q = rng.uniform(-1.0, 1.0, size=(n // 2 + 3, 3))
    inputs = {"p_warped": rng.uniform(-1.0, 1.0, size=(n // 2, 3))}

    def fn(t: Dict[str, Tensor]) -> Tensor:
        return chamfer_loss(t["p_warped"], q)

    return GradcheckCase("chamfer_loss", inputs, fn)


def _smoothness_case(rng: np.random.Generator, n: int) -> GradcheckCase:
    cloud = rng.uniform(-1.0, 1.0, size=(n // 2, 3))
    nbrs = knn_excluding_self(cloud, 4)
    inputs = {"flow": rng.normal(size=(n // 2, 3))}

    def fn(t: Dict[str, Tensor]) -> Tensor:
        return smoothness_loss(t["flow"], cloud, nbrs)

    return GradcheckCase("smoothness_loss", inputs, fn)


def _laplacian_case(rng: np.random.Generator, n: int) -> GradcheckCase:
    q = rng.uniform(-1.0, 1.0, size=(n // 2 + 2, 3))
    inputs = {"p_warped": rng.uniform(-1.0, 1.0, size=(n // 2, 3))}

    def fn(t: Dict[str, Tensor]) -> Tensor:
        return laplacian_reg(t["p_warped"], q, k_inter=3, k_neighbors=4)

    return GradcheckCase("laplacian_reg", inputs, fn)


def _self_supervised_case(rng: np.random.Generator, n: int) -> GradcheckCase:
    p0 = rng.uniform(-1.0, 1.0, size=(n // 2, 3))
    q0 = p0 + np.array([0.05, -0.02, 0.03]) + rng.normal(0.0, 0.02, size=p0.shape)
    p_index = furthest_point_sample(p0, max(2, n // 8))
    q_index = furthest_point_sample(q0, max(2, n // 8))
    p_pyr = Pyramid([FeatureCloud(p0, p0), FeatureCloud(p0[p_index], p0[p_index])], [np.arange(len(p0)), p_index])
    q_pyr = Pyramid([FeatureCloud(q0, q0), FeatureCloud(q0[q_index], q0[q_index])], [np.arange(len(q0)), q_index])
    weights = LossWeights(alpha=[0.5, 1.0], beta=[1.0, 1.0, 0.3], k_neighbors=4, k_interp=3)
    inputs = {"flow0": rng.normal(0.0, 0.05, size=(len(p0), 3)), "flow1": rng.normal(0.0, 0.05, size=(len(p_index), 3))}

    def fn(t: Dict[str, Tensor]) -> Tensor:
        return self_supervised_loss(p_pyr, q_pyr, [t["flow0"], t["flow1"]], weights)

    return GradcheckCase("self_supervised_loss", inputs, fn)


def gradcheck_network_config() -> NetworkConfig:
    return NetworkConfig(
        levels=3,
        pyramid_channels=[8, 8],
        cost_dims=[8, 8],
        predictor_channels=[8],
        predictor_feature_width=4,
        weight_net_hidden=4,
        weight_net_channels=4,
        k_pyramid=8,
        k_cost=8,
        k_predictor=8,
    )


def _forward_case(rng: np.random.Generator, n: int, seed: int) -> GradcheckCase:
    config = gradcheck_network_config()
    params = init_params(config, seed)
    for name, value in params.arrays.items():
        # non-zero biases and flow heads so every parameter reaches the output
        if name.endswith(".b") or ".head.1." in name:
            value[...] = rng.normal(0.0, 0.1, size=value.shape)
    P = rng.uniform(-1.0, 1.0, size=(n, 3))
    Q = P + np.array([0.1, 0.05, 0.0]) + rng.normal(0.0, 0.01, size=P.shape)

    def fn(t: Dict[str, Tensor]) -> Tensor:
        flows = forward(PointCloud(P), PointCloud(Q), BoundParams(config, t))
        return reduce_sum(flows.flows[0])

    return GradcheckCase("full_forward", dict(params.arrays), fn, tolerance=FORWARD_TOLERANCE)


CASE_BUILDERS: Dict[str, Callable[[np.random.Generator, int], GradcheckCase]] = {
    "pointconv": _pointconv_case,
    "cost_volume": _cost_volume_case,
    "interpolate_idw": _idw_case,
    "supervised_loss": _supervised_case,
    "chamfer_loss": _chamfer_case,
    "smoothness_loss": _smoothness_case,
    "laplacian_reg": _laplacian_case,
    "self_supervised_loss": _self_supervised_case,
}
COMPONENTS = list(CASE_BUILDERS) + ["full_forward"]


def run_gradcheck(
    seed: int = 0,
    seeds: int = 20,
    points: int = 32,
    logger: logging.Logger | None = None,
    report_file: Path | None = None,
) -> GradcheckReport:
    logger = logger or logging.getLogger("pointpwc")
    if seeds < 1:
        raise ConfigError(f"gradcheck seeds 必须 >= 1，实际为 {seeds}")
    if not MIN_POINTS <= points <= MAX_POINTS:
        raise ConfigError(f"gradcheck points 必须在 [{MIN_POINTS}, {MAX_POINTS}]，实际为 {points}")

    started = time.perf_counter()
    worst: Dict[str, float] = {name: 0.0 for name in COMPONENTS}
    for offset in range(seeds):
        instance_seed = seed + offset
        for name in COMPONENTS:
            rng = np.random.default_rng([instance_seed, COMPONENTS.index(name)])
            if name == "full_forward":
                case = _forward_case(rng, points, instance_seed)
            else:
                case = CASE_BUILDERS[name](rng, points)
            error = check_case(case, rng)
            if not np.isfinite(error):
                error = float("inf")
            worst[name] = max(worst[name], error)
        logger.info("梯度检查进度: %d/%d", offset + 1, seeds)

    report = GradcheckReport(seeds=seeds, points=points)
    for name in COMPONENTS:
        tolerance = FORWARD_TOLERANCE if name == "full_forward" else TOLERANCE
        report.components.append(
            ComponentResult(component=name, max_rel_error=worst[name], tolerance=tolerance, cases=seeds, passed=worst[name] < tolerance)
        )
    report.elapsed_seconds = time.perf_counter() - started
    if report_file is not None:
        report.write(report_file)
    return report


def format_table(report: GradcheckReport) -> str:
    lines = [f"{'component':<22} {'max_rel_error':>14} {'tolerance':>10}  result"]
    for item in report.components:
        lines.append(f"{item.component:<22} {item.max_rel_error:>14.3e} {item.tolerance:>10.0e}  {'PASS' if item.passed else 'FAIL'}")
    return "\n".join(lines)
