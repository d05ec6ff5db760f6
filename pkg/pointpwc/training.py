from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from pointpwc.autodiff import Graph
from pointpwc.autodiff import backward
from pointpwc.checkpoint import load_params
from pointpwc.checkpoint import read_tensors
from pointpwc.checkpoint import save_params
from pointpwc.checkpoint import write_tensors
from pointpwc.config import RunConfig
from pointpwc.errors import CheckpointError
from pointpwc.errors import ConfigError
from pointpwc.errors import GeometryError
from pointpwc.errors import GraphError
from pointpwc.errors import NonFiniteLossError
from pointpwc.losses import LossWeights
from pointpwc.losses import self_supervised_loss
from pointpwc.losses import supervised_loss
from pointpwc.metrics import evaluate
from pointpwc.network import FlowPyramid
from pointpwc.network import NetworkParams
from pointpwc.network import forward
from pointpwc.network import gt_pyramid
from pointpwc.network import init_params
from pointpwc.network import predict_full_resolution
from pointpwc.pointio import read_points
from pointpwc.reporting import LossLog
from pointpwc.reporting import StepRecord
from pointpwc.reporting import TrainReport
from pointpwc.synth import SynthSpec
from pointpwc.synth import synth_pair

CHECKPOINT_FILE = "checkpoint.ppwc"
OPTIMIZER_FILE = "optimizer.ppwc"
LOSS_LOG_FILE = "loss_log.csv"


@dataclass
class TrainingPair:
    P: np.ndarray
    Q: np.ndarray
    gt: np.ndarray | None = None


def build_pair(config: RunConfig) -> TrainingPair:
    data = config.data
    if data.uses_files:
        P, Q = read_points(Path(data.p_file)), read_points(Path(data.q_file))
        gt = read_points(Path(data.gt_file)) if data.gt_file else None
        return TrainingPair(P, Q, gt)
    spec = SynthSpec.from_config(data, seed=config.train.seed, min_points=config.network.min_points)
    P, Q, gt = synth_pair(spec)
    return TrainingPair(P, Q, gt)


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def update(self, params: NetworkParams, grads: Dict[str, np.ndarray]) -> None:
        self.step += 1
        bias1 = 1.0 - self.beta1**self.step
        bias2 = 1.0 - self.beta2**self.step
        for name, value in params.arrays.items():
            grad = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1.0 - self.beta1) * grad if m is None else self.beta1 * m + (1.0 - self.beta1) * grad
            v = (1.0 - self.beta2) * grad * grad if v is None else self.beta2 * v + (1.0 - self.beta2) * grad * grad
            self.m[name] = m
            self.v[name] = v
            value -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_tensors(self) -> Dict[str, np.ndarray]:
        tensors: Dict[str, np.ndarray] = {"step": np.asarray(float(self.step))}
        for name in self.m:
            tensors[f"m/{name}"] = self.m[name]
            tensors[f"v/{name}"] = self.v[name]
        return tensors

    def load_state(self, tensors: Dict[str, np.ndarray]) -> "Adam":
        if "step" not in tensors:
            raise CheckpointError("优化器状态缺少 step", tensor_name="step")
        self.step = int(np.asarray(tensors["step"]).item())
        self.m = {name[2:]: value for name, value in tensors.items() if name.startswith("m/")}
        self.v = {name[2:]: value for name, value in tensors.items() if name.startswith("v/")}
        return self


def _first_non_finite(graph: Graph) -> Tuple[str, str]:
    node = graph.first_non_finite(skip_leaves=True) or graph.first_non_finite()
    if node is None:
        return "unknown", "unknown"
    return node.scope or node.name or "unknown", node.kind


def compute_loss(
    params: NetworkParams,
    pair: TrainingPair,
    config: RunConfig,
    step: int = 0,
) -> Tuple[float, Dict[str, np.ndarray], FlowPyramid]:
    loss_config = config.loss
    if loss_config.mode == "supervised" and pair.gt is None:
        raise ConfigError("监督训练需要真值流 (data.gt_file)")
    weights = LossWeights(list(loss_config.alpha), list(loss_config.beta), loss_config.k_neighbors, loss_config.k_interp)

    graph = Graph()
    bound = params.bind(graph)
    try:
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            flows = forward(pair.P, pair.Q, bound, graph=graph)
            with graph.scope("loss"):
                if loss_config.mode == "supervised":
                    gt_levels = gt_pyramid(pair.gt, flows.p_pyramid)
                    loss = supervised_loss(flows, gt_levels, weights.alpha)
                else:
                    loss = self_supervised_loss(flows.p_pyramid, flows.q_pyramid, flows, weights)
    except (GraphError, GeometryError) as exc:
        component, kind = _first_non_finite(graph)
        if component == "unknown":
            raise
        raise NonFiniteLossError(step, component, kind) from exc

    if not np.all(np.isfinite(loss.data)):
        component, kind = _first_non_finite(graph)
        raise NonFiniteLossError(step, component, kind)
    grads = bound.gradients(backward(graph, loss))
    return loss.item(), grads, flows


@dataclass
class TrainResult:
    params: NetworkParams
    report: TrainReport
    history: List[StepRecord] = field(default_factory=list)


def _resume_state(out_dir: Path, config: RunConfig, optimizer: Adam) -> NetworkParams | None:
    checkpoint_file = out_dir / CHECKPOINT_FILE
    optimizer_file = out_dir / OPTIMIZER_FILE
    if not (checkpoint_file.exists() and optimizer_file.exists()):
        return None
    params = load_params(checkpoint_file, config.network)
    optimizer.load_state(read_tensors(optimizer_file))
    return params


def save_state(out_dir: Path, params: NetworkParams, optimizer: Adam) -> Path:
    checkpoint_file = out_dir / CHECKPOINT_FILE
    save_params(checkpoint_file, params)
    write_tensors(out_dir / OPTIMIZER_FILE, optimizer.state_tensors())
    return checkpoint_file


def train(
    config: RunConfig,
    data_stream: "TrainingPair | Sequence[TrainingPair]",
    out_dir: Path | None = None,
    logger: logging.Logger | None = None,
    resume: bool = True,
    params: NetworkParams | None = None,
    step_callback: Callable[[StepRecord], None] | None = None,
) -> TrainResult:
    logger = logger or logging.getLogger("pointpwc")
    pairs = [data_stream] if isinstance(data_stream, TrainingPair) else list(data_stream)
    if not pairs:
        raise ConfigError("训练数据为空")
    train_config = config.train
    optimizer = Adam(train_config.lr, train_config.beta1, train_config.beta2, train_config.eps)

    resumed = _resume_state(out_dir, config, optimizer) if (out_dir is not None and resume) else None
    if resumed is not None:
        params = resumed
        logger.info("从检查点恢复训练: step=%d (%s)", optimizer.step, out_dir)
    elif params is None:
        params = init_params(config.network, train_config.seed)
    else:
        params = params.copy()

    start_step = optimizer.step
    loss_log = LossLog(out_dir / LOSS_LOG_FILE) if out_dir is not None else None
    if loss_log is not None:
        if resumed is not None:
            loss_log.truncate_after(start_step)
        else:
            loss_log.reset()

    report = TrainReport(loss_mode=config.loss.mode, seed=train_config.seed, steps_requested=train_config.steps, start_step=start_step)
    history: List[StepRecord] = []
    total = train_config.steps
    last_logged_percent = int(start_step * 100 / total) if total else 0
    for step in range(start_step + 1, total + 1):
        pair = pairs[(step - 1) % len(pairs)]
        loss, grads, flows = compute_loss(params, pair, config, step=step)
        epe = evaluate(flows.flows[0].data, pair.gt).epe3d if pair.gt is not None else None
        record = StepRecord(step=step, loss=loss, epe3d=epe)
        history.append(record)
        report.add_step(record)
        if loss_log is not None:
            loss_log.append(record)
        if step_callback:
            step_callback(record)

        optimizer.update(params, grads)

        percent = int(step * 100 / total)
        if percent >= 100 or percent - last_logged_percent >= 5:
            last_logged_percent = percent
            logger.info("训练进度: %d/%d (%d%%) loss=%.6f", step, total, percent, loss)
        if out_dir is not None and (step % train_config.checkpoint_every == 0 or step == total):
            report.checkpoints.append(str(save_state(out_dir, params, optimizer)))

    if out_dir is not None and not report.checkpoints:
        report.checkpoints.append(str(save_state(out_dir, params, optimizer)))
    if report.final_step == 0:
        report.final_step = optimizer.step

    final_pair = pairs[0]
    if final_pair.gt is not None:
        report.metrics = evaluate(predict_full_resolution(final_pair.P, final_pair.Q, params), final_pair.gt).to_dict()
        logger.info("训练结束: EPE3D=%.6f", report.metrics["epe3d"])
    return TrainResult(params=params, report=report, history=history)
