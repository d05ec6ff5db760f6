from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict
from typing import List

from pointpwc.errors import ConfigError

LOSS_MODES = ("supervised", "self-supervised")
SHAPES = ("uniform-box", "sphere-shell", "planar-grid", "multi-object")
MOTIONS = ("translation", "rigid", "per-object-rigid", "smooth-deformation")


@dataclass
class NetworkConfig:
    levels: int = 4
    pyramid_channels: List[int] = field(default_factory=lambda: [32, 64, 128])
    cost_dims: List[int] = field(default_factory=lambda: [64, 64, 64])
    predictor_channels: List[int] = field(default_factory=lambda: [64, 32])
    predictor_feature_width: int = 32
    weight_net_hidden: int = 8
    weight_net_channels: int = 8
    k_pyramid: int = 16
    k_cost: int = 16
    k_predictor: int = 16
    k_upsample: int = 3
    slope: float = 0.1
    use_upsampled_feature: bool = True
    use_predictor_feature: bool = True
    matching: str = "learned"
    knn_backend: str = "brute"
    fps_start: int = 0

    @property
    def min_points(self) -> int:
        return 4 ** (self.levels - 1)


@dataclass
class LossConfig:
    mode: str = "self-supervised"
    alpha: List[float] = field(default_factory=lambda: [0.02, 0.04, 0.08, 0.16])
    beta: List[float] = field(default_factory=lambda: [1.0, 1.0, 0.3])
    k_neighbors: int = 8
    k_interp: int = 3


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 200
    seed: int = 0
    checkpoint_every: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class DataConfig:
    n_points: int = 256
    shape: str = "uniform-box"
    motion: str = "translation"
    translation: List[float] = field(default_factory=lambda: [0.1, 0.05, 0.0])
    rotation_axis: List[float] = field(default_factory=lambda: [0.0, 0.0, 1.0])
    rotation_deg: float = 5.0
    n_objects: int = 3
    deformation_amplitude: float = 0.05
    noise_sigma: float = 0.0
    seed: int | None = None
    p_file: str = ""
    q_file: str = ""
    gt_file: str = ""

    @property
    def uses_files(self) -> bool:
        return bool(self.p_file or self.q_file)


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self, check_files: bool = True) -> "RunConfig":
        net, loss, train, data = self.network, self.loss, self.train, self.data
        if net.levels < 2:
            raise ConfigError(f"network.levels 必须 >= 2，实际为 {net.levels}")
        per_level = net.levels - 1
        for key in ("pyramid_channels", "cost_dims"):
            values = getattr(net, key)
            if len(values) != per_level or any(not isinstance(v, int) or v < 1 for v in values):
                raise ConfigError(f"network.{key} 需要 {per_level} 个正整数，实际为 {values}")
        if not net.predictor_channels or any(not isinstance(v, int) or v < 1 for v in net.predictor_channels):
            raise ConfigError(f"network.predictor_channels 非法: {net.predictor_channels}")
        for key in ("k_pyramid", "k_cost", "k_predictor", "k_upsample", "predictor_feature_width", "weight_net_hidden", "weight_net_channels"):
            if int(getattr(net, key)) < 1:
                raise ConfigError(f"network.{key} 必须 >= 1")
        if net.slope < 0:
            raise ConfigError("network.slope 必须 >= 0")
        if net.matching not in ("learned", "correlation"):
            raise ConfigError(f"network.matching 仅支持 learned/correlation，实际为 {net.matching}")
        if net.knn_backend not in ("brute", "kdtree"):
            raise ConfigError(f"network.knn_backend 仅支持 brute/kdtree，实际为 {net.knn_backend}")
        if net.fps_start < 0:
            raise ConfigError("network.fps_start 必须 >= 0")

        if loss.mode not in LOSS_MODES:
            raise ConfigError(f"loss.mode 仅支持 {LOSS_MODES}，实际为 {loss.mode}")
        if len(loss.alpha) != net.levels:
            raise ConfigError(f"loss.alpha 需要 {net.levels} 个值 (每层一个)，实际为 {len(loss.alpha)}")
        if any(a < 0 for a in loss.alpha) or not any(a > 0 for a in loss.alpha):
            raise ConfigError("loss.alpha 必须非负且至少一个 > 0")
        if len(loss.beta) != 3 or any(b < 0 for b in loss.beta):
            raise ConfigError("loss.beta 需要 3 个非负值")
        if loss.k_neighbors < 1 or loss.k_interp < 1:
            raise ConfigError("loss.k_neighbors 与 loss.k_interp 必须 >= 1")

        if train.lr < 0 or train.steps < 0 or train.checkpoint_every < 1:
            raise ConfigError("train.lr/steps 必须 >= 0，checkpoint_every 必须 >= 1")
        if not (0 <= train.beta1 < 1 and 0 <= train.beta2 < 1) or train.eps <= 0:
            raise ConfigError("train.beta1/beta2 必须在 [0,1)，eps 必须 > 0")

        if data.shape not in SHAPES:
            raise ConfigError(f"data.shape 仅支持 {SHAPES}，实际为 {data.shape}")
        if data.motion not in MOTIONS:
            raise ConfigError(f"data.motion 仅支持 {MOTIONS}，实际为 {data.motion}")
        if data.noise_sigma < 0:
            raise ConfigError("data.noise_sigma 必须 >= 0")
        if not data.uses_files and data.n_points < net.min_points:
            raise ConfigError(f"data.n_points={data.n_points} 少于金字塔所需 {net.min_points} 点")
        if len(data.translation) != 3 or len(data.rotation_axis) != 3:
            raise ConfigError("data.translation 与 data.rotation_axis 需要 3 个分量")
        if data.n_objects < 1:
            raise ConfigError("data.n_objects 必须 >= 1")
        if data.uses_files and not (data.p_file and data.q_file):
            raise ConfigError("data.p_file 与 data.q_file 需同时配置")
        if check_files:
            for key in ("p_file", "q_file", "gt_file"):
                path = getattr(data, key)
                if path and not Path(path).exists():
                    raise ConfigError(f"data.{key} 不存在: {path}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _build_section(cls: type, payload: Any, path: str) -> Any:
    if not isinstance(payload, dict):
        raise ConfigError(f"配置段 {path} 必须是对象")
    known = {item.name: item for item in dataclasses.fields(cls)}
    for key in payload:
        if key not in known:
            raise ConfigError(f"未知配置项: {path}.{key}")
    values: Dict[str, Any] = {}
    for key, value in payload.items():
        default = getattr(cls(), key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"配置项 {path}.{key} 必须是布尔值")
        elif isinstance(default, int) and not isinstance(value, int):
            raise ConfigError(f"配置项 {path}.{key} 必须是整数")
        elif isinstance(default, float) and not isinstance(value, (int, float)):
            raise ConfigError(f"配置项 {path}.{key} 必须是数值")
        elif isinstance(default, list):
            if not isinstance(value, list) or any(isinstance(item, bool) or not isinstance(item, (int, float)) for item in value):
                raise ConfigError(f"配置项 {path}.{key} 必须是数值数组")
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"配置项 {path}.{key} 必须是字符串")
        elif default is None and value is not None and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(f"配置项 {path}.{key} 必须是整数或 null")
        values[key] = float(value) if isinstance(default, float) else value
    return cls(**values)


def config_from_dict(payload: Dict[str, Any]) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("配置文件顶层必须是对象")
    sections = {"network": NetworkConfig, "loss": LossConfig, "train": TrainConfig, "data": DataConfig}
    for key in payload:
        if key not in sections:
            raise ConfigError(f"未知配置项: {key}")
    built = {key: _build_section(cls, payload.get(key, {}), key) for key, cls in sections.items()}
    return RunConfig(**built)


def load_run_config(config_path: str | None, check_files: bool = True) -> RunConfig:
    if not config_path:
        return RunConfig().validate(check_files=check_files)
    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"配置文件不是合法 JSON: {path} ({exc})") from exc
    return config_from_dict(payload).validate(check_files=check_files)


def is_pid_alive(pid: int) -> bool:
    if pid <= 0:
        return False
    try:
        os.kill(pid, 0)
        return True
    except OSError:
        return False


def write_lock(lock_file: Path, owner: str) -> None:
    lock_file.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "pid": os.getpid(),
        "owner": owner,
        "created_at": int(time.time()),
    }
    lock_file.write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")


def read_lock(lock_file: Path) -> Dict[str, Any]:
    if not lock_file.exists():
        return {}
    try:
        return json.loads(lock_file.read_text(encoding="utf-8"))
    except Exception:
        return {}
