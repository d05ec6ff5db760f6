from __future__ import annotations

import math
from dataclasses import dataclass
from dataclasses import field
from typing import List
from typing import Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from pointpwc.config import DataConfig
from pointpwc.config import MOTIONS
from pointpwc.config import SHAPES
from pointpwc.errors import ConfigError


@dataclass
class SynthSpec:
    n_points: int = 256
    shape: str = "uniform-box"
    motion: str = "translation"
    translation: List[float] = field(default_factory=lambda: [0.1, 0.05, 0.0])
    rotation_axis: List[float] = field(default_factory=lambda: [0.0, 0.0, 1.0])
    rotation_deg: float = 5.0
    n_objects: int = 3
    deformation_amplitude: float = 0.05
    noise_sigma: float = 0.0
    seed: int = 0
    min_points: int = 1

    def validate(self) -> "SynthSpec":
        if self.n_points < max(1, self.min_points):
            raise ConfigError(f"n_points={self.n_points} 少于所需最少点数 {self.min_points}")
        if self.shape not in SHAPES:
            raise ConfigError(f"不支持的形状: {self.shape}")
        if self.motion not in MOTIONS:
            raise ConfigError(f"不支持的运动类型: {self.motion}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma 必须 >= 0，实际为 {self.noise_sigma}")
        if len(self.translation) != 3 or len(self.rotation_axis) != 3:
            raise ConfigError("translation 与 rotation_axis 需要 3 个分量")
        if self.motion in ("rigid", "per-object-rigid") and not np.any(self.rotation_axis):
            raise ConfigError("rotation_axis 不能为零向量")
        if self.n_objects < 1:
            raise ConfigError("n_objects 必须 >= 1")
        if self.seed < 0:
            raise ConfigError(f"seed 必须 >= 0，实际为 {self.seed}")
        return self

    @classmethod
    def from_config(cls, data: DataConfig, seed: int, min_points: int = 1) -> "SynthSpec":
        return cls(
            n_points=data.n_points,
            shape=data.shape,
            motion=data.motion,
            translation=list(data.translation),
            rotation_axis=list(data.rotation_axis),
            rotation_deg=data.rotation_deg,
            n_objects=data.n_objects,
            deformation_amplitude=data.deformation_amplitude,
            noise_sigma=data.noise_sigma,
            seed=data.seed if data.seed is not None else seed,
            min_points=min_points,
        )


def _sample_shape(spec: SynthSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    n = spec.n_points
    if spec.shape == "uniform-box":
        points = rng.uniform(-1.0, 1.0, size=(n, 3))
    elif spec.shape == "sphere-shell":
        directions = rng.normal(size=(n, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        radii = rng.uniform(0.9, 1.0, size=(n, 1))
        points = directions * radii
    elif spec.shape == "planar-grid":
        side = math.ceil(math.sqrt(n))
        axis = np.linspace(-1.0, 1.0, side)
        xs, ys = np.meshgrid(axis, axis, indexing="ij")
        grid = np.stack([xs.ravel(), ys.ravel(), np.zeros(side * side)], axis=1)
        points = grid[rng.permutation(side * side)[:n]]
    else:
        centers = rng.uniform(-1.0, 1.0, size=(spec.n_objects, 3))
        labels = np.arange(n) % spec.n_objects
        points = centers[labels] + rng.uniform(-0.25, 0.25, size=(n, 3))
        return points, labels

    order = np.argsort(points[:, 0], kind="stable")
    labels = np.empty(n, dtype=np.int64)
    labels[order] = np.minimum(np.arange(n) * spec.n_objects // n, spec.n_objects - 1)
    return points, labels


def _rigid_flow(points: np.ndarray, rotation: Rotation, translation: np.ndarray) -> np.ndarray:
    return rotation.apply(points) + translation - points


def _motion_flow(spec: SynthSpec, points: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    translation = np.asarray(spec.translation, dtype=np.float64)
    if spec.motion == "translation":
        return np.broadcast_to(translation, points.shape).copy()
    if spec.motion == "rigid":
        axis = np.asarray(spec.rotation_axis, dtype=np.float64)
        rotation = Rotation.from_rotvec(axis / np.linalg.norm(axis) * math.radians(spec.rotation_deg))
        return _rigid_flow(points, rotation, translation)
    if spec.motion == "per-object-rigid":
        flow = np.empty_like(points)
        magnitude = float(np.linalg.norm(translation))
        for label in range(spec.n_objects):
            mask = labels == label
            axis = rng.normal(size=3)
            angle = rng.uniform(-1.0, 1.0) * math.radians(spec.rotation_deg)
            rotation = Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle)
            offset = rng.normal(size=3)
            offset = offset / np.linalg.norm(offset) * magnitude
            if not mask.any():
                continue
            # rotate each object about its own centroid
            centroid = points[mask].mean(axis=0)
            flow[mask] = _rigid_flow(points[mask] - centroid, rotation, offset)
        return flow
    phase = rng.uniform(0.0, 2.0 * math.pi, size=3)
    amplitude = spec.deformation_amplitude
    return translation + amplitude * np.stack(
        [
            np.sin(math.pi * points[:, 1] + phase[0]),
            np.sin(math.pi * points[:, 2] + phase[1]),
            np.sin(math.pi * points[:, 0] + phase[2]),
        ],
        axis=1,
    )


def synth_pair(spec: SynthSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(P, Q, gt) with Q = P + gt and optional Gaussian noise on Q only."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    points, labels = _sample_shape(spec, rng)
    gt = _motion_flow(spec, points, labels, rng)
    moved = points + gt
    if spec.noise_sigma > 0:
        moved = moved + rng.normal(0.0, spec.noise_sigma, size=moved.shape)
    return points, moved, gt
