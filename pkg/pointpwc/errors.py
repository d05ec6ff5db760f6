from __future__ import annotations

from typing import Sequence


class PointPWCError(RuntimeError):
    pass


class ShapeError(PointPWCError):
    def __init__(self, primitive: str, shapes: Sequence[tuple[int, ...]], detail: str = ""):
        self.primitive = primitive
        self.shapes = [tuple(shape) for shape in shapes]
        shape_text = " vs ".join(str(shape) for shape in self.shapes)
        message = f"形状不匹配: {primitive} {shape_text}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class GraphError(PointPWCError):
    pass


class GeometryError(PointPWCError):
    pass


class ConfigError(PointPWCError):
    pass


class CheckpointError(PointPWCError):
    def __init__(self, message: str, tensor_name: str = ""):
        self.tensor_name = tensor_name
        super().__init__(message)


class NonFiniteLossError(PointPWCError):
    def __init__(self, step: int, component: str, kind: str):
        self.step = step
        self.component = component
        self.kind = kind
        super().__init__(f"第 {step} 步损失出现 NaN/Inf，首个异常组件: {component} (primitive={kind})")
