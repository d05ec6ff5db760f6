from __future__ import annotations

import copy
import logging
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import List
from typing import Tuple

from pointpwc.config import RunConfig
from pointpwc.errors import ConfigError
from pointpwc.metrics import THRESHOLDS_LABEL
from pointpwc.reporting import write_json
from pointpwc.training import TrainingPair
from pointpwc.training import build_pair
from pointpwc.training import train

ORDERING_SLACK = 0.10

# (name, upsampled pyramid feature, predictor feature), in table order
VARIANTS: List[Tuple[str, bool, bool]] = [
    ("neither", False, False),
    ("upsampled", True, False),
    ("both", True, True),
]


@dataclass
class AblationResult:
    name: str
    use_upsampled_feature: bool
    use_predictor_feature: bool
    epe3d: float
    acc_strict: float
    acc_relaxed: float
    outlier: float
    final_loss: float
    error: str = ""


@dataclass
class AblationReport:
    loss_mode: str
    seed: int
    steps: int
    rows: List[AblationResult] = field(default_factory=list)
    ordering_ok: bool = False
    best: str = ""
    thresholds: str = THRESHOLDS_LABEL

    def write(self, output_file: Path) -> None:
        write_json(output_file, asdict(self))


def variant_config(config: RunConfig, upsampled: bool, predictor: bool) -> RunConfig:
    variant = copy.deepcopy(config)
    variant.network.use_upsampled_feature = upsampled
    variant.network.use_predictor_feature = predictor
    return variant


def ordering_holds(rows: List[AblationResult], slack: float = ORDERING_SLACK) -> bool:
    """both <= upsampled-only <= neither, each comparison allowing ``slack`` relative headroom."""
    by_name = {row.name: row.epe3d for row in rows if not row.error}
    if set(by_name) != {name for name, _, _ in VARIANTS}:
        return False
    return by_name["both"] <= by_name["upsampled"] * (1.0 + slack) and by_name["upsampled"] <= by_name["neither"] * (1.0 + slack)


def ablate(
    config: RunConfig,
    logger: logging.Logger | None = None,
    report_file: Path | None = None,
    pair: TrainingPair | None = None,
) -> AblationReport:
    logger = logger or logging.getLogger("pointpwc")
    pair = pair or build_pair(config)
    if pair.gt is None:
        raise ConfigError("消融实验需要真值流以计算 EPE3D")

    report = AblationReport(loss_mode=config.loss.mode, seed=config.train.seed, steps=config.train.steps)
    for name, upsampled, predictor in VARIANTS:
        logger.info("开始消融配置: %s (upsampled=%s, predictor=%s)", name, upsampled, predictor)
        try:
            result = train(variant_config(config, upsampled, predictor), pair, out_dir=None, logger=logger)
            metrics = result.report.metrics
            row = AblationResult(
                name=name,
                use_upsampled_feature=upsampled,
                use_predictor_feature=predictor,
                epe3d=float(metrics["epe3d"]),
                acc_strict=float(metrics["acc_strict"]),
                acc_relaxed=float(metrics["acc_relaxed"]),
                outlier=float(metrics["outlier"]),
                final_loss=float(result.report.final_loss if result.report.final_loss is not None else 0.0),
            )
            logger.info("消融结果: %s -> EPE3D=%.6f", name, row.epe3d)
        except Exception as exc:
            row = AblationResult(
                name=name,
                use_upsampled_feature=upsampled,
                use_predictor_feature=predictor,
                epe3d=float("inf"),
                acc_strict=0.0,
                acc_relaxed=0.0,
                outlier=1.0,
                final_loss=float("nan"),
                error=str(exc),
            )
            logger.warning("消融配置失败: %s -> %s", name, exc)
        report.rows.append(row)

    report.ordering_ok = ordering_holds(report.rows)
    report.best = min(report.rows, key=lambda item: item.epe3d).name
    if not report.ordering_ok:
        logger.warning("消融排序未满足 both <= upsampled <= neither (容差 %d%%)", int(ORDERING_SLACK * 100))
    if report_file is not None:
        report.write(report_file)
    return report
