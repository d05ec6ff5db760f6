from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, NoReturn

from pointpwc.ablation import ablate
from pointpwc.checkpoint import load_params
from pointpwc.config import RunConfig
from pointpwc.config import is_pid_alive
from pointpwc.config import load_run_config
from pointpwc.config import read_lock
from pointpwc.config import write_lock
from pointpwc.errors import ConfigError
from pointpwc.errors import PointPWCError
from pointpwc.gradcheck import format_table
from pointpwc.gradcheck import run_gradcheck
from pointpwc.metrics import evaluate
from pointpwc.network import component_timings
from pointpwc.network import init_params
from pointpwc.network import predict_full_resolution
from pointpwc.pointio import read_points
from pointpwc.pointio import write_points
from pointpwc.reporting import build_logger
from pointpwc.reporting import write_json
from pointpwc.synth import SynthSpec
from pointpwc.synth import synth_pair
from pointpwc.training import build_pair
from pointpwc.training import train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: 参数错误: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="JSON 配置文件路径")
    common.add_argument("--seed", type=int, default=None, help="随机种子（优先级高于配置文件）")
    common.add_argument("--out", default="./output", help="输出目录")

    parser = _Parser(description="点云场景流估计工具（金字塔 cost volume 网络）")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", parents=[common], help="生成合成点云对与真值流")
    synth.add_argument("--binary", action="store_true", help="写出 PPWC 二进制格式")

    train_cmd = commands.add_parser("train", parents=[common], help="训练网络")
    train_cmd.add_argument("--loss", choices=["supervised", "self-supervised"], default=None, help="损失类型")
    train_cmd.add_argument("--steps", type=int, default=None, help="训练步数")
    train_cmd.add_argument("--no-resume", action="store_true", help="忽略输出目录中的检查点，重新训练")
    train_cmd.add_argument("--force-run", action="store_true", help="忽略运行锁并强制执行")

    infer = commands.add_parser("infer", parents=[common], help="用检查点推理全分辨率场景流")
    infer.add_argument("--checkpoint", required=True, help="检查点文件")
    infer.add_argument("--p", required=True, help="第一帧点云文件")
    infer.add_argument("--q", required=True, help="第二帧点云文件")
    infer.add_argument("--output", default=None, help="输出流文件，默认 <out>/flow.txt")
    infer.add_argument("--binary", action="store_true", help="写出 PPWC 二进制格式")

    eval_cmd = commands.add_parser("eval", parents=[common], help="计算 EPE3D/Acc3DS/Acc3DR/Outliers3D")
    eval_cmd.add_argument("--pred", required=True, help="预测流文件")
    eval_cmd.add_argument("--gt", required=True, help="真值流文件")

    grad = commands.add_parser("gradcheck", parents=[common], help="有限差分梯度检查")
    grad.add_argument("--seeds", type=int, default=20, help="随机实例数")
    grad.add_argument("--points", type=int, default=32, help="每个实例的点数 (16-64)")

    commands.add_parser("ablate", parents=[common], help="上采样特征/预测器特征消融实验")

    bench = commands.add_parser("bench", parents=[common], help="各组件耗时统计")
    bench.add_argument("--checkpoint", default=None, help="可选检查点文件")
    bench.add_argument("--repeat", type=int, default=3, help="重复次数，取平均")
    return parser


def main(argv: List[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = COMMANDS[args.command]
    try:
        config = _load_config(args)
    except ConfigError as exc:
        print(f"配置错误: {exc}", file=sys.stderr)
        return EXIT_USAGE

    output_dir = Path(args.out).resolve()
    logger = build_logger(output_dir / "logs" / f"{args.command}.log")
    try:
        return handler(args, config, output_dir, logger)
    except (ConfigError, UsageError) as exc:
        logger.error("配置错误: %s", exc)
        return EXIT_USAGE
    except (PointPWCError, OSError) as exc:
        logger.exception("运行失败: %s", exc)
        return EXIT_RUNTIME


def _load_config(args: argparse.Namespace) -> RunConfig:
    # referenced files are checked once CLI overrides are applied
    config = load_run_config(args.config, check_files=False)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed 必须 >= 0，实际为 {args.seed}")
        config.train.seed = args.seed
        config.data.seed = args.seed
    if getattr(args, "loss", None):
        config.loss.mode = args.loss
    if getattr(args, "steps", None) is not None:
        config.train.steps = args.steps
    config.validate(check_files=args.command in ("train", "ablate", "bench"))
    if args.command == "train" and config.loss.mode == "supervised" and config.data.uses_files and not config.data.gt_file:
        raise ConfigError("监督训练需要 data.gt_file 真值流文件")
    if args.command == "ablate" and config.data.uses_files and not config.data.gt_file:
        raise ConfigError("消融实验需要 data.gt_file 真值流文件")
    return config


def cmd_synth(args: argparse.Namespace, config: RunConfig, output_dir: Path, logger) -> int:
    spec = SynthSpec.from_config(config.data, seed=config.train.seed, min_points=config.network.min_points)
    P, Q, gt = synth_pair(spec)
    suffix = ".bin" if args.binary else ".txt"
    paths = [write_points(output_dir / f"{name}{suffix}", array, binary=args.binary) for name, array in (("p", P), ("q", Q), ("gt", gt))]
    logger.info("合成数据已写出: %s", ", ".join(str(path) for path in paths))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig, output_dir: Path, logger) -> int:
    pair = build_pair(config)
    lock_file = output_dir / ".run.lock"
    _acquire_run_lock(lock_file=lock_file, owner="pointpwc-train", force_run=args.force_run)
    try:
        result = train(config, pair, out_dir=output_dir, logger=logger, resume=not args.no_resume)
        report_file = output_dir / "train_report.json"
        result.report.write(report_file)
        write_json(output_dir / "run_config.json", config.to_dict())
        logger.info("训练结束，报告已生成: %s", report_file)
    finally:
        _release_run_lock(lock_file)
    return EXIT_OK


def cmd_infer(args: argparse.Namespace, config: RunConfig, output_dir: Path, logger) -> int:
    P, Q = read_points(Path(args.p)), read_points(Path(args.q))
    params = load_params(Path(args.checkpoint), config.network)
    flow = predict_full_resolution(P, Q, params)
    output = Path(args.output) if args.output else output_dir / ("flow.bin" if args.binary else "flow.txt")
    write_points(output, flow, binary=args.binary)
    logger.info("推理完成: %d 点 -> %s", flow.shape[0], output)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: RunConfig, output_dir: Path, logger) -> int:
    metrics = evaluate(read_points(Path(args.pred)), read_points(Path(args.gt))).to_dict()
    print(json.dumps(metrics, ensure_ascii=False, indent=2))
    write_json(output_dir / "eval_report.json", metrics)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, config: RunConfig, output_dir: Path, logger) -> int:
    report = run_gradcheck(
        seed=config.train.seed,
        seeds=args.seeds,
        points=args.points,
        logger=logger,
        report_file=output_dir / "gradcheck_report.json",
    )
    print(format_table(report))
    if not report.passed:
        logger.error("梯度检查未通过")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: RunConfig, output_dir: Path, logger) -> int:
    report = ablate(config, logger=logger, report_file=output_dir / "ablation_report.json")
    for row in report.rows:
        print(f"{row.name:<10} upsampled={row.use_upsampled_feature!s:<5} predictor={row.use_predictor_feature!s:<5} EPE3D={row.epe3d:.6f}")
    print(f"ordering_ok={report.ordering_ok} best={report.best} thresholds={report.thresholds}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, config: RunConfig, output_dir: Path, logger) -> int:
    if args.repeat < 1:
        raise UsageError(f"--repeat 必须 >= 1，实际为 {args.repeat}")
    pair = build_pair(config)
    if args.checkpoint:
        params = load_params(Path(args.checkpoint), config.network)
    else:
        params = init_params(config.network, config.train.seed)
    totals: dict[str, float] = {}
    for _ in range(args.repeat):
        for component, millis in component_timings(pair.P, pair.Q, params).items():
            totals[component] = totals.get(component, 0.0) + millis
    timings = {component: value / args.repeat for component, value in totals.items()}
    for component, millis in timings.items():
        print(f"{component:<16} {millis:>10.3f} ms")
    write_json(output_dir / "bench_report.json", {"n_points": int(pair.P.shape[0]), "repeat": args.repeat, "milliseconds": timings})
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
}


def _acquire_run_lock(lock_file: Path, owner: str, force_run: bool) -> None:
    if not lock_file.exists():
        write_lock(lock_file, owner=owner)
        return
    lock_info = read_lock(lock_file)
    pid = int(lock_info.get("pid", 0) or 0)
    if is_pid_alive(pid) and not force_run:
        raise PointPWCError(f"检测到运行中的任务锁: {lock_file} (pid={pid})，如需强制执行请加 --force-run")
    write_lock(lock_file, owner=owner)


def _release_run_lock(lock_file: Path) -> None:
    if lock_file.exists():
        lock_file.unlink(missing_ok=True)


if __name__ == "__main__":
    sys.exit(main())
