"""命令行入口：每个实验一个子命令，输出可复现的 CSV/JSON"""
import argparse
import json
import logging
import re
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from pydantic import ValidationError

from config import config
from dynamics import coupling_scan, flow_closeness, run_trajectory
from exceptions import ConfigError, ExitLabError
from exitlab import collect_exit_records, exit_cost, fit_arrhenius, make_domain, records_to_frame, validate_ladder
from gibbs import solve_fixed_point
from measures import wasserstein_to_dirac
from models import ExperimentConfig, SimulationParams
from potentials import Potential, check_hypotheses, make_potential
from report_generator import ExperimentReportWriter
from utils import config_hash, setup_logging

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    """构造参数解析器"""
    parser = argparse.ArgumentParser(prog="exitlab", description="自相互作用扩散退出时间实验室")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", required=True, help="JSON 实验配置文件")
        sub.add_argument("--seed", type=int, help="主随机种子")
        sub.add_argument("--threads", type=int, help="工作进程数，默认读取 EXITLAB_THREADS")
        sub.add_argument("--out-dir", help="输出目录")
        sub.add_argument("--allow-unverified", action="store_true", help="跳过假设 (H) 检验")
        sub.add_argument("--dt", type=float, help="时间步长")
        sub.add_argument("--sigma", type=float, help="噪声强度")
        sub.add_argument("--replicas", type=int, help="每个噪声水平的副本数")
    return parser


def _key_line(text: str, key: str) -> Optional[int]:
    match = re.search(rf'"{re.escape(str(key))}"\s*:', text)
    return text.count("\n", 0, match.start()) + 1 if match else None


def load_experiment_config(path: str, overrides: Dict[str, Any]) -> ExperimentConfig:
    """读取并校验 JSON 配置；命令行参数覆盖同名字段"""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"无法读取配置文件 {path}: {e}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件 {path} 第 {e.lineno} 行第 {e.colno} 列 JSON 解析失败: {e.msg}")
    if not isinstance(data, dict):
        raise ConfigError(f"配置文件 {path} 顶层必须是对象")
    data.update({key: value for key, value in overrides.items() if value is not None})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        messages = []
        for error in e.errors():
            location = ".".join(str(part) for part in error["loc"])
            line = _key_line(text, error["loc"][0]) if error["loc"] else None
            where = f"第 {line} 行 " if line else ""
            messages.append(f"{where}{location or '<root>'}: {error['msg']}")
        raise ConfigError(f"配置文件 {path} 校验失败: " + "; ".join(messages))


class ExperimentContext:
    """一次子命令运行所需的势函数、参数与输出写入器"""

    def __init__(self, command: str, experiment: ExperimentConfig, threads: int):
        self.command = command
        self.experiment = experiment
        self.threads = threads
        missing = [name for name in ("V", "W") if name not in experiment.potentials]
        if missing:
            raise ConfigError(f"配置缺少势函数 {missing}")
        self.V: Potential = make_potential(experiment.potentials["V"])
        self.W: Potential = make_potential(experiment.potentials["W"])
        self.m = self.V.minimizer
        self.x0 = self.m if experiment.x0 is None else experiment.x0
        self.hash = config_hash({"command": command, "config": experiment.model_dump(mode="json")})
        self.writer = ExperimentReportWriter(experiment.output_dir, self.hash)

    def params(self, sigma: Optional[float] = None, **updates) -> SimulationParams:
        sigma = self.experiment.sigma if sigma is None else sigma
        if sigma is None:
            raise ConfigError(f"子命令 {self.command} 需要 sigma")
        try:
            return SimulationParams(sigma=sigma, dt=self.experiment.dt, t_warmup=self.experiment.t_warmup,
                                    seed=self.experiment.seed,
                                    reservoir_capacity=self.experiment.reservoir_capacity, **updates)
        except ValidationError as e:
            raise ConfigError(f"模拟参数非法: {e.errors()[0]['msg']}")

    def require_T(self) -> float:
        if self.experiment.T is None:
            raise ConfigError(f"子命令 {self.command} 需要字段 T")
        return self.experiment.T

    def domain(self):
        if self.experiment.domain is None:
            raise ConfigError(f"子命令 {self.command} 需要字段 domain")
        return make_domain(self.experiment.domain, self.V, self.W, self.m)

    def sigmas(self) -> List[float]:
        if self.experiment.sigma_ladder is not None:
            return self.experiment.sigma_ladder
        if self.experiment.sigma is not None:
            return [self.experiment.sigma]
        raise ConfigError(f"子命令 {self.command} 需要 sigma 或 sigma_ladder")

    def verify_hypotheses(self):
        width = self.experiment.check_box_halfwidth
        report = check_hypotheses(self.V, self.W, (self.m - width, self.m + width),
                                  samples=config.HYPOTHESIS_SAMPLES, seed=self.experiment.seed)
        return report


def cmd_simulate(ctx: ExperimentContext) -> int:
    """单条轨迹：抽取状态、能量与最终的 W_{2k}(mu_t, delta_m)"""
    params = ctx.params()
    frame, state = run_trajectory(params, ctx.V, ctx.W, ctx.x0, ctx.require_T(),
                                  ctx.experiment.record_stride, ctx.m)
    order = max(ctx.V.growth_degree, ctx.W.growth_degree)
    ctx.writer.write_csv("trajectory.csv", frame)
    ctx.writer.write_json("summary.json", {
        "final_time": state.time,
        "final_position": state.position.tolist(),
        "steps": state.step_index,
        "final_lyapunov_energy": float(frame["lyapunov_energy"].iloc[-1]),
        "final_w2_to_m": wasserstein_to_dirac(state.measure, ctx.m, 2),
        f"final_w{order}_to_m": wasserstein_to_dirac(state.measure, ctx.m, order),
        "running_mean": state.measure.running_mean.tolist(),
    })
    return 0


def cmd_exit_scan(ctx: ExperimentContext) -> int:
    """退出时间扫描：记录表与 Arrhenius 回归"""
    experiment = ctx.experiment
    if experiment.sigma_ladder is None:
        raise ConfigError("子命令 exit-scan 需要 sigma_ladder")
    validate_ladder(experiment.sigma_ladder, experiment.replicas)
    domain = ctx.domain()
    records = collect_exit_records(domain, ctx.V, ctx.W, ctx.x0, experiment.sigma_ladder, experiment.replicas,
                                   experiment.seed, ctx.params(sigma=0.0), experiment.frozen, ctx.m,
                                   ctx.threads, experiment.step_budget)
    ctx.writer.write_csv("exit_records.csv", records_to_frame(records))
    fit = fit_arrhenius(records, exit_cost(domain, ctx.V, ctx.W, ctx.m), experiment.delta,
                        experiment.statistic, experiment.frozen)
    ctx.writer.write_json("arrhenius_fit.json", fit)
    return 0


def cmd_gibbs(ctx: ExperimentContext) -> int:
    """自洽不动点：密度表与求解报告"""
    experiment = ctx.experiment
    if experiment.sigma is None:
        raise ConfigError("子命令 gibbs 需要 sigma")
    density, report = solve_fixed_point(ctx.V, ctx.W, experiment.sigma, damping=experiment.damping,
                                        tol=experiment.tol, max_iter=experiment.max_iter,
                                        spacing=experiment.grid_spacing)
    ctx.writer.write_csv("density.csv", density.to_frame())
    ctx.writer.write_json("gibbs_report.json", report)
    return 0


def cmd_flow_compare(ctx: ExperimentContext) -> int:
    """各 sigma 下轨迹与确定性流的接近程度"""
    T = ctx.require_T()
    frame = flow_closeness(ctx.params(sigma=0.0), ctx.V, ctx.W, ctx.x0, T, ctx.sigmas(),
                           ctx.experiment.replicas, ctx.experiment.seed, ctx.threads)
    ctx.writer.write_csv("flow_closeness.csv", frame)
    return 0


def cmd_coupling_check(ctx: ExperimentContext) -> int:
    """X 与冻结测度扩散 Y 的耦合距离"""
    T = ctx.require_T()
    start = ctx.experiment.coupling_start
    if start is None:
        raise ConfigError("子命令 coupling-check 需要字段 coupling_start")
    frame = coupling_scan(ctx.params(), ctx.V, ctx.W, ctx.m, ctx.x0, start, T,
                          ctx.experiment.replicas, ctx.experiment.seed, ctx.threads)
    ctx.writer.write_csv("coupling.csv", frame)
    return 0


def cmd_check_hypotheses(ctx: ExperimentContext) -> int:
    """只做假设 (H) 检验并写出报告"""
    report = ctx.verify_hypotheses()
    ctx.writer.write_json("hypotheses.json", report)
    return 0 if report.all_passed else ConfigError.exit_code


COMMANDS: Dict[str, Callable[[ExperimentContext], int]] = {
    "simulate": cmd_simulate,
    "exit-scan": cmd_exit_scan,
    "gibbs": cmd_gibbs,
    "flow-compare": cmd_flow_compare,
    "coupling-check": cmd_coupling_check,
    "check-hypotheses": cmd_check_hypotheses,
}


def main(argv: Optional[List[str]] = None) -> int:
    """解析参数、运行子命令并返回退出码"""
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "dt": args.dt,
        "sigma": args.sigma,
        "replicas": args.replicas,
        "output_dir": args.out_dir,
    }
    try:
        experiment = load_experiment_config(args.config, overrides)
        setup_logging(config.LOG_LEVEL, str(Path(experiment.output_dir) / config.LOG_FILE))
        logger.info(f"开始子命令 {args.command}")
        ctx = ExperimentContext(args.command, experiment, args.threads or config.THREADS)
        if args.command != "check-hypotheses" and not args.allow_unverified:
            report = ctx.verify_hypotheses()
            if not report.all_passed:
                failed = [name for name, result in report.conditions.items() if not result.passed]
                raise ConfigError(f"势函数未通过假设 (H) 检验: {failed}；可用 --allow-unverified 跳过")
        code = COMMANDS[args.command](ctx)
        logger.info(f"子命令 {args.command} 完成，退出码 {code}")
        return code
    except ExitLabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
