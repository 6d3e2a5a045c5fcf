"""区域、退出代价、退出时间蒙特卡洛、Arrhenius 回归、稳定时间与退出位置统计"""
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import optimize, stats

from config import config
from dynamics import (
    ReplicaBatch,
    initial_state,
    integrate_flow,
    step_self_interacting,
)
from exceptions import (
    EmptyDomainError,
    FlowOrbitOutsideDomainError,
    InsufficientDataError,
    InvalidDomainError,
    InvalidParameterError,
    PartitionCoverageError,
)
from measures import wasserstein_to_dirac
from models import ArrheniusFit, DomainSpec, ExitRecord, SimulationParams, StabilizationEstimate
from potentials import Potential
from replica_runner import ReplicaRunner, run_replicas
from utils import as_point, derive_seed

logger = logging.getLogger(__name__)

RAY_LIMIT = 1e6


def effective_potential(V: Potential, W: Potential, m: np.ndarray, x: np.ndarray):
    """V(x) + W(x - m) - V(m)"""
    return V.evaluate(x) + W.evaluate(x - m) - V.evaluate(m)


class Domain:
    """有界开区域，边界按从 center 出发的射线角度参数化"""

    kind = "predicate"

    def __init__(self, center):
        self.center = as_point(center)

    @property
    def dimension(self) -> int:
        return int(self.center.shape[0])

    def level_fn(self, x) -> float:
        """区域内为负，边界为零，区域外为正"""
        raise NotImplementedError

    def contains(self, x) -> bool:
        return self.level_fn(x) < 0.0

    def contains_many(self, points: np.ndarray) -> np.ndarray:
        """逐行判断 (R, d) 中的点是否在区域内"""
        return np.array([self.contains(p) for p in points], dtype=bool)

    def direction(self, theta: float) -> np.ndarray:
        if self.dimension == 1:
            return np.array([1.0 if math.cos(theta) >= 0.0 else -1.0])
        return np.array([math.cos(theta), math.sin(theta)])

    def angle_of(self, x) -> float:
        """x 相对 center 的角度，取值 [0, 2pi)"""
        offset = as_point(x) - self.center
        if self.dimension == 1:
            return 0.0 if offset[0] >= 0.0 else math.pi
        return float(math.atan2(offset[1], offset[0]) % (2.0 * math.pi))

    def boundary_point(self, theta: float) -> np.ndarray:
        """沿射线二分求边界点"""
        v = self.direction(theta)
        outer = 1.0
        while self.contains(self.center + outer * v):
            outer *= 2.0
            if outer > RAY_LIMIT:
                raise InvalidDomainError(f"角度 {theta:.3f} 方向的射线未离开区域，区域可能无界")
        inner = 0.0
        for _ in range(80):
            middle = 0.5 * (inner + outer)
            if self.contains(self.center + middle * v):
                inner = middle
            else:
                outer = middle
        return self.center + 0.5 * (inner + outer) * v

    def boundary_angles(self, n: int) -> np.ndarray:
        if self.dimension == 1:
            return np.array([0.0, math.pi])
        return 2.0 * math.pi * np.arange(n) / n

    def sample_boundary(self, n: int = 1000) -> Tuple[np.ndarray, np.ndarray]:
        """(角度, 边界点)；一维只有两个边界点"""
        angles = self.boundary_angles(n)
        return angles, np.array([self.boundary_point(theta) for theta in angles])

    def outward_normal(self, x, step: float = 1e-6) -> np.ndarray:
        x = as_point(x)
        gradient = np.empty_like(x)
        for j in range(x.shape[0]):
            e = np.zeros_like(x)
            e[j] = step
            gradient[j] = (self.level_fn(x + e) - self.level_fn(x - e)) / (2.0 * step)
        return gradient / np.linalg.norm(gradient)

    def crossing(self, inside: np.ndarray, outside: np.ndarray) -> np.ndarray:
        """最后一个区域内位置与第一个区域外位置之间按水平函数线性插值"""
        a = self.level_fn(inside)
        b = self.level_fn(outside)
        weight = a / (a - b) if b != a else 1.0
        return inside + min(max(weight, 0.0), 1.0) * (outside - inside)


class BallDomain(Domain):
    """开球 |x - center| < radius；一维即开区间"""

    kind = "ball"

    def __init__(self, center, radius: float):
        super().__init__(center)
        if not (math.isfinite(radius) and radius > 0.0):
            raise InvalidDomainError(f"半径必须为正的有限数，实际为 {radius}")
        self.radius = float(radius)

    def level_fn(self, x) -> float:
        return float(np.linalg.norm(as_point(x) - self.center)) - self.radius

    def contains_many(self, points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - self.center, axis=1) < self.radius

    def boundary_point(self, theta: float) -> np.ndarray:
        return self.center + self.radius * self.direction(theta)

    def outward_normal(self, x, step: float = 1e-6) -> np.ndarray:
        offset = as_point(x) - self.center
        return offset / np.linalg.norm(offset)


class LevelSetDomain(Domain):
    """{x : V(x) + W(x - m) - V(m) < height}"""

    kind = "level_set"

    def __init__(self, V: Potential, W: Potential, m, height: float,
                 parent_distance: Optional[float] = None):
        super().__init__(m)
        if not (math.isfinite(height) and height > 0.0):
            raise InvalidDomainError(f"水平集高度必须为正，实际为 {height}")
        self.V = V
        self.W = W
        self.height = float(height)
        self.parent_distance = parent_distance

    @property
    def m(self) -> np.ndarray:
        return self.center

    def level_fn(self, x) -> float:
        return float(effective_potential(self.V, self.W, self.center, as_point(x))) - self.height

    def contains_many(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(effective_potential(self.V, self.W, self.center, points)) < self.height

    def boundary_point(self, theta: float) -> np.ndarray:
        v = self.direction(theta)
        along = lambda s: self.level_fn(self.center + s * v)
        outer = 1.0
        while along(outer) <= 0.0:
            outer *= 2.0
            if outer > RAY_LIMIT:
                raise InvalidDomainError(f"角度 {theta:.3f} 方向的水平集无界")
        s = optimize.brentq(along, 0.0, outer, xtol=1e-14, rtol=4 * np.finfo(float).eps)
        return self.center + s * v


class PredicateDomain(Domain):
    """用户谓词定义的区域；水平函数取 -1/+1，插值退化为二分"""

    def __init__(self, predicate: Callable[[np.ndarray], bool], center):
        super().__init__(center)
        self.predicate = predicate

    def level_fn(self, x) -> float:
        return -1.0 if self.predicate(as_point(x)) else 1.0

    def crossing(self, inside: np.ndarray, outside: np.ndarray) -> np.ndarray:
        for _ in range(50):
            middle = 0.5 * (inside + outside)
            if self.contains(middle):
                inside = middle
            else:
                outside = middle
        return 0.5 * (inside + outside)


def make_interval(lower: float, upper: float) -> BallDomain:
    """一维开区间 (lower, upper)"""
    if not upper > lower:
        raise InvalidDomainError(f"区间上界 {upper} 必须大于下界 {lower}")
    return BallDomain([(lower + upper) / 2.0], (upper - lower) / 2.0)


def make_domain(spec: DomainSpec, V: Potential, W: Potential, m) -> Domain:
    """由配置构造区域"""
    if spec.kind == "interval":
        if spec.lower is None or spec.upper is None:
            raise InvalidDomainError("区间需要 lower 与 upper")
        return make_interval(spec.lower, spec.upper)
    if spec.kind == "ball":
        if spec.radius is None:
            raise InvalidDomainError("球需要 radius")
        return BallDomain(spec.center if spec.center is not None else m, spec.radius)
    if spec.height is None:
        raise InvalidDomainError("水平集需要 height")
    return LevelSetDomain(V, W, m, spec.height)


def _require_minimizer_inside(domain: Domain, m: np.ndarray):
    if not domain.contains(m):
        raise InvalidDomainError(f"区域不包含最小点 m={m.tolist()}")


def check_positive_invariance(domain: Domain, V: Potential, W: Potential, m,
                              samples: int = 256) -> Tuple[bool, float]:
    """场 -grad V(x) - grad W(x - m) 在边界采样点上指向区域内部"""
    m = as_point(m)
    _, points = domain.sample_boundary(samples)
    worst = -float("inf")
    for x in points:
        field_value = -V.gradient(x) - W.gradient(x - m)
        worst = max(worst, float(field_value @ domain.outward_normal(x)))
    return worst < 0.0, worst


def exit_cost(domain: Domain, V: Potential, W: Potential, m, samples: int = 1000) -> float:
    """H = inf_{x in boundary} V(x) + W(x - m) - V(m)"""
    m = as_point(m)
    if isinstance(domain, LevelSetDomain) and np.array_equal(domain.m, m):
        return domain.height
    _require_minimizer_inside(domain, m)
    angles, points = domain.sample_boundary(max(samples, 1000))
    costs = np.array([float(effective_potential(V, W, m, p)) for p in points])
    best = int(np.argmin(costs))
    cost = float(costs[best])
    if domain.dimension > 1:
        spacing = 2.0 * math.pi / angles.shape[0]
        along = lambda theta: float(effective_potential(V, W, m, domain.boundary_point(theta)))
        result = optimize.minimize_scalar(along, bounds=(angles[best] - spacing, angles[best] + spacing),
                                          method="bounded", options={"xatol": 1e-12})
        cost = min(cost, float(result.fun))
    return cost


def boundary_distance(a: Domain, b: Domain, samples: int = 360) -> float:
    """两个嵌套区域边界沿同一射线的最小距离"""
    angles = a.boundary_angles(samples)
    return float(min(np.linalg.norm(a.boundary_point(t) - b.boundary_point(t)) for t in angles))


def _shifted_level_set(domain: Domain, height: float, V: Optional[Potential], W: Optional[Potential],
                       m) -> LevelSetDomain:
    if isinstance(domain, LevelSetDomain):
        V, W, m = domain.V, domain.W, domain.m
    elif V is None or W is None or m is None:
        raise InvalidDomainError("非水平集区域的放大/收缩需要提供 V、W 与 m")
    shifted = LevelSetDomain(V, W, m, height)
    shifted.parent_distance = boundary_distance(shifted, domain)
    return shifted


def _domain_height(domain: Domain, V: Optional[Potential], W: Optional[Potential], m) -> float:
    if isinstance(domain, LevelSetDomain):
        return domain.height
    if V is None or W is None or m is None:
        raise InvalidDomainError("非水平集区域的放大/收缩需要提供 V、W 与 m")
    return exit_cost(domain, V, W, m)


def make_enlarged(domain: Domain, delta: float, V: Optional[Potential] = None,
                  W: Optional[Potential] = None, m=None) -> Domain:
    """高度为 H + delta/2 的水平集"""
    if delta < 0.0:
        raise InvalidParameterError(f"delta 必须非负，实际为 {delta}")
    if delta == 0.0:
        return domain
    H = _domain_height(domain, V, W, m)
    return _shifted_level_set(domain, H + delta / 2.0, V, W, m)


def make_contracted(domain: Domain, delta: float, V: Optional[Potential] = None,
                    W: Optional[Potential] = None, m=None) -> Domain:
    """高度为 H - delta/2 的水平集"""
    if delta < 0.0:
        raise InvalidParameterError(f"delta 必须非负，实际为 {delta}")
    if delta == 0.0:
        return domain
    H = _domain_height(domain, V, W, m)
    if H - delta / 2.0 <= 0.0:
        raise EmptyDomainError(f"收缩后高度 {H - delta / 2.0:.3g} 不为正，请减小 delta")
    return _shifted_level_set(domain, H - delta / 2.0, V, W, m)


def default_horizon(H: float, sigma: float, dt: float, step_budget: Optional[int] = None) -> float:
    """min(exp((2H + 10) / sigma^2), step_budget * dt)"""
    budget = (step_budget or config.STEP_BUDGET) * dt
    if sigma <= 0.0:
        return budget
    exponent = (2.0 * H + 10.0) / sigma ** 2
    return min(math.exp(exponent) if exponent < 700.0 else float("inf"), budget)


def run_exit_batch(params: SimulationParams, seeds: Sequence[int], domain: Domain, V: Potential, W: Potential,
                   x0, frozen: bool = False, m=None, horizon: Optional[float] = None) -> List[ExitRecord]:
    """同参数不同种子的一批退出试验，按种子顺序返回记录"""
    x0 = as_point(x0)
    m = V.minimizer if m is None else as_point(m)
    if horizon is None:
        horizon = params.horizon_cap
    max_steps = int(math.floor(horizon / params.dt + 1e-9))
    records: List[Optional[ExitRecord]] = [None] * len(seeds)
    batch = ReplicaBatch(params, seeds, V, W, x0, frozen=frozen, m=m)
    while batch.size and batch.step_index < max_steps:
        previous = batch.step()
        inside = domain.contains_many(batch.positions)
        if inside.all():
            continue
        for row in np.flatnonzero(~inside):
            slot = int(batch.index[row])
            records[slot] = ExitRecord(
                sigma=params.sigma, seed=int(seeds[slot]), tau=batch.time,
                exit_point=domain.crossing(previous[row], batch.positions[row]).tolist(),
                capped=False, steps=batch.step_index,
            )
        batch.keep(inside)
    for row, slot in enumerate(batch.index):
        records[slot] = ExitRecord(sigma=params.sigma, seed=int(seeds[slot]), tau=horizon,
                                   exit_point=batch.positions[row].tolist(), capped=True, steps=max_steps)
    return records


def run_exit_trial(params: SimulationParams, domain: Domain, V: Potential, W: Potential, x0,
                   frozen: bool = False, m=None, step_budget: Optional[int] = None) -> ExitRecord:
    """运行到第一个位于区域外的网格时刻或时间上限"""
    x0 = as_point(x0)
    m = V.minimizer if m is None else as_point(m)
    if not domain.contains(x0):
        return ExitRecord(sigma=params.sigma, seed=params.seed, tau=0.0, exit_point=x0.tolist(),
                          capped=False, steps=0)

    horizon = params.horizon_cap
    if not math.isfinite(horizon):
        horizon = default_horizon(exit_cost(domain, V, W, m), params.sigma, params.dt, step_budget)
    if frozen or ReplicaBatch.supports(W):
        return run_exit_batch(params, [params.seed], domain, V, W, x0, frozen, m, horizon)[0]

    max_steps = int(math.floor(horizon / params.dt + 1e-9))
    state = initial_state(params, x0, reference=m)
    while state.step_index < max_steps:
        previous = state.position
        step_self_interacting(state, V, W, params)
        if not domain.contains(state.position):
            return ExitRecord(sigma=params.sigma, seed=params.seed, tau=state.time,
                              exit_point=domain.crossing(previous, state.position).tolist(),
                              capped=False, steps=state.step_index)

    return ExitRecord(sigma=params.sigma, seed=params.seed, tau=horizon, exit_point=state.position.tolist(),
                      capped=True, steps=max_steps)


def _exit_replica(task) -> List[ExitRecord]:
    params, seeds, domain, V, W, x0, frozen, m = task
    if not domain.contains(x0):
        return [run_exit_trial(params.model_copy(update={"seed": s}), domain, V, W, x0, frozen, m) for s in seeds]
    if frozen or ReplicaBatch.supports(W):
        return run_exit_batch(params, seeds, domain, V, W, x0, frozen, m)
    return [run_exit_trial(params.model_copy(update={"seed": s}), domain, V, W, x0, frozen, m) for s in seeds]


def _run_exit_chunks(runner: ReplicaRunner, params: SimulationParams, seeds: List[int], domain: Domain,
                     V: Potential, W: Potential, x0, frozen: bool, m) -> List[ExitRecord]:
    chunks = np.array_split(np.arange(len(seeds)), max(1, min(runner.threads, len(seeds))))
    tasks = [(params, [seeds[r] for r in chunk], domain, V, W, x0, frozen, m) for chunk in chunks]
    return [record for block in runner.run(_exit_replica, tasks) for record in block]


def collect_exit_records(domain: Domain, V: Potential, W: Potential, x0, sigma_ladder: Sequence[float],
                         replicas: int, base_seed: int = 0, params: Optional[SimulationParams] = None,
                         frozen: bool = False, m=None, threads: Optional[int] = None,
                         step_budget: Optional[int] = None) -> Dict[float, List[ExitRecord]]:
    """对每个 sigma 运行 replicas 次退出试验，种子由 (base_seed, 层, 副本) 派生

    副本按工作进程数切成连续的块，每块在一个进程内批量推进；
    各副本互不影响，结果与切块方式无关。
    """
    x0 = as_point(x0)
    m = V.minimizer if m is None else as_point(m)
    template = params or SimulationParams(sigma=0.0)
    H = exit_cost(domain, V, W, m)
    runner = ReplicaRunner(threads)
    records: Dict[float, List[ExitRecord]] = {}
    for level, sigma in enumerate(sigma_ladder):
        horizon = template.horizon_cap
        if not math.isfinite(horizon):
            horizon = default_horizon(H, float(sigma), template.dt, step_budget)
        level_params = template.model_copy(update={"sigma": float(sigma), "horizon_cap": horizon})
        seeds = [derive_seed(base_seed, level, r) for r in range(replicas)]
        records[float(sigma)] = _run_exit_chunks(runner, level_params, seeds, domain, V, W, x0, frozen, m)
        capped = sum(record.capped for record in records[float(sigma)])
        if capped:
            logger.warning(f"sigma={sigma}: {capped}/{replicas} 条记录达到时间上限 {horizon:.3g}")
        logger.info(f"sigma={sigma} 的 {replicas} 次退出试验完成")
    return records


def fit_arrhenius(records: Dict[float, List[ExitRecord]], H: float, delta: float = 0.3,
                  statistic: str = "median", frozen: bool = False) -> ArrheniusFit:
    """log tau 的统计量对 2/sigma^2 做最小二乘，只使用未截断记录"""
    sigmas = list(records.keys())
    means, medians, dispersions, capped_fractions, in_window = [], [], [], [], []
    fitted_log_tau = []
    for sigma in sigmas:
        level = records[sigma]
        taus = np.array([r.tau for r in level if not r.capped and r.tau > 0.0])
        if taus.size == 0:
            raise InsufficientDataError(sigma)
        log_tau = np.log(taus)
        scale = 0.5 * sigma ** 2
        fitted_log_tau.append(float(np.median(log_tau) if statistic == "median" else log_tau.mean()))
        means.append(float(scale * log_tau.mean()))
        medians.append(float(scale * np.median(log_tau)))
        dispersions.append(float(log_tau.std(ddof=1)) if log_tau.size > 1 else 0.0)
        capped_fractions.append(float(np.mean([r.capped for r in level])))
        all_taus = np.array([r.tau for r in level])
        lower = 2.0 * (H - delta) / sigma ** 2
        upper = 2.0 * (H + delta) / sigma ** 2
        with np.errstate(divide="ignore"):
            log_all = np.log(all_taus)
        in_window.append(float(np.mean((log_all >= lower) & (log_all <= upper))))

    x = np.array([2.0 / s ** 2 for s in sigmas])
    regression = stats.linregress(x, np.array(fitted_log_tau))
    half_width = None
    if len(sigmas) > 2:
        half_width = float(stats.t.ppf(0.975, len(sigmas) - 2) * regression.stderr)
    logger.info(f"Arrhenius 斜率 {regression.slope:.4f}（H={H:.4f}），截距 {regression.intercept:.4f}")
    return ArrheniusFit(
        sigma_ladder=sigmas,
        exit_cost=H,
        statistic=statistic,
        mean_scaled_log_tau=means,
        median_scaled_log_tau=medians,
        dispersion_log_tau=dispersions,
        capped_fraction=capped_fractions,
        in_window_fraction=in_window,
        delta=delta,
        slope=float(regression.slope),
        intercept=float(regression.intercept),
        confidence_half_width=half_width,
        frozen=frozen,
    )


def validate_ladder(sigma_ladder: Sequence[float], replicas: int):
    if len(sigma_ladder) < 3:
        raise InvalidParameterError(f"sigma 阶梯至少需要 3 个值，实际为 {len(sigma_ladder)}")
    if any(b >= a for a, b in zip(sigma_ladder, sigma_ladder[1:])) or min(sigma_ladder) <= 0.0:
        raise InvalidParameterError("sigma 阶梯必须为正且严格递减")
    if replicas < 50:
        raise InvalidParameterError(f"每个 sigma 至少需要 50 个副本，实际为 {replicas}")


def arrhenius_scan(domain: Domain, V: Potential, W: Potential, x0, sigma_ladder: Sequence[float],
                   replicas: int, base_seed: int = 0, params: Optional[SimulationParams] = None,
                   delta: float = 0.3, frozen: bool = False, statistic: str = "median", m=None,
                   threads: Optional[int] = None, step_budget: Optional[int] = None) -> ArrheniusFit:
    """sigma 阶梯上的退出时间扫描与 Arrhenius 回归"""
    validate_ladder(sigma_ladder, replicas)
    m = V.minimizer if m is None else as_point(m)
    records = collect_exit_records(domain, V, W, x0, sigma_ladder, replicas, base_seed, params,
                                   frozen, m, threads, step_budget)
    return fit_arrhenius(records, exit_cost(domain, V, W, m), delta, statistic, frozen)


def records_to_frame(records: Dict[float, List[ExitRecord]]) -> pd.DataFrame:
    """退出记录表：sigma, seed, tau, 退出坐标, capped, steps"""
    rows = []
    for level in records.values():
        for record in level:
            row = {"sigma": record.sigma, "seed": record.seed, "tau": record.tau}
            coordinates = record.exit_point
            if len(coordinates) == 1:
                row["exit_x"] = coordinates[0]
            else:
                row.update({f"exit_x{i + 1}": c for i, c in enumerate(coordinates)})
            row.update({"capped": record.capped, "steps": record.steps})
            rows.append(row)
    return pd.DataFrame(rows)


def _stabilization_replica(task) -> np.ndarray:
    params, V, W, m, x0, checkpoints, order = task
    state = initial_state(params, x0, reference=m, moment_order=max(1, order // 2))
    curve = np.empty(len(checkpoints))
    for j, steps in enumerate(checkpoints):
        while state.step_index < steps:
            step_self_interacting(state, V, W, params)
        if steps == 0:
            curve[j] = float(np.linalg.norm(x0 - m))
        else:
            curve[j] = wasserstein_to_dirac(state.measure, m, order)
    return curve


def estimate_T_kappa(params: SimulationParams, V: Potential, W: Potential, m, kappa: float,
                     replicas: int, window: float, x0=None, order: int = 2,
                     grid_points: int = 100, base_seed: int = 0,
                     threads: Optional[int] = None) -> StabilizationEstimate:
    """T_kappa = inf{t0 : 对所有 t >= t0，E W_{2k}(mu_t, delta_m) <= kappa}，在时间网格上估计"""
    if not kappa > 0.0:
        raise InvalidParameterError(f"kappa 必须为正数，实际为 {kappa}")
    if window < 10.0:
        raise InvalidParameterError(f"监测窗口至少为 10，实际为 {window}")
    m = as_point(m)
    x0 = m if x0 is None else as_point(x0, m.shape[0])
    total_steps = int(round(window / params.dt))
    checkpoints = sorted(set(int(round(total_steps * j / grid_points)) for j in range(grid_points + 1)))
    tasks = [(params.model_copy(update={"seed": derive_seed(base_seed, r)}), V, W, m, x0, checkpoints, order)
             for r in range(replicas)]
    curve = np.mean(run_replicas(_stabilization_replica, tasks, threads), axis=0)
    times = [steps * params.dt for steps in checkpoints]

    above = np.nonzero(curve > kappa)[0]
    if above.size == 0:
        T_kappa, reached = times[0], True
    elif above[-1] + 1 < len(times):
        T_kappa, reached = times[above[-1] + 1], True
    else:
        T_kappa, reached = None, False
    logger.info(f"sigma={params.sigma}, kappa={kappa}: T_kappa={T_kappa}")
    return StabilizationEstimate(kappa=kappa, sigma=params.sigma, order=order, T_kappa=T_kappa,
                                 reached=reached, times=times, curve=curve.tolist())


def pre_stabilization_exit_probability(params: SimulationParams, domain: Domain, V: Potential, W: Potential,
                                       x0, T: float, replicas: int, base_seed: int = 0, m=None,
                                       threads: Optional[int] = None) -> float:
    """在 T 之前退出区域的副本比例"""
    x0 = as_point(x0)
    m = V.minimizer if m is None else as_point(m)
    invariant, worst = check_positive_invariance(domain, V, W, m)
    if not invariant:
        raise InvalidDomainError(f"区域对流不是正不变的，边界上场与外法向的最大内积 {worst:.3e}")
    flow = integrate_flow(x0, V, W, params.dt, T, params.t_warmup, params.reservoir_capacity)
    for time, position in zip(flow.times, flow.positions):
        if not domain.contains(position):
            raise FlowOrbitOutsideDomainError(f"确定性流在 t={time:.3f} 离开区域，位置 {position.tolist()}")
    if params.sigma == 0.0:
        return 0.0

    seeds = [derive_seed(base_seed, r) for r in range(replicas)]
    records = _run_exit_chunks(ReplicaRunner(threads), params.model_copy(update={"horizon_cap": T}), seeds,
                               domain, V, W, x0, False, m)
    probability = float(np.mean([not record.capped for record in records]))
    logger.info(f"sigma={params.sigma}: T={T} 前退出概率 {probability:.4f}")
    return probability


def default_partition(dimension: int, arcs: int = 4) -> List[Tuple[float, float]]:
    """一维：右 [0, pi)、左 [pi, 2pi)；二维：等分角度"""
    if dimension == 1:
        return [(0.0, math.pi), (math.pi, 2.0 * math.pi)]
    edges = 2.0 * math.pi * np.arange(arcs + 1) / arcs
    return [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])]


def _arc_min_cost(domain: Domain, V: Potential, W: Potential, m: np.ndarray, arc: Tuple[float, float],
                  samples: int = 200) -> float:
    if domain.dimension == 1:
        angles = [a for a in (0.0, math.pi) if arc[0] <= a < arc[1]]
    else:
        angles = np.linspace(arc[0], arc[1], samples, endpoint=False)
    if len(angles) == 0:
        return float("inf")
    return float(min(effective_potential(V, W, m, domain.boundary_point(a)) for a in angles))


def exit_location_histogram(records: Sequence[ExitRecord], domain: Domain, V: Potential, W: Potential, m,
                            partition: Optional[Sequence[Tuple[float, float]]] = None) -> pd.DataFrame:
    """按边界弧统计退出位置频率与各弧上有效势的下确界"""
    m = as_point(m)
    partition = list(partition or default_partition(domain.dimension))
    H = exit_cost(domain, V, W, m)
    exits = [r for r in records if not r.capped]
    counts = np.zeros(len(partition), dtype=int)
    for record in exits:
        theta = domain.angle_of(record.exit_point)
        for index, (start, end) in enumerate(partition):
            if start <= theta < end:
                counts[index] += 1
                break
        else:
            raise PartitionCoverageError(f"退出点 {record.exit_point} (角度 {theta:.4f}) 不属于任何边界弧")

    if not exits:
        raise InsufficientDataError(records[0].sigma if records else float("nan"))
    total = len(exits)
    rows = []
    for (start, end), count in zip(partition, counts):
        cost = _arc_min_cost(domain, V, W, m, (start, end))
        rows.append({
            "arc_start": start,
            "arc_end": end,
            "count": int(count),
            "frequency": count / total,
            "min_cost": cost,
            "high_cost": bool(cost > H + 1e-9),
        })
    return pd.DataFrame(rows)
