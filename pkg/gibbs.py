"""平衡映射 Pi(mu)、自洽不动点、测度流、自由能与尾部衰减检验"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import logsumexp

from config import config
from dynamics import initial_state, step_self_interacting
from exceptions import (
    GridCoverageError,
    InvalidParameterError,
    NonConvergenceError,
    UnsupportedDimensionError,
)
from measures import (
    EmpiricalMeasure,
    GridDensity,
    MeasureLike,
    QuantileFunction,
    center_of,
    convolved_potential,
    wasserstein_1d,
)
from models import GibbsSolveReport, SimulationParams, TailDecayReport, TailProfile
from potentials import Potential
from utils import as_point

logger = logging.getLogger(__name__)

# 网格边界处对数权重相对最大值的下降量
LOG_DROP = 40.0
EDGE_MASS_LIMIT = 1e-8


@dataclass(frozen=True)
class GridSpec:
    """均匀网格：第一个单元中心、间距与形状"""
    origin: Tuple[float, ...]
    spacing: float
    shape: Tuple[int, ...]

    @classmethod
    def from_bounds(cls, lower, upper, spacing: float) -> "GridSpec":
        lower = as_point(lower)
        upper = as_point(upper, lower.shape[0])
        counts = np.maximum(np.ceil((upper - lower) / spacing - 1e-9).astype(int), 1)
        origin = lower + 0.5 * spacing
        return cls(tuple(float(v) for v in origin), float(spacing), tuple(int(n) for n in counts))

    @classmethod
    def of(cls, density: GridDensity) -> "GridSpec":
        return cls(tuple(float(v) for v in density.origin), density.spacing, tuple(density.values.shape))

    @property
    def dimension(self) -> int:
        return len(self.shape)

    def centers(self) -> np.ndarray:
        axes = [self.origin[i] + self.spacing * np.arange(n) for i, n in enumerate(self.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dimension)


def log_weight(mu: MeasureLike, V: Potential, W: Potential, sigma: float, points: np.ndarray) -> np.ndarray:
    """l(x) = -2 (V + W * mu)(x) / sigma^2"""
    return -2.0 * (V.evaluate(points) + convolved_potential(mu, W, points)) / sigma ** 2


def _square_boundary(center: np.ndarray, half_width: float, count: int = 64) -> np.ndarray:
    if center.shape[0] == 1:
        return np.array([center - half_width, center + half_width])
    t = np.linspace(-1.0, 1.0, count // 4, endpoint=False)
    ones = np.ones_like(t)
    sides = [np.column_stack(pair) for pair in ((t, -ones), (ones, t), (-t, ones), (-ones, -t))]
    return center + half_width * np.vstack(sides)


def auto_grid(mu: MeasureLike, V: Potential, W: Potential, sigma: float,
              spacing: Optional[float] = None, expansion: float = 1.0) -> GridSpec:
    """[c - L, c + L]^d，L 为对数权重下降 LOG_DROP 的最小半宽"""
    spacing = spacing or config.GRID_SPACING
    c = center_of(mu, V, W)
    peak = float(log_weight(mu, V, W, sigma, c[None, :])[0])

    def dropped(half_width: float) -> bool:
        boundary = _square_boundary(c, half_width)
        return float(np.max(log_weight(mu, V, W, sigma, boundary))) <= peak - LOG_DROP

    upper = 1.0
    while not dropped(upper):
        upper *= 2.0
        if upper > 1e6:
            raise GridCoverageError("无法找到覆盖密度的网格边界")
    lower = 0.0
    for _ in range(30):
        middle = 0.5 * (lower + upper)
        if dropped(middle):
            upper = middle
        else:
            lower = middle
    half_width = expansion * (math.ceil(upper / spacing) + 1) * spacing
    return GridSpec.from_bounds(c - half_width, c + half_width, spacing)


def _edge_mass(values: np.ndarray, cell_volume: float) -> float:
    mask = np.zeros(values.shape, dtype=bool)
    for axis in range(values.ndim):
        index = [slice(None)] * values.ndim
        index[axis] = 0
        mask[tuple(index)] = True
        index[axis] = -1
        mask[tuple(index)] = True
    return float(values[mask].sum() * cell_volume)


def _gibbs_on_grid(mu: MeasureLike, V: Potential, W: Potential, sigma: float, grid: GridSpec) -> GridDensity:
    centers = grid.centers()
    log_values = log_weight(mu, V, W, sigma, centers)
    peak = float(np.max(log_values))
    unnormalized = np.exp(log_values - peak)
    cell_volume = grid.spacing ** grid.dimension
    mass = float(unnormalized.sum() * cell_volume)
    values = (unnormalized / mass).reshape(grid.shape)
    edge = _edge_mass(values, cell_volume)
    if edge >= EDGE_MASS_LIMIT:
        raise GridCoverageError(f"网格边缘单元质量 {edge:.3e} 超过 {EDGE_MASS_LIMIT:g}")
    return GridDensity(origin=np.asarray(grid.origin), spacing=grid.spacing, values=values,
                       log_z=peak + math.log(mass))


def gibbs_map(mu: MeasureLike, V: Potential, W: Potential, sigma: float,
              grid: Optional[GridSpec] = None, spacing: Optional[float] = None) -> GridDensity:
    """Pi(mu) = exp(-2(V + W*mu)/sigma^2) / Z，在对数域计算"""
    if not sigma > 0.0:
        raise InvalidParameterError(f"sigma 必须为正数，实际为 {sigma}")
    if grid is not None:
        return _gibbs_on_grid(mu, V, W, sigma, grid)
    expansion = 1.0
    for attempt in range(6):
        try:
            return _gibbs_on_grid(mu, V, W, sigma, auto_grid(mu, V, W, sigma, spacing, expansion))
        except GridCoverageError as e:
            expansion *= 1.5
            logger.warning(f"网格覆盖不足，扩大网格后重试 ({attempt + 1}): {e}")
    raise GridCoverageError("多次扩大网格后仍未覆盖密度尾部")


def l1_distance(a: GridDensity, b: GridDensity) -> float:
    return float(np.abs(a.values - b.values).sum() * a.cell_volume)


def weighted_residual(a: GridDensity, b: GridDensity, degree: int) -> float:
    """P(x) = 1 + |x|^{2k} 加权的 L1 距离，仅作诊断"""
    radii = np.linalg.norm(a.centers(), axis=1)
    return float((np.abs(a.values - b.values).reshape(-1) * (1.0 + radii ** degree)).sum() * a.cell_volume)


def free_energy(mu: GridDensity, V: Potential, W: Potential, sigma: float,
                frozen_measure: Optional[MeasureLike] = None) -> float:
    """F(mu) = -(sigma^2/2) H(mu) + int V dmu + 1/2 int int W(x-y) dmu dmu

    传入 frozen_measure 时计算 -(sigma^2/2) H(mu) + int (V + W * nu) dmu。
    """
    centers = mu.centers()
    weights = mu.weights()
    values = mu.values.reshape(-1)
    positive = values > 0.0
    entropy = -float(np.sum(weights[positive] * np.log(values[positive])))
    confinement = float(weights @ V.evaluate(centers))
    if frozen_measure is not None:
        interaction = float(weights @ convolved_potential(frozen_measure, W, centers))
    else:
        interaction = 0.5 * float(weights @ convolved_potential(mu, W, centers))
    return -0.5 * sigma ** 2 * entropy + confinement + interaction


def solve_fixed_point(V: Potential, W: Potential, sigma: float, grid: Optional[GridSpec] = None,
                      damping: float = 0.5, tol: float = 1e-8, max_iter: int = 200,
                      spacing: Optional[float] = None,
                      initial: Optional[GridDensity] = None) -> Tuple[GridDensity, GibbsSolveReport]:
    """阻尼迭代 rho <- (1 - d) rho + d Pi(rho)，默认从 Pi(delta_m) 开始"""
    if not 0.0 < damping <= 1.0:
        raise InvalidParameterError(f"damping 必须在 (0, 1] 内，实际为 {damping}")
    if initial is not None:
        rho = initial.normalized()
        grid = GridSpec.of(initial)
    else:
        rho = gibbs_map(EmpiricalMeasure.dirac(V.minimizer), V, W, sigma, grid=grid, spacing=spacing)
        grid = GridSpec.of(rho)

    degree = max(V.growth_degree, W.growth_degree)
    residuals: List[float] = []
    energies: List[float] = []
    for iteration in range(1, max_iter + 1):
        target = _gibbs_on_grid(rho, V, W, sigma, grid)
        residual = l1_distance(target, rho)
        residuals.append(residual)
        energies.append(free_energy(rho, V, W, sigma))
        logger.debug(f"不动点迭代 {iteration}: 残差 {residual:.3e}")
        if residual <= tol:
            report = GibbsSolveReport(
                iterations=iteration,
                residual=residual,
                damping=damping,
                converged=True,
                weighted_residual=weighted_residual(target, rho, degree),
                residual_history=residuals,
                free_energy_history=energies,
            )
            logger.info(f"不动点迭代收敛：{iteration} 次，残差 {residual:.3e}")
            return rho, report
        values = (1.0 - damping) * rho.values + damping * target.values
        rho = GridDensity(rho.origin, rho.spacing, values, target.log_z).normalized()
    raise NonConvergenceError(residuals[-1], max_iter)


def measure_flow_evolve(mu0: GridDensity, V: Potential, W: Potential, sigma: float,
                        n_knots: int) -> List[GridDensity]:
    """mu_{n+1} = mu_n + ((T_{n+1} - T_n) / T_{n+1}) (Pi(mu_n) - mu_n)，T_n = n^{3/2}"""
    if n_knots < 2:
        raise InvalidParameterError(f"n_knots 至少为 2，实际为 {n_knots}")
    grid = GridSpec.of(mu0)
    knots = [mu0.normalized()]
    for n in range(1, n_knots):
        current = knots[-1]
        t_now, t_next = n ** 1.5, (n + 1) ** 1.5
        gamma = (t_next - t_now) / t_next
        target = _gibbs_on_grid(current, V, W, sigma, grid)
        values = current.values + gamma * (target.values - current.values)
        lowest = float(values.min())
        if lowest < 0.0:
            logger.warning(f"测度流第 {n} 个节点出现负值 {lowest:.3e}，截断为 0 后重新归一化")
            values = np.maximum(values, 0.0)
        knots.append(GridDensity(current.origin, current.spacing, values).normalized())
    return knots


def _log_ray_integral(mu: MeasureLike, V: Potential, W: Potential, sigma: float, center: np.ndarray,
                      direction: np.ndarray, a: float, b: float, radial_power: int,
                      points: int = 4001) -> float:
    """log int_a^b exp(l(c + s v)) s^{d-1} ds，梯形公式"""
    s = np.linspace(a, b, points)
    log_values = log_weight(mu, V, W, sigma, center + s[:, None] * direction)
    weights = np.full(points, (b - a) / (points - 1))
    weights[[0, -1]] *= 0.5
    if radial_power:
        weights = weights * s ** radial_power
    return float(logsumexp(log_values, b=weights))


def _ray_directions(dimension: int, count: int = 72) -> Tuple[np.ndarray, float]:
    if dimension == 1:
        return np.array([[1.0], [-1.0]]), 1.0
    if dimension == 2:
        angles = 2.0 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(angles), np.sin(angles)]), 2.0 * np.pi / count
    raise UnsupportedDimensionError(f"尾部检验只支持一维和二维，实际维度 {dimension}")


def _ray_end(mu, V, W, sigma, center, direction, start: float) -> float:
    reference = float(log_weight(mu, V, W, sigma, (center + start * direction)[None, :])[0])
    end = start + 1.0
    while float(log_weight(mu, V, W, sigma, (center + end * direction)[None, :])[0]) > reference - 50.0:
        end = start + 2.0 * (end - start)
    return end


def tail_ratio_profile(mu: MeasureLike, V: Potential, W: Potential, sigma: float, center: np.ndarray,
                       radii: Sequence[float], core_radius: float = 2.0) -> np.ndarray:
    """log[Pi(mu)(|x - c| >= R) / Pi(mu)(|x - c| <= core_radius)]，沿射线求积，与网格无关"""
    directions, angle_weight = _ray_directions(center.shape[0])
    power = center.shape[0] - 1
    log_core, log_tails = [], [[] for _ in radii]
    for v in directions:
        log_core.append(_log_ray_integral(mu, V, W, sigma, center, v, 0.0, core_radius, power))
        end = _ray_end(mu, V, W, sigma, center, v, max(radii))
        for j, radius in enumerate(radii):
            log_tails[j].append(_log_ray_integral(mu, V, W, sigma, center, v, radius, end, power))
    log_core_total = float(logsumexp(log_core)) + math.log(angle_weight)
    return np.array([float(logsumexp(t)) + math.log(angle_weight) - log_core_total for t in log_tails])


def predicted_decay_rate(mu: MeasureLike, V: Potential, W: Potential, center: np.ndarray,
                         core_radius: float = 2.0, step: float = 1e-5) -> float:
    """凸性给出的尾部衰减率下界：min_v d/ds (V + W*mu)(c + s v) 在 s = core_radius 处"""
    directions, _ = _ray_directions(center.shape[0])
    slopes = []
    for v in directions:
        points = center + np.array([core_radius + step, core_radius - step])[:, None] * v
        energy = V.evaluate(points) + convolved_potential(mu, W, points)
        slopes.append(float(energy[0] - energy[1]) / (2.0 * step))
    return min(slopes)


def verify_tail_decay(mu: MeasureLike, V: Potential, W: Potential, sigmas: Sequence[float],
                      radii: Sequence[float] = (2.5, 3.0, 3.5), stability_limit: float = 1.5) -> TailDecayReport:
    """检验 Pi(mu) 的尾部衰减率（乘 sigma^2/2 后）关于 sigma 稳定"""
    radii = [float(r) for r in radii]
    if any(r <= 0.0 for r in radii) or any(b <= a for a, b in zip(radii, radii[1:])):
        raise InvalidParameterError("半径必须为正且严格递增")
    center = center_of(mu, V, W)
    profiles, rates = [], []
    for sigma in sigmas:
        log_ratios = tail_ratio_profile(mu, V, W, float(sigma), center, radii)
        line = stats.linregress(radii, log_ratios)
        rates.append(0.5 * float(sigma) ** 2 * (-float(line.slope)))
        profiles.append(TailProfile(
            center=center.tolist(),
            radii=radii,
            tail_masses=np.exp(log_ratios).tolist(),
            fitted_alpha=-float(line.slope),
            fitted_C=float(np.exp(line.intercept)),
        ))
    predicted = predicted_decay_rate(mu, V, W, center)
    ratio = max(rates) / min(rates) if min(rates) > 0.0 else float("inf")
    passed = ratio <= stability_limit
    logger.info(f"尾部衰减率 {rates}，稳定比 {ratio:.3f}，预测下界 {predicted:.3f}")
    return TailDecayReport(sigmas=[float(s) for s in sigmas], profiles=profiles, decay_rates=rates,
                           predicted_rate=predicted, stability_ratio=ratio, passed=passed)


def convergence_profile(params: SimulationParams, V: Potential, W: Potential, x0, rho_inf: GridDensity,
                        times: Sequence[float], centered: bool = False) -> pd.DataFrame:
    """沿一条轨迹在检查时刻计算 W_2(mu_t, rho_inf)，可选中心化测度"""
    if rho_inf.dimension != 1:
        raise UnsupportedDimensionError("收敛剖面只支持一维")
    times = sorted(float(t) for t in times)
    state = initial_state(params, x0)
    reference = rho_inf.to_quantiles()
    if centered:
        reference = QuantileFunction.from_atoms(reference.support - rho_inf.mean()[0], reference.weights)
    rows = []
    for checkpoint in times:
        target_steps = int(round(checkpoint / params.dt))
        while state.step_index < target_steps:
            step_self_interacting(state, V, W, params)
        if centered:
            positions, weights = state.measure.centered_atoms()
        else:
            positions, weights = state.measure.atoms()
        distance = wasserstein_1d(QuantileFunction.from_atoms(positions[:, 0], weights), reference, 2)
        rows.append({"t": state.time, "w2": distance})
        logger.info(f"t={state.time:.1f}: W_2 = {distance:.6f}")
    return pd.DataFrame(rows)
