"""占据测度、网格密度、中心、尾部诊断与 Wasserstein 距离"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import ot
import pandas as pd
from scipy import optimize, stats

from config import config
from exceptions import (
    EmptyMeasureError,
    InvalidParameterError,
    NumericalBlowupError,
    SolverFailureError,
    UnsupportedDimensionError,
)
from models import TailProfile
from potentials import Potential
from utils import as_point, coordinate_columns

logger = logging.getLogger(__name__)


class EmpiricalMeasure:
    """流式占据测度 mu_t = (1/t) * int_0^t delta_{X_s} ds

    均值与原始矩按时间精确累加，不经过储存池；储存池只保存最多
    capacity 个原子，满时相邻两两合并并把步幅加倍。
    """

    def __init__(self, dimension: int, capacity: Optional[int] = None,
                 reference=None, moment_order: int = 2):
        if capacity is None:
            capacity = config.RESERVOIR_CAPACITY
        if capacity < 2:
            raise InvalidParameterError(f"储存池容量至少为 2，实际为 {capacity}")
        self.dimension = int(dimension)
        self.capacity = int(capacity)
        self.reference = np.zeros(self.dimension) if reference is None else as_point(reference, self.dimension)
        self.moment_order = int(moment_order)
        self.elapsed_time = 0.0
        self.update_count = 0
        self.stride = 1

        self._position_integral = np.zeros(self.dimension)
        self._moment_integrals = np.zeros(self.moment_order)
        self._moment_powers = np.arange(1, self.moment_order + 1)

        self._positions = np.empty((self.capacity, self.dimension))
        self._masses = np.empty(self.capacity)
        self._size = 0

        self._pending_integral = np.zeros(self.dimension)
        self._pending_mass = 0.0
        self._pending_count = 0

    @classmethod
    def dirac(cls, point, capacity: Optional[int] = None, reference=None,
              moment_order: int = 2) -> "EmpiricalMeasure":
        """单点测度 delta_point"""
        point = as_point(point)
        measure = cls(point.shape[0], capacity=capacity,
                      reference=point if reference is None else reference,
                      moment_order=moment_order)
        measure.update(point, 1.0)
        return measure

    @property
    def running_mean(self) -> np.ndarray:
        if self.elapsed_time <= 0.0:
            raise EmptyMeasureError("测度为空，无法计算均值")
        return self._position_integral / self.elapsed_time

    @property
    def running_raw_moments(self) -> np.ndarray:
        """相对参考点的 |X - ref|^{2j}，j = 1..k 的时间平均"""
        if self.elapsed_time <= 0.0:
            raise EmptyMeasureError("测度为空，无法计算矩")
        return self._moment_integrals / self.elapsed_time

    @property
    def reservoir_size(self) -> int:
        return self._size + (1 if self._pending_count else 0)

    def update(self, x: np.ndarray, dt: float):
        """按左端点规则把 [t, t+dt) 上的位置 x 计入测度"""
        offset = x - self.reference
        squared = float(offset @ offset)
        self._position_integral += dt * x
        self._moment_integrals += dt * squared ** self._moment_powers
        self.elapsed_time += dt
        self.update_count += 1

        self._pending_integral += dt * x
        self._pending_mass += dt
        self._pending_count += 1
        if self._pending_count >= self.stride:
            self._flush()

    def _flush(self):
        self._positions[self._size] = self._pending_integral / self._pending_mass
        self._masses[self._size] = self._pending_mass
        self._size += 1
        self._pending_integral = np.zeros(self.dimension)
        self._pending_mass = 0.0
        self._pending_count = 0
        if self._size == self.capacity:
            self._compact()

    def _compact(self):
        half = self._size // 2
        masses = self._masses[:2 * half].reshape(half, 2)
        positions = self._positions[:2 * half].reshape(half, 2, self.dimension)
        merged_mass = masses.sum(axis=1)
        merged_positions = (positions * masses[..., None]).sum(axis=1) / merged_mass[:, None]
        leftover = self._size % 2
        if leftover:
            self._positions[half] = self._positions[self._size - 1]
            self._masses[half] = self._masses[self._size - 1]
        self._positions[:half] = merged_positions
        self._masses[:half] = merged_mass
        self._size = half + leftover
        self.stride *= 2
        logger.debug(f"储存池合并：原子数 {self._size}，步幅 {self.stride}")

    def atoms(self) -> Tuple[np.ndarray, np.ndarray]:
        """储存池原子 (位置, 权重)，权重之和为 1"""
        if self.elapsed_time <= 0.0:
            raise EmptyMeasureError("测度为空")
        positions = self._positions[:self._size]
        masses = self._masses[:self._size]
        if self._pending_count:
            positions = np.vstack([positions, self._pending_integral / self._pending_mass])
            masses = np.append(masses, self._pending_mass)
        else:
            positions = positions.copy()
            masses = masses.copy()
        return positions, masses / masses.sum()

    def centered_atoms(self) -> Tuple[np.ndarray, np.ndarray]:
        """中心化测度 mu_t^c：平移使均值为零"""
        positions, weights = self.atoms()
        return positions - self.running_mean, weights

    def snapshot(self) -> "EmpiricalMeasure":
        """只读副本，可交给其他线程"""
        clone = EmpiricalMeasure.__new__(EmpiricalMeasure)
        clone.__dict__.update({
            key: (value.copy() if isinstance(value, np.ndarray) else value)
            for key, value in self.__dict__.items()
        })
        return clone


@dataclass
class GridDensity:
    """均匀网格上的归一化密度，origin 为第一个单元中心"""
    origin: np.ndarray
    spacing: float
    values: np.ndarray
    log_z: Optional[float] = None

    @property
    def dimension(self) -> int:
        return int(self.values.ndim)

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dimension

    @classmethod
    def from_function(cls, fn: Callable[[np.ndarray], np.ndarray], lower, upper,
                      spacing: float) -> "GridDensity":
        """在 [lower, upper] 上按单元中心取值并归一化"""
        lower = as_point(lower)
        upper = as_point(upper, lower.shape[0])
        counts = np.maximum(np.rint((upper - lower) / spacing).astype(int), 1)
        origin = lower + 0.5 * spacing
        axes = [origin[i] + spacing * np.arange(counts[i]) for i in range(lower.shape[0])]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        values = np.asarray(fn(mesh.reshape(-1, lower.shape[0])), dtype=float).reshape(tuple(counts))
        return cls(origin=origin, spacing=float(spacing), values=values).normalized()

    def axes(self) -> List[np.ndarray]:
        return [self.origin[i] + self.spacing * np.arange(n) for i, n in enumerate(self.values.shape)]

    def centers(self) -> np.ndarray:
        """所有单元中心，形状 (N, d)，按 C 顺序展开"""
        mesh = np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)
        return mesh.reshape(-1, self.dimension)

    def weights(self) -> np.ndarray:
        return self.values.reshape(-1) * self.cell_volume

    def total_mass(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def normalized(self) -> "GridDensity":
        mass = self.total_mass()
        if not mass > 0.0:
            raise EmptyMeasureError("网格密度总质量为零")
        return GridDensity(self.origin, self.spacing, self.values / mass, self.log_z)

    def mean(self) -> np.ndarray:
        return self.weights() @ self.centers()

    def to_quantiles(self) -> "QuantileFunction":
        if self.dimension != 1:
            raise UnsupportedDimensionError(f"分位数函数只支持一维，实际维度 {self.dimension}")
        return QuantileFunction.from_atoms(self.centers()[:, 0], self.weights())

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.centers(), columns=coordinate_columns(self.dimension))
        frame["value"] = self.values.reshape(-1)
        return frame


MeasureLike = Union[EmpiricalMeasure, GridDensity]


def measure_atoms(mu: MeasureLike) -> Tuple[np.ndarray, np.ndarray]:
    """任意测度的 (位置, 权重) 表示"""
    if isinstance(mu, EmpiricalMeasure):
        return mu.atoms()
    if isinstance(mu, GridDensity):
        return mu.centers(), mu.weights()
    if isinstance(mu, QuantileFunction):
        return mu.support[:, None], mu.weights
    raise TypeError(f"不支持的测度类型 {type(mu).__name__}")


def measure_mean(mu: MeasureLike) -> np.ndarray:
    if isinstance(mu, EmpiricalMeasure):
        return mu.running_mean
    positions, weights = measure_atoms(mu)
    return weights @ positions


def measure_to_frame(mu: MeasureLike) -> pd.DataFrame:
    """测度导出为 (坐标, weight) 表"""
    positions, weights = measure_atoms(mu)
    frame = pd.DataFrame(positions, columns=coordinate_columns(positions.shape[1]))
    frame["weight"] = weights
    return frame


def occupation_update(measure: EmpiricalMeasure, x, dt: float) -> EmpiricalMeasure:
    """把位置 x 在时长 dt 上计入占据测度"""
    if not dt > 0.0:
        raise InvalidParameterError(f"dt 必须为正数，实际为 {dt}")
    x = as_point(x, measure.dimension)
    if not np.all(np.isfinite(x)):
        raise NumericalBlowupError(measure.update_count, f"第 {measure.update_count} 次更新收到非有限位置 {x}")
    measure.update(x, dt)
    return measure


def convolved_gradient(mu: MeasureLike, W: Potential, x) -> np.ndarray:
    """(grad W * mu)(x)；二次 W 直接使用精确均值"""
    if isinstance(mu, EmpiricalMeasure) and mu.elapsed_time <= 0.0:
        raise EmptyMeasureError("测度为空，无法计算卷积梯度")
    alpha = W.quadratic_strength
    if alpha is not None:
        return alpha * (x - measure_mean(mu) - W.minimizer)
    positions, weights = measure_atoms(mu)
    return weights @ W.gradient(x - positions)


def convolved_potential(mu: MeasureLike, W: Potential, points: np.ndarray,
                        block_elements: int = 4_000_000) -> np.ndarray:
    """(W * mu) 在一组点上的值，分块直接求和"""
    positions, weights = measure_atoms(mu)
    points = np.asarray(points, dtype=float).reshape(-1, positions.shape[1])
    block = max(1, block_elements // max(1, positions.shape[0]))
    result = np.empty(points.shape[0])
    for start in range(0, points.shape[0], block):
        chunk = points[start:start + block]
        differences = chunk[:, None, :] - positions[None, :, :]
        result[start:start + block] = W.evaluate(differences) @ weights
    return result


def convolved_hessian(mu: MeasureLike, W: Potential, x) -> np.ndarray:
    """(Hess W * mu)(x)"""
    alpha = W.quadratic_strength
    if alpha is not None:
        return alpha * np.eye(W.dimension)
    positions, weights = measure_atoms(mu)
    return sum(w * W.hessian(x - p) for p, w in zip(positions, weights))


def _effective_field(mu: MeasureLike, V: Potential, W: Potential) -> Callable[[np.ndarray], np.ndarray]:
    return lambda c: V.gradient(c) + convolved_gradient(mu, W, c)


def _effective_jacobian(mu: MeasureLike, V: Potential, W: Potential) -> Callable[[np.ndarray], np.ndarray]:
    return lambda c: V.hessian(c) + convolved_hessian(mu, W, c)


def _newton_center(field: Callable, jacobian: Callable, start: np.ndarray, tol: float,
                   max_iter: int) -> Tuple[np.ndarray, bool]:
    c = start.copy()
    value = field(c)
    for _ in range(max_iter):
        norm = float(np.linalg.norm(value))
        if norm <= tol:
            return c, True
        try:
            direction = -np.linalg.solve(jacobian(c), value)
        except np.linalg.LinAlgError:
            return c, False
        t = 1.0
        while t > 1e-8:
            candidate = c + t * direction
            candidate_value = field(candidate)
            if np.linalg.norm(candidate_value) < (1.0 - 1e-4 * t) * norm:
                break
            t *= 0.5
        else:
            return c, False
        c, value = candidate, candidate_value
    return c, float(np.linalg.norm(value)) <= tol


def center_of(mu: MeasureLike, V: Potential, W: Potential, tol: float = 1e-10,
              max_iter: int = 200) -> np.ndarray:
    """求解 grad V(c) + (grad W * mu)(c) = 0"""
    field = _effective_field(mu, V, W)
    jacobian = _effective_jacobian(mu, V, W)
    c, converged = _newton_center(field, jacobian, V.minimizer.astype(float), tol, max_iter)
    if converged:
        return c

    logger.warning("阻尼牛顿法停滞，改用备用求解器")
    if c.shape[0] == 1:
        scalar = lambda s: float(field(np.array([s]))[0])
        lower, upper = float(c[0]) - 1.0, float(c[0]) + 1.0
        for _ in range(60):
            if scalar(lower) < 0.0 < scalar(upper):
                break
            lower, upper = lower - (upper - lower), upper + (upper - lower)
        else:
            raise SolverFailureError("一维中心求解无法找到有效区间")
        root = optimize.brentq(scalar, lower, upper, xtol=1e-14, rtol=4 * np.finfo(float).eps,
                               maxiter=max_iter)
        c = np.array([root])
    else:
        positions, weights = measure_atoms(mu)
        energy = lambda y: float(V.evaluate(y) + weights @ W.evaluate(y - positions))
        result = optimize.minimize(energy, c, jac=field, method="L-BFGS-B",
                                   options={"gtol": tol * 1e-2, "ftol": 0.0, "maxiter": max_iter})
        c = np.asarray(result.x, dtype=float)
    residual = float(np.linalg.norm(field(c)))
    if residual > tol:
        raise SolverFailureError(f"中心求解未收敛，残差 {residual:.3e}")
    return c


class QuantileFunction:
    """一维加权测度的右连续分位数函数，相同支撑点先合并"""

    def __init__(self, support: np.ndarray, weights: np.ndarray):
        self.support = support
        self.weights = weights
        self.cdf = np.cumsum(weights)
        self.cdf[-1] = 1.0

    @classmethod
    def from_atoms(cls, points, weights=None) -> "QuantileFunction":
        points = np.asarray(points, dtype=float)
        if points.ndim == 2:
            if points.shape[1] != 1:
                raise UnsupportedDimensionError(f"分位数函数只支持一维，实际维度 {points.shape[1]}")
            points = points[:, 0]
        if points.size == 0:
            raise EmptyMeasureError("没有原子，无法构造分位数函数")
        if weights is None:
            weights = np.full(points.shape[0], 1.0 / points.shape[0])
        support, inverse = np.unique(points, return_inverse=True)
        merged = np.zeros(support.shape[0])
        np.add.at(merged, inverse, np.asarray(weights, dtype=float))
        return cls(support, merged / merged.sum())

    def __call__(self, u: np.ndarray) -> np.ndarray:
        index = np.searchsorted(self.cdf, u, side="left")
        return self.support[np.clip(index, 0, self.support.shape[0] - 1)]


def to_quantiles(mu) -> QuantileFunction:
    """把一维测度转换为分位数函数"""
    if isinstance(mu, QuantileFunction):
        return mu
    if isinstance(mu, GridDensity):
        return mu.to_quantiles()
    if isinstance(mu, EmpiricalMeasure):
        if mu.dimension != 1:
            raise UnsupportedDimensionError(f"分位数函数只支持一维，实际维度 {mu.dimension}")
        positions, weights = mu.atoms()
        return QuantileFunction.from_atoms(positions[:, 0], weights)
    return QuantileFunction.from_atoms(mu)


def _check_order(order: int):
    if order < 2 or order % 2:
        raise InvalidParameterError(f"阶数必须是不小于 2 的偶数，实际为 {order}")


def wasserstein_1d(a, b, order: int = 2) -> float:
    """一维 W_{2k}：两条分位数函数之差的 2k 次幂积分"""
    _check_order(order)
    qa, qb = to_quantiles(a), to_quantiles(b)
    cost = ot.wasserstein_1d(qa.support, qb.support, qa.weights, qb.weights, p=order, require_sort=False)
    return max(float(cost), 0.0) ** (1.0 / order)


def wasserstein_to_dirac(mu, m, order: int = 2) -> float:
    """(int |x - m|^{2k} dmu)^{1/2k}，对点测度的耦合唯一"""
    _check_order(order)
    m = as_point(m)
    if isinstance(mu, EmpiricalMeasure):
        if mu.elapsed_time <= 0.0:
            raise EmptyMeasureError("测度为空")
        if order // 2 <= mu.moment_order and np.array_equal(mu.reference, m):
            moment = float(mu.running_raw_moments[order // 2 - 1])
            return max(moment, 0.0) ** (1.0 / order)
    positions, weights = measure_atoms(mu)
    distances = np.linalg.norm(positions - m, axis=1)
    return float(weights @ distances ** order) ** (1.0 / order)


def tail_masses(mu, center, radii: Sequence[float]) -> np.ndarray:
    positions, weights = measure_atoms(mu)
    distances = np.linalg.norm(positions - as_point(center, positions.shape[1]), axis=1)
    return np.array([float(weights[distances > r].sum()) for r in radii])


def tail_profile(mu, center, radii: Sequence[float], alpha: Optional[float] = None,
                 C: Optional[float] = None) -> TailProfile:
    """测量中心附近的尾部质量并拟合 C * exp(-alpha * R)"""
    radii = np.asarray(radii, dtype=float)
    if radii.size == 0 or np.any(radii <= 0.0) or np.any(np.diff(radii) <= 0.0):
        raise InvalidParameterError("半径必须为正且严格递增")
    masses = tail_masses(mu, center, radii)
    # 浮点求和可能让尾部质量出现极小的回升
    masses = np.minimum.accumulate(masses)

    fitted_alpha = fitted_C = None
    positive = masses > 0.0
    if positive.sum() >= 2:
        line = stats.linregress(radii[positive], np.log(masses[positive]))
        fitted_alpha = -float(line.slope)
        fitted_C = float(np.exp(line.intercept))

    member = None
    if alpha is not None and C is not None:
        member = bool(np.all(masses <= C * np.exp(-alpha * radii) + 1e-15))

    return TailProfile(
        center=[float(v) for v in as_point(center)],
        radii=radii.tolist(),
        tail_masses=masses.tolist(),
        fitted_alpha=fitted_alpha,
        fitted_C=fitted_C,
        member=member,
    )
