"""约束势 V 与相互作用势 W，以及假设 (H) 的抽样检验。"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from exceptions import InvalidParameterError
from models import ConditionResult, HypothesisReport, PotentialSpec
from utils import as_point, make_generator

logger = logging.getLogger(__name__)

# 只在 V >= V_FLOOR 的点上检验 ΔV <= aV
V_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class Potential:
    """势函数基类，构造后不可变"""
    minimizer: np.ndarray
    convexity_lower_bound: float
    growth_degree: int
    growth_constant_a: float
    name: str = "potential"

    @property
    def dimension(self) -> int:
        return int(self.minimizer.shape[0])

    @property
    def quadratic_strength(self) -> Optional[float]:
        """二次势的强度；非二次势返回 None"""
        return None

    def evaluate(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def radial_profile(self, r):
        """W(x) = G(|x|) 中的 G；无径向表示时返回 None"""
        return None

    def hessian(self, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
        """梯度的中心差分"""
        x = as_point(x)
        d = x.shape[0]
        columns = []
        for j in range(d):
            e = np.zeros(d)
            e[j] = step
            columns.append((self.gradient(x + e) - self.gradient(x - e)) / (2.0 * step))
        return np.column_stack(columns)

    def laplacian(self, x: np.ndarray, step: float = 1e-4) -> float:
        """逐坐标中心二阶差分之和"""
        x = as_point(x)
        center = self.evaluate(x)
        total = 0.0
        for j in range(x.shape[0]):
            e = np.zeros(x.shape[0])
            e[j] = step
            total += (self.evaluate(x + e) - 2.0 * center + self.evaluate(x - e)) / step ** 2
        return float(total)


@dataclass(frozen=True, eq=False)
class QuadraticPotential(Potential):
    """strength * |x - m|^2 / 2"""
    strength: float = 1.0

    @property
    def quadratic_strength(self) -> Optional[float]:
        return self.strength

    def evaluate(self, x):
        r = np.asarray(x, dtype=float) - self.minimizer
        return 0.5 * self.strength * np.sum(r * r, axis=-1)

    def gradient(self, x):
        r = np.asarray(x, dtype=float) - self.minimizer
        return self.strength * r

    def hessian(self, x, step: float = 1e-5) -> np.ndarray:
        return self.strength * np.eye(self.dimension)

    def radial_profile(self, r):
        if np.any(self.minimizer != 0.0):
            return None
        r = np.asarray(r, dtype=float)
        return 0.5 * self.strength * r * r


@dataclass(frozen=True, eq=False)
class QuarticConvexPotential(Potential):
    """rho * |x - m|^2 / 2 + beta * |x - m|^4 / 4"""
    rho: float = 1.0
    beta: float = 0.0

    @property
    def quadratic_strength(self) -> Optional[float]:
        return self.rho if self.beta == 0.0 else None

    def evaluate(self, x):
        r = np.asarray(x, dtype=float) - self.minimizer
        sq = np.sum(r * r, axis=-1)
        return 0.5 * self.rho * sq + 0.25 * self.beta * sq * sq

    def gradient(self, x):
        r = np.asarray(x, dtype=float) - self.minimizer
        sq = np.sum(r * r, axis=-1)
        return (self.rho + self.beta * sq)[..., None] * r

    def hessian(self, x, step: float = 1e-5) -> np.ndarray:
        r = as_point(x) - self.minimizer
        sq = float(r @ r)
        return (self.rho + self.beta * sq) * np.eye(self.dimension) + 2.0 * self.beta * np.outer(r, r)

    def radial_profile(self, r):
        if np.any(self.minimizer != 0.0):
            return None
        r = np.asarray(r, dtype=float)
        return 0.5 * self.rho * r * r + 0.25 * self.beta * r ** 4


@dataclass(frozen=True, eq=False)
class FunctionPotential(Potential):
    """用户提供的势函数，必须通过 check_hypotheses 才能用于实验"""
    value_fn: Optional[Callable] = None
    gradient_fn: Optional[Callable] = None
    profile_fn: Optional[Callable] = None
    vectorized: bool = False

    def _apply(self, fn: Callable, x, vector_valued: bool):
        x = np.asarray(x, dtype=float)
        if self.vectorized or x.ndim == 1:
            return np.asarray(fn(x), dtype=float) if vector_valued else fn(x)
        return np.asarray([fn(row) for row in x], dtype=float)

    def evaluate(self, x):
        return self._apply(self.value_fn, x, vector_valued=False)

    def gradient(self, x):
        if self.gradient_fn is None:
            return self._numerical_gradient(x)
        return self._apply(self.gradient_fn, x, vector_valued=True)

    def _numerical_gradient(self, x, step: float = 1e-6):
        x = np.asarray(x, dtype=float)
        if x.ndim > 1:
            return np.asarray([self._numerical_gradient(row, step) for row in x])
        grad = np.zeros_like(x)
        for j in range(x.shape[0]):
            e = np.zeros_like(x)
            e[j] = step
            grad[j] = (self.value_fn(x + e) - self.value_fn(x - e)) / (2.0 * step)
        return grad

    def radial_profile(self, r):
        if self.profile_fn is None:
            return None
        return self.profile_fn(r)


def _validate_positive(name: str, value: float):
    if not (math.isfinite(value) and value > 0.0):
        raise InvalidParameterError(f"参数 {name} 必须为正数，实际为 {value}")


def _quadratic_growth_constant(strength: float, dimension: int) -> float:
    # ΔV/V 在 V = V_FLOOR 处最大
    return strength * dimension / V_FLOOR * (1.0 + 1e-9)


def _quartic_growth_constant(rho: float, beta: float, dimension: int) -> float:
    if beta == 0.0:
        return _quadratic_growth_constant(rho, dimension)
    # 求解 beta*u^2/4 + rho*u/2 = V_FLOOR，u = |x - m|^2
    u = (-0.5 * rho + math.sqrt(0.25 * rho * rho + beta * V_FLOOR)) / (0.5 * beta)
    laplacian = rho * dimension + beta * (dimension + 2) * u
    return laplacian / V_FLOOR * (1.0 + 1e-9)


def make_quadratic(strength: float, minimizer) -> QuadraticPotential:
    """二次势 V(x) = strength * |x - m|^2 / 2"""
    _validate_positive("strength", strength)
    m = as_point(minimizer)
    return QuadraticPotential(
        minimizer=m,
        convexity_lower_bound=float(strength),
        growth_degree=2,
        growth_constant_a=_quadratic_growth_constant(strength, m.shape[0]),
        name="quadratic",
        strength=float(strength),
    )


def make_quartic_convex(rho: float, beta: float, minimizer) -> QuarticConvexPotential:
    """四次凸势 V(x) = rho|x-m|^2/2 + beta|x-m|^4/4"""
    _validate_positive("rho", rho)
    if not (math.isfinite(beta) and beta >= 0.0):
        raise InvalidParameterError(f"参数 beta 必须非负，实际为 {beta}")
    m = as_point(minimizer)
    return QuarticConvexPotential(
        minimizer=m,
        convexity_lower_bound=float(rho),
        growth_degree=4,
        growth_constant_a=_quartic_growth_constant(rho, beta, m.shape[0]),
        name="quartic",
        rho=float(rho),
        beta=float(beta),
    )


def make_function_potential(value_fn: Callable, minimizer, convexity_lower_bound: float,
                            growth_degree: int = 2, growth_constant_a: float = float("inf"),
                            gradient_fn: Optional[Callable] = None,
                            profile_fn: Optional[Callable] = None,
                            vectorized: bool = False, name: str = "user") -> FunctionPotential:
    """由用户函数构造势函数"""
    return FunctionPotential(
        minimizer=as_point(minimizer),
        convexity_lower_bound=float(convexity_lower_bound),
        growth_degree=int(growth_degree),
        growth_constant_a=float(growth_constant_a),
        name=name,
        value_fn=value_fn,
        gradient_fn=gradient_fn,
        profile_fn=profile_fn,
        vectorized=vectorized,
    )


def make_potential(spec: PotentialSpec) -> Potential:
    """由配置构造内置势函数"""
    if spec.kind == "quadratic":
        strength = spec.strength if spec.strength is not None else spec.rho
        if strength is None:
            raise InvalidParameterError("二次势需要 strength")
        return make_quadratic(strength, spec.minimizer)
    rho = spec.rho if spec.rho is not None else spec.strength
    if rho is None:
        raise InvalidParameterError("四次势需要 rho")
    return make_quartic_convex(rho, spec.beta, spec.minimizer)


def _condition(values: np.ndarray, points: np.ndarray, threshold: float = 0.0) -> ConditionResult:
    """margin = min(values)，values >= threshold 时通过"""
    worst = int(np.argmin(values))
    margin = float(values[worst])
    return ConditionResult(
        passed=bool(margin >= threshold),
        margin=margin,
        witness=[float(v) for v in points[worst]],
    )


def _random_unit_vectors(rng: np.random.Generator, count: int, dimension: int) -> np.ndarray:
    directions = rng.standard_normal((count, dimension))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return directions / norms


def _directional_second_difference(potential: Potential, points: np.ndarray,
                                   directions: np.ndarray, step: float = 1e-3) -> np.ndarray:
    forward = potential.evaluate(points + step * directions)
    backward = potential.evaluate(points - step * directions)
    center = potential.evaluate(points)
    return (forward - 2.0 * center + backward) / step ** 2


def _domination_lhs(potential: Potential, points: np.ndarray) -> np.ndarray:
    values = np.abs(potential.evaluate(points))
    grads = np.linalg.norm(potential.gradient(points), axis=1)
    hessians = np.array([np.linalg.norm(potential.hessian(p), 2) for p in points])
    return values + grads + hessians


def check_hypotheses(V: Potential, W: Potential, box: Tuple[Sequence[float], Sequence[float]],
                     samples: int = 1000, seed: int = 0) -> HypothesisReport:
    """在盒子上抽样检验假设 (H) 的 i), ii), iv), v)"""
    if samples < 100:
        raise InvalidParameterError(f"samples 至少为 100，实际为 {samples}")
    lower = as_point(box[0], V.dimension)
    upper = as_point(box[1], V.dimension)
    if np.any(V.minimizer < lower) or np.any(V.minimizer > upper):
        raise InvalidParameterError("检验盒子必须包含 V 的最小点")

    rng = make_generator(seed)
    points = lower + (upper - lower) * rng.random((samples, V.dimension))
    directions = _random_unit_vectors(rng, samples, V.dimension)
    conditions = {}

    # i) 正性
    positivity = np.minimum(V.evaluate(points), W.evaluate(points))
    conditions["i_positivity"] = _condition(positivity, points)

    # ii) 多项式控制：内半盒拟合常数，外半盒验证
    degree = max(V.growth_degree, W.growth_degree)
    norms = np.linalg.norm(points, axis=1)
    poly = 1.0 + norms ** degree
    ratio = (_domination_lhs(V, points) + _domination_lhs(W, points)) / poly
    inner = norms <= 0.5 * norms.max()
    constant = float(ratio[inner].max()) if np.any(inner) else float(ratio.max())
    outer_points = points[~inner] if np.any(~inner) else points
    outer_ratio = ratio[~inner] if np.any(~inner) else ratio
    conditions["ii_domination"] = _condition(constant * (1.0 + 1e-6) - outer_ratio, outer_points)

    # ii) 增长条件 ΔV <= aV，仅在 V >= V_FLOOR 处检验
    v_values = V.evaluate(points)
    active = v_values >= V_FLOOR
    if np.any(active):
        laplacians = np.array([V.laplacian(p) for p in points[active]])
        slack = V.growth_constant_a * v_values[active] * (1.0 + 1e-6) + 1e-6 - laplacians
        conditions["ii_growth"] = _condition(slack, points[active])
    else:
        conditions["ii_growth"] = ConditionResult(passed=True, margin=float("inf"), witness=None)

    # iv) 一致凸性与唯一最小点
    v_curvature = _directional_second_difference(V, points, directions) - V.convexity_lower_bound
    w_curvature = _directional_second_difference(W, points, directions) - W.convexity_lower_bound
    conditions["iv_convexity"] = _condition(np.minimum(v_curvature, w_curvature), points, threshold=-1e-6)
    stationarity = float(np.linalg.norm(V.gradient(V.minimizer)))
    conditions["iv_minimizer"] = ConditionResult(
        passed=stationarity <= 1e-10,
        margin=1e-10 - stationarity,
        witness=[float(v) for v in V.minimizer],
    )

    # v) W 的球对称性
    w_values = W.evaluate(points)
    profile = W.radial_profile(norms)
    if profile is not None:
        reference = np.asarray(profile, dtype=float)
    else:
        axis_points = np.zeros_like(points)
        axis_points[:, 0] = norms
        reference = W.evaluate(axis_points)
    asymmetry = 1e-12 * (1.0 + np.abs(w_values)) - np.abs(w_values - reference)
    conditions["v_symmetry"] = _condition(asymmetry, points)

    report = HypothesisReport(conditions=conditions, samples=samples, seed=seed)
    failed = [name for name, result in conditions.items() if not result.passed]
    if failed:
        logger.warning(f"假设 (H) 抽样检验未通过的条件: {failed}")
    else:
        logger.info("假设 (H) 抽样检验全部通过")
    return report
