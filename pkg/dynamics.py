"""自相互作用扩散 X、冻结测度扩散 Y 与确定性流 psi 的积分器"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from exceptions import EmptyMeasureError, InvalidParameterError, NumericalBlowupError
from measures import EmpiricalMeasure, convolved_gradient, occupation_update, wasserstein_to_dirac
from models import SimulationParams
from potentials import Potential
from replica_runner import run_replicas
from utils import as_point, coordinate_columns, derive_seed, make_generator

logger = logging.getLogger(__name__)


class NoiseSource:
    """按块缓存的标准正态增量，基于 Philox 计数器生成器"""

    def __init__(self, seed: int, dimension: int, block: int = 4096):
        self._rng = make_generator(seed)
        self.dimension = dimension
        self.block = block
        self._buffer = np.empty((0, dimension))
        self._cursor = 0

    def draw(self) -> np.ndarray:
        if self._cursor >= self._buffer.shape[0]:
            self._buffer = self._rng.standard_normal((self.block, self.dimension))
            self._cursor = 0
        xi = self._buffer[self._cursor]
        self._cursor += 1
        return xi


@dataclass
class DiffusionState:
    """X_t 的当前状态"""
    time: float
    position: np.ndarray
    measure: EmpiricalMeasure
    noise: Optional[NoiseSource]
    start_position: np.ndarray
    step_index: int = 0


@dataclass
class CoupledPair:
    """共享布朗增量的 (X, Y) 对"""
    x_state: DiffusionState
    y_position: np.ndarray
    coupling_start: float
    sup_distance: float = 0.0
    sup_y_to_m: float = 0.0
    shared_increments: bool = True


@dataclass
class FlowTrajectory:
    """确定性流 psi_t(x0) 在节点上的取值"""
    times: np.ndarray
    positions: np.ndarray
    measure: EmpiricalMeasure


class ReplicaBatch:
    """同一组参数、不同种子的一批副本按步同步推进，位置形状 (R, d)

    自相互作用模式只支持二次 W：此时漂移只依赖各副本的精确均值，
    不需要储存池。每个副本的噪声流与 NoiseSource(seed) 逐位一致。
    """

    def __init__(self, params: SimulationParams, seeds: Sequence[int], V: Potential, W: Potential,
                 x0, frozen: bool = False, m=None, block: int = 4096):
        x0 = as_point(x0)
        if not frozen and not self.supports(W):
            raise InvalidParameterError(f"批量自相互作用积分需要二次 W，实际为 {W.name}")
        self.params = params
        self.V = V
        self.W = W
        self.frozen = frozen
        self.m = V.minimizer if m is None else as_point(m, x0.shape[0])
        self.index = np.arange(len(seeds))
        self.start_position = x0.copy()
        self.positions = np.tile(x0, (len(seeds), 1))
        self.position_integrals = np.zeros_like(self.positions)
        self.elapsed_time = 0.0
        self.step_index = 0
        self.block = block
        self._rngs = [make_generator(int(s)) for s in seeds] if params.sigma > 0.0 else None
        self._buffer = np.empty((len(seeds), 0, x0.shape[0]))
        self._cursor = 0

    @staticmethod
    def supports(W: Potential) -> bool:
        return W.quadratic_strength is not None

    @property
    def size(self) -> int:
        return int(self.positions.shape[0])

    @property
    def time(self) -> float:
        return self.step_index * self.params.dt

    def _draw(self) -> np.ndarray:
        if self._cursor >= self._buffer.shape[1]:
            self._buffer = np.stack([
                rng.standard_normal((self.block, self.positions.shape[1])) for rng in self._rngs
            ])
            self._cursor = 0
        xi = self._buffer[:, self._cursor]
        self._cursor += 1
        return xi

    def _drift(self) -> np.ndarray:
        x = self.positions
        if self.frozen:
            return self.V.gradient(x) + self.W.gradient(x - self.m)
        if self.time < self.params.t_warmup:
            return self.V.gradient(x) + self.W.gradient(x - self.start_position)
        mean = self.position_integrals / self.elapsed_time
        return self.V.gradient(x) + self.W.quadratic_strength * (x - mean - self.W.minimizer)

    def step(self) -> np.ndarray:
        """推进一步，返回步前位置"""
        previous = self.positions
        new_positions = previous - self._drift() * self.params.dt
        if self._rngs is not None:
            new_positions = new_positions + self.params.sigma * math.sqrt(self.params.dt) * self._draw()
        if not self.frozen:
            self.position_integrals = self.position_integrals + self.params.dt * previous
            self.elapsed_time += self.params.dt
        self.step_index += 1
        if not np.all(np.isfinite(new_positions)):
            raise NumericalBlowupError(self.step_index)
        self.positions = new_positions
        return previous

    def keep(self, mask: np.ndarray):
        """只保留 mask 为真的副本"""
        self.index = self.index[mask]
        self.positions = self.positions[mask]
        self.position_integrals = self.position_integrals[mask]
        if self._rngs is not None:
            self._rngs = [rng for rng, kept in zip(self._rngs, mask) if kept]
            self._buffer = self._buffer[mask]


def initial_state(params: SimulationParams, x0, reference=None, moment_order: int = 2) -> DiffusionState:
    """从 x0 出发、测度为空的初始状态"""
    x0 = as_point(x0)
    measure = EmpiricalMeasure(
        x0.shape[0],
        capacity=params.reservoir_capacity,
        reference=x0 if reference is None else reference,
        moment_order=moment_order,
    )
    noise = NoiseSource(params.seed, x0.shape[0]) if params.sigma > 0.0 else None
    return DiffusionState(time=0.0, position=x0.copy(), measure=measure, noise=noise, start_position=x0.copy())


def self_interacting_drift(state: DiffusionState, V: Potential, W: Potential,
                           params: SimulationParams) -> np.ndarray:
    """t < t_warmup 时测度取 delta_{x0}，之后取 mu_t"""
    x = state.position
    if state.time < params.t_warmup:
        return V.gradient(x) + W.gradient(x - state.start_position)
    return V.gradient(x) + convolved_gradient(state.measure, W, x)


def _advance(state: DiffusionState, V: Potential, W: Potential, params: SimulationParams,
             xi: Optional[np.ndarray]) -> DiffusionState:
    x = state.position
    new_position = x - self_interacting_drift(state, V, W, params) * params.dt
    if xi is not None:
        new_position = new_position + params.sigma * math.sqrt(params.dt) * xi
    occupation_update(state.measure, x, params.dt)
    state.step_index += 1
    if not np.all(np.isfinite(new_position)):
        raise NumericalBlowupError(state.step_index)
    state.position = new_position
    state.time = state.step_index * params.dt
    return state


def step_self_interacting(state: DiffusionState, V: Potential, W: Potential,
                          params: SimulationParams) -> DiffusionState:
    """Euler-Maruyama 一步，占据测度用步前位置更新"""
    xi = state.noise.draw() if params.sigma > 0.0 else None
    return _advance(state, V, W, params, xi)


def step_frozen(position, m, V: Potential, W: Potential, params: SimulationParams,
                noise: Optional[np.ndarray] = None, step_index: int = 0) -> np.ndarray:
    """冻结测度扩散 dY = sigma dB - grad V(Y) dt - grad W(Y - m) dt"""
    y = position
    new_position = y - (V.gradient(y) + W.gradient(y - m)) * params.dt
    if noise is not None and params.sigma > 0.0:
        new_position = new_position + params.sigma * math.sqrt(params.dt) * noise
    if not np.all(np.isfinite(new_position)):
        raise NumericalBlowupError(step_index)
    return new_position


def integrate_flow(x0, V: Potential, W: Potential, dt: float, T: float,
                   t_warmup: Optional[float] = None,
                   reservoir_capacity: Optional[int] = None) -> FlowTrajectory:
    """显式 Euler 积分确定性流，节点为 dt 的整数倍"""
    if not T > dt:
        raise InvalidParameterError(f"T={T} 必须大于 dt={dt}")
    settings = {"sigma": 0.0, "dt": dt, "t_warmup": t_warmup}
    if reservoir_capacity is not None:
        settings["reservoir_capacity"] = reservoir_capacity
    params = SimulationParams(**settings)
    state = initial_state(params, x0)
    n_steps = int(round(T / dt))
    positions = np.empty((n_steps + 1, state.position.shape[0]))
    positions[0] = state.position
    for n in range(1, n_steps + 1):
        _advance(state, V, W, params, None)
        positions[n] = state.position
    return FlowTrajectory(times=dt * np.arange(n_steps + 1), positions=positions, measure=state.measure)


def lyapunov_energy(state: DiffusionState, V: Potential, W: Potential) -> float:
    """V(x) + (W * mu_t)(x)，非爆炸诊断"""
    if state.measure.elapsed_time <= 0.0:
        raise EmptyMeasureError("测度为空，无法计算能量")
    positions, weights = state.measure.atoms()
    x = state.position
    return float(V.evaluate(x) + weights @ W.evaluate(x - positions))


def run_coupled(params: SimulationParams, V: Potential, W: Potential, m, T_coupling_start: float,
                T_end: float, x0=None) -> CoupledPair:
    """先单独运行 X，T_coupling_start 之后 X 与 Y 共享高斯增量"""
    m = as_point(m)
    x0 = m if x0 is None else as_point(x0, m.shape[0])
    if T_coupling_start > T_end:
        raise InvalidParameterError(f"耦合起点 {T_coupling_start} 晚于终点 {T_end}")
    if T_end > params.horizon_cap:
        raise InvalidParameterError(f"终点 {T_end} 超过时间上限 {params.horizon_cap}")

    state = initial_state(params, x0, reference=m)
    start_steps = int(round(T_coupling_start / params.dt))
    end_steps = int(round(T_end / params.dt))
    for _ in range(start_steps):
        step_self_interacting(state, V, W, params)

    pair = CoupledPair(x_state=state, y_position=state.position.copy(), coupling_start=state.time)
    pair.sup_y_to_m = float(np.linalg.norm(pair.y_position - m))
    for _ in range(end_steps - start_steps):
        xi = state.noise.draw() if params.sigma > 0.0 else None
        y = step_frozen(pair.y_position, m, V, W, params, xi, step_index=state.step_index + 1)
        _advance(state, V, W, params, xi)
        pair.y_position = y
        pair.sup_distance = max(pair.sup_distance, float(np.linalg.norm(state.position - y)))
        pair.sup_y_to_m = max(pair.sup_y_to_m, float(np.linalg.norm(y - m)))
    return pair


def run_trajectory(params: SimulationParams, V: Potential, W: Potential, x0, T: float,
                   record_stride: int = 100, m=None) -> Tuple[pd.DataFrame, DiffusionState]:
    """运行一条轨迹并按步幅抽取 (t, x, 能量, 储存池大小, 到 delta_m 的距离)"""
    x0 = as_point(x0)
    m = V.minimizer if m is None else as_point(m, x0.shape[0])
    state = initial_state(params, x0, reference=m)
    n_steps = int(round(T / params.dt))
    if n_steps < 1:
        raise InvalidParameterError(f"T={T} 小于一个时间步")
    rows = []
    for n in range(1, n_steps + 1):
        step_self_interacting(state, V, W, params)
        if n % record_stride == 0 or n == n_steps:
            energy = lyapunov_energy(state, V, W)
            rows.append([state.time, *state.position, energy, state.measure.reservoir_size,
                         wasserstein_to_dirac(state.measure, m, 2)])
            logger.debug(f"t={state.time:.3f} 能量={energy:.6f}")
    columns = ["t", *coordinate_columns(x0.shape[0]), "lyapunov_energy", "reservoir_size", "w2_to_m"]
    return pd.DataFrame(rows, columns=columns), state


def _closeness_replica(task) -> float:
    params, V, W, x0, flow_positions = task
    state = initial_state(params, x0)
    worst = 0.0
    for n in range(1, flow_positions.shape[0]):
        step_self_interacting(state, V, W, params)
        gap = state.position - flow_positions[n]
        worst = max(worst, float(gap @ gap))
    return worst


def flow_closeness(params: SimulationParams, V: Potential, W: Potential, x0, T: float,
                   sigmas: Sequence[float], replicas: int, base_seed: int = 0,
                   threads: Optional[int] = None) -> pd.DataFrame:
    """各 sigma 下 E sup_{t<=T} |X_t - psi_t|^2 的蒙特卡洛估计"""
    x0 = as_point(x0)
    flow = integrate_flow(x0, V, W, params.dt, T, params.t_warmup, params.reservoir_capacity)
    rows = []
    previous = None
    for level, sigma in enumerate(sigmas):
        tasks = [
            (params.model_copy(update={"sigma": float(sigma), "seed": derive_seed(base_seed, level, r)}),
             V, W, x0, flow.positions)
            for r in range(replicas)
        ]
        sups = np.array(run_replicas(_closeness_replica, tasks, threads))
        mean_sup = float(sups.mean())
        ratio = previous / mean_sup if previous is not None and mean_sup > 0.0 else None
        rows.append({"sigma": float(sigma), "mean_sup_sq": mean_sup,
                     "std_sup_sq": float(sups.std(ddof=1)) if replicas > 1 else 0.0,
                     "ratio_to_previous": ratio})
        previous = mean_sup
        logger.info(f"sigma={sigma}: E sup|X-psi|^2 = {mean_sup:.6e}")
    return pd.DataFrame(rows)


def _coupling_replica(task) -> Tuple[float, float]:
    params, V, W, m, x0, start, end = task
    pair = run_coupled(params, V, W, m, start, end, x0)
    return pair.sup_distance, pair.sup_y_to_m


def coupling_scan(params: SimulationParams, V: Potential, W: Potential, m, x0, T_coupling_start: float,
                  T_end: float, replicas: int, base_seed: int = 0,
                  threads: Optional[int] = None) -> pd.DataFrame:
    """多副本运行 run_coupled，逐副本记录两个上确界"""
    seeds = [derive_seed(base_seed, r) for r in range(replicas)]
    tasks = [(params.model_copy(update={"seed": s}), V, W, as_point(m), x0, T_coupling_start, T_end)
             for s in seeds]
    results = run_replicas(_coupling_replica, tasks, threads)
    frame = pd.DataFrame(results, columns=["sup_distance", "sup_y_to_m"])
    frame.insert(0, "seed", seeds)
    frame.insert(0, "replica", range(replicas))
    frame.insert(0, "sigma", params.sigma)
    return frame
