import math

import numpy as np
import pytest

from exceptions import (
    EmptyDomainError,
    InsufficientDataError,
    InvalidDomainError,
    InvalidParameterError,
    PartitionCoverageError,
)
from exitlab import (
    BallDomain,
    LevelSetDomain,
    PredicateDomain,
    arrhenius_scan,
    check_positive_invariance,
    collect_exit_records,
    estimate_T_kappa,
    exit_cost,
    exit_location_histogram,
    fit_arrhenius,
    make_contracted,
    make_enlarged,
    make_interval,
    pre_stabilization_exit_probability,
    records_to_frame,
    run_exit_trial,
    validate_ladder,
)
from models import ExitRecord, SimulationParams
from potentials import make_function_potential, make_quadratic


@pytest.fixture
def pair_1d():
    """一维二次势对，有效势为 x^2"""
    return make_quadratic(1.0, [0.0]), make_quadratic(1.0, [0.0])


@pytest.fixture
def pair_2d():
    """二维二次势对，有效势为 |x|^2"""
    return make_quadratic(1.0, [0.0, 0.0]), make_quadratic(1.0, [0.0, 0.0])


def record(sigma, tau, point, capped=False):
    return ExitRecord(sigma=sigma, seed=0, tau=tau, exit_point=point, capped=capped, steps=0)


class TestDomains:
    """区域与退出代价测试"""

    def test_interval_exit_cost(self, pair_1d):
        """测试区间 (-1, 2) 的退出代价为 1"""
        V, W = pair_1d
        assert exit_cost(make_interval(-1.0, 2.0), V, W, [0.0]) == pytest.approx(1.0, abs=1e-12)

    def test_ball_exit_cost(self, pair_2d):
        """测试半径 r 的球的退出代价为 (rho + alpha) r^2 / 2"""
        V, W = pair_2d
        assert exit_cost(BallDomain([0.0, 0.0], 1.5), V, W, [0.0, 0.0]) == pytest.approx(2.25, rel=1e-9)

    def test_level_set(self, pair_1d):
        """测试水平集的边界与退出代价"""
        V, W = pair_1d
        domain = LevelSetDomain(V, W, [0.0], 1.0)
        assert exit_cost(domain, V, W, [0.0]) == 1.0
        np.testing.assert_allclose(domain.boundary_point(0.0), [1.0], atol=1e-12)
        np.testing.assert_allclose(domain.boundary_point(math.pi), [-1.0], atol=1e-12)
        assert domain.contains([0.5])
        assert not domain.contains([1.5])

    def test_enlarged_and_contracted(self, pair_1d):
        """测试 D^delta 与 D_delta 的高度"""
        V, W = pair_1d
        domain = LevelSetDomain(V, W, [0.0], 1.0)
        enlarged = make_enlarged(domain, 1.0)
        assert enlarged.height == pytest.approx(1.5)
        np.testing.assert_allclose(enlarged.boundary_point(0.0), [math.sqrt(1.5)], atol=1e-12)
        assert enlarged.parent_distance == pytest.approx(math.sqrt(1.5) - 1.0, abs=1e-10)
        contracted = make_contracted(domain, 1.0)
        assert contracted.height == pytest.approx(0.5)
        assert make_enlarged(domain, 0.0) is domain

    def test_contraction_errors(self, pair_1d):
        """测试收缩过度与负 delta"""
        V, W = pair_1d
        domain = LevelSetDomain(V, W, [0.0], 1.0)
        with pytest.raises(EmptyDomainError):
            make_contracted(domain, 3.0)
        with pytest.raises(InvalidParameterError):
            make_enlarged(domain, -0.1)

    def test_ball_needs_potentials_to_enlarge(self, pair_2d):
        """测试非水平集放大时需要势函数"""
        V, W = pair_2d
        ball = BallDomain([0.0, 0.0], 1.0)
        with pytest.raises(InvalidDomainError):
            make_enlarged(ball, 0.5)
        enlarged = make_enlarged(ball, 0.5, V, W, [0.0, 0.0])
        assert enlarged.height == pytest.approx(1.25, abs=1e-6)

    def test_invalid_domains(self, pair_1d):
        """测试非法区域"""
        V, W = pair_1d
        with pytest.raises(InvalidDomainError):
            make_interval(1.0, 0.0)
        with pytest.raises(InvalidDomainError):
            LevelSetDomain(V, W, [0.0], 0.0)
        with pytest.raises(InvalidDomainError):
            exit_cost(make_interval(1.0, 2.0), V, W, [0.0])
        with pytest.raises(InvalidDomainError):
            PredicateDomain(lambda x: True, [0.0]).boundary_point(0.0)

    def test_positive_invariance(self, pair_1d):
        """测试包含最小点的区间对流正不变"""
        V, W = pair_1d
        invariant, worst = check_positive_invariance(make_interval(-1.0, 1.0), V, W, [0.0])
        assert invariant
        assert worst < 0.0
        invariant, _ = check_positive_invariance(make_interval(0.5, 3.0), V, W, [0.0])
        assert not invariant


class TestExitTrials:
    """退出试验测试"""

    def test_start_outside(self, pair_1d):
        """测试起点在区域外时 tau = 0"""
        V, W = pair_1d
        params = SimulationParams(sigma=0.5, dt=1e-2)
        result = run_exit_trial(params, make_interval(-1.0, 1.0), V, W, [2.0])
        assert result.tau == 0.0
        assert result.steps == 0
        assert not result.capped

    def test_capped_trial(self, pair_1d):
        """测试达到时间上限的记录"""
        V, W = pair_1d
        params = SimulationParams(sigma=0.1, dt=1e-2, horizon_cap=0.5, seed=3)
        result = run_exit_trial(params, make_interval(-1.0, 1.0), V, W, [0.0])
        assert result.capped
        assert result.tau == 0.5
        assert result.steps == 50

    @pytest.mark.parametrize("frozen", [True, False])
    def test_deterministic_exit_point(self, pair_1d, frozen):
        """测试无噪声时从 (0.5, 3) 的左端点退出"""
        V, W = pair_1d
        params = SimulationParams(sigma=0.0, dt=1e-2, horizon_cap=20.0)
        result = run_exit_trial(params, make_interval(0.5, 3.0), V, W, [1.0], frozen=frozen, m=[0.0])
        assert not result.capped
        assert result.tau > 0.0
        assert result.exit_point[0] == pytest.approx(0.5, abs=1e-9)

    def test_frozen_arrhenius_slope(self, pair_1d):
        """测试冻结测度扩散的 Arrhenius 斜率接近退出代价"""
        V, W = pair_1d
        fit = arrhenius_scan(make_interval(-1.0, 1.0), V, W, [0.0], [1.0, 0.85, 0.7], replicas=100,
                             base_seed=2024, params=SimulationParams(sigma=0.0, dt=1e-2), frozen=True,
                             threads=1)
        assert fit.exit_cost == pytest.approx(1.0)
        assert 0.5 <= fit.slope <= 1.5
        assert fit.capped_fraction == [0.0, 0.0, 0.0]
        assert fit.confidence_half_width is not None
        assert all(0.0 <= f <= 1.0 for f in fit.in_window_fraction)

    def test_self_interacting_and_frozen_slopes_agree(self, pair_1d):
        """测试同一阶梯上 X 与 Y 的 Arrhenius 斜率相差不超过 20%"""
        V, W = pair_1d
        kwargs = dict(replicas=200, base_seed=77, params=SimulationParams(sigma=0.0, dt=1e-2), threads=1)
        fit_x = arrhenius_scan(make_interval(-1.0, 1.0), V, W, [0.0], [0.7, 0.6, 0.5], **kwargs)
        fit_y = arrhenius_scan(make_interval(-1.0, 1.0), V, W, [0.0], [0.7, 0.6, 0.5], frozen=True, **kwargs)
        assert not fit_x.frozen
        assert fit_y.frozen
        assert abs(fit_x.slope - fit_y.slope) <= 0.2 * fit_y.slope

    def test_worker_count_does_not_change_records(self, pair_1d):
        """测试切块方式不影响退出记录"""
        V, W = pair_1d
        params = SimulationParams(sigma=0.0, dt=1e-2)
        records = [
            collect_exit_records(make_interval(-1.0, 1.0), V, W, [0.0], [0.9], replicas=7, base_seed=5,
                                 params=params, threads=threads)
            for threads in (1, 3)
        ]
        assert records[0] == records[1]

    def test_user_potential_with_several_workers(self, pair_1d):
        """测试 lambda 定义的势函数在多进程设置下退回顺序执行"""
        _, W = pair_1d
        V = make_function_potential(
            value_fn=lambda x: 0.5 * np.sum(x * x, axis=-1),
            gradient_fn=lambda x: 1.0 * x,
            minimizer=[0.0],
            convexity_lower_bound=1.0,
            vectorized=True,
        )
        params = SimulationParams(sigma=0.0, dt=1e-2)
        kwargs = dict(replicas=4, base_seed=6, params=params)
        sequential = collect_exit_records(make_interval(-1.0, 1.0), V, W, [0.0], [0.9], threads=1, **kwargs)
        parallel = collect_exit_records(make_interval(-1.0, 1.0), V, W, [0.0], [0.9], threads=2, **kwargs)
        assert sequential == parallel
        assert len(parallel[0.9]) == 4


class TestArrheniusFit:
    """Arrhenius 回归测试"""

    def test_exact_law(self):
        """测试 log tau = 2H/sigma^2 + 0.5 时回归精确"""
        H = 1.3
        records = {
            sigma: [record(sigma, math.exp(2.0 * H / sigma ** 2 + 0.5), [1.0]) for _ in range(5)]
            for sigma in (1.0, 0.8, 0.6)
        }
        fit = fit_arrhenius(records, H, statistic="mean")
        assert fit.slope == pytest.approx(H, rel=1e-9)
        assert fit.intercept == pytest.approx(0.5, abs=1e-8)
        assert fit.in_window_fraction == [1.0, 1.0, 1.0]
        assert fit.dispersion_log_tau == pytest.approx([0.0, 0.0, 0.0], abs=1e-12)

    def test_all_capped_level(self):
        """测试某层全部截断时报告数据不足"""
        records = {
            1.0: [record(1.0, 2.0, [1.0])],
            0.5: [record(0.5, 100.0, [0.0], capped=True)],
        }
        with pytest.raises(InsufficientDataError):
            fit_arrhenius(records, 1.0)

    def test_ladder_validation(self):
        """测试 sigma 阶梯校验"""
        with pytest.raises(InvalidParameterError):
            validate_ladder([1.0, 0.5], 100)
        with pytest.raises(InvalidParameterError):
            validate_ladder([0.5, 0.7, 0.3], 100)
        with pytest.raises(InvalidParameterError):
            validate_ladder([1.0, 0.7, 0.5], 10)

    def test_records_frame(self):
        """测试退出记录表的列"""
        frame = records_to_frame({1.0: [record(1.0, 2.0, [1.0]), record(1.0, 3.0, [-1.0])]})
        assert list(frame.columns) == ["sigma", "seed", "tau", "exit_x", "capped", "steps"]
        assert len(frame) == 2


class TestStabilization:
    """稳定时间与稳定前退出测试"""

    def test_T_kappa_from_far_start(self, pair_1d):
        """测试从远处出发时 T_kappa 为正且被达到"""
        V, W = pair_1d
        params = SimulationParams(sigma=0.3, dt=1e-2)
        estimate = estimate_T_kappa(params, V, W, [0.0], kappa=1.0, replicas=4, window=10.0,
                                    x0=[2.0], threads=1)
        assert estimate.curve[0] == pytest.approx(2.0)
        assert estimate.reached
        assert 0.0 < estimate.T_kappa <= 10.0

    def test_T_kappa_from_minimizer(self, pair_1d):
        """测试从 m 出发且 kappa 较大时 T_kappa = 0"""
        V, W = pair_1d
        params = SimulationParams(sigma=0.3, dt=1e-2)
        estimate = estimate_T_kappa(params, V, W, [0.0], kappa=1.0, replicas=2, window=10.0, threads=1)
        assert estimate.reached
        assert estimate.T_kappa == 0.0

    def test_T_kappa_arguments(self, pair_1d):
        """测试 kappa 与窗口校验"""
        V, W = pair_1d
        params = SimulationParams(sigma=0.3, dt=1e-2)
        with pytest.raises(InvalidParameterError):
            estimate_T_kappa(params, V, W, [0.0], kappa=0.0, replicas=2, window=10.0)
        with pytest.raises(InvalidParameterError):
            estimate_T_kappa(params, V, W, [0.0], kappa=1.0, replicas=2, window=5.0)

    def test_pre_stabilization_probability(self, pair_1d):
        """测试稳定前退出概率"""
        V, W = pair_1d
        domain = make_interval(-1.0, 1.0)
        assert pre_stabilization_exit_probability(SimulationParams(sigma=0.0, dt=1e-2), domain, V, W,
                                                  [0.0], 1.0, replicas=5) == 0.0
        probability = pre_stabilization_exit_probability(SimulationParams(sigma=0.2, dt=1e-2), domain, V, W,
                                                         [0.0], 1.0, replicas=5, threads=1)
        assert 0.0 <= probability <= 1.0
        with pytest.raises(InvalidDomainError):
            pre_stabilization_exit_probability(SimulationParams(sigma=0.2, dt=1e-2), make_interval(0.5, 3.0),
                                               V, W, [1.0], 1.0, replicas=5, threads=1)

    def test_pre_stabilization_probability_decreases_with_sigma(self, pair_1d):
        """测试稳定前退出概率随 sigma 减小而不增"""
        V, W = pair_1d
        domain = make_interval(-1.0, 1.0)
        probabilities = [
            pre_stabilization_exit_probability(SimulationParams(sigma=sigma, dt=1e-2), domain, V, W, [0.0], 5.0,
                                               replicas=200, base_seed=31, threads=1)
            for sigma in (0.8, 0.5, 0.3)
        ]
        assert probabilities[0] > 0.0
        assert probabilities[0] >= probabilities[1] >= probabilities[2]


class TestExitLocations:
    """退出位置统计测试"""

    def test_interval_histogram(self, pair_1d):
        """测试一维左右端点的频率"""
        V, W = pair_1d
        records = [record(0.5, 1.0, [1.0]), record(0.5, 1.0, [1.0]), record(0.5, 1.0, [-1.0]),
                   record(0.5, 9.0, [0.2], capped=True)]
        frame = exit_location_histogram(records, make_interval(-1.0, 1.0), V, W, [0.0])
        assert frame["count"].tolist() == [2, 1]
        assert frame["frequency"].tolist() == pytest.approx([2 / 3, 1 / 3])
        assert not frame["high_cost"].any()

    def test_off_center_ball(self, pair_2d):
        """测试偏心球上代价高的弧"""
        V, W = pair_2d
        domain = BallDomain([0.5, 0.0], 1.5)
        records = [record(0.5, 1.0, [2.0, 0.0]), record(0.5, 1.0, [-1.0, 0.0])]
        frame = exit_location_histogram(records, domain, V, W, [0.0, 0.0])
        assert frame["count"].tolist() == [1, 0, 1, 0]
        assert bool(frame["high_cost"].iloc[0])
        assert not bool(frame["high_cost"].iloc[2])
        assert frame["min_cost"].iloc[2] == pytest.approx(1.0, abs=1e-9)

    def test_partition_must_cover(self, pair_1d):
        """测试退出点不在任何弧内时报错"""
        V, W = pair_1d
        records = [record(0.5, 1.0, [-1.0])]
        with pytest.raises(PartitionCoverageError):
            exit_location_histogram(records, make_interval(-1.0, 1.0), V, W, [0.0],
                                    partition=[(0.0, math.pi)])

    def test_all_capped_records(self, pair_1d):
        """测试全部截断时没有可统计的退出位置"""
        V, W = pair_1d
        records = [record(0.5, 9.0, [0.2], capped=True), record(0.5, 9.0, [-0.1], capped=True)]
        with pytest.raises(InsufficientDataError):
            exit_location_histogram(records, make_interval(-1.0, 1.0), V, W, [0.0])

    def test_frequencies_sum_to_one(self, pair_1d):
        """测试有退出时频率之和为 1"""
        V, W = pair_1d
        records = [record(0.5, 1.0, [1.0]), record(0.5, 1.0, [-1.0]), record(0.5, 9.0, [0.2], capped=True)]
        frame = exit_location_histogram(records, make_interval(-1.0, 1.0), V, W, [0.0])
        assert frame["frequency"].sum() == pytest.approx(1.0)

    def test_expensive_arc_fades_as_sigma_decreases(self, pair_1d):
        """测试区间 (-1, 2) 右端点（代价 4）的退出频率随 sigma 减小而下降"""
        V, W = pair_1d
        domain = make_interval(-1.0, 2.0)
        records = collect_exit_records(domain, V, W, [0.0], [1.5, 1.0, 0.7], replicas=400, base_seed=13,
                                       params=SimulationParams(sigma=0.0, dt=1e-2), threads=1)
        right = []
        for sigma, level in records.items():
            frame = exit_location_histogram(level, domain, V, W, [0.0])
            assert frame["frequency"].sum() == pytest.approx(1.0)
            assert frame["min_cost"].tolist() == pytest.approx([4.0, 1.0], abs=1e-9)
            right.append(float(frame["frequency"].iloc[0]))
        assert right[0] > right[1] >= right[2]
        assert right[2] <= 0.02
