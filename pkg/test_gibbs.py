import numpy as np
import pytest
from scipy.stats import norm

from exceptions import GridCoverageError, InvalidParameterError, NonConvergenceError, UnsupportedDimensionError
from gibbs import (
    GridSpec,
    convergence_profile,
    free_energy,
    gibbs_map,
    measure_flow_evolve,
    solve_fixed_point,
    verify_tail_decay,
)
from measures import EmpiricalMeasure, GridDensity, occupation_update, wasserstein_1d
from models import SimulationParams
from potentials import make_function_potential, make_quadratic


@pytest.fixture
def quadratic_pair():
    """创建一维二次势对 V = W = x^2 / 2"""
    return make_quadratic(1.0, [0.0]), make_quadratic(1.0, [0.0])


def shifted_gaussian(mean: float, spacing: float = 0.02) -> GridDensity:
    return GridDensity.from_function(lambda x: norm.pdf(x[:, 0], loc=mean, scale=0.5), [-6.0], [8.0], spacing)


class TestGibbsMap:
    """平衡映射测试"""

    def test_standard_normal(self):
        """测试 W 可忽略且 sigma = sqrt(2) 时得到标准正态密度"""
        V = make_quadratic(1.0, [0.0])
        W = make_quadratic(1e-12, [0.0])
        density = gibbs_map(EmpiricalMeasure.dirac([0.0]), V, W, np.sqrt(2.0))
        assert density.total_mass() == pytest.approx(1.0)
        expected = norm.pdf(density.centers()[:, 0])
        assert np.max(np.abs(density.values - expected)) <= 1e-4

    def test_invalid_sigma(self, quadratic_pair):
        """测试 sigma 必须为正"""
        V, W = quadratic_pair
        with pytest.raises(InvalidParameterError):
            gibbs_map(EmpiricalMeasure.dirac([0.0]), V, W, 0.0)

    def test_small_grid_is_rejected(self, quadratic_pair):
        """测试固定网格覆盖不足时报错"""
        V, W = quadratic_pair
        grid = GridSpec.from_bounds([-0.5], [0.5], 0.01)
        with pytest.raises(GridCoverageError):
            gibbs_map(EmpiricalMeasure.dirac([0.0]), V, W, 1.0, grid=grid)

    def test_constant_shift_of_confinement(self, quadratic_pair):
        """测试 V 加常数 7 后输出不变"""
        V, W = quadratic_pair
        shifted = make_function_potential(
            value_fn=lambda x: V.evaluate(x) + 7.0,
            gradient_fn=V.gradient,
            minimizer=[0.0],
            convexity_lower_bound=1.0,
            vectorized=True,
        )
        grid = GridSpec.from_bounds([-5.0], [5.0], 0.01)
        mu = EmpiricalMeasure.dirac([0.3])
        base = gibbs_map(mu, V, W, 1.0, grid=grid)
        moved = gibbs_map(mu, shifted, W, 1.0, grid=grid)
        assert np.max(np.abs(base.values - moved.values)) <= 1e-12

    def test_gaussian_variance(self, quadratic_pair):
        """测试 Pi(delta_0) 的方差为 sigma^2 / (2 (rho + alpha))"""
        V, W = quadratic_pair
        density = gibbs_map(EmpiricalMeasure.dirac([0.0]), V, W, 1.0)
        centers = density.centers()[:, 0]
        assert float(density.weights() @ centers ** 2) == pytest.approx(0.25, abs=1e-5)


class TestSymmetry:
    """关于 q = 1 对称的输入测试"""

    @pytest.fixture
    def symmetric_setup(self):
        """创建关于 1 对称的势函数与网格"""
        V = make_quadratic(1.0, [1.0])
        W = make_quadratic(1.0, [0.0])
        return V, W, GridSpec.from_bounds([-4.0], [6.0], 0.02)

    @staticmethod
    def asymmetry(density: GridDensity) -> float:
        return float(np.max(np.abs(density.values - density.values[::-1])))

    def test_grid_is_symmetric(self, symmetric_setup):
        """测试网格中心关于 1 对称"""
        _, _, grid = symmetric_setup
        centers = grid.centers()[:, 0]
        np.testing.assert_allclose(centers + centers[::-1], 2.0, rtol=0, atol=1e-12)

    def test_gibbs_map_preserves_symmetry(self, symmetric_setup):
        """测试对称测度的平衡映射仍对称"""
        V, W, grid = symmetric_setup
        mu = EmpiricalMeasure(1)
        occupation_update(mu, [0.2], 1.0)
        occupation_update(mu, [1.8], 1.0)
        assert self.asymmetry(gibbs_map(mu, V, W, 1.0, grid=grid)) <= 1e-8

    def test_fixed_point_is_symmetric(self, symmetric_setup):
        """测试不动点关于 1 对称"""
        V, W, grid = symmetric_setup
        rho, report = solve_fixed_point(V, W, 1.0, grid=grid)
        assert report.converged
        assert self.asymmetry(rho) <= 1e-8
        assert float(rho.mean()[0]) == pytest.approx(1.0, abs=1e-8)

    def test_measure_flow_keeps_symmetry(self, symmetric_setup):
        """测试测度流的每个节点都关于 1 对称"""
        V, W, _ = symmetric_setup
        mu0 = GridDensity.from_function(lambda x: norm.pdf(x[:, 0], loc=1.0, scale=0.8), [-4.0], [6.0], 0.02)
        for knot in measure_flow_evolve(mu0, V, W, 1.0, 4):
            assert self.asymmetry(knot) <= 1e-8


class TestFixedPoint:
    """自洽不动点测试"""

    def test_quadratic_pair_fixed_point(self, quadratic_pair):
        """测试二次势对在 sigma = 1 时的不动点是方差 1/4 的正态分布"""
        V, W = quadratic_pair
        rho, report = solve_fixed_point(V, W, 1.0)
        assert report.converged
        assert report.iterations == 1
        assert len(report.residual_history) == 1
        centers = rho.centers()[:, 0]
        assert float(rho.weights() @ centers ** 2) == pytest.approx(0.25, abs=1e-6)
        assert np.max(np.abs(rho.values - norm.pdf(centers, scale=0.5))) <= 1e-4

    def test_free_energy_descends(self, quadratic_pair):
        """测试阻尼迭代中自由能单调不增"""
        V, W = quadratic_pair
        rho, report = solve_fixed_point(V, W, 1.0, initial=shifted_gaussian(2.0))
        assert report.converged
        assert report.iterations > 10
        history = np.array(report.free_energy_history)
        assert np.all(np.diff(history) <= 1e-12)
        assert abs(float(rho.mean()[0])) < 1e-6

    def test_non_convergence(self, quadratic_pair):
        """测试超出最大迭代次数"""
        V, W = quadratic_pair
        with pytest.raises(NonConvergenceError) as excinfo:
            solve_fixed_point(V, W, 1.0, initial=shifted_gaussian(2.0), max_iter=1)
        assert excinfo.value.iterations == 1

    def test_invalid_damping(self, quadratic_pair):
        """测试阻尼系数范围"""
        V, W = quadratic_pair
        with pytest.raises(InvalidParameterError):
            solve_fixed_point(V, W, 1.0, damping=0.0)


class TestFreeEnergy:
    """自由能测试"""

    def test_gaussian_value(self, quadratic_pair):
        """测试方差 1/4 正态分布的自由能"""
        V, W = quadratic_pair
        gaussian = GridDensity.from_function(lambda x: norm.pdf(x[:, 0], scale=0.5), [-5.0], [5.0], 0.01)
        expected = -0.25 * np.log(np.pi * np.e / 2.0) + 0.125 + 0.125
        assert free_energy(gaussian, V, W, 1.0) == pytest.approx(expected, abs=1e-4)

    def test_uniform_has_zero_entropy(self, quadratic_pair):
        """测试 [0, 1] 上均匀分布的熵项为零"""
        V, W = quadratic_pair
        uniform = GridDensity.from_function(lambda x: np.ones(x.shape[0]), [0.0], [1.0], 0.01)
        assert free_energy(uniform, V, W, 1.0) == pytest.approx(free_energy(uniform, V, W, 3.0), abs=1e-9)

    def test_fixed_point_minimizes(self, quadratic_pair):
        """测试扰动不动点会提高自由能"""
        V, W = quadratic_pair
        rho, _ = solve_fixed_point(V, W, 1.0)
        centers = rho.centers()[:, 0]
        perturbed = GridDensity(rho.origin, rho.spacing, rho.values * (1.0 + 0.1 * centers)).normalized()
        assert free_energy(perturbed, V, W, 1.0) > free_energy(rho, V, W, 1.0)


class TestMeasureFlow:
    """测度流测试"""

    def test_mean_recursion(self, quadratic_pair):
        """测试均值满足 m_{n+1} = m_n (1 - gamma_n / 2)"""
        V, W = quadratic_pair
        knots = measure_flow_evolve(shifted_gaussian(2.0), V, W, 1.0, 5)
        assert len(knots) == 5
        expected = float(knots[0].mean()[0])
        for n in range(1, 5):
            gamma = ((n + 1) ** 1.5 - n ** 1.5) / (n + 1) ** 1.5
            expected *= 1.0 - 0.5 * gamma
            assert float(knots[n].mean()[0]) == pytest.approx(expected, abs=1e-6)
            assert knots[n].total_mass() == pytest.approx(1.0)

    def test_distance_to_fixed_point_decreases(self, quadratic_pair):
        """测试各节点到不动点的 W_2 严格递减"""
        V, W = quadratic_pair
        mu0 = shifted_gaussian(2.0)
        rho, _ = solve_fixed_point(V, W, 1.0, grid=GridSpec.of(mu0))
        distances = [wasserstein_1d(knot, rho) for knot in measure_flow_evolve(mu0, V, W, 1.0, 6)]
        assert all(later < earlier for earlier, later in zip(distances, distances[1:]))

    def test_requires_two_knots(self, quadratic_pair):
        """测试节点数下限"""
        V, W = quadratic_pair
        with pytest.raises(InvalidParameterError):
            measure_flow_evolve(shifted_gaussian(0.0), V, W, 1.0, 1)


class TestTailDecay:
    """尾部衰减检验测试"""

    def test_quadratic_pair_rates_are_stable(self, quadratic_pair):
        """测试二次势对的缩放衰减率关于 sigma 稳定"""
        V, W = quadratic_pair
        report = verify_tail_decay(EmpiricalMeasure.dirac([0.0]), V, W, [0.5, 0.7, 1.0])
        assert report.passed
        assert report.stability_ratio <= 1.5
        assert report.predicted_rate == pytest.approx(4.0, rel=1e-6)
        assert min(report.decay_rates) >= report.predicted_rate
        assert len(report.profiles) == 3

    def test_invalid_radii(self, quadratic_pair):
        """测试半径校验"""
        V, W = quadratic_pair
        with pytest.raises(InvalidParameterError):
            verify_tail_decay(EmpiricalMeasure.dirac([0.0]), V, W, [1.0], radii=(3.0, 2.0))


class TestConvergenceProfile:
    """占据测度收敛剖面测试"""

    def test_profile_rows(self, quadratic_pair):
        """测试检查时刻的 W_2 表"""
        V, W = quadratic_pair
        rho, _ = solve_fixed_point(V, W, 0.5)
        params = SimulationParams(sigma=0.5, dt=1e-2, seed=5)
        frame = convergence_profile(params, V, W, [0.0], rho, [2.0, 1.0])
        assert list(frame.columns) == ["t", "w2"]
        assert frame["t"].tolist() == pytest.approx([1.0, 2.0])
        assert (frame["w2"] > 0.0).all()
        assert np.isfinite(frame["w2"]).all()

    def test_one_dimension_only(self, quadratic_pair):
        """测试二维密度不支持"""
        V = make_quadratic(1.0, [0.0, 0.0])
        W = make_quadratic(1.0, [0.0, 0.0])
        density = GridDensity.from_function(lambda x: np.exp(-np.sum(x * x, axis=1)), [-2.0, -2.0], [2.0, 2.0], 0.1)
        params = SimulationParams(sigma=0.5, dt=1e-2)
        with pytest.raises(UnsupportedDimensionError):
            convergence_profile(params, V, W, [0.0, 0.0], density, [1.0])

    def test_distance_decreases_along_trajectory(self, quadratic_pair):
        """测试从远处出发时 W_2(mu_t, rho) 在 t = 10, 100, 1000 严格递减"""
        V, W = quadratic_pair
        rho, _ = solve_fixed_point(V, W, 0.5)
        params = SimulationParams(sigma=0.5, dt=1e-2, seed=8, reservoir_capacity=2 ** 17)
        frame = convergence_profile(params, V, W, [3.0], rho, [10.0, 100.0, 1000.0])
        w2 = frame["w2"].tolist()
        assert w2[0] > w2[1] > w2[2]
