from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field, model_validator

from config import config


class ConditionResult(BaseModel):
    """单个假设条件的检验结果"""
    passed: bool
    margin: float = Field(..., description="最坏情况裕度，负数表示违反")
    witness: Optional[List[float]] = Field(default=None, description="最坏情况对应的点")


class HypothesisReport(BaseModel):
    """假设 (H) 的抽样检验报告"""
    conditions: Dict[str, ConditionResult]
    samples: int
    seed: int

    @property
    def all_passed(self) -> bool:
        return all(result.passed for result in self.conditions.values())


class TailProfile(BaseModel):
    """尾部质量剖面"""
    center: List[float]
    radii: List[float]
    tail_masses: List[float]
    fitted_alpha: Optional[float] = Field(default=None, description="拟合的指数衰减率")
    fitted_C: Optional[float] = Field(default=None, description="拟合的前置常数")
    member: Optional[bool] = Field(default=None, description="是否属于 K_{alpha,C}")


class TailDecayReport(BaseModel):
    """Gibbs映射尾部衰减检验报告"""
    sigmas: List[float]
    profiles: List[TailProfile]
    decay_rates: List[float] = Field(..., description="按 sigma^2/2 缩放的拟合衰减率")
    predicted_rate: float = Field(..., description="由凸性得到的衰减率下界")
    stability_ratio: float
    passed: bool


class GibbsSolveReport(BaseModel):
    """不动点求解报告"""
    iterations: int
    residual: float
    damping: float
    converged: bool
    weighted_residual: Optional[float] = Field(default=None, description="P加权范数诊断")
    residual_history: List[float] = Field(default_factory=list)
    free_energy_history: List[float] = Field(default_factory=list)


class SimulationParams(BaseModel):
    """单条轨迹的模拟参数"""
    sigma: float = Field(..., ge=0.0)
    dt: float = Field(default_factory=lambda: config.DEFAULT_DT, gt=0.0)
    t_warmup: Optional[float] = Field(default=None, gt=0.0, description="预漂移窗口 t0，默认 10*dt")
    horizon_cap: float = Field(default=float("inf"), gt=0.0)
    seed: int = 0
    reservoir_capacity: int = Field(default_factory=lambda: config.RESERVOIR_CAPACITY, ge=2)

    @model_validator(mode="after")
    def _check_warmup(self):
        if self.t_warmup is None:
            self.t_warmup = 10.0 * self.dt
        if not self.dt < self.t_warmup:
            raise ValueError(f"dt={self.dt} 必须小于 t_warmup={self.t_warmup}")
        return self


class ExitRecord(BaseModel):
    """一次蒙特卡洛退出试验"""
    sigma: float
    seed: int
    tau: float
    exit_point: List[float]
    capped: bool
    steps: int


class ArrheniusFit(BaseModel):
    """Arrhenius 定律回归结果"""
    sigma_ladder: List[float]
    exit_cost: float
    statistic: Literal["median", "mean"]
    mean_scaled_log_tau: List[Optional[float]]
    median_scaled_log_tau: List[Optional[float]]
    dispersion_log_tau: List[Optional[float]]
    capped_fraction: List[float]
    in_window_fraction: List[float]
    delta: float
    slope: float
    intercept: float
    confidence_half_width: Optional[float]
    frozen: bool = False


class StabilizationEstimate(BaseModel):
    """占据测度稳定时间估计"""
    kappa: float
    sigma: float
    order: int
    T_kappa: Optional[float]
    reached: bool
    times: List[float]
    curve: List[float]


class PotentialSpec(BaseModel):
    """势函数配置"""
    kind: Literal["quadratic", "quartic"]
    strength: Optional[float] = None
    rho: Optional[float] = None
    beta: float = 0.0
    minimizer: List[float] = Field(default_factory=lambda: [0.0])


class DomainSpec(BaseModel):
    """区域配置"""
    kind: Literal["interval", "ball", "level_set"]
    lower: Optional[float] = None
    upper: Optional[float] = None
    center: Optional[List[float]] = None
    radius: Optional[float] = None
    height: Optional[float] = None


class ExperimentConfig(BaseModel):
    """实验配置"""
    potentials: Dict[Literal["V", "W"], PotentialSpec]
    dimension: Literal[1, 2] = 1
    x0: Optional[List[float]] = None
    sigma: Optional[float] = Field(default=None, ge=0.0)
    sigma_ladder: Optional[List[float]] = None
    dt: float = Field(default_factory=lambda: config.DEFAULT_DT, gt=0.0)
    t_warmup: Optional[float] = None
    reservoir_capacity: int = Field(default_factory=lambda: config.RESERVOIR_CAPACITY, ge=2)
    domain: Optional[DomainSpec] = None
    replicas: int = Field(default=200, ge=1)
    seed: int = 0
    output_dir: str = Field(default_factory=lambda: config.OUTPUT_DIR)
    T: Optional[float] = Field(default=None, gt=0.0, description="模拟时长")
    coupling_start: Optional[float] = Field(default=None, ge=0.0)
    record_stride: int = Field(default=100, ge=1)
    delta: float = Field(default=0.3, gt=0.0)
    frozen: bool = False
    statistic: Literal["median", "mean"] = "median"
    step_budget: int = Field(default_factory=lambda: config.STEP_BUDGET, ge=1)
    grid_spacing: float = Field(default_factory=lambda: config.GRID_SPACING, gt=0.0)
    damping: float = Field(default=0.5, gt=0.0, le=1.0)
    tol: float = Field(default=1e-8, gt=0.0)
    max_iter: int = Field(default=200, ge=1)
    check_box_halfwidth: float = Field(default=5.0, gt=0.0)

    @model_validator(mode="after")
    def _check_dimension(self):
        for name, spec in self.potentials.items():
            if len(spec.minimizer) != self.dimension:
                raise ValueError(f"势函数 {name} 的最小点维度与 dimension={self.dimension} 不一致")
        if self.x0 is not None and len(self.x0) != self.dimension:
            raise ValueError(f"x0 的维度与 dimension={self.dimension} 不一致")
        if self.sigma_ladder is not None and len(self.sigma_ladder) == 0:
            raise ValueError("sigma_ladder 不能为空")
        return self
