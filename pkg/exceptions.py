from typing import Optional


class ExitLabError(Exception):
    """实验室基础异常，携带命令行退出码"""

    exit_code = 1


class InvalidParameterError(ExitLabError, ValueError):
    """参数非法"""

    exit_code = 2


class ConfigError(ExitLabError):
    """实验配置错误"""

    exit_code = 2


class UnsupportedDimensionError(ExitLabError):
    """不支持的维度"""

    exit_code = 2


class InvalidDomainError(ExitLabError):
    """区域非法（无界或不包含最小点）"""

    exit_code = 2


class EmptyDomainError(ExitLabError):
    """收缩后的区域为空"""

    exit_code = 2


class FlowOrbitOutsideDomainError(ExitLabError):
    """确定性流的轨道离开了区域"""

    exit_code = 2


class NumericalBlowupError(ExitLabError):
    """数值爆炸"""

    exit_code = 3

    def __init__(self, step_index: int, message: Optional[str] = None):
        self.step_index = step_index
        super().__init__(message or f"第 {step_index} 步出现非有限位置")


class EmptyMeasureError(ExitLabError):
    """空测度"""

    exit_code = 3


class SolverFailureError(ExitLabError):
    """求解器未收敛"""

    exit_code = 3


class NonConvergenceError(ExitLabError):
    """不动点迭代超出最大迭代次数"""

    exit_code = 3

    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{iterations} 次迭代后未收敛，最后残差 {residual:.3e}")


class GridCoverageError(ExitLabError):
    """网格未覆盖密度的尾部"""

    exit_code = 3


class PartitionCoverageError(ExitLabError):
    """退出点不属于任何边界弧"""

    exit_code = 3


class InsufficientDataError(ExitLabError):
    """某个噪声水平下所有记录都被截断"""

    exit_code = 4

    def __init__(self, sigma: float):
        self.sigma = sigma
        super().__init__(f"sigma={sigma} 下所有退出记录均达到时间上限")
