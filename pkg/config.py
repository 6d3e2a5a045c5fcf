import os

from dotenv import load_dotenv


class ExitLabConfig:
    """退出时间实验室配置"""

    def __init__(self):
        self.load_config()

    def load_config(self):
        """加载配置"""
        load_dotenv()

        # 基础配置
        self.OUTPUT_DIR = os.getenv("EXITLAB_OUTPUT_DIR", "./exitlab_output")
        self.LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
        self.LOG_FILE = os.getenv("EXITLAB_LOG_FILE", "exitlab.log")

        # 并行配置
        self.THREADS = int(os.getenv("EXITLAB_THREADS", str(os.cpu_count() or 1)))

        # 数值积分配置
        self.DEFAULT_DT = float(os.getenv("EXITLAB_DT", "1e-3"))
        self.RESERVOIR_CAPACITY = int(os.getenv("EXITLAB_RESERVOIR_CAPACITY", "4096"))
        self.STEP_BUDGET = int(float(os.getenv("EXITLAB_STEP_BUDGET", "1e9")))

        # Gibbs网格配置
        self.GRID_SPACING = float(os.getenv("EXITLAB_GRID_SPACING", "0.01"))

        # 假设检验配置
        self.HYPOTHESIS_SAMPLES = int(os.getenv("EXITLAB_HYPOTHESIS_SAMPLES", "1000"))


# 全局配置实例
config = ExitLabConfig()
