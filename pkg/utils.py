import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np


def setup_logging(log_level: str = "INFO", log_file: Optional[str] = "exitlab.log"):
    """设置日志"""
    handlers = [logging.StreamHandler()]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))

    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True
    )
    return logging.getLogger(__name__)


def as_point(x: Any, dimension: Optional[int] = None) -> np.ndarray:
    """把标量或序列转换为一维坐标数组"""
    point = np.atleast_1d(np.asarray(x, dtype=float))
    if point.ndim != 1:
        raise ValueError(f"点必须是一维数组，实际形状 {point.shape}")
    if dimension is not None and point.shape[0] != dimension:
        raise ValueError(f"点的维度 {point.shape[0]} 与期望维度 {dimension} 不一致")
    return point


def as_points(x: Any, dimension: int) -> np.ndarray:
    """把一组点转换为 (n, d) 数组"""
    points = np.asarray(x, dtype=float)
    if points.ndim == 1:
        points = points.reshape(-1, dimension) if dimension > 1 else points[:, None]
    return points


def derive_seed(base_seed: int, *indices: int) -> int:
    """由主种子和副本编号派生独立的64位种子"""
    sequence = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, *[int(i) for i in indices]])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def make_generator(seed: int) -> np.random.Generator:
    """基于计数器的随机数生成器"""
    return np.random.Generator(np.random.Philox(int(seed)))


def config_hash(payload: Dict[str, Any]) -> str:
    """配置的稳定哈希"""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]



def coordinate_columns(dimension: int, prefix: str = "x") -> List[str]:
    """坐标列名：一维为 x，二维为 x1, x2"""
    if dimension == 1:
        return [prefix]
    return [f"{prefix}{i + 1}" for i in range(dimension)]
