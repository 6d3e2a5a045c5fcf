import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

import pandas as pd
from pydantic import BaseModel

logger = logging.getLogger(__name__)


class ExperimentReportWriter:
    """实验输出写入器：CSV 表格与 JSON 报告都带配置哈希"""

    def __init__(self, output_dir: str, config_hash: str):
        self.output_dir = Path(output_dir)
        self.config_hash = config_hash
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def write_csv(self, name: str, frame: pd.DataFrame) -> str:
        """首行为配置哈希注释，其后为表头与数据"""
        path = self.output_dir / name
        with open(path, 'w', encoding='utf-8', newline='') as f:
            f.write(f"# config_hash={self.config_hash}\n")
            frame.to_csv(f, index=False)
        logger.info(f"表格已保存至: {path}")
        return str(path)

    def write_json(self, name: str, report: Union[BaseModel, Dict[str, Any]]) -> str:
        """写入 JSON 报告，附加 config_hash 字段"""
        payload = report.model_dump(mode="json") if isinstance(report, BaseModel) else dict(report)
        payload["config_hash"] = self.config_hash
        path = self.output_dir / name
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")
        logger.info(f"报告已保存至: {path}")
        return str(path)


def read_csv_report(path: str) -> pd.DataFrame:
    """读取带配置哈希注释的 CSV"""
    return pd.read_csv(path, comment="#")
