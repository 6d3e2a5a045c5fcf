import asyncio
import logging
import pickle
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, List, Optional, Sequence

from config import config

logger = logging.getLogger(__name__)


def _picklable(fn: Callable[[Any], Any], task: Any) -> bool:
    try:
        pickle.dumps((fn, task))
    except (pickle.PicklingError, AttributeError, TypeError) as e:
        logger.warning(f"副本任务无法序列化到工作进程 ({e})，改为顺序执行")
        return False
    return True


class ReplicaRunner:
    """独立副本的并行执行器，结果按任务顺序返回"""

    def __init__(self, threads: Optional[int] = None):
        self.threads = max(1, int(threads if threads is not None else config.THREADS))

    def run(self, fn: Callable[[Any], Any], tasks: Sequence[Any]) -> List[Any]:
        """执行全部任务；单线程或任务含不可序列化的势函数时顺序执行"""
        tasks = list(tasks)
        if self.threads == 1 or len(tasks) <= 1 or not _picklable(fn, tasks[0]):
            return [fn(task) for task in tasks]
        return asyncio.run(self._run_parallel(fn, tasks))

    async def _run_parallel(self, fn: Callable[[Any], Any], tasks: List[Any]) -> List[Any]:
        loop = asyncio.get_running_loop()
        workers = min(self.threads, len(tasks))
        logger.debug(f"使用 {workers} 个工作进程执行 {len(tasks)} 个副本")
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [loop.run_in_executor(pool, fn, task) for task in tasks]
            # gather 保持提交顺序，聚合与完成顺序无关
            return await asyncio.gather(*futures)


def run_replicas(fn: Callable[[Any], Any], tasks: Sequence[Any], threads: Optional[int] = None) -> List[Any]:
    """按任务顺序返回 fn(task) 的结果"""
    return ReplicaRunner(threads).run(fn, tasks)
