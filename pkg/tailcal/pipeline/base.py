import logging
import time
from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional, Tuple

logger = logging.getLogger("tailcal.pipeline.base")


class MissingInputError(ValueError):
    """数据字典缺少组件所需的输入，通常是组件顺序有误"""


class PipelineComponent(ABC):
    """
    实验流水线组件的抽象基类

    组件之间通过一个数据字典传递世界、候选框、分类头、分数矩阵、检测结果和报告。
    子类在 requires 中声明执行前必须存在的键，缺失时在 run 之前报错。
    """

    requires: Tuple[str, ...] = ()

    def __init__(self, name: str = "", config: Optional[Dict[str, Any]] = None):
        self.name = name or self.__class__.__name__
        self.config = config or {}
        self.enabled = self.config.get("enabled", True)
        self._setup()

    def _setup(self) -> None:
        """组件初始化设置，校验 config；可以在子类中重写"""

    @abstractmethod
    def run(self, data: Dict[str, Any]) -> Dict[str, Any]:
        """
        运行组件的核心逻辑

        Args:
            data: 输入数据字典

        Returns:
            处理后的输出数据字典
        """

    def preprocess(self, data: Dict[str, Any]) -> Dict[str, Any]:
        return data

    def postprocess(self, data: Dict[str, Any]) -> Dict[str, Any]:
        return data

    def check_inputs(self, data: Dict[str, Any]) -> None:
        missing = [key for key in self.requires if data.get(key) is None]
        if missing:
            raise MissingInputError(f"组件 {self.name} 缺少输入 {missing}，请检查组件顺序")

    def require(self, data: Dict[str, Any], section: str, key: str) -> Any:
        """
        取出 data[section][key]，例如某个分数矩阵或分类头

        Raises:
            MissingInputError: 前面的组件没有产出该名称
        """
        store = data.get(section) or {}
        if key not in store:
            available = sorted(store)
            raise MissingInputError(f"组件 {self.name}: data['{section}'] 中不存在 '{key}' (已有: {available})")
        return store[key]

    def execute(self, data: Dict[str, Any]) -> Dict[str, Any]:
        """
        执行组件的完整处理流程（输入检查 → 预处理 → 核心处理 → 后处理）

        出错时记录日志并重新抛出，由调用方决定退出码。
        """
        if not self.enabled:
            logger.info(f"组件 {self.name} 已禁用，跳过执行")
            return data

        try:
            self.check_inputs(data)
            processed = self.run(self.preprocess(data))
            return self.postprocess(processed)
        except Exception as e:
            logger.error(f"执行组件 {self.name} 时出错: {e}")
            raise

    def get_info(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "type": self.__class__.__name__,
            "enabled": self.enabled,
            "requires": list(self.requires),
        }


class Pipeline:
    """
    处理管道，由多个 PipelineComponent 按顺序组成
    """

    def __init__(self, name: str = "", config: Optional[Dict[str, Any]] = None):
        self.name = name or self.__class__.__name__
        self.config = config or {}
        self.components: List[PipelineComponent] = []
        self.enabled = self.config.get("enabled", True)

    def add_component(self, component: PipelineComponent) -> None:
        self.components.append(component)

    def add_components(self, components) -> None:
        self.components.extend(components)

    def get_component(self, component_name: str) -> Optional[PipelineComponent]:
        for component in self.components:
            if component.name == component_name:
                return component
        return None

    def run(self, input_data: Dict[str, Any]) -> Dict[str, Any]:
        """
        依次执行各组件

        Args:
            input_data: 初始数据字典（不会被修改）

        Returns:
            处理后的数据，_pipeline_info 中记录已执行的组件
        """
        if not self.enabled:
            logger.info(f"管道 {self.name} 已禁用，跳过执行")
            return input_data

        data = input_data.copy()
        execution_info: Dict[str, Any] = {
            "pipeline_name": self.name,
            "components_executed": [],
        }
        data["_pipeline_info"] = execution_info

        for component in self.components:
            if not component.enabled:
                logger.info(f"跳过禁用的组件: {component.name}")
                continue
            started = time.perf_counter()
            data = component.execute(data)
            # 耗时只写日志，结果与 manifest 保持确定性
            logger.info(f"组件 {component.name} 完成 ({time.perf_counter() - started:.2f}s)")
            execution_info["components_executed"].append(component.name)

        execution_info["success"] = True
        return data

    def get_info(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "enabled": self.enabled,
            "component_count": len(self.components),
            "components": [comp.get_info() for comp in self.components],
        }

    def validate(self) -> bool:
        """组件名称不能重复"""
        component_names = set()
        for component in self.components:
            if component.name in component_names:
                logger.error(f"组件名称重复: {component.name}")
                return False
            component_names.add(component.name)
        return True
