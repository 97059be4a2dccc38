import os
import yaml
from typing import Dict, Any, Optional
from pydantic_settings import BaseSettings
from pydantic import Field, field_validator
from dotenv import load_dotenv


DEFAULT_CONFIG_PATH = "./config/config.yaml"


class ConfigLoader:
    """
    配置加载器，负责从YAML文件加载实验配置，并与环境变量集成
    """

    def __init__(self, config_path: Optional[str] = DEFAULT_CONFIG_PATH):
        load_dotenv()  # 加载 .env 文件
        self.config_path = config_path
        self.config = self._load_config()
        self._resolve_env_vars()

    def _load_config(self) -> Dict[str, Any]:
        """
        从YAML文件加载配置；config_path 为 None 时返回空配置（全部使用默认值）
        """
        if self.config_path is None:
            return {}
        if not os.path.exists(self.config_path):
            raise FileNotFoundError(f"配置文件不存在: {self.config_path}")

        with open(self.config_path, 'r', encoding='utf-8') as f:
            loaded = yaml.safe_load(f)
        if loaded is None:
            return {}
        if not isinstance(loaded, dict):
            raise ValueError(f"配置文件顶层必须是映射: {self.config_path}")
        return loaded

    def _resolve_env_vars(self) -> None:
        """
        解析配置中的环境变量引用（形如 $TAILCAL_SEED 的字符串值）
        """
        self._resolve_env_vars_recursive(self.config)

    def _resolve_env_vars_recursive(self, obj: Any) -> None:
        if isinstance(obj, dict):
            for key, value in obj.items():
                if isinstance(value, str) and value.startswith("$"):
                    env_var = value[1:]
                    if env_var in os.environ:
                        obj[key] = os.environ[env_var]
                elif isinstance(value, (dict, list)):
                    self._resolve_env_vars_recursive(value)
        elif isinstance(obj, list):
            for index, item in enumerate(obj):
                if isinstance(item, str) and item.startswith("$") and item[1:] in os.environ:
                    obj[index] = os.environ[item[1:]]
                else:
                    self._resolve_env_vars_recursive(item)

    def get(self, key: str, default: Any = None) -> Any:
        """
        获取配置项，支持嵌套键（如 "world.num_categories"）
        """
        keys = key.split('.')
        value = self.config

        for k in keys:
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default

        return value

    def get_all(self) -> Dict[str, Any]:
        """
        获取所有配置
        """
        return self.config

    def update(self, key: str, value: Any) -> None:
        """
        更新配置项，中间层级不存在时自动创建
        """
        keys = key.split('.')
        config = self.config

        for k in keys[:-1]:
            if k not in config or not isinstance(config[k], dict):
                config[k] = {}
            config = config[k]

        config[keys[-1]] = value


class TailCalSettings(BaseSettings):
    """
    进程级设置：日志级别、输出目录、配置文件路径等，可由 TAILCAL_* 环境变量覆盖
    """
    project_name: str = Field(default="tailcal")
    version: str = Field(default="0.1.0")
    log_level: str = Field(default="INFO")
    output_dir: str = Field(default="./output")
    show_progress: bool = Field(default=False)

    config_path: str = Field(default=DEFAULT_CONFIG_PATH)

    @field_validator('output_dir')
    @classmethod
    def ensure_absolute_path(cls, v: str) -> str:
        """确保路径为绝对路径"""
        if not os.path.isabs(v):
            return os.path.abspath(v)
        return v

    @field_validator('log_level')
    @classmethod
    def normalize_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"未知的日志级别: {v}")
        return level

    model_config = {
        "env_prefix": "TAILCAL_",
        "env_file": ".env",
        "case_sensitive": False,
        "extra": "ignore"
    }


# 全局配置实例
config_loader: Optional[ConfigLoader] = None
settings: Optional[TailCalSettings] = None


def initialize_config(config_path: Optional[str] = None) -> ConfigLoader:
    """
    初始化配置

    显式给出的路径必须存在；未给出时读取默认路径，默认文件缺失则使用内置默认值。
    """
    global config_loader, settings
    if config_path is None:
        settings = TailCalSettings()
        path = settings.config_path if os.path.exists(settings.config_path) else None
    else:
        settings = TailCalSettings(config_path=config_path)
        path = config_path
    config_loader = ConfigLoader(path)
    return config_loader


def get_config() -> ConfigLoader:
    """
    获取配置加载器实例
    """
    if config_loader is None:
        initialize_config()
    return config_loader


def get_settings() -> TailCalSettings:
    """
    获取Pydantic设置实例
    """
    if settings is None:
        initialize_config()
    return settings
