"""运行配置管理

基于 YAML + Pydantic v2 的配置加载与校验。所有字段都带有默认值，
配置文件只需写出需要修改的部分；未知字段一律拒绝。

使用方法:
    from sesim.config_manager import load_config, RunConfig

    config = RunConfig()                      # 全部默认值
    config = load_config("sesim.yaml")        # 加载指定配置文件
    config = apply_cli_overrides(config, {"seed": 7, "epochs": 10})

优先级: 命令行参数 > 配置文件 > 默认值。
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

_LOG = logging.getLogger(__name__)

CONFIG_PATH_ENV = "SESIM_CONFIG_PATH"
DEFAULT_CONFIG_PATH = "sesim.yaml"

U64_MAX = 2**64 - 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ============ 基础配置 ============


class ProjectConfig(_Section):
    """全局项目配置。"""

    log_level: str = Field(default="INFO", pattern=r"^(DEBUG|INFO|WARNING|ERROR)$")
    seed: int = Field(default=0, ge=0, le=U64_MAX)
    threads: int = Field(default=1, ge=1, le=256)


class PathsConfig(_Section):
    """输入输出路径，命令行 --bundle / --labels / --out 会覆盖这里。"""

    bundle: Path | None = None
    labels: Path | None = None
    checkpoint: Path | None = None
    history: Path | None = None
    report: Path | None = None
    sweep_dir: Path | None = None


# ============ 伪标签采样 ============


class PairSamplerConfig(_Section):
    """伪标签节点对采样配置。"""

    target_nodes_per_metapath: int = Field(default=256, ge=1)
    neighbors_per_target: int = Field(default=8, ge=1)
    seed: int = Field(default=0, ge=0, le=U64_MAX)


# ============ 训练配置 ============


class TrainConfig(_Section):
    """联合训练超参数。"""

    task: Literal["link", "node"] = "link"
    alpha: float = Field(default=0.001, gt=0, description="w 的学习率（虚拟步与 Adam 实际步）")
    beta: float = Field(default=0.0001, gt=0, description="λ 的学习率")
    weight_decay: float = Field(default=0.0001, ge=0)
    batch_size: int = Field(default=256, ge=1)
    val_batch_size: int = Field(default=256, ge=1)
    epochs: int = Field(default=50, ge=0)
    steps_per_epoch: int | None = Field(default=None, ge=1, description="为空时按训练样本数/批大小计算")
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    train_fraction: float = Field(default=0.4, gt=0, lt=1)
    val_fraction: float = Field(default=0.2, gt=0, lt=1)
    seed: int = Field(default=0, ge=0, le=U64_MAX)
    pretext_mode: Literal["regression", "classification"] = "regression"
    meta_mode: Literal["objective", "literal"] = "objective"
    vanilla: bool = False
    j_max: int = Field(default=4, ge=1, le=8)
    metapath_count: int | None = Field(default=None, ge=1, description="只使用前 k 条元路径")
    encoder: str = "gcn"
    hidden_dim: int = Field(default=512, ge=1)
    embedding_dim: int = Field(default=16, ge=1)
    head_hidden: int = Field(default=100, ge=1)
    contribution_hidden: int = Field(default=1000, ge=1)
    dense_cap: int = Field(default=4096, ge=1)

    @model_validator(mode="after")
    def check_fractions(self) -> TrainConfig:
        if self.train_fraction + self.val_fraction > 1.0:
            raise ValueError(
                f"train_fraction + val_fraction must be <= 1, got {self.train_fraction + self.val_fraction}"
            )
        return self


# ============ 合成数据配置 ============


class SynthRelationConfig(_Section):
    """一种关系的社区内/社区间连边概率。"""

    src_type: int = Field(ge=0)
    dst_type: int = Field(ge=0)
    p_intra: float = Field(default=0.02, ge=0, le=1)
    p_inter: float = Field(default=0.002, ge=0, le=1)
    directed: bool = False


def _default_relations() -> list[SynthRelationConfig]:
    return [
        SynthRelationConfig(src_type=0, dst_type=1),
        SynthRelationConfig(src_type=0, dst_type=2),
        SynthRelationConfig(src_type=1, dst_type=2),
    ]


class SynthConfig(_Section):
    """合成异构图生成配置（社区植入模型）。"""

    node_counts: list[int] = Field(default_factory=lambda: [300, 300, 300], min_length=2)
    target_type: int = Field(default=0, ge=0)
    communities: int = Field(default=3, ge=1)
    relations: list[SynthRelationConfig] = Field(default_factory=_default_relations, min_length=1)
    noise: float = Field(default=1.0, ge=0)
    extra_feature_dims: int = Field(default=4, ge=0)
    metapath_count: int | None = Field(default=None, ge=1)
    preset: Literal["lastfm", "book-crossing", "acm", "imdb", "dblp"] | None = None
    scale: float = Field(default=0.05, gt=0, le=1)
    seed: int = Field(default=0, ge=0, le=U64_MAX)

    @field_validator("node_counts")
    @classmethod
    def check_counts(cls, v: list[int]) -> list[int]:
        for count in v:
            if count < 1:
                raise ValueError(f"node count {count} must be positive")
        return v

    @model_validator(mode="after")
    def check_types(self) -> SynthConfig:
        n_types = len(self.node_counts)
        if self.target_type >= n_types:
            raise ValueError(f"target_type {self.target_type} outside {n_types} node types")
        for rel in self.relations:
            if rel.src_type >= n_types or rel.dst_type >= n_types:
                raise ValueError(f"relation ({rel.src_type}, {rel.dst_type}) references unknown node type")
        return self


class SweepConfig(_Section):
    """消融网格：最大跳数 × 元路径数量 (× 训练比例)。"""

    j_max_values: list[int] = Field(default_factory=lambda: [2, 3, 4, 5], min_length=1)
    metapath_counts: list[int] = Field(default_factory=lambda: [1, 2, 3], min_length=1)
    train_fractions: list[float] = Field(default_factory=lambda: [0.4], min_length=1)

    @field_validator("j_max_values")
    @classmethod
    def check_j_max(cls, v: list[int]) -> list[int]:
        for j in v:
            if not 1 <= j <= 8:
                raise ValueError(f"j_max {j} outside 1..8")
        return v


# ============ 日志配置 ============


class LoggingConfig(_Section):
    """日志配置。"""

    enable_console: bool = Field(default=True, description="启用终端输出")
    console_rich: bool = Field(default=True, description="使用 RichHandler 美化输出")

    enable_file: bool = Field(default=False, description="启用文件日志")
    log_dir: Path = Field(default=Path("logs"), description="日志目录")
    file_prefix: str = Field(
        default="sesim",
        pattern=r"^[a-zA-Z][a-zA-Z0-9_-]*$",
        description="日志文件名前缀",
    )

    max_bytes: int = Field(default=10 * 1024 * 1024, ge=1024, le=100 * 1024 * 1024)
    backup_count: int = Field(default=7, ge=1, le=30)

    file_format: str = Field(default="%(asctime)s - %(levelname)s - %(name)s - %(message)s")
    date_format: str = Field(default="%Y-%m-%d %H:%M:%S")


# ============ 根配置 ============


class RunConfig(_Section):
    """配置根对象。"""

    project: ProjectConfig = Field(default_factory=ProjectConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    sampler: PairSamplerConfig = Field(default_factory=PairSamplerConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @model_validator(mode="after")
    def inherit_seed(self) -> RunConfig:
        """各段未显式给出 seed 时继承 project.seed。"""
        for section in (self.sampler, self.train, self.synth):
            if "seed" not in section.model_fields_set:
                object.__setattr__(section, "seed", self.project.seed)
        return self


# ============ 错误格式化 ============


def format_validation_error(e: ValidationError, source: str) -> str:
    """格式化验证错误为用户可读信息。"""
    lines = [f"配置 {source} 校验失败:"]

    for error in e.errors():
        loc = ".".join(str(x) for x in error["loc"])
        msg = error["msg"]
        input_val = error.get("input", "N/A")

        lines.append(f"\n  字段: {loc}")
        lines.append(f"  错误: {msg}")
        lines.append(f"  输入值: {input_val}")

        if "p_intra" in loc or "p_inter" in loc:
            lines.append("  建议: 连边概率必须在 [0, 1] 之间")
        elif "fraction" in loc or "fraction" in msg:
            lines.append("  建议: 划分比例在 (0, 1) 之间，且 train_fraction + val_fraction <= 1")
        elif "j_max" in loc:
            lines.append("  建议: 最大跳数 j_max 取值 1..8，默认 4")
        elif error["type"] == "extra_forbidden":
            lines.append("  建议: 未知配置项，请检查拼写或所在分段")

    return "\n".join(lines)


# ============ 配置加载 ============


def load_config(path: str | Path) -> RunConfig:
    """加载 YAML 配置文件。

    Raises:
        ConfigError: 文件不存在、为空、不是映射或校验失败
    """
    config_path = Path(path)

    if not config_path.exists():
        hint = ""
        example_path = Path("sesim.yaml.example")
        if example_path.exists():
            hint = f"\n提示: 可复制模板文件创建配置:\n  cp {example_path} {config_path}"
        raise ConfigError(f"配置文件不存在: {config_path}{hint}")

    try:
        with open(config_path, encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"配置文件不是合法的 YAML: {config_path}: {e}") from e

    if raw is None:
        raise ConfigError(f"配置文件为空: {config_path}")
    if not isinstance(raw, dict):
        raise ConfigError(f"配置文件顶层必须是映射: {config_path}")

    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e, str(config_path))) from e


def get_config_path_from_env() -> str | None:
    """从环境变量获取默认配置文件路径。"""
    value = os.environ.get(CONFIG_PATH_ENV)
    return value if value and value.strip() else None


def resolve_config(path: str | Path | None) -> RunConfig:
    """--config 优先，其次 SESIM_CONFIG_PATH，最后是内置默认值。"""
    if path is not None:
        return load_config(path)
    env_path = get_config_path_from_env()
    if env_path is not None:
        return load_config(env_path)
    return RunConfig()


def log_config_summary(config: RunConfig, logger: logging.Logger) -> None:
    """打印完整的生效配置，便于复现。"""
    logger.info("=== 生效配置 ===")
    dumped = json.dumps(config.model_dump(mode="json"), ensure_ascii=False, indent=2, sort_keys=True)
    for line in dumped.splitlines():
        logger.info(line)


# ============ CLI 覆盖 ============

# 覆盖键 -> 配置路径
_OVERRIDE_PATHS: dict[str, tuple[tuple[str, ...], ...]] = {
    "log_level": (("project", "log_level"),),
    "threads": (("project", "threads"),),
    "bundle": (("paths", "bundle"),),
    "labels": (("paths", "labels"),),
    "checkpoint": (("paths", "checkpoint"),),
    "history": (("paths", "history"),),
    "report": (("paths", "report"),),
    "sweep_dir": (("paths", "sweep_dir"),),
    "task": (("train", "task"),),
    "j_max": (("train", "j_max"),),
    "epochs": (("train", "epochs"),),
    "vanilla": (("train", "vanilla"),),
    "meta_mode": (("train", "meta_mode"),),
    "metapath_count": (("train", "metapath_count"),),
    "synth_metapath_count": (("synth", "metapath_count"),),
    "noise": (("synth", "noise"),),
    "seed": (("project", "seed"), ("sampler", "seed"), ("train", "seed"), ("synth", "seed")),
}


def apply_cli_overrides(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """将 CLI 参数覆盖到配置对象（不可变更新，覆盖后重新校验）。

    Args:
        config: 原始配置对象
        overrides: 值为 None 的键视为未给出；"intra" / "inter" 作用于所有合成关系

    Returns:
        更新后的配置对象

    Raises:
        ConfigError: 覆盖后的配置不合法（例如 --intra 1.5）
    """
    active = {k: v for k, v in overrides.items() if v is not None and v is not False}
    if not active:
        return config

    dumped = config.model_dump()
    for key, value in active.items():
        if key in ("intra", "inter"):
            for rel in dumped["synth"]["relations"]:
                rel[f"p_{key}"] = value
            continue
        if key not in _OVERRIDE_PATHS:
            raise ConfigError(f"unknown override key: {key}")
        for section, field in _OVERRIDE_PATHS[key]:
            dumped[section][field] = value

    try:
        return RunConfig.model_validate(dumped)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e, "命令行参数")) from e
