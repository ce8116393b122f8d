"""
错误类型与 CLI 退出码

所有可预期的失败都派生自 SesimError，并携带稳定的 exit_code，
由 sesim_cli.main 统一映射为进程退出码。
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_ARTIFACT = 5


class SesimError(Exception):
    """错误基类"""

    exit_code: int = 1


class ArgumentError(SesimError, ValueError):
    """参数不合法（形状不匹配、k=0、空列表等）"""

    exit_code = EXIT_CONFIG


class ConfigError(SesimError):
    """配置文件或命令行参数校验失败"""

    exit_code = EXIT_CONFIG


class GraphFormatError(SesimError):
    """图数据文件格式错误，附带文件名与行号"""

    exit_code = EXIT_DATA

    def __init__(self, message: str, *, file: str | None = None, line: int | None = None):
        self.file = file
        self.line = line
        location = ""
        if file is not None:
            location = f"{file}:{line}: " if line is not None else f"{file}: "
        super().__init__(f"{location}{message}")


class CompositionError(GraphFormatError):
    """元路径跳转类型无法衔接"""

    def __init__(self, message: str, *, hop: int, file: str | None = None, line: int | None = None):
        self.hop = hop
        self.reason = message
        super().__init__(f"hop {hop}: {message}", file=file, line=line)


class NumericError(SesimError):
    """出现非有限数值（NaN / inf）"""

    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, *, where: str, epoch: int | None = None, step: int | None = None):
        self.detail = message
        self.where = where
        self.epoch = epoch
        self.step = step
        context = ""
        if epoch is not None:
            context = f" (epoch={epoch}, step={step})"
        super().__init__(f"{where}: {message}{context}")

    def with_context(self, epoch: int, step: int) -> NumericError:
        return NumericError(self.detail, where=self.where, epoch=epoch, step=step)


class StateError(SesimError):
    """调用顺序错误（重复 backward、缺少元更新记录等）"""

    exit_code = EXIT_NUMERIC


class UndefinedMetricError(SesimError, ValueError):
    """指标在当前输入上无定义（例如 AUC 只有单一类别）"""

    exit_code = EXIT_DATA


class ArtifactMismatchError(SesimError):
    """检查点与图数据不匹配，或产物缺失"""

    exit_code = EXIT_ARTIFACT
