from __future__ import annotations


class SleepScreenError(RuntimeError):
    """流水线级失败，CLI 按 exit_code 退出。"""

    exit_code = 1


class ConfigError(SleepScreenError):
    exit_code = 2


class DataError(SleepScreenError):
    exit_code = 3


class EmptyInputError(SleepScreenError):
    exit_code = 4
