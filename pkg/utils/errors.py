#!/usr/bin/env python3
"""
Error types for BTSeg, each tied to a CLI exit code
"""


class BTSegError(Exception):
    """Base class for every error the pipeline raises on purpose"""

    exit_code = 1


class CheckFailure(BTSegError):
    """A numerical self-check exceeded its tolerance"""

    exit_code = 1


class ConfigError(BTSegError):
    """Malformed or inconsistent configuration"""

    exit_code = 2

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DatasetIOError(BTSegError):
    """Filesystem problem while reading or writing pipeline artifacts"""

    exit_code = 3

    def __init__(self, message, path=None):
        super().__init__(f"{message} ({path})" if path is not None else message)
        self.path = path


class NumericAbort(BTSegError):
    """Training produced a non-finite loss"""

    exit_code = 4

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
