"""
Errors the experiment runner maps to process exit codes.
"""
from typing import List, Optional


class ConfigError(ValueError):
    """An experiment config failed to parse or validate."""

    def __init__(self, message: str, diagnostics: Optional[List[str]] = None):
        self.diagnostics = list(diagnostics or [])
        if self.diagnostics:
            message = message + '\n' + '\n'.join(f"  {line}" for line in self.diagnostics)
        super().__init__(message)


class NumericAbortError(RuntimeError):
    """A loss or objective became non-finite; `index` names the batch or iteration."""

    def __init__(self, message: str, index: int):
        self.index = index
        super().__init__(message)
