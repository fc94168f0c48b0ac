# %%
# Exceptions #


class InvalidArgumentError(ValueError):
    """An argument violates an operation's precondition"""


class EmptyBankError(LookupError):
    """Retrieval was attempted on a memory bank with no slots"""


class ConfigError(ValueError):
    """Experiment configuration is missing, malformed or inconsistent"""


class PathCollisionError(FileExistsError):
    """An output path already exists and overwriting was not requested"""


class TrainingDivergenceError(RuntimeError):
    """Training produced a non-finite loss"""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def __str__(self):
        base = super().__str__()
        if not self.diagnostics:
            return base
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"{base} ({details})"


# %%
