from typing import List, Optional, Sequence, Tuple


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class VocabError(ValueError):
    pass


class RegistryError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "registry error"


class DataError(ValueError):
    pass


class CorpusFormatError(DataError):
    def __init__(self, path: str, line_no: int, message: str) -> None:
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class UnknownIntentError(DataError):
    def __init__(self, intent: str, known: Sequence[str]) -> None:
        super().__init__(f"Unknown intent {intent!r}; expected one of {sorted(known)}")
        self.intent = intent


class ConfigError(ValueError):
    def __init__(self, problems: List[Tuple[str, str]]) -> None:
        self.problems = list(problems)
        super().__init__("; ".join(f"{field}: {message}" for field, message in self.problems))


class NumericError(RuntimeError):
    def __init__(self, message: str, parameter: Optional[str] = None) -> None:
        super().__init__(message)
        self.parameter = parameter


class CompatibilityError(ValueError):
    pass
