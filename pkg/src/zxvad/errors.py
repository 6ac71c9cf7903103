"""Exception hierarchy shared by every zxvad module."""
from typing import Dict, List, Optional


class ZxvadError(Exception):
    """Base class of all domain errors raised by zxvad"""


class FrameDecodeError(ZxvadError):
    def __init__(self, path: str, reason: str = ""):
        self.path = str(path)
        message = f"Could not decode frame {self.path}"
        if reason:
            message += f": {reason}"
        super().__init__(message)


class ValueRangeError(ZxvadError):
    """Input values fall outside the documented range"""


class ClipRangeError(ZxvadError):
    """A clip window does not fit inside its video"""


class ManifestError(ZxvadError):
    """A dataset root or manifest document is inconsistent"""


class ContractError(ZxvadError):
    """A shape or value precondition was violated"""


class NumericError(ZxvadError):
    """Non-finite values reached a numeric routine"""


class NonFiniteLossError(NumericError):
    def __init__(self, term: str, components: Optional[Dict[str, float]] = None):
        self.term = term
        self.components = dict(components or {})
        details = ", ".join(f"{k}={v}" for k, v in self.components.items())
        super().__init__(f"Non-finite loss term '{term}'" + (f" ({details})" if details else ""))


class UndefinedAUCError(ZxvadError):
    """ROC-AUC needs both classes among the labels"""


class EmbeddingLookupError(ZxvadError):
    def __init__(self, label: str):
        self.label = label
        super().__init__(f"No token of label '{label}' is in the embedding vocabulary")


class ConfigError(ZxvadError):
    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("Invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))
