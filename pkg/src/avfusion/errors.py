"""Exception types shared across the package."""


class AVFusionError(Exception):
    """Base class for all package errors."""


class ConfigError(AVFusionError, ValueError):
    pass


class InvalidConfig(ConfigError):
    pass


class ZeroVector(AVFusionError, ValueError):
    pass


class InsufficientFrames(AVFusionError, ValueError):
    pass


class InsufficientData(AVFusionError, ValueError):
    pass


class MalformedRecord(AVFusionError, ValueError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DimensionMismatch(AVFusionError, ValueError):
    pass


class ShapeMismatch(AVFusionError, ValueError):
    pass


class UnknownSystemTag(AVFusionError, ValueError):
    pass


class Divergence(AVFusionError, ArithmeticError):
    def __init__(self, step, loss):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


class EmptyClass(AVFusionError, ValueError):
    pass


class DegenerateLabels(AVFusionError, ValueError):
    pass


class MissingCheckpoint(AVFusionError, ValueError):
    pass


class EmptyLog(AVFusionError, ValueError):
    pass


class EmptyCondition(AVFusionError, ValueError):
    pass


class InvalidCount(AVFusionError, ValueError):
    pass


class AttributeJoinFailure(AVFusionError, ValueError):
    def __init__(self, unmatched):
        self.unmatched = list(unmatched)
        shown = ", ".join(self.unmatched[:10])
        more = "" if len(self.unmatched) <= 10 else f" (+{len(self.unmatched) - 10} more)"
        super().__init__(f"no attributes for clips: {shown}{more}")
