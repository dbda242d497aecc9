class ConfigError(ValueError):
    pass


class SequenceTooLong(ValueError):
    pass


class CacheMismatch(RuntimeError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class LengthOverflow(ValueError):
    pass


class PlanParseError(ValueError):
    pass
