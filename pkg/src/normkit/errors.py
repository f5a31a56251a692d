"""Exception types shared across normkit."""


class NormkitError(Exception):
    pass


class ShapeError(NormkitError, ValueError):
    """Shape has the wrong rank or a non-positive extent."""


class DivisibilityError(NormkitError, ValueError):
    """Channel count is not divisible by the requested group size."""


class PolicyError(DivisibilityError):
    """A group policy cannot be applied to a layer."""


class ContractError(NormkitError, ValueError):
    """Arguments violate an operation's preconditions."""


class StateError(NormkitError, RuntimeError):
    """Object is not in a state that permits the operation."""


class NumericError(NormkitError, ArithmeticError):
    """A non-finite value was produced."""


class ArchitectureError(NormkitError, ValueError):
    pass


class ConfigError(NormkitError, ValueError):
    pass


class DivergenceError(NumericError):
    pass
