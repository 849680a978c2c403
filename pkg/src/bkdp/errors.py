class BkdpError(Exception):
    """Base class for library errors."""


class DimensionError(BkdpError, ValueError):
    pass


class ParameterError(BkdpError, ValueError):
    pass


class StateError(BkdpError, RuntimeError):
    pass


class ConfigurationError(BkdpError, ValueError):
    pass


class CapabilityError(BkdpError, TypeError):
    """The layer kind does not support the requested lowering."""


class SpecificationError(BkdpError, ValueError):
    """An architecture description cannot be resolved to layer shapes."""


class ComparisonError(BkdpError, ValueError):
    pass
