"""Exception taxonomy shared by all modules."""


class HjbLabError(Exception):
    """Base class for every error raised by this package."""


class SizeBudgetError(HjbLabError):
    """A requested structure or enumeration exceeds its configured budget."""


class LevelError(HjbLabError):
    """A time level is out of range or inconsistent with the request."""


class StrategyError(HjbLabError):
    """A strategy table is incomplete or inconsistent with its tree."""


class GridError(HjbLabError):
    """A time or space coordinate does not lie on the expected grid."""


class PropertyError(HjbLabError):
    """A mathematical precondition (supermartingale, obstacle, ...) fails."""


class ObstacleError(PropertyError):
    """Terminal inequality of an obstacle problem is violated."""


class ConfigurationError(HjbLabError):
    """Invalid configuration value; the message names the offending field."""
