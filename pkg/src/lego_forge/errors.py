"""Exception hierarchy shared across the toolkit."""


class ForgeError(Exception):
    """Base class for all toolkit-specific failures."""
