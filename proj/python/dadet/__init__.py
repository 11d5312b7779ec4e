"""Python surface of the dadet core library."""

from ._dadet import *  # noqa: F401,F403
from ._dadet import __version__  # noqa: F401
