"""Python bindings for the FedSC federated learning simulator."""

from ._fedsc import *  # noqa: F401,F403
from ._fedsc import FedscError, __doc__  # noqa: F401

__version__ = "0.1.0"
