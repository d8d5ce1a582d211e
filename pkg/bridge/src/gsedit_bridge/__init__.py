"""Out-of-process guidance and segmentation server for gsplat-edit."""

from .backends import EchoBackend, GaussianPointBackend, normalize_attention
from .server import BridgeConfig, BridgeServer

__version__ = "0.1.0"
