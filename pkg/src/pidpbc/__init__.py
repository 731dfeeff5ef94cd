"""Passivity-based PID control of power converters in port-Hamiltonian form."""
from ._jit import NUMBA_ENABLED
from .apps import BoostParams, VscParams, build_boost, build_vsc
from .controllers import ControllerConfig, MonotoneMap
from .phs import PHSystem

__version__ = "0.1.0"

__all__ = [
    "NUMBA_ENABLED", "BoostParams", "VscParams", "build_boost", "build_vsc",
    "ControllerConfig", "MonotoneMap", "PHSystem", "__version__",
]
