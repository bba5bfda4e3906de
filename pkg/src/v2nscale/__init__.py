"""Road-traffic flow forecasting and forecast-driven scaling of V2N edge services."""

from ._backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
